mod common;

use std::collections::BTreeMap;

use common::{randomize_model, randomize_zero_params};
use diffrep::ddpm::build_linear_schedule;
use diffrep::diffeed::{
    build_feedback_net, diffeed_extract, diffeed_extract_dataset, feedback_parameter_count,
    make_feedback_plan, two_pass_graph, Strategy,
};
use diffrep::features::{extract_feature, image_seed, FeatureRequest};
use diffrep::tensor::gradcheck::{check, CheckOptions};
use diffrep::tensor::rng::stream;
use diffrep::tensor::{Binding, Graph, Tensor};
use diffrep::unet::{build_unet, BlockCatalog, UNetConfig};

const STRATEGIES: [Strategy; 4] = [
    Strategy::All,
    Strategy::Bottleneck,
    Strategy::Windowed,
    Strategy::MultiScale,
];

#[test]
fn paper_scale_plans() {
    let c = BlockCatalog::from_config(&UNetConfig::paper_scale());
    let b = make_feedback_plan(Strategy::Bottleneck, &c, 24, 150).unwrap();
    assert_eq!(b.decoder_blocks, vec![21, 24, 27, 30, 33, 36]);
    for (&d, &e) in &b.injection {
        assert_eq!(d + e, 2 * c.mid_id());
    }
    let w = make_feedback_plan(Strategy::Windowed, &c, 24, 150).unwrap();
    assert_eq!(w.decoder_blocks, vec![20, 21, 22, 23, 24]);
    let m = make_feedback_plan(Strategy::MultiScale, &c, 24, 150).unwrap();
    assert_eq!(m.decoder_blocks, w.decoder_blocks);
    assert!(m.injection.values().all(|&e| e == 14));
    let a = make_feedback_plan(Strategy::All, &c, 24, 150).unwrap();
    assert_eq!(a.decoder_blocks, (20..=37).collect::<Vec<_>>());
}

#[test]
fn paper_scale_bottleneck_parameter_count() {
    let c = BlockCatalog::from_config(&UNetConfig::paper_scale());
    let plan = make_feedback_plan(Strategy::Bottleneck, &c, 24, 150).unwrap();
    let n = feedback_parameter_count(&plan, &c).unwrap() as f64;
    assert!((n / 2.8e6 - 1.0).abs() < 0.05, "{n}");
}

#[test]
fn toy_plans_match_mirror_sizes_and_closed_form() {
    let c = BlockCatalog::from_config(&UNetConfig::reference_toy());
    let all = make_feedback_plan(Strategy::All, &c, 10, 20).unwrap();
    assert_eq!(all.decoder_blocks, c.decoder_ids());
    for strategy in STRATEGIES {
        let plan = make_feedback_plan(strategy, &c, 10, 20).unwrap();
        let mut expected = 0;
        for &d in &plan.decoder_blocks {
            let e = plan.injection[&d];
            let (dec, enc) = (c.get(d).unwrap(), c.get(e).unwrap());
            if strategy != Strategy::MultiScale {
                assert_eq!(e, c.len() + 1 - d);
                assert_eq!(dec.spatial, enc.spatial, "{strategy:?} {d}");
            }
            // conv weight and bias, norm scale and shift, gate
            expected +=
                dec.channels * enc.channels + enc.channels + 2 * enc.channels + enc.channels;
        }
        let net = build_feedback_net(&plan, &c, 1).unwrap();
        assert_eq!(net.parameter_count(), expected, "{strategy:?}");
        assert_eq!(feedback_parameter_count(&plan, &c).unwrap(), expected);
    }
}

#[test]
fn zero_feedback_reproduces_plain_extraction_with_two_passes() {
    let mut model = build_unet(&UNetConfig::reference_toy(), 21).unwrap();
    randomize_model(&mut model, 22);
    let schedule = build_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let x0 = Tensor::uniform([3, 32, 32], 1.0, &mut stream(23, "x0", 0));
    let seed = image_seed(24, 0);
    for strategy in STRATEGIES {
        let plan = make_feedback_plan(strategy, &model.catalog, 10, 150).unwrap();
        let net = build_feedback_net(&plan, &model.catalog, 25).unwrap();
        let plain =
            extract_feature(&model, &schedule, &x0, &FeatureRequest::new(150, 10), seed).unwrap();
        model.reset_forward_count();
        let fed = diffeed_extract(&model, &schedule, &net, &plan, &x0, seed).unwrap();
        assert_eq!(model.forward_count(), 2, "{strategy:?}");
        assert!(fed.data.bitwise_eq(&plain.data), "{strategy:?}");
    }
}

#[test]
fn nonzero_feedback_changes_the_feature() {
    let mut model = build_unet(&UNetConfig::reference_toy(), 31).unwrap();
    randomize_model(&mut model, 32);
    let schedule = build_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let x0 = Tensor::uniform([3, 32, 32], 1.0, &mut stream(33, "x0", 0));
    for strategy in STRATEGIES {
        let plan = make_feedback_plan(strategy, &model.catalog, 10, 150).unwrap();
        let mut net = build_feedback_net(&plan, &model.catalog, 34).unwrap();
        randomize_zero_params(&mut net.params, 35);
        let plain =
            extract_feature(&model, &schedule, &x0, &FeatureRequest::new(150, 10), 5).unwrap();
        let fed = diffeed_extract(&model, &schedule, &net, &plan, &x0, 5).unwrap();
        assert!(fed.data.max_abs_diff(&plain.data) > 0.0, "{strategy:?}");
    }
}

#[test]
fn dataset_extraction_matches_single_images() {
    let mut model = build_unet(&UNetConfig::desk(), 41).unwrap();
    randomize_model(&mut model, 42);
    let schedule = build_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let plan = make_feedback_plan(Strategy::Bottleneck, &model.catalog, 10, 100).unwrap();
    let mut net = build_feedback_net(&plan, &model.catalog, 43).unwrap();
    randomize_zero_params(&mut net.params, 44);
    let images = Tensor::uniform([3, 3, 16, 16], 1.0, &mut stream(45, "x0", 0));
    let seeds: Vec<u64> = (0..3).map(|i| image_seed(46, i)).collect();
    let all = diffeed_extract_dataset(&model, &schedule, &net, &images, &seeds, 0).unwrap();
    for i in 0..3 {
        let one = diffeed_extract(
            &model,
            &schedule,
            &net,
            &plan,
            &images.index_batch(i),
            seeds[i],
        )
        .unwrap();
        assert!(all.index_batch(i).max_abs_diff(&one.data) < 1e-12);
    }
}

#[test]
fn mismatched_plan_is_rejected() {
    let model = build_unet(&UNetConfig::desk(), 51).unwrap();
    let schedule = build_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let a = make_feedback_plan(Strategy::Bottleneck, &model.catalog, 10, 100).unwrap();
    let b = make_feedback_plan(Strategy::All, &model.catalog, 10, 100).unwrap();
    let net = build_feedback_net(&a, &model.catalog, 1).unwrap();
    let x0 = Tensor::zeros([3, 16, 16]);
    assert!(diffeed_extract(&model, &schedule, &net, &b, &x0, 1).is_err());
    assert!(diffeed_extract(&model, &schedule, &net, &a, &Tensor::zeros([3, 8, 8]), 1).is_err());
}

#[test]
fn feedback_gradients_match_finite_differences() {
    let mut model = build_unet(&UNetConfig::desk(), 61).unwrap();
    randomize_model(&mut model, 62);
    for strategy in [Strategy::Bottleneck, Strategy::MultiScale] {
        let plan = make_feedback_plan(strategy, &model.catalog, 11, 100).unwrap();
        let mut net = build_feedback_net(&plan, &model.catalog, 63).unwrap();
        randomize_zero_params(&mut net.params, 64);
        let x_t = Tensor::randn([3, 3, 16, 16], &mut stream(65, "x", 0));
        let target_shape = {
            let e = model.catalog.get(11).unwrap();
            [3, e.channels, e.spatial, e.spatial]
        };
        let weights = Tensor::randn(target_shape, &mut stream(65, "w", 0));
        let inputs: Vec<(String, Tensor)> = net
            .params
            .iter()
            .map(|(s, t)| (s.name.clone(), t.clone()))
            .collect();
        let report = check(
            &inputs,
            |g: &mut Graph, vars| {
                let fb = Binding::from_vars(vars.to_vec());
                let backbone = model.params.bind(g, false);
                let xv = g.constant(x_t.clone());
                let (out, _) = two_pass_graph(&model, &net, g, &backbone, &fb, xv, true).unwrap();
                let w = g.constant(weights.clone());
                let prod = g.mul(out, w);
                g.mean(prod)
            },
            CheckOptions {
                max_coords: Some(8),
                ..CheckOptions::default()
            },
        );
        let worst = report.worst().unwrap();
        assert!(
            report.passes(1e-4),
            "{strategy:?}: worst {} at {:.3e}",
            worst.name,
            worst.rel_error
        );
        let trainable: BTreeMap<_, _> = net
            .params
            .iter()
            .filter(|(s, _)| s.trainable)
            .map(|(s, _)| (s.name.clone(), ()))
            .collect();
        assert!(
            report
                .tensors
                .iter()
                .filter(|t| trainable.contains_key(&t.name))
                .count()
                == trainable.len()
        );
    }
}
