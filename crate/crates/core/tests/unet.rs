mod common;

use common::randomize_model as randomize_zero_params;
use diffrep::tensor::gradcheck::{check, CheckOptions};
use diffrep::tensor::rng::stream;
use diffrep::tensor::{Binding, Graph, Tensor};
use diffrep::unet::{
    build_unet, count_parameters, time_embedding, BlockCatalog, DenoiserModel, Stage, UNetConfig,
};

fn toy() -> DenoiserModel {
    build_unet(&UNetConfig::reference_toy(), 3).unwrap()
}

#[test]
fn paper_scale_numbering() {
    let c = BlockCatalog::from_config(&UNetConfig::paper_scale());
    assert_eq!(c.len(), 37);
    assert_eq!(c.mid_id(), 19);
    assert_eq!(c.symmetric_partner(20).unwrap(), 18);
    assert_eq!(c.symmetric_partner(37).unwrap(), 1);
    for d in c.decoder_ids() {
        let e = c.symmetric_partner(d).unwrap();
        assert_eq!(c.get(e).unwrap().stage, Stage::Encoder);
        assert_eq!(
            c.get(e).unwrap().spatial,
            c.get(d).unwrap().spatial,
            "decoder {d}"
        );
    }
    assert_eq!(c.get(19).unwrap().spatial, 8);
    assert_eq!(c.get(24).unwrap().spatial, 16);
}

#[test]
fn paper_scale_parameter_count() {
    let n = count_parameters(&UNetConfig::paper_scale()).unwrap() as f64;
    assert!((n / 553e6 - 1.0).abs() < 0.02, "{n}");
}

/// Closed-form parameter sum for the reference toy configuration.
fn toy_closed_form() -> usize {
    let emb = 128;
    let gn = |c: usize| 2 * c;
    let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
    let res = |i: usize, o: usize| {
        gn(i)
            + conv(i, o, 3)
            + emb * 2 * o
            + 2 * o
            + gn(o)
            + conv(o, o, 3)
            + if i != o { conv(i, o, 1) } else { 0 }
    };
    let attn = |c: usize| gn(c) + c * 3 * c + 3 * c + c * c + c;
    let time = 32 * emb + emb + emb * emb + emb;
    let encoder = conv(3, 32, 3) // b1
        + res(32, 32) // b2
        + res(32, 32) // b3 down
        + res(32, 64) // b4
        + res(64, 64) // b5 down
        + res(64, 64) + attn(64); // b6
    let mid = res(64, 64) + attn(64) + res(64, 64);
    let decoder = res(128, 64) + attn(64) // b8, skip b6
        + res(128, 64) + attn(64) // b9, skip b5
        + res(64, 64) + res(128, 64) // b10 up, skip b4
        + res(96, 64) // b11, skip b3
        + res(64, 64) + res(96, 32) // b12 up, skip b2
        + res(64, 32); // b13, skip b1
    let out = gn(32) + conv(32, 3, 3);
    time + encoder + mid + decoder + out
}

#[test]
fn toy_parameter_count_matches_closed_form() {
    let model = toy();
    assert_eq!(model.parameter_count(), toy_closed_form());
    assert_eq!(
        count_parameters(&UNetConfig::reference_toy()).unwrap(),
        toy_closed_form()
    );
}

#[test]
fn toy_catalog_mirror_and_shapes() {
    let model = toy();
    let c = &model.catalog;
    assert_eq!(c.len(), 13);
    assert_eq!(c.mid_id(), 7);
    for d in c.decoder_ids() {
        let e = c.symmetric_partner(d).unwrap();
        assert_eq!(c.get(e).unwrap().spatial, c.get(d).unwrap().spatial);
    }
    let x = Tensor::randn([2, 3, 32, 32], &mut stream(1, "x", 0));
    let all: Vec<usize> = (1..=c.len()).collect();
    let (taps, eps) = model.forward_with_taps(&x, 10, &all).unwrap();
    assert_eq!(taps.len(), 13);
    for e in c.entries() {
        assert_eq!(
            taps[&e.id].shape(),
            &[2, e.channels, e.spatial, e.spatial],
            "block {}",
            e.id
        );
    }
    assert_eq!(eps.shape(), x.shape());
}

#[test]
fn zero_output_layer_and_purity() {
    let model = toy();
    let x = Tensor::randn([3, 32, 32], &mut stream(2, "x", 0));
    let a = model.forward_denoise(&x, 500).unwrap();
    assert_eq!(a.shape(), &[3, 32, 32]);
    assert!(a.data().iter().all(|v| *v == 0.0));

    let mut model = model;
    randomize_zero_params(&mut model, 4);
    let a = model.forward_denoise(&x, 500).unwrap();
    let b = model.forward_denoise(&x, 500).unwrap();
    assert!(a.bitwise_eq(&b));
    assert!(a.norm() > 0.0);
    let (taps, c) = model.forward_with_taps(&x, 500, &[7]).unwrap();
    assert!(a.bitwise_eq(&c));
    assert_eq!(taps[&7].shape(), &[1, 64, 8, 8]);
}

#[test]
fn early_stop_taps_match_full_pass() {
    let mut model = toy();
    randomize_zero_params(&mut model, 5);
    let x = Tensor::randn([2, 3, 32, 32], &mut stream(3, "x", 0));
    let (full, _) = model.forward_with_taps(&x, 42, &[4, 9]).unwrap();
    let early = model.tap_blocks(&x, &[42, 42], &[4, 9]).unwrap();
    for id in [4, 9] {
        assert!(full[&id].bitwise_eq(&early[&id]));
    }
}

#[test]
fn same_seed_same_parameters() {
    let a = toy();
    let b = toy();
    for ((sa, ta), (sb, tb)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(sa.name, sb.name);
        assert!(ta.bitwise_eq(tb));
    }
}

#[test]
fn input_errors() {
    let model = toy();
    assert!(model
        .forward_denoise(&Tensor::zeros([3, 16, 16]), 1)
        .is_err());
    assert!(model
        .forward_denoise(&Tensor::zeros([3, 32, 32]), 0)
        .is_err());
    assert!(model
        .forward_denoise(&Tensor::zeros([3, 32, 32]), 1001)
        .is_err());
    assert!(model
        .forward_with_taps(&Tensor::zeros([3, 32, 32]), 5, &[99])
        .is_err());
}

#[test]
fn embedding_scalar_oracle_and_distinctness() {
    let e = time_embedding(1.0, 8).unwrap();
    for i in 0..4 {
        let f = 10000f64.powf(-(i as f64) / 4.0);
        assert!((e[i] - f.sin()).abs() < 1e-15);
        assert!((e[i + 4] - f.cos()).abs() < 1e-15);
    }
    let toy_t = 50;
    let embs: Vec<Vec<f64>> = (1..=toy_t)
        .map(|t| time_embedding(t as f64, 32).unwrap())
        .collect();
    for i in 0..toy_t {
        for j in i + 1..toy_t {
            assert_ne!(embs[i], embs[j]);
        }
    }
}

#[test]
fn miniature_gradients_match_finite_differences() {
    let mut model = build_unet(&UNetConfig::miniature(), 11).unwrap();
    randomize_zero_params(&mut model, 12);
    let x = Tensor::randn([2, 3, 8, 8], &mut stream(13, "x", 0));
    let eps = Tensor::randn([2, 3, 8, 8], &mut stream(13, "eps", 0));
    let inputs: Vec<(String, Tensor)> = model
        .params
        .iter()
        .map(|(s, t)| (s.name.clone(), t.clone()))
        .collect();
    let layout_model = model.clone();
    let report = check(
        &inputs,
        |g: &mut Graph, vars| {
            let binding = Binding::from_vars(vars.to_vec());
            let xv = g.constant(x.clone());
            let ev = g.constant(eps.clone());
            let pred = layout_model
                .forward_graph(g, &binding, xv, &[7, 300], &mut diffrep::unet::NoHooks)
                .unwrap();
            g.mse(pred, ev)
        },
        CheckOptions {
            max_coords: Some(6),
            ..CheckOptions::default()
        },
    );
    let worst = report.worst().unwrap();
    assert!(
        report.passes(1e-4),
        "worst {} at {:.3e}",
        worst.name,
        worst.rel_error
    );
    assert_eq!(report.tensors.len(), model.params.len());
}
