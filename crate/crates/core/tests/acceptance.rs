//! End-to-end acceptance checks. Each test prints one `[PASS]` or `[FAIL]`
//! line with its wall time. Tests take a shared lock so budgets are timed
//! without contention.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use common::{randomize_model, randomize_zero_params};
use diffrep::analysis::{gram_cka, grid_head_seed, linear_cka};
use diffrep::ddpm::{build_linear_schedule, forward_noise, reverse_step};
use diffrep::diffeed::{
    build_feedback_net, diffeed_extract, feedback_parameter_count, make_feedback_plan,
    two_pass_graph, Strategy,
};
use diffrep::features::{extract_feature, image_seed, FeatureRequest, StoredFeatures};
use diffrep::harness::checkpoint::{load_checkpoint, save_checkpoint};
use diffrep::harness::config::ExperimentConfig;
use diffrep::harness::data::{synthesize_dataset, train_eval_split, SyntheticSpec, Variant};
use diffrep::harness::run::{load_dataset, run_experiment};
use diffrep::heads::{
    build_difformer, build_head, tokenize, train_probe, AttentionHeadConfig, BlockInput,
    DifFormerConfig, FusionModel, HeadKind, ProbeMode, ProbeProtocol,
};
use diffrep::tensor::gradcheck::{check, CheckOptions, GradCheckReport};
use diffrep::tensor::rng::stream;
use diffrep::tensor::{Binding, Graph, Tensor, Var};
use diffrep::unet::{build_unet, count_parameters, BlockCatalog, UNetConfig};

type Check = Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lock() -> std::sync::MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Run one criterion under the shared lock, print its verdict and fail the
/// test if the check or the time budget fails.
fn criterion(number: usize, name: &str, budget: Duration, body: impl FnOnce() -> Check) {
    let _guard = lock();
    let start = Instant::now();
    let mut outcome = body();
    let elapsed = start.elapsed();
    if outcome.is_ok() && elapsed > budget {
        outcome = Err(format!(
            "took {:.1}s, budget {}s",
            elapsed.as_secs_f64(),
            budget.as_secs()
        ));
    }
    let verdict = if outcome.is_ok() { "PASS" } else { "FAIL" };
    let mut line = format!(
        "[{verdict}] {number:>2} {name} ({:.2}s)",
        elapsed.as_secs_f64()
    );
    if let Err(e) = &outcome {
        line.push_str(&format!(": {e}"));
    }
    // Written past the test harness capture so the verdict always shows.
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
    if let Err(e) = outcome {
        panic!("criterion {number} ({name}) failed: {e}");
    }
}

/// Print measured values ahead of the verdict line.
fn note(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "       {text}");
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

#[test]
fn c01_block_numbering() {
    criterion(1, "block numbering", secs(60), || {
        let c = BlockCatalog::from_config(&UNetConfig::paper_scale());
        ensure(c.len() == 37, || format!("{} blocks", c.len()))?;
        ensure(c.mid_id() == 19, || format!("mid block {}", c.mid_id()))
    });
}

#[test]
fn c02_parameter_counts() {
    criterion(2, "parameter counts", secs(60), || {
        let config = UNetConfig::paper_scale();
        let unet = count_parameters(&config).map_err(|e| e.to_string())? as f64;
        ensure((unet / 553e6 - 1.0).abs() <= 0.02, || {
            format!("U-Net has {unet} parameters")
        })?;
        let catalog = BlockCatalog::from_config(&config);
        let plan = make_feedback_plan(Strategy::Bottleneck, &catalog, 24, 150)
            .map_err(|e| e.to_string())?;
        let feedback = feedback_parameter_count(&plan, &catalog).map_err(|e| e.to_string())? as f64;
        ensure((feedback / 2.8e6 - 1.0).abs() <= 0.05, || {
            format!("feedback net has {feedback} parameters")
        })
    });
}

fn fusion_model(
    times: &[usize],
    blocks: &[(usize, usize)],
    head: AttentionHeadConfig,
    seed: u64,
) -> FusionModel {
    let config = DifFormerConfig {
        times: times.to_vec(),
        blocks: blocks
            .iter()
            .enumerate()
            .map(|(i, &(channels, side))| BlockInput {
                block: i + 1,
                channels,
                side,
            })
            .collect(),
        head,
        num_classes: 3,
    };
    let mut model = build_difformer(&config, seed).unwrap();
    randomize_zero_params(&mut model.params, seed + 1);
    model
}

#[test]
fn c03_token_arithmetic() {
    criterion(3, "token arithmetic", secs(1), || {
        let head = AttentionHeadConfig {
            d_model: 8,
            num_heads: 2,
            pool_threshold: 16,
            ..AttentionHeadConfig::default()
        };
        let model = fusion_model(&[10], &[(4, 32), (4, 8)], head.clone(), 1);
        let big = Tensor::randn([4, 32, 32], &mut stream(2, "map", 0));
        let small = Tensor::randn([4, 8, 8], &mut stream(2, "map", 1));
        let n_big = tokenize(&big, model.head.tokenizer(0), &model.params)
            .map_err(|e| e.to_string())?
            .len();
        let n_small = tokenize(&small, model.head.tokenizer(1), &model.params)
            .map_err(|e| e.to_string())?
            .len();
        ensure(n_big == 256, || format!("32x32 map gave {n_big} tokens"))?;
        ensure(n_small == 64, || format!("8x8 map gave {n_small} tokens"))?;
        for times in [vec![90], vec![90, 150], vec![90, 150, 300]] {
            let m = fusion_model(&times, &[(4, 8)], head.clone(), 3);
            let want = head.d_model * times.len();
            let got = m.head.classifier.in_features;
            ensure(got == want, || {
                format!(
                    "{} timesteps: classifier width {got}, want {want}",
                    times.len()
                )
            })?;
        }
        Ok(())
    });
}

#[test]
fn c04_ddpm_correctness() {
    criterion(4, "ddpm noising and reverse step", secs(120), || {
        let s = build_linear_schedule(1000, 1e-4, 0.02).map_err(|e| e.to_string())?;
        let n = 100_000;
        for (k, (t, x0)) in [(1, 0.7), (150, -0.3), (500, 1.0), (900, 0.7), (1000, -1.0)]
            .into_iter()
            .enumerate()
        {
            let eps = Tensor::randn([n], &mut stream(40, "eps", k as u64));
            let x = forward_noise(&s, &Tensor::full([n], x0), t, &eps)
                .map_err(|e| e.to_string())?
                .x_t;
            let mean = x.data().iter().sum::<f64>() / n as f64;
            let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let ab = s.alpha_bar(t);
            let se = ((1.0 - ab) / n as f64).sqrt();
            let mean_err = (mean - ab.sqrt() * x0).abs();
            ensure(mean_err <= 4.0 * se, || {
                format!(
                    "t={t}: mean off by {mean_err:.3e} ({:.1} SE)",
                    mean_err / se
                )
            })?;
            ensure((var / (1.0 - ab) - 1.0).abs() <= 0.05, || {
                format!("t={t}: variance {var} vs {}", 1.0 - ab)
            })?;
        }
        let x = Tensor::randn([64], &mut stream(41, "x", 0));
        let e = Tensor::randn([64], &mut stream(41, "e", 0));
        let z = Tensor::randn([64], &mut stream(41, "z", 0));
        for t in [2, 10, 150, 999, 1000] {
            let out = reverse_step(&s, &e, &x, t, Some(&z)).map_err(|e| e.to_string())?;
            let (b, a, ab) = (s.beta(t), s.alpha(t), s.alpha_bar(t));
            for i in 0..64 {
                let want = (x.data()[i] - b / (1.0 - ab).sqrt() * e.data()[i]) / a.sqrt()
                    + b.sqrt() * z.data()[i];
                let err = (out.data()[i] - want).abs();
                ensure(err <= 1e-10, || {
                    format!("t={t} index {i}: off by {err:.3e}")
                })?;
            }
        }
        Ok(())
    });
}

fn verdict(what: &str, report: &GradCheckReport, expected_tensors: usize) -> Check {
    let worst = report
        .worst()
        .ok_or_else(|| format!("{what}: nothing was checked"))?;
    ensure(report.passes(1e-4), || {
        format!("{what}: {} at {:.3e}", worst.name, worst.rel_error)
    })?;
    ensure(report.tensors.len() == expected_tensors, || {
        format!(
            "{what}: checked {} of {expected_tensors} tensors",
            report.tensors.len()
        )
    })
}

fn weighted_mean(g: &mut Graph, out: Var, weights: &Tensor) -> Var {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w);
    g.mean(prod)
}

#[test]
fn c05_gradient_suite() {
    criterion(5, "gradient suite", secs(600), || {
        let opts = CheckOptions {
            max_coords: Some(6),
            ..CheckOptions::default()
        };

        let mut unet = build_unet(&UNetConfig::miniature(), 50).unwrap();
        randomize_model(&mut unet, 51);
        let x = Tensor::randn([2, 3, 8, 8], &mut stream(52, "x", 0));
        let eps = Tensor::randn([2, 3, 8, 8], &mut stream(52, "eps", 0));
        let inputs: Vec<(String, Tensor)> = unet
            .params
            .iter()
            .map(|(s, t)| (s.name.clone(), t.clone()))
            .collect();
        let report = check(
            &inputs,
            |g: &mut Graph, vars| {
                let p = Binding::from_vars(vars.to_vec());
                let xv = g.constant(x.clone());
                let ev = g.constant(eps.clone());
                let pred = unet
                    .forward_graph(g, &p, xv, &[7, 300], &mut diffrep::unet::NoHooks)
                    .unwrap();
                g.mse(pred, ev)
            },
            opts,
        );
        verdict("miniature U-Net", &report, unet.params.len())?;

        let small = AttentionHeadConfig {
            num_layers: 2,
            d_model: 8,
            num_heads: 2,
            mlp_ratio: 2,
            pool_threshold: 4,
        };
        let features = Tensor::randn([3, 3, 4, 4], &mut stream(53, "f", 0));
        let w = Tensor::randn([3, 4], &mut stream(53, "w", 0));
        let kinds = [
            HeadKind::Linear,
            HeadKind::Mlp { hidden: vec![5, 4] },
            HeadKind::Cnn { mid: 4, out: 3 },
            HeadKind::Attention(small.clone()),
        ];
        for kind in kinds {
            let mut head = build_head(&kind, &[3, 4, 4], 4, 54).unwrap();
            randomize_zero_params(&mut head.params, 55);
            let inputs: Vec<(String, Tensor)> = head
                .params
                .iter()
                .map(|(s, t)| (s.name.clone(), t.clone()))
                .collect();
            let report = check(
                &inputs,
                |g: &mut Graph, vars| {
                    let p = Binding::from_vars(vars.to_vec());
                    let xv = g.constant(features.clone());
                    let logits = head.forward(g, &p, xv);
                    weighted_mean(g, logits, &w)
                },
                opts,
            );
            verdict(&format!("{kind:?} head"), &report, head.params.len())?;
        }

        let fusion = fusion_model(&[10, 20], &[(3, 4), (2, 8)], small, 56);
        let maps: Vec<Tensor> = (0..4)
            .map(|i| {
                let (c, s) = if i % 2 == 0 { (3, 4) } else { (2, 8) };
                Tensor::randn([2, c, s, s], &mut stream(57, "m", i))
            })
            .collect();
        let w = Tensor::randn([2, 3], &mut stream(57, "w", 0));
        let inputs: Vec<(String, Tensor)> = fusion
            .params
            .iter()
            .map(|(s, t)| (s.name.clone(), t.clone()))
            .collect();
        let report = check(
            &inputs,
            |g: &mut Graph, vars| {
                let p = Binding::from_vars(vars.to_vec());
                let mv: Vec<_> = maps.iter().map(|m| g.constant(m.clone())).collect();
                let logits = fusion.head.forward(g, &p, &mv);
                weighted_mean(g, logits, &w)
            },
            opts,
        );
        verdict("DifFormer", &report, fusion.params.len())?;

        let mut backbone = build_unet(&UNetConfig::desk(), 58).unwrap();
        randomize_model(&mut backbone, 59);
        let plan = make_feedback_plan(Strategy::Bottleneck, &backbone.catalog, 11, 100).unwrap();
        let mut net = build_feedback_net(&plan, &backbone.catalog, 60).unwrap();
        randomize_zero_params(&mut net.params, 61);
        let x_t = Tensor::randn([3, 3, 16, 16], &mut stream(62, "x", 0));
        let e = backbone.catalog.get(11).unwrap();
        let w = Tensor::randn(
            [3, e.channels, e.spatial, e.spatial],
            &mut stream(62, "w", 0),
        );
        let trainable: BTreeMap<String, ()> = net
            .params
            .iter()
            .filter(|(s, _)| s.trainable)
            .map(|(s, _)| (s.name.clone(), ()))
            .collect();
        let inputs: Vec<(String, Tensor)> = net
            .params
            .iter()
            .map(|(s, t)| (s.name.clone(), t.clone()))
            .collect();
        let report = check(
            &inputs,
            |g: &mut Graph, vars| {
                let fb = Binding::from_vars(vars.to_vec());
                let bb = backbone.params.bind(g, false);
                let xv = g.constant(x_t.clone());
                let (out, _) = two_pass_graph(&backbone, &net, g, &bb, &fb, xv, true).unwrap();
                weighted_mean(g, out, &w)
            },
            opts,
        );
        let worst = report.worst().ok_or("feedback net: nothing was checked")?;
        ensure(report.passes(1e-4), || {
            format!("feedback net: {} at {:.3e}", worst.name, worst.rel_error)
        })?;
        let covered = report
            .tensors
            .iter()
            .filter(|t| trainable.contains_key(&t.name))
            .count();
        ensure(covered == trainable.len(), || {
            format!(
                "feedback net: {covered} of {} trainable tensors",
                trainable.len()
            )
        })
    });
}

#[test]
fn c06_zero_feedback_identity() {
    criterion(6, "zero-feedback identity", secs(60), || {
        let mut model = build_unet(&UNetConfig::reference_toy(), 70).unwrap();
        randomize_model(&mut model, 71);
        let schedule = build_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let x0 = Tensor::uniform([3, 32, 32], 1.0, &mut stream(72, "x0", 0));
        let seed = image_seed(73, 0);
        for strategy in [
            Strategy::All,
            Strategy::Bottleneck,
            Strategy::Windowed,
            Strategy::MultiScale,
        ] {
            let plan =
                make_feedback_plan(strategy, &model.catalog, 10, 150).map_err(|e| e.to_string())?;
            let net = build_feedback_net(&plan, &model.catalog, 74).map_err(|e| e.to_string())?;
            let plain =
                extract_feature(&model, &schedule, &x0, &FeatureRequest::new(150, 10), seed)
                    .map_err(|e| e.to_string())?;
            model.reset_forward_count();
            let fed = diffeed_extract(&model, &schedule, &net, &plan, &x0, seed)
                .map_err(|e| e.to_string())?;
            let passes = model.forward_count();
            ensure(passes == 2, || {
                format!("{strategy:?}: {passes} forward passes")
            })?;
            ensure(fed.data.bitwise_eq(&plain.data), || {
                format!(
                    "{strategy:?}: differs by {:.3e}",
                    fed.data.max_abs_diff(&plain.data)
                )
            })?;
        }
        Ok(())
    });
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k)
                .map(|l| a.data()[i * k + l] * b.data()[l * m + j])
                .sum();
        }
    }
    Tensor::new([n, m], out)
}

/// Random orthogonal matrix by Gram–Schmidt on a Gaussian matrix.
fn orthogonal(p: usize, seed: u64) -> Tensor {
    let g = Tensor::randn([p, p], &mut stream(seed, "q", 0));
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for j in 0..p {
        let mut v: Vec<f64> = (0..p).map(|i| g.data()[i * p + j]).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        cols.push(v.into_iter().map(|a| a / norm).collect());
    }
    Tensor::new([p, p], (0..p * p).map(|k| cols[k % p][k / p]).collect())
}

#[test]
fn c07_cka_properties() {
    criterion(7, "cka properties", secs(60), || {
        let cka = |a: &Tensor, b: &Tensor| linear_cka(a, b).map_err(|e| e.to_string());
        for trial in 0..5 {
            let x = Tensor::randn([30, 8], &mut stream(80, "x", trial));
            let y = Tensor::randn([30, 5], &mut stream(80, "y", trial));
            let self_sim = cka(&x, &x)?;
            ensure((self_sim - 1.0).abs() <= 1e-6, || {
                format!("self-similarity {self_sim}")
            })?;
            let base = cka(&x, &y)?;
            let rotated = cka(&matmul(&x, &orthogonal(8, 81 + trial)), &y)?;
            ensure((rotated - base).abs() <= 1e-6, || {
                format!("rotation moved CKA {base} to {rotated}")
            })?;
            let scaled = cka(&x.map(|v| -4.2 * v), &y.map(|v| 0.03 * v))?;
            ensure((scaled - base).abs() <= 1e-6, || {
                format!("scaling moved CKA {base} to {scaled}")
            })?;
        }
        for i in 0..50 {
            let n = 4 + (i as usize % 12);
            let x = Tensor::randn([n, 3 + i as usize % 5], &mut stream(82, "x", i));
            let y = Tensor::randn([n, 2 + i as usize % 7], &mut stream(82, "y", i));
            let (f, g) = (cka(&x, &y)?, gram_cka(&x, &y).map_err(|e| e.to_string())?);
            ensure((f - g).abs() <= 1e-8, || {
                format!("instance {i}: feature {f} vs gram {g}")
            })?;
        }
        Ok(())
    });
}

#[test]
fn c08_probe_protocol() {
    criterion(8, "probe protocol", secs(300), || {
        let spec = SyntheticSpec {
            classes: 4,
            per_class: 16,
            size: 8,
            seed: 3,
            variant: Variant::Separable,
            noise: 0.05,
        };
        let data = synthesize_dataset(&spec).map_err(|e| e.to_string())?;
        let (train, eval) = train_eval_split(&data.labels, 0.25, 5).map_err(|e| e.to_string())?;
        let flat = |idx: &[usize]| {
            let sub = data.subset(idx);
            let n = sub.len();
            StoredFeatures::new(vec![sub.images.reshape([n, 3 * 64])], sub.labels).unwrap()
        };
        let (mut tr, mut ev) = (flat(&train), flat(&eval));
        let mut head = build_head(&HeadKind::Linear, &[192], 4, 6).map_err(|e| e.to_string())?;
        let protocol = ProbeProtocol {
            lr: 0.01,
            batch_size: 8,
            ..ProbeProtocol::default()
        };
        let report = train_probe(
            &mut head,
            &mut tr,
            Some(&mut ev),
            &protocol,
            ProbeMode::Frozen,
            7,
        )
        .map_err(|e| e.to_string())?;
        ensure(report.lr_trace.len() == 28, || {
            format!("{} epochs", report.lr_trace.len())
        })?;
        let lr0 = report.lr_trace[0];
        for (i, lr) in report.lr_trace.iter().enumerate() {
            let want = lr0 * 0.1f64.powi((i / 7) as i32);
            ensure((lr - want).abs() <= 1e-15 * lr0, || {
                format!("epoch {}: lr {lr}, want {want}", i + 1)
            })?;
        }
        for epoch in [8, 15, 22] {
            let ratio = report.lr_trace[epoch - 1] / report.lr_trace[epoch - 2];
            ensure((ratio - 0.1).abs() < 1e-12, || {
                format!("epoch {epoch}: ratio {ratio}")
            })?;
        }
        let train_acc = report.train.top1;
        let eval_acc = report.eval.map(|e| e.top1).unwrap_or(0.0);
        ensure(train_acc == 1.0 && eval_acc == 1.0, || {
            format!("train {train_acc}, eval {eval_acc}")
        })
    });
}

const SEED: u64 = 4;

fn desk_toml(task: &str, section: &str) -> String {
    format!(
        r#"
version = 1
task = "{task}"
seed = {SEED}

[model]
preset = "desk"

[data]
source = "synthetic"
classes = 4
per_class = 96
size = 16
seed = 1
eval_fraction = 0.25

{section}
"#
    )
}

struct Trained {
    _dir: tempfile::TempDir,
    checkpoint: PathBuf,
    initial_loss: f64,
    final_loss: f64,
}

/// The desk model trained once and shared by the trend criteria.
fn trained() -> &'static Trained {
    static TRAINED: OnceLock<Trained> = OnceLock::new();
    TRAINED.get_or_init(|| {
        let text = desk_toml(
            "train-diffusion",
            "[train]\nsteps = 1000\nbatch_size = 16\nlr = 1e-3\nsmoothing = 25",
        );
        let config = ExperimentConfig::from_toml(&text, &[]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&config, dir.path()).unwrap();
        let loss = |key: &str| out.result[key].as_f64().unwrap();
        Trained {
            checkpoint: dir.path().join("checkpoints").join("final.ckpt"),
            initial_loss: loss("initial_running_loss"),
            final_loss: loss("final_running_loss"),
            _dir: dir,
        }
    })
}

fn run_on_trained(task: &str, section: &str) -> Result<serde_json::Value, String> {
    let checkpoint = format!(
        "model.checkpoint={:?}",
        trained().checkpoint.display().to_string()
    );
    let config = ExperimentConfig::from_toml(&desk_toml(task, section), &[checkpoint])
        .map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    Ok(run_experiment(&config, dir.path())
        .map_err(|e| e.to_string())?
        .result)
}

fn eval_top1(result: &serde_json::Value, key: &str) -> Result<f64, String> {
    result[key]["eval"]["top1"]
        .as_f64()
        .ok_or_else(|| format!("no {key} eval accuracy in the result"))
}

const LINEAR_PROTOCOL: &str = "protocol = { epochs = 28, lr = 1e-2, batch_size = 32 }";

#[test]
fn c09_timestep_trend() {
    criterion(9, "timestep trend on the trained model", secs(1800), || {
        let t = trained();
        ensure(t.final_loss < 0.5 * t.initial_loss, || {
            format!(
                "running loss went from {} to {}",
                t.initial_loss, t.final_loss
            )
        })?;
        let probe = |step: usize| -> Result<f64, String> {
            let r = run_on_trained(
                "probe",
                &format!("[probe]\nt = {step}\nblock = 7\n{LINEAR_PROTOCOL}"),
            )?;
            eval_top1(&r, "probe")
        };
        let (early, late) = (probe(150)?, probe(900)?);

        let config =
            ExperimentConfig::from_toml(&desk_toml("probe", ""), &[]).map_err(|e| e.to_string())?;
        let (set, _) =
            load_dataset(config.data.as_ref().unwrap(), 16).map_err(|e| e.to_string())?;
        let (train, eval) = train_eval_split(&set.labels, 0.25, SEED).map_err(|e| e.to_string())?;
        let flat = |idx: &[usize]| {
            let sub = set.subset(idx);
            let n = sub.len();
            StoredFeatures::new(vec![sub.images.reshape([n, 3 * 256])], sub.labels).unwrap()
        };
        let (mut tr, mut ev) = (flat(&train), flat(&eval));
        let mut head = build_head(&HeadKind::Linear, &[768], 4, grid_head_seed(SEED))
            .map_err(|e| e.to_string())?;
        let protocol = ProbeProtocol {
            epochs: 28,
            lr: 1e-2,
            batch_size: 32,
            ..ProbeProtocol::default()
        };
        let raw = train_probe(
            &mut head,
            &mut tr,
            Some(&mut ev),
            &protocol,
            ProbeMode::Frozen,
            SEED,
        )
        .map_err(|e| e.to_string())?
        .eval
        .map(|e| e.top1)
        .ok_or("raw-pixel probe has no eval accuracy")?;

        let summary = format!(
            "t=150 {:.1}%, t=900 {:.1}%, raw pixels {:.1}%, running loss {:.3} -> {:.3}",
            100.0 * early,
            100.0 * late,
            100.0 * raw,
            t.initial_loss,
            t.final_loss
        );
        note(&summary);
        ensure(early - late >= 0.05, || {
            format!("gap under 5 points: {summary}")
        })?;
        ensure(early > raw, || {
            format!("does not beat raw pixels: {summary}")
        })
    });
}

const ATTENTION: &str =
    "num_layers = 1, d_model = 64, num_heads = 4, mlp_ratio = 2, pool_threshold = 4";
const ATTENTION_PROTOCOL: &str = "protocol = { epochs = 28, lr = 3e-3, batch_size = 32 }";

#[test]
fn c10_fusion_and_feedback_trend() {
    criterion(
        10,
        "fusion and feedback trend on the trained model",
        secs(1200 + 600),
        || {
            // The backbone is trained outside this criterion's budget when
            // criterion 9 has not already done it.
            let _ = trained();
            let start = Instant::now();
            let single = run_on_trained(
            "probe",
            &format!("[probe]\nt = 150\nblock = 11\nhead = {{ kind = \"attention\", {ATTENTION} }}\n{ATTENTION_PROTOCOL}"),
        )?;
            let single = eval_top1(&single, "probe")?;
            let fused = run_on_trained(
            "difformer",
            &format!("[difformer]\ntimes = [90, 150, 300]\nblocks = [7, 11, 13]\nhead = {{ {ATTENTION} }}\n{ATTENTION_PROTOCOL}"),
        )?;
            let fused = eval_top1(&fused, "probe")?;
            let feed = run_on_trained(
            "diffeed",
            &format!(
                "[diffeed]\nstrategy = \"bottleneck\"\nt = 150\nfinal_block = 11\nbaseline = true\nhead = {{ {ATTENTION} }}\n{ATTENTION_PROTOCOL}"
            ),
        )?;
            let (fed, zero) = (
                eval_top1(&feed, "probe")?,
                eval_top1(&feed, "zero_feedback_baseline")?,
            );
            let elapsed = start.elapsed();
            let summary = format!(
                "fusion {:.1}% vs single tap {:.1}%, feedback {:.1}% vs zero feedback {:.1}%",
                100.0 * fused,
                100.0 * single,
                100.0 * fed,
                100.0 * zero
            );
            note(&summary);
            ensure(fused >= single, || {
                format!("fusion below the single tap: {summary}")
            })?;
            ensure(fed >= zero, || {
                format!("feedback below its baseline: {summary}")
            })?;
            ensure(elapsed <= secs(1200), || {
                format!("heads took {:.0}s", elapsed.as_secs_f64())
            })
        },
    );
}

const MINI: &str = r#"
version = 1
task = "grid"
seed = 9

[model]
preset = "miniature"

[data]
source = "synthetic"
classes = 3
per_class = 6
size = 8
seed = 2

[grid]
t_values = [50, 400]
b_values = [2, 4, 6]
pool_sizes = [2]
protocol = { epochs = 3, lr = 0.01, batch_size = 4 }

[probe]
t = 50
block = 4
protocol = { epochs = 3, lr = 0.01, batch_size = 4 }

[train]
steps = 6
batch_size = 4
checkpoint_every = 3
"#;

/// Every file a run wrote, keyed by its path relative to the run directory.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                );
            }
        }
    }
    files
}

#[test]
fn c11_determinism_and_parallelism() {
    criterion(
        11,
        "determinism across reruns and worker counts",
        secs(300),
        || {
            let root = tempfile::tempdir().map_err(|e| e.to_string())?;
            for task in ["grid", "probe", "train-diffusion"] {
                let mut runs = Vec::new();
                for (i, workers) in [1, 3, 1].into_iter().enumerate() {
                    let mut config =
                        ExperimentConfig::from_toml(MINI, &[format!("task=\"{task}\"")])
                            .map_err(|e| e.to_string())?;
                    config.workers = Some(workers);
                    let dir = root.path().join(format!("{task}-{i}"));
                    run_experiment(&config, &dir).map_err(|e| format!("{task}: {e}"))?;
                    runs.push((workers, snapshot(&dir)));
                }
                ensure(runs[0].1.contains_key(Path::new("report.json")), || {
                    format!("{task}: no report.json")
                })?;
                for (workers, files) in &runs[1..] {
                    ensure(files.keys().eq(runs[0].1.keys()), || {
                        format!("{task}: different file sets")
                    })?;
                    for (name, bytes) in files {
                        ensure(*bytes == runs[0].1[name], || {
                            format!("{task}: {} differs with {workers} workers", name.display())
                        })?;
                    }
                }
            }

            let model = build_unet(&UNetConfig::miniature(), 90).unwrap();
            let schedule = build_linear_schedule(1000, 1e-4, 0.02).unwrap();
            let first = root.path().join("a.ckpt");
            let second = root.path().join("b.ckpt");
            save_checkpoint(
                &model,
                &diffrep::ddpm::ScheduleParams::default(),
                12,
                &first,
            )
            .map_err(|e| e.to_string())?;
            let loaded = load_checkpoint(&first).map_err(|e| e.to_string())?;
            ensure(loaded.step == 12, || format!("step {}", loaded.step))?;
            ensure(loaded.model.params.len() == model.params.len(), || {
                "parameter count changed".into()
            })?;
            for ((sa, a), (sb, b)) in model.params.iter().zip(loaded.model.params.iter()) {
                ensure(sa.name == sb.name && a.bitwise_eq(b), || {
                    format!("{} changed in the round trip", sa.name)
                })?;
            }
            let rebuilt = loaded.schedule.build().map_err(|e| e.to_string())?;
            ensure(rebuilt.alpha_bars() == schedule.alpha_bars(), || {
                "schedule changed in the round trip".into()
            })?;
            save_checkpoint(&loaded.model, &loaded.schedule, loaded.step, &second)
                .map_err(|e| e.to_string())?;
            ensure(
                fs::read(&first).unwrap() == fs::read(&second).unwrap(),
                || "re-saved checkpoint differs".into(),
            )
        },
    );
}
