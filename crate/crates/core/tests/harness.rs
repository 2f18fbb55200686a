use std::fs;
use std::path::Path;

use diffrep::ddpm::ScheduleParams;
use diffrep::features::StoredFeatures;
use diffrep::harness::checkpoint::{
    load_checkpoint, load_features, read_container, save_checkpoint, save_features,
};
use diffrep::harness::config::ExperimentConfig;
use diffrep::harness::data::{
    load_image_directory, synthesize_dataset, train_eval_split, SyntheticSpec, Variant,
};
use diffrep::harness::optim::{adam_update, AdamState};
use diffrep::harness::report::{emit_report, read_report, Table};
use diffrep::harness::run::run_experiment;
use diffrep::harness::train::{train_diffusion, TrainConfig};
use diffrep::heads::{build_head, train_probe, HeadKind, ProbeMode, ProbeProtocol};
use diffrep::tensor::{Init, ParamLayout, Tensor};
use diffrep::unet::{build_unet, UNetConfig};
use diffrep::Error;

#[test]
fn adam_two_steps_match_a_scalar_oracle() {
    let mut layout = ParamLayout::new();
    layout.add("w", [2], Init::Zeros);
    let mut store = layout.materialize(0);
    let id = store.find("w").unwrap();
    store.set(id, Tensor::new([2], vec![1.0, -2.0]));
    let mut state = AdamState::new(&store);
    let grads = [[0.5, -3.0], [-1.0, 0.25]];
    let lr = 0.05;
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut p = [1.0, -2.0];
    let mut m = [0.0; 2];
    let mut v = [0.0; 2];
    for (k, g) in grads.iter().enumerate() {
        adam_update(
            &mut store,
            &[Some(Tensor::new([2], g.to_vec()))],
            &mut state,
            lr,
        )
        .unwrap();
        let step = (k + 1) as i32;
        for i in 0..2 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(step));
            let vh = v[i] / (1.0 - b2.powi(step));
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    assert_eq!(state.step, 2);
    for (a, b) in store.get(id).data().iter().zip(&p) {
        assert!((a - b).abs() < 1e-14);
    }
    assert!(adam_update(&mut store, &[], &mut state, lr).is_err());
}

#[test]
fn checkpoint_files_round_trip_and_reject_damage() {
    let dir = tempfile::tempdir().unwrap();
    let model = build_unet(&UNetConfig::miniature(), 3).unwrap();
    let schedule = ScheduleParams {
        timesteps: 1000,
        beta_start: 2e-4,
        beta_end: 0.03,
    };
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &schedule, 17, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.step, 17);
    assert_eq!(loaded.schedule, schedule);
    assert_eq!(loaded.model.config, model.config);
    for ((sa, a), (sb, b)) in model.params.iter().zip(loaded.model.params.iter()) {
        assert_eq!(sa.name, sb.name);
        assert!(a.bitwise_eq(b));
    }

    let bytes = fs::read(&path).unwrap();
    let header = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut flipped = bytes.clone();
    flipped[16 + header + 5] ^= 0x10;
    fs::write(&path, &flipped).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(Error::Checksum { .. })
    ));
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(Error::Truncated { .. })
    ));
    fs::write(&path, b"not a checkpoint at all").unwrap();
    assert!(load_checkpoint(&path).is_err());
    assert!(matches!(
        load_checkpoint(&dir.path().join("missing.ckpt")),
        Err(Error::Io { .. })
    ));

    let feats = dir.path().join("f.bin");
    let t = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    save_features(
        &feats,
        &[("x".into(), t.clone())],
        &[3, 1],
        serde_json::json!({ "note": "n" }),
    )
    .unwrap();
    let (tensors, labels, extra) = load_features(&feats).unwrap();
    assert_eq!(labels, vec![3, 1]);
    assert!(tensors[0].1.bitwise_eq(&t));
    assert_eq!(extra["note"], "n");
    assert!(load_checkpoint(&feats).is_err());
    assert_eq!(read_container(&feats).unwrap().0.kind, "features");
}

fn shapes(classes: usize, per_class: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        classes,
        per_class,
        size: 8,
        seed,
        variant: Variant::Shapes,
        noise: 0.05,
    }
}

#[test]
fn synthetic_sets_are_counted_and_deterministic() {
    let a = synthesize_dataset(&shapes(5, 7, 1)).unwrap();
    assert_eq!(a.images.shape(), &[35, 3, 8, 8]);
    assert_eq!(a.classes(), 5);
    for c in 0..5 {
        assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 7);
    }
    assert!(a.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(a
        .images
        .bitwise_eq(&synthesize_dataset(&shapes(5, 7, 1)).unwrap().images));
    assert!(!a
        .images
        .bitwise_eq(&synthesize_dataset(&shapes(5, 7, 2)).unwrap().images));
    assert!(synthesize_dataset(&SyntheticSpec {
        classes: 0,
        ..shapes(1, 1, 1)
    })
    .is_err());

    let (train, eval) = train_eval_split(&a.labels, 0.3, 4).unwrap();
    assert_eq!(train.len() + eval.len(), 35);
    assert_eq!(eval.len(), 5 * 2);
    assert!(train.iter().all(|i| !eval.contains(i)));
}

#[test]
fn separable_raw_pixels_reach_full_accuracy() {
    let spec = SyntheticSpec {
        variant: Variant::Separable,
        ..shapes(4, 12, 3)
    };
    let data = synthesize_dataset(&spec).unwrap();
    let (train, eval) = train_eval_split(&data.labels, 0.25, 5).unwrap();
    let flat = |idx: &[usize]| {
        let sub = data.subset(idx);
        let n = sub.len();
        (sub.images.reshape([n, 3 * 64]), sub.labels)
    };
    let (xt, yt) = flat(&train);
    let (xe, ye) = flat(&eval);
    let mut head = build_head(&HeadKind::Linear, &[192], 4, 6).unwrap();
    let mut tr = StoredFeatures::new(vec![xt], yt).unwrap();
    let mut ev = StoredFeatures::new(vec![xe], ye).unwrap();
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
    .unwrap();
    assert_eq!(report.eval.unwrap().top1, 1.0);
}

fn write_png(path: &Path, w: u32, h: u32, rgb: [u8; 3]) {
    image::RgbImage::from_pixel(w, h, image::Rgb(rgb))
        .save(path)
        .unwrap();
}

#[test]
fn image_directories_load_in_path_order() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for class in ["b_cats", "a_dogs"] {
        fs::create_dir(root.join(class)).unwrap();
    }
    write_png(&root.join("a_dogs/2.png"), 10, 6, [255, 0, 0]);
    write_png(&root.join("a_dogs/1.png"), 4, 4, [0, 0, 255]);
    write_png(&root.join("b_cats/x.png"), 8, 8, [0, 255, 0]);
    fs::write(root.join("b_cats/readme.txt"), "not an image").unwrap();

    let loaded = load_image_directory(root, 4, false).unwrap();
    let d = &loaded.dataset;
    assert_eq!(d.descriptor.class_names, vec!["a_dogs", "b_cats"]);
    assert_eq!(d.labels, vec![0, 0, 1]);
    assert_eq!(d.images.shape(), &[3, 3, 4, 4]);
    // 1.png (blue) sorts before 2.png (red).
    let first = d.images.index_batch(0);
    assert_eq!(first.data()[2 * 16], 1.0);
    assert_eq!(first.data()[0], -1.0);
    assert_eq!(d.images.index_batch(1).data()[0], 1.0);
    assert_eq!(loaded.warnings.len(), 1);
    assert!(loaded.warnings[0].contains("readme.txt"));

    let flipped = load_image_directory(root, 4, true).unwrap();
    assert_eq!(flipped.dataset.len(), 6);

    fs::create_dir(root.join("c_empty")).unwrap();
    assert!(load_image_directory(root, 4, false).is_err());
}

#[test]
fn training_is_deterministic_and_zero_steps_keep_the_init() {
    let data = synthesize_dataset(&shapes(2, 4, 1)).unwrap();
    let schedule = ScheduleParams::default();
    let config = TrainConfig {
        steps: 3,
        batch_size: 4,
        lr: 1e-3,
        checkpoint_every: 2,
        smoothing: 2,
    };
    let dir = tempfile::tempdir().unwrap();
    let mut a = build_unet(&UNetConfig::miniature(), 8).unwrap();
    let init = a.clone();
    let ra = train_diffusion(
        &mut a,
        &schedule,
        &data.images,
        &config,
        9,
        Some(dir.path()),
    )
    .unwrap();
    let mut b = init.clone();
    let rb = train_diffusion(&mut b, &schedule, &data.images, &config, 9, None).unwrap();
    assert_eq!(ra.losses, rb.losses);
    assert_eq!(ra.losses.len(), 3);
    assert!(ra.losses.iter().all(|l| l.is_finite() && *l > 0.0));
    assert!((ra.running[2] - (ra.losses[1] + ra.losses[2]) / 2.0).abs() < 1e-15);
    for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
        assert!(x.bitwise_eq(y));
    }
    assert!(dir.path().join("step-2.ckpt").exists());

    let mut c = init.clone();
    let rc = train_diffusion(
        &mut c,
        &schedule,
        &data.images,
        &TrainConfig {
            steps: 0,
            ..config.clone()
        },
        9,
        None,
    )
    .unwrap();
    assert!(rc.losses.is_empty());
    for ((_, x), (_, y)) in c.params.iter().zip(init.params.iter()) {
        assert!(x.bitwise_eq(y));
    }
    let mut d = init.clone();
    assert!(train_diffusion(
        &mut d,
        &schedule,
        &data.images,
        &TrainConfig {
            batch_size: 0,
            ..config
        },
        9,
        None
    )
    .is_err());
}

#[test]
fn reports_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut table = Table::new("scores", &["a", "b"]);
    table.push(vec!["1".into(), "x,y".into()]);
    let files = emit_report(
        dir.path(),
        "knn",
        4,
        "seed = 4\n",
        serde_json::json!({ "top1": 0.5 }),
        &[table],
        &[],
    )
    .unwrap();
    assert_eq!(files.len(), 2);
    let report = read_report(dir.path()).unwrap();
    assert_eq!(report.task, "knn");
    assert_eq!(report.result["top1"], 0.5);
    assert_eq!(report.tables, vec!["scores.csv"]);
    assert_eq!(
        fs::read_to_string(dir.path().join("scores.csv")).unwrap(),
        "a,b\n1,\"x,y\"\n"
    );
}

const BASE: &str = r#"
version = 1
task = "sample"
seed = 3

[model]
preset = "miniature"

[data]
source = "synthetic"
classes = 2
per_class = 4
size = 8
seed = 1
"#;

fn run(task: &str, section: &str) -> (tempfile::TempDir, diffrep::harness::run::RunOutput) {
    let text = format!("{BASE}\n{section}");
    let config = ExperimentConfig::from_toml(&text, &[format!("task=\"{task}\"")]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&config, dir.path()).unwrap();
    (dir, out)
}

#[test]
fn sample_and_extract_runs_write_their_files() {
    let (dir, out) = run(
        "sample",
        "[sample]\ncount = 2\n[schedule]\ntimesteps = 1000",
    );
    assert!(dir.path().join("samples.png").exists());
    let (tensors, labels, _) = load_features(&dir.path().join("samples.bin")).unwrap();
    assert_eq!(tensors[0].1.shape(), &[2, 3, 8, 8]);
    assert_eq!(labels.len(), 2);
    assert!(out
        .files
        .iter()
        .any(|p| p.ends_with("config.resolved.toml")));

    let (dir, out) = run("extract", "[extract]\nt = 40\nblocks = [1, 3]\npool = 2");
    let (tensors, labels, _) = load_features(&dir.path().join("features.bin")).unwrap();
    let names: Vec<&str> = tensors.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, vec!["t40-b1", "t40-b3"]);
    assert_eq!(tensors[0].1.dim(0), 8);
    assert_eq!(labels.len(), 8);
    assert_eq!(out.result["file"], "features.bin");
}

#[test]
fn probe_runs_in_both_modes() {
    let section = "[probe]\nt = 30\nblock = 3\npool = 2\nprotocol = { epochs = 2, lr = 0.01, batch_size = 4 }";
    let (dir, out) = run("probe", section);
    assert!(dir.path().join("epochs.csv").exists());
    assert!(out.result["probe"]["eval"]["top1"].is_number());

    let (_, tuned) = run("probe", &format!("{section}\nmode = \"finetune\""));
    assert!(tuned.result["probe"]["train"]["top1"].is_number());
}

#[test]
fn fusion_and_feedback_runs() {
    let head =
        "head = { num_layers = 1, d_model = 8, num_heads = 2, mlp_ratio = 2, pool_threshold = 2 }";
    let protocol = "protocol = { epochs = 1, lr = 0.01, batch_size = 4 }";
    let (_, out) = run(
        "difformer",
        &format!("[difformer]\ntimes = [20, 60]\nblocks = [3, 4]\n{head}\n{protocol}"),
    );
    assert_eq!(out.result["pre_classifier_dim"], 16);
    assert_eq!(out.result["tokens_per_time"], 8);

    let section = format!(
        "[diffeed]\nstrategy = \"bottleneck\"\nt = 20\nfinal_block = 7\ncandidates = [6, 7]\nbaseline = true\n{head}\n{protocol}"
    );
    let (dir, _) = run("diffeed", &section);
    let sweep = fs::read_to_string(dir.path().join("final-blocks.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3, "{sweep}");
    let baseline = fs::read_to_string(dir.path().join("baseline.csv")).unwrap();
    assert!(
        baseline.contains("\nfeedback,") && baseline.contains("\nzero-feedback,"),
        "{baseline}"
    );
}

#[test]
fn cka_runs_on_every_axis() {
    let (dir, out) = run(
        "cka",
        "[cka]\naxis = \"blocks\"\nt = 20\nblocks = [1, 4, 8]",
    );
    assert!(dir.path().join("cka.svg").exists());
    let m = out.result["cka"]["values"].as_array().unwrap();
    assert_eq!(m.len(), 3);
    for i in 0..3 {
        assert!((m[i][i].as_f64().unwrap() - 1.0).abs() < 1e-9);
    }

    let (_, out) = run(
        "cka",
        "[cka]\naxis = \"timesteps\"\nblock = 4\ntimes = [10, 500]",
    );
    assert_eq!(out.result["cka"]["values"].as_array().unwrap().len(), 2);

    let (feat_dir, _) = run("extract", "[extract]\nt = 20\nblocks = [4]");
    let store = feat_dir.path().join("features.bin");
    let section = format!(
        "[cka]\naxis = \"external\"\nt = 20\nblocks = [4, 8]\nfeatures = {:?}",
        store.display().to_string()
    );
    let (_, out) = run("cka", &section);
    let m = out.result["cka"]["values"].as_array().unwrap();
    assert!((m[0][0].as_f64().unwrap() - 1.0).abs() < 1e-9, "{m:?}");
}

#[test]
fn knn_run_reports_each_k() {
    let (dir, out) = run("knn", "[knn]\nt = 20\nblock = 4\nk = [1, 3]");
    assert_eq!(out.result["results"].as_array().unwrap().len(), 2);
    let csv = fs::read_to_string(dir.path().join("knn.csv")).unwrap();
    assert!(csv.starts_with("k,metric,top1,top5\n1,cosine,"), "{csv}");
}
