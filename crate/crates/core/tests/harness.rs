mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::*;
use hft::autograd::{ParamGrads, ParamStore};
use hft::harness::*;
use hft::net::Mode;
use hft::synthworld::Dataset;
use hft::{Error, Tensor};

fn tiny(dir: &Path, precision: Precision) -> RunConfig {
    let data = dir.join("data");
    if !data.join("manifest.json").exists() {
        write_tiny_dataset(&data, 8, 4, 3);
    }
    RunConfig {
        precision,
        ..tiny_run_config(&data, &dir.join("run"))
    }
}

#[test]
fn loss_logs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = tiny(dir.path(), Precision::F32);
    a.output = dir.path().join("a");
    let mut b = a.clone();
    b.output = dir.path().join("b");
    let sa = train(&a).unwrap();
    let sb = train(&b).unwrap();
    assert_eq!(sa, sb);
    let la = fs::read(a.output.join("loss_log.jsonl")).unwrap();
    assert_eq!(la, fs::read(b.output.join("loss_log.jsonl")).unwrap());
    assert_eq!(String::from_utf8(la).unwrap().lines().count(), 3 * 4);
    let mut c = a.clone();
    c.seed = 1;
    c.output = dir.path().join("c");
    train(&c).unwrap();
    assert_ne!(
        fs::read(a.output.join("loss_log.jsonl")).unwrap(),
        fs::read(c.output.join("loss_log.jsonl")).unwrap()
    );
}

#[test]
fn learning_rate_follows_the_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), Precision::F32);
    let ds = Dataset::open(&cfg.dataset).unwrap();
    let mut t = Trainer::<f32>::from_dataset(cfg, &ds).unwrap();
    t.run().unwrap();
    let lrs: Vec<(usize, f64)> = t.log.iter().map(|r| (r.epoch, r.lr)).collect();
    for (epoch, lr) in lrs {
        let want = if epoch == 0 { 2e-4 } else { 2e-5 };
        assert!((lr - want).abs() < 1e-18, "epoch {epoch}: {lr}");
    }
    assert_eq!(t.epochs_log.len(), 3);
    assert!(t.epochs_log.iter().all(|e| e.val_miou.is_some()));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for precision in [Precision::F32, Precision::F64] {
        let mut cfg = tiny(dir.path(), precision);
        cfg.epochs = 2;
        cfg.output = dir.path().join(format!("{precision:?}"));
        train(&cfg).unwrap();
        let path = cfg.output.join("last.ckpt");
        let bytes = fs::read(&path).unwrap();
        let ck = AnyCheckpoint::from_bytes(&bytes).unwrap();
        let ds = Dataset::open(&cfg.dataset).unwrap();
        match (&ck, precision) {
            (AnyCheckpoint::F32(c), Precision::F32) => {
                assert_eq!(c.to_bytes(), bytes);
                let s = prepare_split::<f32>(&ds, "val").unwrap();
                let m1 = c.model().unwrap();
                let m2 = AnyCheckpoint::load(&path).unwrap();
                let AnyCheckpoint::F32(c2) = m2 else { panic!() };
                let m2 = c2.model().unwrap();
                assert_eq!(
                    m1.forward(&s[0].image, &s[0].intrinsics, Mode::Hybrid).unwrap(),
                    m2.forward(&s[0].image, &s[0].intrinsics, Mode::Hybrid).unwrap()
                );
            }
            (AnyCheckpoint::F64(c), Precision::F64) => assert_eq!(c.to_bytes(), bytes),
            _ => panic!("checkpoint precision does not match the run"),
        }
        assert_eq!(ck.meta().epoch, 2);
        assert_eq!(ck.meta().global_step, 8);
    }
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), Precision::F32);
    cfg.epochs = 1;
    cfg.optimizer.decay_epochs.clear();
    train(&cfg).unwrap();
    let mut bytes = fs::read(cfg.output.join("last.ckpt")).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 1;
    assert!(matches!(AnyCheckpoint::from_bytes(&bytes), Err(Error::Data(_))));
    assert!(matches!(AnyCheckpoint::from_bytes(b"nope"), Err(Error::Data(_))));
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut full = tiny(dir.path(), Precision::F64);
    full.epochs = 4;
    full.optimizer.decay_epochs = vec![2];
    full.output = dir.path().join("full");
    train(&full).unwrap();

    let mut part = full.clone();
    part.epochs = 3;
    part.output = dir.path().join("part");
    train(&part).unwrap();
    let s = resume(&part.output.join("last.ckpt"), Some(4)).unwrap();
    assert_eq!(s.steps, 16);

    let a = AnyCheckpoint::load(&full.output.join("last.ckpt")).unwrap();
    let b = AnyCheckpoint::load(&part.output.join("last.ckpt")).unwrap();
    let (AnyCheckpoint::F64(a), AnyCheckpoint::F64(b)) = (a, b) else { panic!() };
    assert_eq!(a.params, b.params);
    assert_eq!(a.optimizer, b.optimizer);
    assert_eq!(a.meta.global_step, b.meta.global_step);
}

#[test]
fn clipping_bounds_the_global_norm() {
    let mut store = ParamStore::<f64>::new();
    store.add("a.w", Tensor::zeros(&[3]));
    store.add("b.w", Tensor::zeros(&[2, 2]));
    store.add("c.w", Tensor::zeros(&[1]));
    for (values, limit) in [((30.0, -40.0), 10.0), ((0.3, 0.4), 10.0), ((1e6, 1e6), 0.5)] {
        let mut grads = ParamGrads::zeros_like(&store);
        grads.grads[0] = Some(Tensor::full(&[3], values.0));
        grads.grads[1] = Some(Tensor::full(&[2, 2], values.1));
        let before = grads.global_norm();
        let (pre, post) = clip_gradients(&mut grads, limit);
        assert_eq!(pre, before);
        assert!(post <= limit + 1e-6);
        assert!((grads.global_norm() - post).abs() < 1e-12);
        if before <= limit {
            assert_eq!(post, before);
        }
        assert!(grads.grads[2].is_none());
    }
}

#[test]
fn clipping_in_training_never_exceeds_the_limit() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), Precision::F64);
    cfg.optimizer.clip_norm = 1e-3;
    let ds = Dataset::open(&cfg.dataset).unwrap();
    let mut t = Trainer::<f64>::from_dataset(cfg, &ds).unwrap();
    t.run().unwrap();
    for r in &t.log {
        assert!(r.grad_norm > 1e-3);
        assert!(r.clipped_norm <= 1e-3 + 1e-6, "{}", r.clipped_norm);
    }
}

#[test]
fn evaluation_is_reproducible_and_checks_classes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), Precision::F32);
    cfg.epochs = 1;
    cfg.optimizer.decay_epochs.clear();
    train(&cfg).unwrap();
    let ck = AnyCheckpoint::load(&cfg.output.join("last.ckpt")).unwrap();
    let ds = Dataset::open(&cfg.dataset).unwrap();
    let a = evaluate(&ck, &ds, "val").unwrap().to_json().unwrap();
    let b = evaluate(&ck, &ds, "val").unwrap().to_json().unwrap();
    assert_eq!(a, b);
    assert!(matches!(evaluate(&ck, &ds, "nope"), Err(Error::Data(_))));

    let other = dir.path().join("other");
    let mut sc = tiny_scene_config();
    sc.classes.truncate(3);
    hft::synthworld::generate_dataset(
        &hft::synthworld::DatasetConfig {
            scene: sc,
            train: 2,
            val: 2,
        },
        0,
        &other,
    )
    .unwrap();
    let ods = Dataset::open(&other).unwrap();
    assert!(matches!(evaluate(&ck, &ods, "val"), Err(Error::Config(_))));
}

#[test]
fn non_finite_parameters_abort_with_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), Precision::F64);
    let ds = Dataset::open(&cfg.dataset).unwrap();
    let mut t = Trainer::<f64>::from_dataset(cfg.clone(), &ds).unwrap();
    let id = t.model.params.id("fuse.b").unwrap();
    t.model.params.get_mut(id).data_mut()[0] = f64::NAN;
    let err = t.run_epoch().unwrap_err();
    assert!(matches!(err, Error::Numerical(_)));
    assert_eq!(err.exit_code(), 4);
    let dumps: Vec<_> = fs::read_dir(&cfg.output)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("nonfinite_"))
        .collect();
    assert_eq!(dumps.len(), 1);
}

#[test]
fn visualization_writes_palette_images() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), Precision::F32);
    cfg.epochs = 1;
    cfg.optimizer.decay_epochs.clear();
    train(&cfg).unwrap();
    let ck = AnyCheckpoint::load(&cfg.output.join("last.ckpt")).unwrap();
    let ds = Dataset::open(&cfg.dataset).unwrap();
    let out = dir.path().join("viz");
    let ids = vec!["000008".to_string(), "missing".to_string()];
    let written = visualize(&ck, &ds, &ids, &out).unwrap();
    assert_eq!(written, vec!["000008"]);
    let allowed: Vec<[u8; 3]> = PALETTE[..4].iter().copied().chain([VIZ_BACKGROUND, VIZ_INVALID]).collect();
    for (name, w, h) in [("fv_000008.png", 32, 32), ("pred_000008.png", 8, 8), ("gt_000008.png", 8, 8)] {
        let dec = png::Decoder::new(std::io::BufReader::new(fs::File::open(out.join(name)).unwrap()));
        let mut r = dec.read_info().unwrap();
        let mut buf = vec![0; r.output_buffer_size().unwrap()];
        let info = r.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (w, h));
        if name != "fv_000008.png" {
            for px in buf[..info.buffer_size()].chunks(3) {
                assert!(allowed.contains(&[px[0], px[1], px[2]]), "{name}: {px:?}");
            }
        }
    }
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["palette"].as_array().unwrap().len(), 4);
}

#[test]
fn ground_truth_rendering_puts_the_far_edge_on_top() {
    // one class, 2 x 1 grid: far cell occupied
    let img = render_bev(&[0.0, 1.0], &[true, true], 1, 2, 1).unwrap();
    assert_eq!(&img[..3], &PALETTE[0]);
    assert_eq!(&img[3..], &VIZ_BACKGROUND);
    assert!(render_bev(&[0.0], &[true, true], 1, 2, 1).is_err());
}

#[test]
fn mode_ablation_trains_every_variant_on_one_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), Precision::F32);
    cfg.epochs = 1;
    cfg.optimizer.decay_epochs.clear();
    let out = dir.path().join("abl");
    let table = ablate(&cfg, AblationAxis::Mode, &out).unwrap();
    let names: Vec<&str> = table.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["cbft_only", "cfft_only", "hybrid(no MLS)", "hybrid(MLS)"]);
    let fp = &table.rows[0].dataset_fingerprint;
    assert!(table.rows.iter().all(|r| &r.dataset_fingerprint == fp));
    assert!(table.rows[2].param_count > table.rows[0].param_count);
    assert_eq!(table.rows[2].param_count, table.rows[3].param_count);
    let text = fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert!(text.contains("hybrid(MLS)") && text.contains("vehicle"));
    assert!(out.join("ablation.json").exists());
}

#[test]
fn scheme_and_distance_axes_list_their_variants() {
    let base = RunConfig::default();
    let schemes: Vec<String> = ablation_variants(&base, AblationAxis::Scheme).into_iter().map(|v| v.0).collect();
    assert_eq!(schemes.len(), 6);
    assert!(schemes.contains(&"mutual".to_string()) && schemes.contains(&"none".to_string()));
    let d = ablation_variants(&base, AblationAxis::Distance);
    assert_eq!(d.len(), 3);
    assert!(d.iter().all(|(_, c)| c.model.mode == Mode::Hybrid));
    assert!("bogus".parse::<AblationAxis>().is_err());
}

#[test]
fn default_run_configuration() {
    let c = RunConfig::default();
    assert_eq!(c.optimizer.lr, 2e-4);
    assert_eq!(c.optimizer.decay_factor, 0.1);
    assert_eq!(c.optimizer.algorithm, "adamw");
    assert!(c.validate().is_ok());
}

#[test]
fn parameter_table_is_additive() {
    let table = param_table(&small_model_config(Mode::Hybrid, 4), &small_grid(), &small_intr()).unwrap();
    assert_eq!(additivity_residual(&table).unwrap(), 0);
}

// ---- command line ----

fn hft() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hft"));
    c.env("RUST_LOG", "error");
    c
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |c: &mut Command| c.output().unwrap().status.code().unwrap();

    assert_eq!(code(hft().args(["train", "--config"]).arg(dir.path().join("missing.json"))), 2);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"epochs": 0}"#).unwrap();
    assert_eq!(code(hft().args(["params", "--config"]).arg(&bad)), 0);
    assert_eq!(code(hft().args(["train", "--config"]).arg(&bad)), 2);
    fs::write(&bad, "{").unwrap();
    assert_eq!(code(hft().args(["params", "--config"]).arg(&bad)), 2);

    let ds = dir.path().join("ds");
    let cfg_path = dir.path().join("gen.json");
    let gen = hft::synthworld::DatasetConfig {
        scene: tiny_scene_config(),
        train: 4,
        val: 2,
    };
    fs::write(&cfg_path, serde_json::to_string(&gen).unwrap()).unwrap();
    assert_eq!(code(hft().args(["gen-data", "--seed", "5", "--config"]).arg(&cfg_path).arg("--out").arg(&ds)), 0);
    assert!(Dataset::open(&ds).unwrap().split_len("val") == Some(2));

    let mut run = tiny_run_config(&ds, &dir.path().join("run"));
    run.epochs = 1;
    run.optimizer.decay_epochs.clear();
    let run_path = dir.path().join("run.json");
    fs::write(&run_path, serde_json::to_string(&run).unwrap()).unwrap();
    assert_eq!(code(hft().args(["train", "--config"]).arg(&run_path)), 0);
    let ckpt = dir.path().join("run/last.ckpt");
    let report = dir.path().join("report.json");
    assert_eq!(
        code(hft().arg("eval").arg("--checkpoint").arg(&ckpt).arg("--data").arg(&ds).arg("--report").arg(&report)),
        0
    );
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r.get("bamiou").is_some());
    assert_eq!(
        code(hft().arg("eval").arg("--checkpoint").arg(&ckpt).arg("--data").arg(dir.path().join("nope")).arg("--report").arg(&report)),
        3
    );
    assert_eq!(
        code(hft().arg("viz").arg("--checkpoint").arg(&ckpt).arg("--data").arg(&ds).arg("--ids").arg("000000,000001").arg("--out").arg(dir.path().join("viz"))),
        0
    );
    assert!(dir.path().join("viz/pred_000001.png").exists());
    assert_eq!(code(hft().args(["ablate", "--axis", "sideways", "--config"]).arg(&run_path).arg("--out").arg(dir.path())), 2);
}

#[test]
fn photometric_jitter_is_seeded_and_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), Precision::F64);
    let ds = Dataset::open(&cfg.dataset).unwrap();
    let s = &prepare_split::<f64>(&ds, "train").unwrap()[0];
    assert_eq!(s.jittered(1.0, 1.0, 1.0).image, s.image);
    let j = s.jittered(1.3, 0.7, 1.2);
    assert_ne!(j.image, s.image);
    assert!(j.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(j.labels, s.labels);

    let run = |jitter: f64, name: &str| {
        let mut c = cfg.clone();
        c.photometric_jitter = jitter;
        c.output = dir.path().join(name);
        train(&c).unwrap();
        fs::read(c.output.join("loss_log.jsonl")).unwrap()
    };
    let a = run(0.2, "a");
    assert_eq!(a, run(0.2, "b"));
    assert_ne!(a, run(0.0, "c"));
}
