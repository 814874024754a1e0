use ereformer::depth::compute_metrics;
use ereformer::events::{EventStream, Normalization};
use ereformer::model::checkpoint::Checkpoint;
use ereformer::model::{ModelConfig, Network, LEVELS};
use ereformer::rng::{normal, stream};
use ereformer::sim::{DatasetSpec, LabeledSequence};
use ereformer::train::*;
use ereformer::{Error, Tensor};

fn tiny() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        bptt: 2,
        model: ModelConfig {
            height: 32,
            width: 32,
            embed_dim: 8,
            heads: [1, 2, 2, 4],
            ..ModelConfig::default()
        },
        data: DataConfig {
            dataset: DatasetSpec {
                width: 32,
                height: 32,
                sequences: 5,
                bins_per_sequence: 4,
                ..DatasetSpec::default()
            },
            ..DataConfig::default()
        },
        optimizer: OptimizerConfig {
            max_lr: 1e-3,
            ..OptimizerConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn data(cfg: &TrainConfig) -> Vec<LabeledSequence> {
    load_sequences(&cfg.data).unwrap()
}

fn samples(cfg: &TrainConfig, seqs: &[LabeledSequence]) -> Vec<Sample> {
    seqs.iter().map(|s| prepare(s, cfg.data.normalization).unwrap()).collect()
}

#[test]
fn config_roundtrip_and_validation() {
    let c = tiny();
    assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    let d = TrainConfig::default();
    assert_eq!((d.epochs, d.batch_size, d.bptt, d.lambda), (20, 2, 8, 0.85));
    assert_eq!(d.data.validation_every, 5);
    assert!(matches!(TrainConfig::from_toml("epochz = 3"), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::from_toml("[model]\nembed_dimm = 3"), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::from_toml("bptt = 0"), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::from_toml("[schedule]\nwarmup_fraction = 1.0"), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::from_toml("[optimizer]\nmax_lr = -1.0"), Err(Error::Config(_))));
    let parsed = TrainConfig::from_toml("seed = 7\n[model]\nrecurrence = false\nskip_mode = \"add\"\n").unwrap();
    assert_eq!(parsed.seed, 7);
    assert!(!parsed.model.recurrence);
}

#[test]
fn split_holds_out_every_fifth() {
    assert_eq!(split_indices(10, 5), (vec![0, 1, 2, 3, 5, 6, 7, 8], vec![4, 9]));
    assert_eq!(split_indices(3, 5), (vec![0, 1, 2], vec![]));
}

#[test]
fn one_epoch_lowers_training_loss() {
    // one step per bin, so the short warm-up still moves the weights
    let cfg = TrainConfig { epochs: 1, batch_size: 1, bptt: 1, ..tiny() };
    let seqs = data(&cfg);
    let train_set: Vec<Sample> = samples(&cfg, &seqs).into_iter().take(4).collect();
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let before = mean_loss(&cfg, &t.net, &train_set).unwrap();
    t.train_epoch(&train_set).unwrap();
    let after = mean_loss(&cfg, &t.net, &train_set).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn without_recurrence_bins_are_independent_of_order() {
    let mut cfg = tiny();
    cfg.model.recurrence = false;
    let s = &samples(&cfg, &data(&cfg))[0];
    let net = Network::<f32>::new(cfg.model.clone(), 3).unwrap();
    let forward = predict(&net, &s.inputs, &cfg.codec).unwrap();
    let order = [2, 0, 3, 1];
    let permuted: Vec<Tensor<f32>> = order.iter().map(|&i| s.inputs[i].clone()).collect();
    let back = predict(&net, &permuted, &cfg.codec).unwrap();
    for (k, &i) in order.iter().enumerate() {
        assert_eq!(back[k], forward[i]);
    }
    // with recurrence the same permutation changes the outputs
    // the output projection starts at zero, which hides the state
    let mut rec = Network::<f32>::new(tiny().model, 3).unwrap();
    for i in 0..LEVELS {
        let name = format!("grvit.{i}.out.w");
        let shape = rec.params.get(&name).unwrap().shape().to_vec();
        rec.params.set(&name, normal(&shape, 0.2, &mut stream(i as u64, "out"))).unwrap();
    }
    let a = predict(&rec, &s.inputs, &cfg.codec).unwrap();
    let b = predict(&rec, &permuted, &cfg.codec).unwrap();
    assert_ne!(b[1], a[0]);
}

#[test]
fn resume_is_bit_exact() {
    let cfg = tiny();
    let seqs = data(&cfg);
    let straight = train(cfg.clone(), &seqs, None, None, |_| {}).unwrap();

    let first = train(TrainConfig { epochs: 1, ..cfg.clone() }, &seqs, None, None, |_| {}).unwrap();
    // a checkpoint from a 1-epoch config cannot resume a 2-epoch run
    assert!(train(cfg.clone(), &seqs, None, Some(first.trainer.clone()), |_| {}).is_err());

    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let train_set: Vec<Sample> = samples(&cfg, &seqs).into_iter().take(4).collect();
    t.train_epoch(&train_set).unwrap();
    let path = dir.path().join("mid.ckpt");
    t.checkpoint().write(&path).unwrap();
    let restored = Trainer::from_checkpoint(&Checkpoint::read(&path).unwrap()).unwrap();
    assert_eq!(restored.epoch, 1);
    assert_eq!(restored.opt, t.opt);
    let resumed = train(cfg, &seqs, None, Some(restored), |_| {}).unwrap();
    assert_eq!(resumed.trainer.checkpoint().encode(), straight.trainer.checkpoint().encode());
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let t = Trainer::new(tiny()).unwrap();
    let bytes = t.checkpoint().encode();
    let again = Trainer::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
    assert_eq!(again.checkpoint().encode(), bytes);
}

#[test]
fn runs_write_identical_artifacts() {
    let cfg = tiny();
    let seqs = data(&cfg);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut logs = Vec::new();
    train(cfg.clone(), &seqs, Some(a.path()), None, |l| logs.push(l.clone())).unwrap();
    train(cfg, &seqs, Some(b.path()), None, |_| {}).unwrap();
    assert_eq!(logs.len(), 2);
    for f in [MANIFEST, LAST_CHECKPOINT, BEST_CHECKPOINT] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let m: RunManifest = serde_json::from_slice(&std::fs::read(a.path().join(MANIFEST)).unwrap()).unwrap();
    assert_eq!(m.code_hash.len(), 64);
    assert_eq!(m.validation_sequences, vec![4]);
    assert_eq!(m.epochs, logs);
    assert!(m.untrained_validation.is_some() && m.best_epoch.is_some());
}

#[test]
fn interrupted_run_resumes_from_disk() {
    let cfg = tiny();
    let seqs = data(&cfg);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train(cfg.clone(), &seqs, Some(a.path()), None, |_| {}).unwrap();
    // stop after one epoch by training a copy whose log ends there
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let train_set: Vec<Sample> = samples(&cfg, &seqs).into_iter().take(4).collect();
    t.train_epoch(&train_set).unwrap();
    let resumed = train(cfg, &seqs, Some(b.path()), Some(t), |_| {}).unwrap();
    assert_eq!(resumed.trainer.epoch, 2);
    assert_eq!(
        std::fs::read(a.path().join(LAST_CHECKPOINT)).unwrap(),
        std::fs::read(b.path().join(LAST_CHECKPOINT)).unwrap()
    );
}

#[test]
fn evaluation_is_deterministic_and_order_free() {
    let cfg = tiny();
    let mut s = samples(&cfg, &data(&cfg));
    let net = Network::<f32>::new(cfg.model.clone(), 1).unwrap();
    let a = evaluate(&net, &s, &cfg.codec).unwrap();
    assert_eq!(a, evaluate(&net, &s, &cfg.codec).unwrap());
    s.reverse();
    let b = evaluate(&net, &s, &cfg.codec).unwrap();
    let mut rev = b.sequences.clone();
    rev.reverse();
    assert_eq!(rev, a.sequences);
    assert!(a.aggregate.abs_rel.is_finite());
}

#[test]
fn oracle_prediction_is_perfect() {
    let cfg = tiny();
    let s = &samples(&cfg, &data(&cfg))[0];
    let d = &s.depths[1];
    let r = compute_metrics(&d.values_f64(), &d.values_f64(), &d.mask).unwrap();
    assert_eq!((r.abs_rel, r.rmse_log, r.silog, r.delta1, r.delta3), (0.0, 0.0, 0.0, 1.0, 1.0));
}

#[test]
fn training_fits_its_own_sequences() {
    let cfg = TrainConfig {
        epochs: 8,
        ..tiny()
    };
    let seqs = data(&cfg);
    let train_set: Vec<Sample> = samples(&cfg, &seqs).into_iter().take(4).collect();
    let before = evaluate(&Trainer::new(cfg.clone()).unwrap().net, &train_set, &cfg.codec).unwrap();
    let out = train(cfg.clone(), &seqs, None, None, |_| {}).unwrap();
    let after = evaluate(&out.trainer.net, &train_set, &cfg.codec).unwrap();
    assert!(after.aggregate.abs_rel.is_finite());
    assert!(after.aggregate.abs_rel < before.aggregate.abs_rel, "{} !< {}", after.aggregate.abs_rel, before.aggregate.abs_rel);
}

#[test]
fn non_finite_loss_reports_where() {
    let mut cfg = tiny();
    // no validation split, so the first failure happens inside a training window
    cfg.data.dataset.sequences = 4;
    let seqs = data(&cfg);
    let mut t = Trainer::new(cfg.clone()).unwrap();
    t.net.params.set("head.proj.b", Tensor::full(&[1], f32::NAN)).unwrap();
    let err = train(cfg, &seqs, None, Some(t), |_| {}).err().unwrap();
    let msg = err.to_string();
    assert!(matches!(err, Error::NonFinite(_)), "{msg}");
    assert!(msg.contains("epoch 0, window 0, sequence"), "{msg}");
    // release builds find it in the gradients, debug builds at the first op
    assert!(msg.contains("largest gradient") || msg.contains("produced NaN"), "{msg}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn inference_writes_one_map_per_bin() {
    let cfg = tiny();
    let seq = &data(&cfg)[0];
    let net = Network::<f32>::new(cfg.model.clone(), 1).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(infer(&net, &cfg, &seq.stream, a.path()).unwrap(), 4);
    assert_eq!(infer(&net, &cfg, &seq.stream, b.path()).unwrap(), 4);
    for i in 1..=4 {
        for ext in ["pfm", "ppm"] {
            let f = format!("depth_{i:04}.{ext}");
            assert_eq!(std::fs::read(a.path().join(&f)).unwrap(), std::fs::read(b.path().join(&f)).unwrap());
        }
    }
    let (w, h, v) = ereformer::depth::pfm::read(&a.path().join("depth_0001.pfm")).unwrap();
    assert_eq!((w, h, v.len()), (32, 32, 1024));
    assert!(v.iter().all(|&d| (2.0..=80.0).contains(&d)));

    let empty_dir = tempfile::tempdir().unwrap();
    let out = empty_dir.path().join("out");
    let empty = EventStream::from_events(32, 32, Vec::new()).unwrap();
    assert_eq!(infer(&net, &cfg, &empty, &out).unwrap(), 0);
    assert!(!out.exists());
    let wrong = EventStream::from_events(64, 32, Vec::new()).unwrap();
    assert!(matches!(infer(&net, &cfg, &wrong, &out), Err(Error::Data(_))));
}

#[test]
fn normalization_changes_inputs_only() {
    let cfg = tiny();
    let seq = &data(&cfg)[0];
    let raw = prepare(seq, Normalization::None).unwrap();
    let log = prepare(seq, Normalization::Log1p).unwrap();
    assert_eq!(raw.bins(), log.bins());
    assert_eq!(raw.gt_log, log.gt_log);
    let x = raw.inputs[0].data().iter().cloned().fold(0.0f32, f32::max);
    let y = log.inputs[0].data().iter().cloned().fold(0.0f32, f32::max);
    assert!((y - x.ln_1p()).abs() < 1e-6);
}

#[test]
fn ablation_medians() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    let names: Vec<String> = default_variants().into_iter().map(|v| v.name).collect();
    for n in ["full", "no_recurrence", "attended", "residual", "add_skip"] {
        assert!(names.iter().any(|m| m == n));
    }
    // one step per bin, so the short warm-up still moves the weights
    let cfg = TrainConfig { epochs: 1, batch_size: 1, bptt: 1, ..tiny() };
    let seqs = data(&cfg);
    let variants: Vec<Variant> = default_variants().into_iter().take(2).collect();
    let rows = ablation_suite(&cfg, &seqs, &[1, 2, 3], &variants, |_, _, _| {}).unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(r.abs_rel.len(), 3);
        assert_eq!(r.median, median(&r.abs_rel));
    }
    assert!(ablation_suite(&cfg, &seqs, &[], &variants, |_, _, _| {}).is_err());
}
