use std::path::PathBuf;

use pclsr::checkpoint::Checkpoint;
use pclsr::datapipe::{load_png, TrainingSet};
use pclsr::losses::contrad_loss;
use pclsr::networks::embed_forward;
use pclsr::trainer::{train, EmbeddingMode, TrainConfig, TrainState};
use pclsr::Error;

fn toy_set(n: usize) -> TrainingSet {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/train");
    let names = ["astronaut_a", "coffee_b", "chelsea_a", "hubble"];
    let imgs: Vec<_> = names[..n]
        .iter()
        .map(|n| load_png(&dir.join(format!("{n}.png"))).unwrap())
        .collect();
    TrainingSet::from_hr_images(names[..n].iter().map(|s| s.to_string()).collect(), &imgs, 4).unwrap()
}

fn tiny() -> TrainConfig {
    TrainConfig {
        lr_patch: 8,
        batch_size: 3,
        k_pos: 2,
        k_neg: 2,
        n_resblocks: 1,
        n_channels: 8,
        embed_base_channels: 4,
        embed_layers: 4,
        loss_layers: 3,
        steps: 10,
        learning_rate: 1e-3,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn ten_step_run_populates_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&tiny(), &toy_set(2), dir.path(), None).unwrap();
    assert_eq!(out.records.len(), 10);
    assert!(out.records.windows(2).all(|w| w[1].step == w[0].step + 1));
    let bins: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "bin"))
        .collect();
    assert_eq!(bins.len(), 1);
    let log = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 11);
    assert_eq!(log.lines().next().unwrap(), "step,l1,lcl,lcld,total");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.snapshot.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["alpha"], 0.1);
    assert_eq!(manifest["config"]["embedding_mode"], "learned");
    assert_eq!(manifest["dataset_checksums"].as_object().unwrap().len(), 2);
    for r in &out.records {
        assert!(r.l1.is_finite() && r.lcl.is_finite() && r.lcld.is_finite());
        assert!(r.lcl > 0.0 && r.lcld > 0.0);
        assert_eq!(r.total, r.l1 + 0.1 * r.lcl);
    }
    let ck = Checkpoint::load(&dir.path().join("final.bin")).unwrap();
    assert_eq!(ck.step, 10);
    let restored = TrainState::from_checkpoint(&ck).unwrap();
    assert_eq!(restored.sr, out.state.sr);
    assert_eq!(restored.ed, out.state.ed);
}

#[test]
fn steps_touch_only_their_own_network() {
    let data = toy_set(2);
    let mut st = TrainState::init(&tiny()).unwrap();
    let batch = st.sample_batch(&data).unwrap();
    let (sr0, ed0) = (st.sr.clone(), st.ed.clone());
    st.d_step(&batch, None).unwrap();
    assert_eq!(st.sr, sr0);
    assert!(st.ed.max_abs_diff(&ed0) > 0.0);
    let ed1 = st.ed.clone();
    st.g_step(&batch, None).unwrap();
    assert_eq!(st.ed, ed1);
    assert!(st.sr.max_abs_diff(&sr0) > 0.0);
}

#[test]
fn discriminator_loss_of_symmetric_scores_is_near_its_uninformed_value() {
    // identical real and fake sets of nearly equal scores give about 2·log(N + 1)
    let data = toy_set(2);
    for n in [2usize, 4, 8] {
        let mut st = TrainState::init(&TrainConfig { batch_size: n, ..tiny() }).unwrap();
        let batch = st.sample_batch(&data).unwrap();
        let x = st.config.transform.apply(&batch.hr).unwrap();
        let (_, scores) = embed_forward(&st.ed, &st.embed_config(), &x, 1).unwrap();
        let l = contrad_loss(&scores, &scores).unwrap();
        let uninformed = 2.0 * ((n + 1) as f64).ln();
        assert!((l - uninformed).abs() < 0.1 * uninformed, "n={n}: {l} vs {uninformed}");
    }
}

#[test]
fn consecutive_discriminator_steps_mostly_decrease_the_loss() {
    let data = toy_set(2);
    let mut down = 0;
    for seed in 0..20 {
        let mut st = TrainState::init(&TrainConfig { seed, ..tiny() }).unwrap();
        let batch = st.sample_batch(&data).unwrap();
        let a = st.d_step(&batch, None).unwrap();
        let b = st.d_step(&batch, None).unwrap();
        down += usize::from(b <= a);
    }
    assert!(down >= 16, "{down}/20 non-increasing");
}

#[test]
fn zero_alpha_and_disabled_embedding_train_identically() {
    let data = toy_set(2);
    let steps = 4;
    let run = |cfg: TrainConfig| {
        let mut st = TrainState::init(&cfg).unwrap();
        let mut recs = Vec::new();
        for _ in 0..steps {
            recs.push(st.outer_step(&data).unwrap().0);
        }
        (st, recs)
    };
    let (a, ra) = run(TrainConfig { alpha: 0.0, ..tiny() });
    let (b, rb) = run(TrainConfig {
        embedding_mode: EmbeddingMode::Off,
        ..tiny()
    });
    assert_eq!(a.sr, b.sr);
    for (x, y) in ra.iter().zip(&rb) {
        assert_eq!((x.l1, x.lcl, x.total), (y.l1, y.lcl, y.total));
    }
}

#[test]
fn disabling_both_augmentations_skips_the_contrastive_term() {
    let cfg = TrainConfig {
        use_pos_aug: false,
        use_neg_aug: false,
        ..tiny()
    };
    assert!(!cfg.contrastive_active());
    let mut st = TrainState::init(&cfg).unwrap();
    let (rec, batch) = st.outer_step(&toy_set(2)).unwrap();
    assert_eq!(rec.lcl, 0.0);
    assert!(batch.positives.is_empty() && batch.negatives.is_empty());

    // ground truth as the only positive, upsampled LR as the only negative
    let only_pos = TrainConfig { use_neg_aug: false, ..tiny() };
    let mut st = TrainState::init(&only_pos).unwrap();
    let (rec, batch) = st.outer_step(&toy_set(2)).unwrap();
    assert!(rec.lcl > 0.0);
    assert_eq!((batch.positives.len(), batch.negatives.len()), (3, 1));
    assert_eq!(batch.positives[0], batch.hr);
}

#[test]
fn frozen_embedding_is_loaded_and_never_updated() {
    let data = toy_set(2);
    let dir = tempfile::tempdir().unwrap();
    let donor = train(&TrainConfig { steps: 3, ..tiny() }, &data, &dir.path().join("donor"), None).unwrap();
    let path = dir.path().join("donor/final.bin");
    let cfg = TrainConfig {
        embedding_mode: EmbeddingMode::Frozen(path.clone()),
        steps: 4,
        ..tiny()
    };
    let out = train(&cfg, &data, &dir.path().join("frozen"), None).unwrap();
    assert_eq!(out.state.ed, donor.state.ed);
    assert_eq!(out.state.opt_d.step, 0);
    assert!(out.records.iter().all(|r| r.lcl > 0.0 && r.lcld.is_finite()));

    let mismatched = TrainConfig {
        embed_base_channels: 6,
        ..cfg.clone()
    };
    assert!(matches!(TrainState::init(&mismatched), Err(Error::Config(_))));
}

#[test]
fn identical_runs_write_identical_logs_and_resume_continues_exactly() {
    let data = toy_set(3);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        workers: 2,
        steps: 6,
        checkpoint_every: 3,
        ..tiny()
    };
    let a = train(&cfg, &data, &dir.path().join("a"), None).unwrap();
    let b = train(&cfg, &data, &dir.path().join("b"), None).unwrap();
    let log = |d: &str| std::fs::read(dir.path().join(d).join("log.csv")).unwrap();
    assert_eq!(log("a"), log("b"));
    assert_eq!(a.state.sr, b.state.sr);
    assert!(dir.path().join("a/ckpt_3.bin").exists());

    let resumed = train(&cfg, &data, &dir.path().join("c"), Some(&dir.path().join("a/ckpt_3.bin"))).unwrap();
    assert_eq!(resumed.records.len(), 3);
    assert_eq!(resumed.state.sr, a.state.sr);
    assert_eq!(resumed.state.ed, a.state.ed);
    for (x, y) in resumed.records.iter().zip(&a.records[3..]) {
        assert_eq!((x.step, x.l1, x.lcl, x.lcld, x.total), (y.step, y.l1, y.lcl, y.lcld, y.total));
    }

    // a different lane count is a different (but valid) stream
    let one_lane = train(&TrainConfig { workers: 1, ..cfg }, &data, &dir.path().join("d"), None).unwrap();
    assert_ne!(one_lane.state.sr, a.state.sr);
}

#[test]
fn configuration_errors() {
    assert!(matches!(
        TrainState::init(&TrainConfig { batch_size: 1, ..tiny() }),
        Err(Error::Config(_))
    ));
    assert!(TrainState::init(&TrainConfig {
        batch_size: 1,
        embedding_mode: EmbeddingMode::Off,
        ..tiny()
    })
    .is_ok());
    assert!(matches!(TrainState::init(&TrainConfig { loss_layers: 5, ..tiny() }), Err(Error::Config(_))));
    assert!(matches!(TrainState::init(&TrainConfig { alpha: -1.0, ..tiny() }), Err(Error::Config(_))));
    assert!(matches!(
        TrainConfig::from_json(r#"{"alpha": 0.2, "alpah": 1}"#),
        Err(Error::Config(_))
    ));
    let mut cfg = TrainConfig::from_json(r#"{"alpha": 0.2, "embedding_mode": "off"}"#).unwrap();
    assert_eq!(cfg.embedding_mode, EmbeddingMode::Off);
    cfg.apply_override("alpha=5").unwrap();
    cfg.apply_override("embedding_mode=frozen:/tmp/x.bin").unwrap();
    assert_eq!(cfg.alpha, 5.0);
    assert_eq!(cfg.embedding_mode, EmbeddingMode::Frozen("/tmp/x.bin".into()));
    assert!(cfg.apply_override("nonsense=1").is_err());
    assert!(cfg.apply_override("alpha").is_err());
    assert!(TrainConfig::from_json(r#"{"embedding_mode": "sometimes"}"#).is_err());
}

#[test]
fn spectral_norm_and_fft_variants_train() {
    let data = toy_set(2);
    for cfg in [
        TrainConfig { spectral_norm: true, steps: 2, ..tiny() },
        TrainConfig {
            transform: pclsr::spectral::Transform::Fft,
            steps: 2,
            ..tiny()
        },
        TrainConfig {
            transform: pclsr::spectral::Transform::None,
            steps: 2,
            ..tiny()
        },
    ] {
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cfg, &data, dir.path(), None).unwrap();
        assert!(out.records.iter().all(|r| r.total.is_finite()));
    }
}
