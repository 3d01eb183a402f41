use anyface_core::dataset::Dataset;
use anyface_core::encoders::{EncoderConfig, Encoders};
use anyface_core::model::Model;
use anyface_core::trainer::{
    losses_csv, train, train_with, Batch, TrainConfig, Trainer, LOSS_COLUMNS,
};
use anyface_core::world::{World, WorldConfig};
use anyface_core::Error;

fn fixture(count: usize) -> (Dataset, Encoders) {
    let data = Dataset::generate(11, count, WorldConfig::default()).unwrap();
    let enc = Encoders::new(
        EncoderConfig::default(),
        data.world.vocab(),
        data.world.config().pixels(),
        5,
    );
    (data, enc)
}

fn small_config(out: &std::path::Path) -> TrainConfig {
    TrainConfig {
        steps: 20,
        checkpoint_interval: 10,
        holdout: 8,
        out_dir: out.to_path_buf(),
        ..Default::default()
    }
}

#[test]
fn latent_regression_converges() {
    let (data, enc) = fixture(64);
    let mut cfg = TrainConfig::default();
    cfg.loss.lambda_cmt = 0.0;
    cfg.loss.lambda_rec = 0.0;
    let mut tr = Trainer::new(cfg, &data.world, &enc, &data.samples).unwrap();
    let first = tr.iterate().unwrap().reconstruction.mse;
    let mut last = first;
    for _ in 1..500 {
        last = tr.iterate().unwrap().reconstruction.mse;
    }
    assert!(last < 0.2 * first, "mse {first} -> {last}");
}

#[test]
fn identical_seeds_give_identical_histories() {
    let (data, enc) = fixture(32);
    let run = || {
        let mut tr =
            Trainer::new(TrainConfig::default(), &data.world, &enc, &data.samples).unwrap();
        for _ in 0..15 {
            tr.iterate().unwrap();
        }
        (tr.history.clone(), tr.model.digest())
    };
    let (a, da) = run();
    let (b, db) = run();
    assert_eq!(a, b);
    assert_eq!(da, db);
    let mut other = Trainer::new(
        TrainConfig {
            seed: 1,
            ..Default::default()
        },
        &data.world,
        &enc,
        &data.samples,
    )
    .unwrap();
    other.iterate().unwrap();
    assert_ne!(other.history[0], a[0]);
}

#[test]
fn frozen_components_do_not_move() {
    let (data, enc) = fixture(32);
    let before = (data.world.digest(), enc.digest());
    let mut tr = Trainer::new(TrainConfig::default(), &data.world, &enc, &data.samples).unwrap();
    for _ in 0..100 {
        tr.iterate().unwrap();
    }
    assert_eq!(before, (data.world.digest(), enc.digest()));
    assert_eq!(tr.frozen_hashes().world, before.0);
}

#[test]
fn negatives_come_from_other_samples() {
    let (data, enc) = fixture(40);
    let mut tr = Trainer::new(TrainConfig::default(), &data.world, &enc, &data.samples).unwrap();
    for _ in 0..200 {
        let b = tr.draw_batch().unwrap();
        assert_eq!(b.samples.len(), 16);
        let mut distinct = b.samples.clone();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct.len(), 16);
        for (&pos, &(neg, _)) in b.samples.iter().zip(&b.negatives) {
            assert_ne!(data.samples[pos].id, data.samples[neg].id);
        }
    }
}

#[test]
fn batch_of_one_is_rejected() {
    let (data, enc) = fixture(8);
    let cfg = TrainConfig {
        batch_size: 1,
        ..Default::default()
    };
    assert!(matches!(
        Trainer::new(cfg, &data.world, &enc, &data.samples),
        Err(Error::NegativeSampling(1))
    ));
    let mut tr = Trainer::new(TrainConfig::default(), &data.world, &enc, &data.samples).unwrap();
    let mut b = tr.draw_batch().unwrap();
    b.samples.truncate(1);
    let h = tr.synthesis_hidden(&b).unwrap();
    assert!(matches!(
        tr.synthesis_step(&b, &h),
        Err(Error::NegativeSampling(1))
    ));
}

#[test]
fn synthesis_loss_vanishes_when_negative_equals_positive() {
    let (data, enc) = fixture(16);
    let mut cfg = TrainConfig::default();
    cfg.loss.lambda_cmt = 0.0;
    cfg.loss.lambda_clip = 0.0;
    cfg.loss.margin = 0.0;
    let mut tr = Trainer::new(cfg, &data.world, &enc, &data.samples).unwrap();
    let drawn = tr.draw_batch().unwrap();
    // One caption per prompt so the negative prompt is literally the positive one.
    let batch = Batch {
        negatives: drawn
            .samples
            .iter()
            .zip(&drawn.captions)
            .map(|(&s, c)| (s, c[0]))
            .collect(),
        captions: drawn.captions.iter().map(|c| vec![c[0]]).collect(),
        ..drawn
    };
    let h = tr.synthesis_hidden(&batch).unwrap();
    let r = tr.synthesis_step(&batch, &h).unwrap();
    assert_eq!(r.total, 0.0);
    assert_eq!(r.dt, 0.0);
}

#[test]
fn rejects_bad_splits_and_caption_counts() {
    let (data, enc) = fixture(8);
    for (m, n) in [(5, 2), (9, 0), (6, 3)] {
        let cfg = TrainConfig {
            m_split: m,
            n_split: n,
            ..Default::default()
        };
        assert!(matches!(
            Trainer::new(cfg, &data.world, &enc, &data.samples),
            Err(Error::Split { .. })
        ));
    }
    let cfg = TrainConfig {
        max_captions: 11,
        ..Default::default()
    };
    assert!(Trainer::new(cfg, &data.world, &enc, &data.samples).is_err());
}

#[test]
fn unknown_config_key_is_rejected() {
    let err = serde_json::from_str::<TrainConfig>(r#"{"lr": 0.1}"#).unwrap_err();
    assert!(err.to_string().contains("lr"), "{err}");
    let ok: TrainConfig =
        serde_json::from_str(r#"{"learning_rate": 0.01, "loss": {"lambda_cmt": 0}}"#).unwrap();
    assert_eq!(ok.learning_rate, 0.01);
    assert_eq!(ok.loss.lambda_cmt, 0.0);
    assert_eq!(ok.steps, 2000);
}

#[test]
fn checkpoint_round_trip_reproduces_probe_losses() {
    let (data, enc) = fixture(32);
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut tr = Trainer::new(cfg.clone(), &data.world, &enc, &data.samples).unwrap();
    for _ in 0..cfg.steps {
        tr.iterate().unwrap();
    }
    let path = tr.save_checkpoint(dir.path()).unwrap();
    let batch = tr.draw_batch().unwrap();
    let expected = tr.probe(&batch).unwrap();

    let (model, header) = Model::load(&path).unwrap();
    Model::verify_frozen(&header, &data.world, &enc).unwrap();
    assert_eq!(model.digest(), tr.model.digest());
    assert_eq!(header.step, cfg.steps);
    let mut restored = Trainer::new(cfg, &data.world, &enc, &data.samples).unwrap();
    restored.model = model;
    let got = restored.probe(&batch).unwrap();
    let pairs = [
        (expected.synthesis.total, got.synthesis.total),
        (expected.reconstruction.total, got.reconstruction.total),
        (expected.synthesis.clip, got.synthesis.clip),
        (expected.reconstruction.mse, got.reconstruction.mse),
    ];
    for (a, b) in pairs {
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }
}

#[test]
fn frozen_hash_mismatch_is_detected() {
    let (data, enc) = fixture(16);
    let dir = tempfile::tempdir().unwrap();
    let tr = Trainer::new(small_config(dir.path()), &data.world, &enc, &data.samples).unwrap();
    let path = tr.save_checkpoint(dir.path()).unwrap();
    let (_, header) = Model::load(&path).unwrap();
    let other = Encoders::new(
        EncoderConfig::default(),
        data.world.vocab(),
        data.world.config().pixels(),
        6,
    );
    assert!(Model::verify_frozen(&header, &data.world, &other).is_err());
    let world = World::new(99).unwrap();
    assert!(Model::verify_frozen(&header, &world, &enc).is_err());
}

#[test]
fn train_writes_checkpoints_and_loss_log() {
    let (data, enc) = fixture(32);
    let dir = tempfile::tempdir().unwrap();
    data.write(&dir.path().join("data")).unwrap();
    enc.save(&dir.path().join("enc"), &enc.meta(None, 32, vec![]))
        .unwrap();
    let cfg = TrainConfig {
        dataset: dir.path().join("data"),
        encoders: dir.path().join("enc"),
        ..small_config(&dir.path().join("run"))
    };
    let out = train(&cfg).unwrap();
    let names: Vec<_> = out
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_owned())
        .collect();
    assert_eq!(names, ["model_step10.ckpt", "model_step20.ckpt"]);
    let csv = std::fs::read_to_string(cfg.out_dir.join("losses.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(LOSS_COLUMNS));
    assert_eq!(lines.count(), cfg.steps);
    assert_eq!(csv, losses_csv(&out.history));

    let again = train_with(&cfg, &data.world, &enc, &data.samples[..32 - cfg.holdout]).unwrap();
    let bytes = |p: &std::path::Path| std::fs::read(p).unwrap();
    assert_eq!(bytes(&out.checkpoints[1]), bytes(&again.checkpoints[1]));
}

#[test]
fn holdout_must_leave_training_samples() {
    let (data, enc) = fixture(8);
    let dir = tempfile::tempdir().unwrap();
    data.write(&dir.path().join("data")).unwrap();
    enc.save(&dir.path().join("enc"), &enc.meta(None, 8, vec![]))
        .unwrap();
    let cfg = TrainConfig {
        dataset: dir.path().join("data"),
        encoders: dir.path().join("enc"),
        ..small_config(&dir.path().join("run"))
    };
    assert!(matches!(train(&cfg), Err(Error::Config(_))));
}

#[test]
fn missing_artifacts_are_path_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        dataset: dir.path().join("nope"),
        ..small_config(dir.path())
    };
    assert!(matches!(train(&cfg), Err(Error::Io { .. })));
}

#[test]
fn saturated_images_still_train() {
    let world = WorldConfig {
        decoder_gain: 6.0,
        ..Default::default()
    };
    let data = Dataset::generate(11, 16, world).unwrap();
    let saturated = data
        .samples
        .iter()
        .filter(|s| data.world.invert(&s.image).is_err())
        .count();
    assert!(saturated > 0);
    let enc = Encoders::new(
        EncoderConfig::default(),
        data.world.vocab(),
        data.world.config().pixels(),
        5,
    );
    let mut tr = Trainer::new(TrainConfig::default(), &data.world, &enc, &data.samples).unwrap();
    assert!(tr.iterate().unwrap().reconstruction.mse.is_finite());
}
