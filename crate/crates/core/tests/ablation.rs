use anyface_core::ablation::{
    run_ablation, standard_variants, AblationSpec, FULL, NO_CMT, PAIRWISE,
};
use anyface_core::dataset::Dataset;
use anyface_core::encoders::{EncoderConfig, Encoders};
use anyface_core::metrics::EvalConfig;
use anyface_core::trainer::TrainConfig;
use anyface_core::world::WorldConfig;
use anyface_core::Error;

fn spec() -> AblationSpec {
    AblationSpec {
        base: TrainConfig {
            steps: 12,
            ..Default::default()
        },
        seeds: vec![3, 4],
        eval_count: 40,
        curve_interval: 5,
        eval: EvalConfig {
            gallery_size: 8,
            diversity_draws: 3,
            diversity_prompts: 4,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn one_row_per_variant_and_seed_regardless_of_threads() {
    let data = Dataset::generate(2, 90, WorldConfig::default()).unwrap();
    let enc = Encoders::new(
        EncoderConfig::default(),
        data.world.vocab(),
        data.world.config().pixels(),
        1,
    );
    let spec = spec();
    let variants = standard_variants(&spec.base);
    let one = run_ablation(&variants, &data.world, &enc, &data.samples, &spec, 1).unwrap();
    assert_eq!(one.rows.len(), 6);
    for v in [FULL, NO_CMT, PAIRWISE] {
        for s in [3, 4] {
            assert!(one.row(v, s).is_some());
            let steps: Vec<_> = one.curve(v, s).iter().map(|p| p.0).collect();
            assert_eq!(steps, [0, 5, 10, 12]);
        }
        assert_eq!(one.variants[v].seeds, 2);
    }
    let three = run_ablation(&variants, &data.world, &enc, &data.samples, &spec, 3).unwrap();
    assert_eq!(one.rows, three.rows);
    assert_eq!(one.curves, three.curves);

    let dir = tempfile::tempdir().unwrap();
    one.write(dir.path()).unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 6);
    assert!(json["variants"][FULL]["fid"].is_number());
    let csv = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,variant,seed,fid"));
    assert_eq!(csv.lines().count(), 1 + 6 * 4);
}

#[test]
fn training_errors_name_the_variant() {
    let data = Dataset::generate(2, 90, WorldConfig::default()).unwrap();
    let enc = Encoders::new(
        EncoderConfig::default(),
        data.world.vocab(),
        data.world.config().pixels(),
        1,
    );
    let spec = spec();
    let mut variants = standard_variants(&spec.base);
    variants[2].config.batch_size = 1;
    let err = run_ablation(&variants, &data.world, &enc, &data.samples, &spec, 2).unwrap_err();
    match err {
        Error::Variant {
            variant, source, ..
        } => {
            assert_eq!(variant, PAIRWISE);
            assert!(matches!(*source, Error::NegativeSampling(1)));
        }
        other => panic!("{other}"),
    }
}

#[test]
fn too_few_samples_for_the_held_out_split() {
    let data = Dataset::generate(2, 40, WorldConfig::default()).unwrap();
    let enc = Encoders::new(
        EncoderConfig::default(),
        data.world.vocab(),
        data.world.config().pixels(),
        1,
    );
    let spec = spec();
    let r = run_ablation(
        &standard_variants(&spec.base),
        &data.world,
        &enc,
        &data.samples,
        &spec,
        1,
    );
    assert!(matches!(r, Err(Error::SampleCount { .. })));
}
