use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use anyface_core::dataset::Dataset;
use anyface_core::encoders::{retrieval_accuracy, Encoders};
use anyface_core::tensor::Tensor;

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anyface-lab"))
        .args(args)
        .output()
        .expect("spawn anyface-lab")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A dataset, pretrained encoders and a short training run, built once.
struct Pipeline {
    _dir: tempfile::TempDir,
    data: PathBuf,
    encoders: PathBuf,
    checkpoint: PathBuf,
    root: PathBuf,
}

fn pipeline() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        let encoders = root.join("enc");
        let out = lab(&[
            "gen-data",
            "--seed",
            "4",
            "--count",
            "700",
            "--out",
            s(&data),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let out = lab(&[
            "pretrain-encoders",
            "--data",
            s(&data),
            "--out",
            s(&encoders),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let config = serde_json::json!({
            "steps": 30,
            "checkpoint_interval": 0,
            "holdout": 100,
            "dataset": data,
            "encoders": encoders,
            "out_dir": root.join("run"),
        });
        let cfg_path = root.join("train.json");
        std::fs::write(&cfg_path, config.to_string()).unwrap();
        let out = lab(&["train", "--config", s(&cfg_path)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        Pipeline {
            checkpoint: root.join("run/model_step30.ckpt"),
            _dir: dir,
            data,
            encoders,
            root,
        }
    })
}

#[test]
fn gen_data_is_deterministic_and_counts_samples() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = lab(&["gen-data", "--seed", "9", "--count", "64", "--out", s(d)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    assert_eq!(
        Dataset::manifest_hash(&a).unwrap(),
        Dataset::manifest_hash(&b).unwrap()
    );
    let tns = std::fs::read_dir(&a)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "tns")
        })
        .count();
    assert_eq!(tns, 64);
}

#[test]
fn zero_count_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(&["gen-data", "--count", "0", "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("count must be positive"));
}

#[test]
fn pretraining_validation_and_shortfall() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = lab(&[
        "pretrain-encoders",
        "--data",
        s(&missing),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 2);

    let data = dir.path().join("data");
    assert_eq!(
        code(&lab(&["gen-data", "--count", "600", "--out", s(&data)])),
        0
    );
    let enc = dir.path().join("enc");
    let out = lab(&[
        "pretrain-encoders",
        "--data",
        s(&data),
        "--out",
        s(&enc),
        "--epochs",
        "0",
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("accuracy"));
    assert!(!enc.exists());
}

#[test]
fn encoder_metadata_matches_a_fresh_measurement() {
    let p = pipeline();
    let data = Dataset::read(&p.data).unwrap();
    let (enc, meta) = Encoders::load(&p.encoders, data.world.vocab()).unwrap();
    let held: Vec<_> = data
        .samples
        .iter()
        .filter(|s| meta.held_out_ids.contains(&s.id))
        .collect();
    assert_eq!(held.len(), meta.held_out_ids.len());
    let again = retrieval_accuracy(&enc, &held, meta.retrieval_batch).unwrap();
    let recorded = meta.retrieval_accuracy.unwrap();
    assert!((again - recorded).abs() <= 1e-9, "{recorded} vs {again}");
    assert!(recorded >= 0.9);
}

#[test]
fn train_writes_one_loss_row_per_step() {
    let p = pipeline();
    let csv = std::fs::read_to_string(p.root.join("run/losses.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    for col in [
        "step", "L_S", "L_T", "L_DT", "L_CMT_T", "L_CLIP", "L_MSE", "L_CMT_I", "L_Rec",
    ] {
        assert!(header.split(',').any(|c| c == col), "{header}");
    }
    assert_eq!(csv.lines().count(), 31);
}

#[test]
fn train_rejects_unknown_keys_and_reports_divergence() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"lr": 0.01}"#).unwrap();
    let out = lab(&["train", "--config", s(&bad)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("lr"), "{}", stderr(&out));

    let wild = dir.path().join("wild.json");
    let cfg = serde_json::json!({
        "steps": 50,
        "learning_rate": 1e200,
        "holdout": 100,
        "dataset": p.data,
        "encoders": p.encoders,
        "out_dir": dir.path().join("run"),
    });
    std::fs::write(&wild, cfg.to_string()).unwrap();
    let out = lab(&["train", "--config", s(&wild)]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"));
}

fn synth(out: &Path, captions: &[&str]) -> Output {
    let p = pipeline();
    let mut args = vec![
        "synth",
        "--checkpoint",
        s(&p.checkpoint),
        "--style-seed",
        "3",
        "--out",
        s(out),
    ];
    for c in captions {
        args.extend(["--caption", c]);
    }
    lab(&args)
}

#[test]
fn synth_arity_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one.ppm");
    let out = synth(&one, &["smiling blond"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(one.with_extension("tns").exists());
    let again = dir.path().join("again.ppm");
    assert_eq!(code(&synth(&again, &["smiling blond"])), 0);
    assert_eq!(std::fs::read(&one).unwrap(), std::fs::read(&again).unwrap());
    assert!(std::fs::read(&one).unwrap().starts_with(b"P6\n"));

    let five = ["smiling", "blond", "young", "male", "glasses"];
    assert_eq!(code(&synth(&dir.path().join("five.ppm"), &five)), 0);
    let eleven = ["smiling"; 11];
    assert_eq!(code(&synth(&dir.path().join("eleven.ppm"), &eleven)), 2);
    let out = synth(&dir.path().join("bad.ppm"), &["not-a-word"]);
    assert_eq!(code(&out), 2);
}

fn manipulate(extra: &[&str]) -> Output {
    let p = pipeline();
    let mut args = vec![
        "manipulate",
        "--checkpoint",
        s(&p.checkpoint),
        "--caption",
        "smiling",
    ];
    args.extend(extra);
    lab(&args)
}

#[test]
fn manipulation_split_zero_sweep_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src.ppm");
    assert_eq!(code(&synth(&src, &["blond woman"])), 0);

    let same = dir.path().join("same.ppm");
    let out = manipulate(&["--source", s(&src), "--m-split", "0", "--out", s(&same)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (a, b) = (std::fs::read(&src).unwrap(), std::fs::read(&same).unwrap());
    assert_eq!(a.len(), b.len());
    assert!(a.iter().zip(&b).all(|(x, y)| x.abs_diff(*y) <= 1));

    // The latent file from synth is an equally valid source.
    let from_latent = dir.path().join("lat.ppm");
    let tns = src.with_extension("tns");
    assert_eq!(
        code(&manipulate(&[
            "--source",
            s(&tns),
            "--m-split",
            "3",
            "--out",
            s(&from_latent)
        ])),
        0
    );

    let strip = dir.path().join("strip");
    assert_eq!(
        code(&manipulate(&[
            "--source",
            s(&src),
            "--sweep",
            "--out",
            s(&strip)
        ])),
        0
    );
    let count = std::fs::read_dir(&strip).unwrap().count();
    assert_eq!(count, 9);

    let out = manipulate(&["--source", s(&src), "--m-split", "9", "--out", s(&same)]);
    assert_eq!(code(&out), 2);

    // A latent far outside the training range decodes to pixels at exactly ±1.
    let t = Tensor::read_tns(&mut std::io::BufReader::new(
        std::fs::File::open(&tns).unwrap(),
    ))
    .unwrap();
    let huge = Tensor::new(
        t.shape().to_vec(),
        t.data().iter().map(|v| v * 1e4).collect(),
    )
    .unwrap();
    let blown = dir.path().join("blown.tns");
    huge.write_tns(&mut std::fs::File::create(&blown).unwrap())
        .unwrap();
    let out = manipulate(&["--source", s(&blown), "--m-split", "4", "--out", s(&same)]);
    assert_eq!(code(&out), 5, "{}", stderr(&out));
}

#[test]
fn eval_report_has_headline_keys() {
    let p = pipeline();
    let report = p.root.join("eval/report.json");
    let out = lab(&[
        "eval",
        "--checkpoint",
        s(&p.checkpoint),
        "--data",
        s(&p.data),
        "--report",
        s(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for k in ["fid", "rfrr", "diversity"] {
        assert!(v[k].is_number(), "{v}");
    }
    assert_eq!(v["samples"], 100);
}

#[test]
fn ablate_writes_rows_curves_and_plots() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let spec = serde_json::json!({
        "base": {"steps": 4, "dataset": p.data, "encoders": p.encoders},
        "seeds": [0, 1, 2],
        "eval_count": 100,
        "curve_interval": 2,
        "eval": {"gallery_size": 8, "diversity_draws": 2, "diversity_prompts": 3},
        "out_dir": dir.path().join("abl"),
    });
    let path = dir.path().join("spec.json");
    std::fs::write(&path, spec.to_string()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_anyface-lab"))
        .args(["ablate", "--configs", s(&path)])
        .env("ANYFACE_LAB_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let abl = dir.path().join("abl");
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(abl.join("report.json")).unwrap()).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 9);
    for name in ["full", "no-cmt", "pairwise"] {
        assert!(v["variants"][name]["fid"].is_number());
        assert!(abl.join(format!("fid_{name}.ppm")).exists());
    }
    assert!(abl.join("fid_curves.ppm").exists());
    let csv = std::fs::read_to_string(abl.join("curves.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 9 * 3);

    let out = Command::new(env!("CARGO_BIN_EXE_anyface-lab"))
        .args(["ablate", "--configs", s(&path)])
        .env("ANYFACE_LAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn gradcheck_passes() {
    let out = lab(&["gradcheck", "--points", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("dt_loss_prose_wt") && !stdout.contains("FAIL"),
        "{stdout}"
    );
}

#[test]
fn list_vocab_prints_every_word() {
    let out = lab(&["--list-vocab"]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 48);
    assert!(stdout.lines().any(|l| l.ends_with(" smiling")));
}

#[test]
fn missing_command_is_usage_error() {
    assert_eq!(code(&lab(&[])), 2);
    assert_eq!(code(&lab(&["frobnicate"])), 2);
}
