//! Variant-by-seed training sweeps with held-out evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalConfig, Evaluator};
use crate::model::Model;
use crate::rng::derive;
use crate::trainer::{SynthesisLoss, TrainConfig, Trainer};
use crate::world::{PairedSample, World};

pub const FULL: &str = "full";
pub const NO_CMT: &str = "no-cmt";
pub const PAIRWISE: &str = "pairwise";

#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

/// The three standard variants: everything on, `λ_CMT = 0`, and the
/// pairwise loss in place of the triplet term.
pub fn standard_variants(base: &TrainConfig) -> Vec<Variant> {
    let mut no_cmt = base.clone();
    no_cmt.loss.lambda_cmt = 0.0;
    let pairwise = TrainConfig {
        synthesis_loss: SynthesisLoss::Pairwise,
        ..base.clone()
    };
    vec![
        Variant {
            name: FULL.into(),
            config: base.clone(),
        },
        Variant {
            name: NO_CMT.into(),
            config: no_cmt,
        },
        Variant {
            name: PAIRWISE.into(),
            config: pairwise,
        },
    ]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub name: String,
    /// Partial config merged over the base config.
    #[serde(default)]
    pub overrides: Value,
}

/// The `ablate --configs` file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    pub base: TrainConfig,
    /// Empty means the standard three.
    pub variants: Vec<VariantSpec>,
    pub seeds: Vec<u64>,
    /// Trailing samples held out for evaluation.
    pub eval_count: usize,
    pub curve_interval: usize,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            base: TrainConfig::default(),
            variants: Vec::new(),
            seeds: vec![0, 1, 2],
            eval_count: 200,
            curve_interval: 100,
            eval: EvalConfig::default(),
            out_dir: "ablation".into(),
        }
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o.clone(),
    }
}

impl AblationSpec {
    pub fn resolve_variants(&self) -> Result<Vec<Variant>> {
        if self.variants.is_empty() {
            return Ok(standard_variants(&self.base));
        }
        let mut seen = std::collections::BTreeSet::new();
        self.variants
            .iter()
            .map(|v| {
                if !seen.insert(v.name.as_str()) {
                    return Err(Error::Config(format!("duplicate variant {:?}", v.name)));
                }
                let mut json = serde_json::to_value(&self.base)?;
                if !v.overrides.is_null() {
                    merge(&mut json, &v.overrides);
                }
                let config = serde_json::from_value(json)
                    .map_err(|e| Error::Config(format!("variant {:?}: {e}", v.name)))?;
                Ok(Variant {
                    name: v.name.clone(),
                    config,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub variant: String,
    pub seed: u64,
    pub steps: usize,
    pub fid: f64,
    pub rfrr: f64,
    pub diversity: f64,
    /// Mean cosine between text latents and the average latent.
    pub cos_to_average: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub variant: String,
    pub seed: u64,
    pub fid: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub fid: f64,
    pub rfrr: f64,
    pub diversity: f64,
    pub cos_to_average: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub variants: BTreeMap<String, VariantSummary>,
    pub rows: Vec<RunRow>,
    #[serde(skip)]
    pub curves: Vec<CurvePoint>,
    #[serde(skip)]
    pub models: Vec<(String, u64, Model)>,
}

impl AblationReport {
    pub fn row(&self, variant: &str, seed: u64) -> Option<&RunRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.seed == seed)
    }

    pub fn curve(&self, variant: &str, seed: u64) -> Vec<(usize, f64)> {
        self.curves
            .iter()
            .filter(|c| c.variant == variant && c.seed == seed)
            .map(|c| (c.step, c.fid))
            .collect()
    }

    pub fn model(&self, variant: &str, seed: u64) -> Option<&Model> {
        self.models
            .iter()
            .find(|(v, s, _)| v == variant && *s == seed)
            .map(|(_, _, m)| m)
    }

    pub fn curves_csv(&self) -> String {
        let mut out = String::from("step,variant,seed,fid\n");
        for c in &self.curves {
            writeln!(out, "{},{},{},{}", c.step, c.variant, c.seed, c.fid).unwrap();
        }
        out
    }

    /// Writes `report.json` and `curves.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let report = dir.join("report.json");
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&report, json + "\n").map_err(|e| Error::io(&report, e))?;
        let curves = dir.join("curves.csv");
        std::fs::write(&curves, self.curves_csv()).map_err(|e| Error::io(&curves, e))
    }
}

/// First curve step whose value is at or below `target`.
pub fn first_step_at_or_below(curve: &[(usize, f64)], target: f64) -> Option<usize> {
    curve.iter().find(|&&(_, v)| v <= target).map(|&(s, _)| s)
}

struct RunOutput {
    row: RunRow,
    curve: Vec<CurvePoint>,
    model: Model,
}

fn run_one(
    variant: &Variant,
    seed: u64,
    world: &World,
    encoders: &Encoders,
    train: &[PairedSample],
    held_out: &[PairedSample],
    spec: &AblationSpec,
) -> Result<RunOutput> {
    let config = TrainConfig {
        seed,
        ..variant.config.clone()
    };
    let steps = config.steps;
    let ev = Evaluator::new(world, encoders);
    let fid_seed = derive(spec.eval.seed, 1);
    let mut trainer = Trainer::new(config, world, encoders, train)?;
    let mut curve = Vec::new();
    let mut point = |step: usize, model: &Model| -> Result<()> {
        curve.push(CurvePoint {
            step,
            variant: variant.name.clone(),
            seed,
            fid: ev.toy_fid(model, held_out, fid_seed)?,
        });
        Ok(())
    };
    point(0, &trainer.model)?;
    for step in 1..=steps {
        trainer.iterate()?;
        if step % spec.curve_interval == 0 || step == steps {
            point(step, &trainer.model)?;
        }
    }
    let model = trainer.model;
    let report = evaluate(&ev, &model, held_out, &spec.eval)?;
    Ok(RunOutput {
        row: RunRow {
            variant: variant.name.clone(),
            seed,
            steps,
            fid: report.fid,
            rfrr: report.rfrr,
            diversity: report.diversity,
            cos_to_average: ev.mean_cosine_to_average(&model, held_out)?,
        },
        curve,
        model,
    })
}

/// Trains every (variant, seed) pair on all but the last `eval_count`
/// samples and evaluates on the rest, using up to `threads` workers.
pub fn run_ablation(
    variants: &[Variant],
    world: &World,
    encoders: &Encoders,
    samples: &[PairedSample],
    spec: &AblationSpec,
    threads: usize,
) -> Result<AblationReport> {
    if variants.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one variant and one seed".into(),
        ));
    }
    if spec.curve_interval == 0 {
        return Err(Error::Config("curve_interval must be positive".into()));
    }
    let needed = spec.eval.gallery_size.max(encoders.embed_dim() + 1);
    if spec.eval_count < needed || samples.len() <= spec.eval_count {
        return Err(Error::SampleCount {
            required: needed + 1,
            got: samples.len(),
        });
    }
    let (train, held_out) = samples.split_at(samples.len() - spec.eval_count);
    let jobs: Vec<(&Variant, u64)> = variants
        .iter()
        .flat_map(|v| spec.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<Mutex<Option<Result<RunOutput>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(variant, seed)) = jobs.get(i) else {
                    break;
                };
                let out =
                    run_one(variant, seed, world, encoders, train, held_out, spec).map_err(|e| {
                        Error::Variant {
                            variant: variant.name.clone(),
                            seed,
                            source: Box::new(e),
                        }
                    });
                *results[i].lock().unwrap() = Some(out);
            });
        }
    });

    let mut report = AblationReport {
        variants: BTreeMap::new(),
        rows: Vec::new(),
        curves: Vec::new(),
        models: Vec::new(),
    };
    for (slot, &(variant, seed)) in results.into_iter().zip(&jobs) {
        let out = slot.into_inner().unwrap().expect("every job ran")?;
        report.rows.push(out.row);
        report.curves.extend(out.curve);
        report.models.push((variant.name.clone(), seed, out.model));
    }
    for v in variants {
        let rows: Vec<&RunRow> = report.rows.iter().filter(|r| r.variant == v.name).collect();
        let mean =
            |f: fn(&RunRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64;
        report.variants.insert(
            v.name.clone(),
            VariantSummary {
                fid: mean(|r| r.fid),
                rfrr: mean(|r| r.rfrr),
                diversity: mean(|r| r.diversity),
                cos_to_average: mean(|r| r.cos_to_average),
                seeds: rows.len(),
            },
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_merge_into_base() {
        let spec: AblationSpec = serde_json::from_str(
            r#"{"base": {"steps": 7}, "variants": [
                {"name": "a"},
                {"name": "b", "overrides": {"loss": {"lambda_cmt": 0}, "synthesis_loss": "pairwise"}}
            ]}"#,
        )
        .unwrap();
        let v = spec.resolve_variants().unwrap();
        assert_eq!(v[0].config.steps, 7);
        assert_eq!(v[1].config.steps, 7);
        assert_eq!(v[1].config.loss.lambda_cmt, 0.0);
        assert_eq!(v[1].config.loss.lambda_clip, v[0].config.loss.lambda_clip);
        assert_eq!(v[1].config.synthesis_loss, SynthesisLoss::Pairwise);
    }

    #[test]
    fn bad_override_names_the_variant() {
        let spec: AblationSpec =
            serde_json::from_str(r#"{"variants": [{"name": "x", "overrides": {"lr": 1}}]}"#)
                .unwrap();
        let err = spec.resolve_variants().unwrap_err().to_string();
        assert!(err.contains("\"x\"") && err.contains("lr"), "{err}");
        let dup: AblationSpec =
            serde_json::from_str(r#"{"variants": [{"name": "x"}, {"name": "x"}]}"#).unwrap();
        assert!(dup.resolve_variants().is_err());
    }

    #[test]
    fn standard_variants_differ_only_where_named() {
        let v = standard_variants(&TrainConfig::default());
        let names: Vec<_> = v.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(names, [FULL, NO_CMT, PAIRWISE]);
        assert_eq!(v[1].config.loss.lambda_cmt, 0.0);
        assert_eq!(v[2].config.loss, v[0].config.loss);
        assert_eq!(v[2].config.synthesis_loss, SynthesisLoss::Pairwise);
    }

    #[test]
    fn first_crossing() {
        let c = [(0, 3.0), (100, 2.0), (200, 1.0), (300, 1.5)];
        assert_eq!(first_step_at_or_below(&c, 1.5), Some(200));
        assert_eq!(first_step_at_or_below(&c, 0.5), None);
    }
}
