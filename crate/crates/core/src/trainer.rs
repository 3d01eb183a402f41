//! Alternating two-stream training: a reconstruction step (image → latent)
//! then a synthesis step (caption → latent) per iteration, coupled only
//! through the detached hidden-feature transfer loss.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::cmd::{check_split, compose_var};
use crate::dataset::Dataset;
use crate::encoders::{normalize, Encoders};
use crate::error::{Error, Result};
use crate::losses::{
    clip_loss, cmt_loss, dt_loss, mse_loss, pair_loss, rec_loss, reconstruction_objective,
    synthesis_objective, LossWeights, ReconstructionParts, SynthesisParts,
};
use crate::model::{FrozenHashes, Model};
use crate::nn::{clip_grad_norm, Adam, AdamConfig};
use crate::rng::{derive, normals, seeded, Rng};
use crate::tensor::Tensor;
use crate::world::{stack_images, PairedSample, World, CAPTIONS_PER_SAMPLE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthesisLoss {
    DiverseTriplet,
    /// The pairwise regression baseline in place of the triplet term.
    Pairwise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m_split: usize,
    pub n_split: usize,
    pub loss: LossWeights,
    pub synthesis_loss: SynthesisLoss,
    /// Captions stacked per synthesis prompt are drawn from `1..=max_captions`.
    pub max_captions: usize,
    /// Draw the number of style rows per batch from `0..=n_split` instead of
    /// always using `n_split`, so every text row is trained through the decoder.
    pub style_mixing: bool,
    /// Global gradient-norm cap per stream and step; `0` disables clipping.
    pub grad_clip: f64,
    pub cmd: crate::cmd::CmdConfig,
    pub dataset: PathBuf,
    pub encoders: PathBuf,
    pub out_dir: PathBuf,
    /// Steps between checkpoints; the final step is always written.
    pub checkpoint_interval: usize,
    /// Trailing dataset samples that [`train`] leaves out for evaluation.
    pub holdout: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 16,
            steps: 2000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m_split: 6,
            n_split: 2,
            loss: LossWeights::default(),
            synthesis_loss: SynthesisLoss::DiverseTriplet,
            max_captions: 10,
            style_mixing: true,
            grad_clip: 1.0,
            cmd: Default::default(),
            dataset: PathBuf::from("data"),
            encoders: PathBuf::from("encoders"),
            out_dir: PathBuf::from("run"),
            checkpoint_interval: 500,
            holdout: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, layers: usize) -> Result<()> {
        check_split(self.m_split, self.n_split, layers)?;
        if self.batch_size < 2 {
            return Err(Error::NegativeSampling(self.batch_size));
        }
        if self.max_captions == 0 || self.max_captions > CAPTIONS_PER_SAMPLE {
            return Err(Error::Config(format!(
                "max_captions must be in 1..={CAPTIONS_PER_SAMPLE}, got {}",
                self.max_captions
            )));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config(format!(
                "grad_clip must be >= 0, got {}",
                self.grad_clip
            )));
        }
        if !(self.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::Config(
                "learning_rate must be > 0 and betas in [0, 1)".into(),
            ));
        }
        self.loss.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// One training batch: indices into the sample list plus the random draws
/// that go with them.
#[derive(Clone, Debug)]
pub struct Batch {
    pub samples: Vec<usize>,
    /// Caption indices stacked for each positive prompt.
    pub captions: Vec<Vec<usize>>,
    /// `(sample, caption)` of the negative prompt T′ for each element.
    pub negatives: Vec<(usize, usize)>,
    /// Style rows used for this batch (`n_split` unless mixing).
    pub style_rows: usize,
    /// `B × (n·d)` style rows from fresh mapping-network noise; unused when `n = 0`.
    pub style: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub total: f64,
    pub dt: f64,
    pub cmt: f64,
    pub clip: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub total: f64,
    pub mse: f64,
    pub cmt: f64,
    pub rec: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub synthesis: SynthesisReport,
    pub reconstruction: ReconstructionReport,
}

/// Frozen per-sample quantities, computed once.
struct SampleCache {
    /// Unit-norm embedding of every caption, `10 × d_e` per sample.
    captions: Vec<Tensor>,
    image_features: Tensor,
    images: Tensor,
    /// Inverted latents, one flattened row per sample.
    targets: Tensor,
}

pub struct Trainer<'a> {
    pub model: Model,
    world: &'a World,
    encoders: &'a Encoders,
    samples: &'a [PairedSample],
    cache: SampleCache,
    w_bar: Tensor,
    opt_synthesis: Adam,
    opt_reconstruction: Adam,
    rng: Rng,
    pub history: Vec<StepReport>,
}

fn finite(step: usize, term: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence {
            step,
            term,
            value: v,
        })
    }
}

fn rows_of(t: &Tensor, idx: impl Iterator<Item = usize>) -> Tensor {
    let c = t.cols();
    let mut data = Vec::new();
    let mut n = 0;
    for i in idx {
        data.extend_from_slice(t.row_slice(i));
        n += 1;
    }
    Tensor::matrix(n, c, data)
}

// A saturated pixel has no exact preimage; those samples fall back to the
// latent that generated them, which is what inversion would recover anyway.
fn saturated_targets(world: &World, samples: &[PairedSample]) -> Result<Tensor> {
    let mut data = Vec::new();
    for s in samples {
        let w = match world.invert(&s.image) {
            Err(Error::Range { .. }) => s.latent_true.clone(),
            w => w?,
        };
        data.extend_from_slice(w.flat().data());
    }
    Ok(Tensor::matrix(
        samples.len(),
        world.layers() * world.latent_dim(),
        data,
    ))
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: TrainConfig,
        world: &'a World,
        encoders: &'a Encoders,
        samples: &'a [PairedSample],
    ) -> Result<Self> {
        config.validate(world.layers())?;
        if samples.len() < 2 {
            return Err(Error::SampleCount {
                required: 2,
                got: samples.len(),
            });
        }
        let captions = samples
            .iter()
            .map(|s| encoders.text_encode_many(&s.captions.iter().collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let images = stack_images(samples.iter().map(|s| &s.image));
        let image_features = encoders.image_encode_rows(&images)?;
        let targets = match world.decoder().invert_rows(&images) {
            Err(Error::Range { .. }) => saturated_targets(world, samples)?,
            t => t?,
        };
        let model = Model::new(
            config.clone(),
            encoders.embed_dim(),
            world.layers(),
            world.latent_dim(),
        )?;
        let opt_synthesis = Adam::new(config.adam(), model.synthesis.params());
        let opt_reconstruction = Adam::new(config.adam(), model.reconstruction.params());
        Ok(Self {
            w_bar: world.average().flat(),
            rng: seeded(derive(config.seed, 0x7a1)),
            model,
            world,
            encoders,
            samples,
            cache: SampleCache {
                captions,
                image_features,
                images,
                targets,
            },
            opt_synthesis,
            opt_reconstruction,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.model.config
    }

    pub fn step(&self) -> usize {
        self.model.step
    }

    pub fn frozen_hashes(&self) -> FrozenHashes {
        FrozenHashes {
            world: self.world.digest(),
            encoders: self.encoders.digest(),
        }
    }

    /// Draws `B` distinct samples, their prompts, in-batch negatives and style noise.
    pub fn draw_batch(&mut self) -> Result<Batch> {
        let cfg = &self.model.config;
        let b = cfg.batch_size.min(self.samples.len());
        if b < 2 {
            return Err(Error::NegativeSampling(b));
        }
        let mut all: Vec<usize> = (0..self.samples.len()).collect();
        let (picked, _) = all.partial_shuffle(&mut self.rng, b);
        let samples = picked.to_vec();
        let mut captions = Vec::with_capacity(b);
        let mut negatives = Vec::with_capacity(b);
        for (i, &s) in samples.iter().enumerate() {
            let k = self.rng.random_range(1..=cfg.max_captions);
            let pool: Vec<usize> = (0..self.samples[s].captions.len()).collect();
            captions.push(pool.choose_multiple(&mut self.rng, k).copied().collect());
            let j = (i + self.rng.random_range(1..b)) % b;
            let neg = samples[j];
            debug_assert_ne!(self.samples[neg].id, self.samples[s].id);
            negatives.push((
                neg,
                self.rng.random_range(0..self.samples[neg].captions.len()),
            ));
        }
        let n = if cfg.style_mixing {
            self.rng.random_range(0..=cfg.n_split)
        } else {
            cfg.n_split
        };
        let d = self.world.latent_dim();
        let mut style = Vec::with_capacity(b * n * d);
        if n > 0 {
            for _ in 0..b {
                let z = Tensor::row(normals(&mut self.rng, self.world.config().noise_dim));
                style.extend_from_slice(self.world.mapping_network(&z, n)?.data());
            }
        }
        Ok(Batch {
            samples,
            captions,
            negatives,
            style_rows: n,
            style: Tensor::matrix(b, (n * d).max(1), if n > 0 { style } else { vec![0.0; b] }),
        })
    }

    /// Stacked caption embeddings and their segments for the batch's
    /// positive prompts followed by its negatives.
    fn text_inputs(
        &self,
        batch: &Batch,
        with_negatives: bool,
    ) -> Result<(Tensor, Vec<(usize, usize)>)> {
        let mut rows: Vec<&[f64]> = Vec::new();
        let mut segments = Vec::new();
        for (&s, caps) in batch.samples.iter().zip(&batch.captions) {
            let start = rows.len();
            rows.extend(caps.iter().map(|&c| self.cache.captions[s].row_slice(c)));
            segments.push((start, rows.len()));
        }
        if with_negatives {
            for &(s, c) in &batch.negatives {
                rows.push(self.cache.captions[s].row_slice(c));
                segments.push((rows.len() - 1, rows.len()));
            }
        }
        let d = self.encoders.embed_dim();
        let data = rows.concat();
        Ok((Tensor::matrix(rows.len(), d, data), segments))
    }

    /// Normalized mean caption embedding of each positive prompt.
    fn prompt_features(&self, batch: &Batch) -> Tensor {
        let rows: Vec<Vec<f64>> = batch
            .samples
            .iter()
            .zip(&batch.captions)
            .map(|(&s, caps)| {
                let e = rows_of(&self.cache.captions[s], caps.iter().copied());
                normalize(&e.mean_rows()).into_data()
            })
            .collect();
        Tensor::from_rows(&rows).expect("non-empty batch")
    }

    /// Hidden features of the synthesis stream on the batch's prompts.
    pub fn synthesis_hidden(&self, batch: &Batch) -> Result<Tensor> {
        let (features, mut segments) = self.text_inputs(batch, false)?;
        segments.truncate(batch.samples.len());
        Ok(self.model.synthesis.forward_batch(&features, &segments)?.1)
    }

    /// One update of the reconstruction stream. `peer_hidden` is the
    /// synthesis stream's hidden feature on the same batch, used as a
    /// constant target. Returns the report and this stream's hidden feature.
    pub fn reconstruction_step(
        &mut self,
        batch: &Batch,
        peer_hidden: &Tensor,
    ) -> Result<(ReconstructionReport, Tensor)> {
        let step = self.model.step;
        let weights = self.model.config.loss.clone();
        let g = Graph::new();
        let p = self.model.reconstruction.params().bind(&g);
        let idx = || batch.samples.iter().copied();
        let f_i = g.constant(rows_of(&self.cache.image_features, idx()));
        let segments: Vec<(usize, usize)> = (0..batch.samples.len()).map(|i| (i, i + 1)).collect();
        let out = self.model.reconstruction.forward_var(&p, &f_i, &segments)?;
        let i_hat = self.world.decoder().decode_var(&out.latent)?;
        let image = g.constant(rows_of(&self.cache.images, idx()));
        let target = g.constant(rows_of(&self.cache.targets, idx()));
        let parts = ReconstructionParts {
            mse: mse_loss(&out.latent, &target)?,
            cmt: cmt_loss(&out.hidden, &g.constant(peer_hidden.clone()))?,
            rec: rec_loss(&i_hat, &image)?,
        };
        let total = reconstruction_objective(&parts, &weights)?;
        let report = ReconstructionReport {
            total: finite(step, "L_T", total.item())?,
            mse: finite(step, "L_MSE", parts.mse.item())?,
            cmt: finite(step, "L_CMT^I", parts.cmt.item())?,
            rec: finite(step, "L_Rec", parts.rec.item())?,
        };
        let hidden = (*out.hidden.value()).clone();
        let grads = g.backward(total)?;
        let mut grads = p.gradients(&grads);
        clip_grad_norm(&mut grads, self.model.config.grad_clip);
        self.opt_reconstruction
            .update(self.model.reconstruction.params_mut(), &grads)?;
        Ok((report, hidden))
    }

    /// One update of the synthesis stream against the constant `peer_hidden`.
    pub fn synthesis_step(
        &mut self,
        batch: &Batch,
        peer_hidden: &Tensor,
    ) -> Result<SynthesisReport> {
        let b = batch.samples.len();
        if b < 2 {
            return Err(Error::NegativeSampling(b));
        }
        let step = self.model.step;
        let cfg = self.model.config.clone();
        let (features, segments) = self.text_inputs(batch, true)?;
        let g = Graph::new();
        let p = self.model.synthesis.params().bind(&g);
        let out = self
            .model
            .synthesis
            .forward_var(&p, &g.constant(features), &segments)?;
        let w_t = out.latent.slice_rows(0, b)?;
        let w_neg = out.latent.slice_rows(b, 2 * b)?;
        let h_t = out.hidden.slice_rows(0, b)?;
        let target = g.constant(rows_of(&self.cache.targets, batch.samples.iter().copied()));
        let term = match cfg.synthesis_loss {
            SynthesisLoss::DiverseTriplet => {
                let w_bar = g.constant(rows_of(&self.w_bar, std::iter::repeat_n(0, b)));
                dt_loss(
                    &w_t,
                    &w_neg,
                    &target,
                    &w_bar,
                    cfg.loss.margin,
                    cfg.loss.dt_orientation,
                )?
            }
            SynthesisLoss::Pairwise => pair_loss(&w_t, &target, cfg.loss.pair_norm_order)?,
        };
        let latent = if batch.style_rows == 0 {
            w_t
        } else {
            compose_var(
                &w_t,
                &g.constant(batch.style.clone()),
                batch.style_rows,
                self.world.latent_dim(),
            )?
        };
        let image = self.world.decoder().decode_var(&latent)?;
        let enc = self.encoders.params().bind_frozen(&g);
        let f_it = self.encoders.image_var(&enc, &image)?;
        let f_t = g.constant(self.prompt_features(batch));
        let parts = SynthesisParts {
            dt: term,
            cmt: cmt_loss(&h_t, &g.constant(peer_hidden.clone()))?,
            clip: clip_loss(&f_t, &f_it)?,
        };
        let total = synthesis_objective(&parts, &cfg.loss)?;
        let report = SynthesisReport {
            total: finite(step, "L_S", total.item())?,
            dt: finite(step, "L_DT", parts.dt.item())?,
            cmt: finite(step, "L_CMT^T", parts.cmt.item())?,
            clip: finite(step, "L_CLIP", parts.clip.item())?,
        };
        let grads = g.backward(total)?;
        let mut grads = p.gradients(&grads);
        clip_grad_norm(&mut grads, cfg.grad_clip);
        self.opt_synthesis
            .update(self.model.synthesis.params_mut(), &grads)?;
        Ok(report)
    }

    fn both_steps(&mut self, batch: &Batch) -> Result<(ReconstructionReport, SynthesisReport)> {
        let h_t = self.synthesis_hidden(batch)?;
        let (reconstruction, h_i) = self.reconstruction_step(batch, &h_t)?;
        Ok((reconstruction, self.synthesis_step(batch, &h_i)?))
    }

    /// Reconstruction step then synthesis step on one fresh batch.
    pub fn iterate(&mut self) -> Result<StepReport> {
        let batch = self.draw_batch()?;
        let (reconstruction, synthesis) = self.both_steps(&batch).map_err(|e| match e {
            // Weights that overflow only show up as a non-finite activation on
            // the next forward pass.
            Error::Numeric { op, .. } if self.model.step > 0 => Error::Divergence {
                step: self.model.step,
                term: op,
                value: f64::NAN,
            },
            e => e,
        })?;
        self.model.step += 1;
        self.check_parameters()?;
        let report = StepReport {
            step: self.model.step,
            synthesis,
            reconstruction,
        };
        self.history.push(report);
        Ok(report)
    }

    // A finite loss can still come with an update that overflows the weights;
    // catching it here keeps the next forward pass from failing obscurely.
    fn check_parameters(&self) -> Result<()> {
        let stores = [
            ("synthesis parameters", &self.model.synthesis),
            ("reconstruction parameters", &self.model.reconstruction),
        ];
        for (term, m) in stores {
            for t in m.params().tensors() {
                if let Some(&v) = t.data().iter().find(|v| !v.is_finite()) {
                    finite(self.model.step, term, v)?;
                }
            }
        }
        Ok(())
    }

    /// Losses of both streams on `batch` without updating anything.
    pub fn probe(&self, batch: &Batch) -> Result<StepReport> {
        let mut scratch = Trainer {
            model: self.model.clone(),
            world: self.world,
            encoders: self.encoders,
            samples: self.samples,
            cache: SampleCache {
                captions: self.cache.captions.clone(),
                image_features: self.cache.image_features.clone(),
                images: self.cache.images.clone(),
                targets: self.cache.targets.clone(),
            },
            w_bar: self.w_bar.clone(),
            opt_synthesis: self.opt_synthesis.clone(),
            opt_reconstruction: self.opt_reconstruction.clone(),
            rng: self.rng.clone(),
            history: Vec::new(),
        };
        let h_t = scratch.synthesis_hidden(batch)?;
        let (reconstruction, h_i) = scratch.reconstruction_step(batch, &h_t)?;
        let synthesis = scratch.synthesis_step(batch, &h_i)?;
        Ok(StepReport {
            step: self.model.step,
            synthesis,
            reconstruction,
        })
    }

    pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
        dir.join(format!("model_step{step}.ckpt"))
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        let path = Self::checkpoint_path(dir, self.model.step);
        self.model.save(&path, &self.frozen_hashes())?;
        Ok(path)
    }
}

pub const LOSS_COLUMNS: &str = "step,L_S,L_DT,L_CMT_T,L_CLIP,L_T,L_MSE,L_CMT_I,L_Rec";

pub fn losses_csv(history: &[StepReport]) -> String {
    let mut out = String::from(LOSS_COLUMNS);
    out.push('\n');
    for r in history {
        let (s, t) = (r.synthesis, r.reconstruction);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.step, s.total, s.dt, s.cmt, s.clip, t.total, t.mse, t.cmt, t.rec
        );
    }
    out
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<StepReport>,
    pub checkpoints: Vec<PathBuf>,
}

/// Loads the dataset and encoders named in `config`, trains, and writes
/// checkpoints and `losses.csv` into `config.out_dir`.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    let data = Dataset::read(&config.dataset)?;
    let (encoders, _) = Encoders::load(&config.encoders, data.world.vocab())?;
    if config.holdout >= data.samples.len() {
        return Err(Error::Config(format!(
            "holdout {} leaves no training samples out of {}",
            config.holdout,
            data.samples.len()
        )));
    }
    let train = &data.samples[..data.samples.len() - config.holdout];
    train_with(config, &data.world, &encoders, train)
}

pub fn train_with(
    config: &TrainConfig,
    world: &World,
    encoders: &Encoders,
    samples: &[PairedSample],
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), world, encoders, samples)?;
    let dir = &config.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut checkpoints = Vec::new();
    for _ in 0..config.steps {
        trainer.iterate()?;
        let s = trainer.step();
        if s == config.steps
            || (config.checkpoint_interval > 0 && s % config.checkpoint_interval == 0)
        {
            checkpoints.push(trainer.save_checkpoint(dir)?);
        }
    }
    if config.steps == 0 {
        checkpoints.push(trainer.save_checkpoint(dir)?);
    }
    let path = dir.join("losses.csv");
    fs::write(&path, losses_csv(&trainer.history)).map_err(|e| Error::io(&path, e))?;
    Ok(TrainOutcome {
        model: trainer.model,
        history: trainer.history,
        checkpoints,
    })
}
