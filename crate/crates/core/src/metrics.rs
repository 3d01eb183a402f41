//! Toy-scale evaluation: Fréchet distance over image-encoder features,
//! identity retrieval rate, feature-space diversity, and the probes used by
//! the multi-caption and manipulation checks.

use serde::{Deserialize, Serialize};

use crate::encoders::{dot, Encoders};
use crate::error::{Error, Result};
use crate::linalg::{matrix_sqrt_psd, mean_and_covariance};
use crate::model::Model;
use crate::rng::derive;
use crate::tensor::Tensor;
use crate::world::{stack_images, Caption, PairedSample, ToyImage, World};

pub const COVARIANCE_JITTER: f64 = 1e-6;

/// `‖μ_a−μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})` over
/// the rows of two feature matrices.
pub fn frechet_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension {
            op: "frechet_distance",
            lhs: vec![a.cols()],
            rhs: vec![b.cols()],
        });
    }
    let d = a.cols();
    for x in [a, b] {
        if x.rows() < d + 1 {
            return Err(Error::SampleCount {
                required: d + 1,
                got: x.rows(),
            });
        }
    }
    let (mu_a, cov_a) = mean_and_covariance(a);
    let (mu_b, cov_b) = mean_and_covariance(b);
    let jitter = Tensor::identity(d).scale(COVARIANCE_JITTER);
    let cov_a = cov_a.add(&jitter)?;
    let cov_b = cov_b.add(&jitter)?;
    let root_a = matrix_sqrt_psd(&cov_a)?;
    let inner = root_a.matmul(&cov_b)?.matmul(&root_a)?;
    let inner = inner.add(&inner.transpose())?.scale(0.5);
    let cross = matrix_sqrt_psd(&inner)?;
    let mean_term: f64 = mu_a
        .data()
        .iter()
        .zip(mu_b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let trace = |t: &Tensor| (0..d).map(|i| t.get(i, i)).sum::<f64>();
    let fd = mean_term + trace(&cov_a) + trace(&cov_b) - 2.0 * trace(&cross);
    if !fd.is_finite() {
        return Err(Error::Numeric {
            op: "frechet_distance",
            detail: format!("non-finite result {fd}"),
        });
    }
    Ok(fd.max(0.0))
}

/// Fraction of rows `i` of `generated` whose most cosine-similar row in
/// `gallery` is row `i`.
pub fn retrieval_rate(generated: &Tensor, gallery: &Tensor) -> Result<f64> {
    let g = gallery.rows();
    if gallery.is_empty() || g == 0 {
        return Err(Error::Empty("gallery"));
    }
    if generated.rows() != g || generated.cols() != gallery.cols() {
        return Err(Error::Dimension {
            op: "retrieval_rate",
            lhs: gallery.shape().to_vec(),
            rhs: generated.shape().to_vec(),
        });
    }
    let norm = |r: &[f64]| dot(r, r).sqrt();
    let mut hits = 0;
    for i in 0..g {
        let q = generated.row_slice(i);
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for j in 0..g {
            let r = gallery.row_slice(j);
            let c = dot(q, r) / (norm(q) * norm(r) + crate::autodiff::COSINE_EPS);
            if c > best.0 {
                best = (c, j);
            }
        }
        hits += usize::from(best.1 == i);
    }
    Ok(hits as f64 / g as f64)
}

/// Binomial standard deviation of a retrieval rate at chance over `g` trials.
pub fn chance_sigma(g: usize) -> f64 {
    let p = 1.0 / g as f64;
    (p * (1.0 - p) / g as f64).sqrt()
}

/// Mean pairwise ℓ2 distance between rows.
pub fn mean_pairwise_distance(features: &Tensor) -> Result<f64> {
    let n = features.rows();
    if n < 2 {
        return Err(Error::Input {
            op: "diversity_score",
            detail: format!("need at least 2 draws, got {n}"),
        });
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (features.row_slice(i), features.row_slice(j));
            total += a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Evaluation context: the frozen world and encoders.
#[derive(Clone, Copy)]
pub struct Evaluator<'a> {
    pub world: &'a World,
    pub encoders: &'a Encoders,
}

impl<'a> Evaluator<'a> {
    pub fn new(world: &'a World, encoders: &'a Encoders) -> Self {
        Self { world, encoders }
    }

    fn embed(&self, images: &[ToyImage]) -> Result<Tensor> {
        self.encoders
            .image_encode_rows(&stack_images(images.iter()))
    }

    /// Image-encoder features of the ground-truth gallery.
    pub fn real_features(&self, samples: &[PairedSample]) -> Result<Tensor> {
        self.encoders
            .image_encode_rows(&stack_images(samples.iter().map(|s| &s.image)))
    }

    /// One synthesized image per sample from its first caption, with the
    /// style seed derived from `seed` and the member index.
    pub fn generated_features(
        &self,
        model: &Model,
        samples: &[PairedSample],
        seed: u64,
    ) -> Result<Tensor> {
        let images = samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(model
                    .synthesize(
                        self.world,
                        self.encoders,
                        &[&s.captions[0]],
                        derive(seed, i as u64),
                    )?
                    .0)
            })
            .collect::<Result<Vec<_>>>()?;
        self.embed(&images)
    }

    /// Fréchet distance between generated and real image features.
    pub fn toy_fid(&self, model: &Model, samples: &[PairedSample], seed: u64) -> Result<f64> {
        frechet_distance(
            &self.generated_features(model, samples, seed)?,
            &self.real_features(samples)?,
        )
    }

    /// Identity retrieval rate of synthesized images against the gallery's
    /// ground-truth images.
    pub fn rfrr(&self, model: &Model, gallery: &[PairedSample], seed: u64) -> Result<f64> {
        if gallery.is_empty() {
            return Err(Error::Input {
                op: "rfrr",
                detail: "empty gallery".into(),
            });
        }
        retrieval_rate(
            &self.generated_features(model, gallery, seed)?,
            &self.real_features(gallery)?,
        )
    }

    /// Mean over disjoint galleries of size `g` carved from `samples`.
    pub fn rfrr_galleries(
        &self,
        model: &Model,
        samples: &[PairedSample],
        g: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if g < 2 || samples.len() < g {
            return Err(Error::Input {
                op: "rfrr",
                detail: format!("gallery size {g} needs 2 ≤ G ≤ {}", samples.len()),
            });
        }
        samples
            .chunks_exact(g)
            .enumerate()
            .map(|(k, chunk)| self.rfrr(model, chunk, derive(seed, k as u64)))
            .collect()
    }

    /// Mean pairwise feature distance over `draws` style seeds for one prompt.
    pub fn diversity_score(
        &self,
        model: &Model,
        captions: &[&Caption],
        draws: usize,
        seed: u64,
    ) -> Result<f64> {
        if draws < 2 {
            return Err(Error::Input {
                op: "diversity_score",
                detail: format!("need at least 2 draws, got {draws}"),
            });
        }
        let images = (0..draws)
            .map(|k| {
                Ok(model
                    .synthesize(self.world, self.encoders, captions, derive(seed, k as u64))?
                    .0)
            })
            .collect::<Result<Vec<_>>>()?;
        mean_pairwise_distance(&self.embed(&images)?)
    }

    /// Diversity averaged over the first caption of each sample.
    pub fn mean_diversity(
        &self,
        model: &Model,
        samples: &[PairedSample],
        draws: usize,
        seed: u64,
    ) -> Result<f64> {
        let mut total = 0.0;
        for (i, s) in samples.iter().enumerate() {
            total +=
                self.diversity_score(model, &[&s.captions[0]], draws, derive(seed, i as u64))?;
        }
        Ok(total / samples.len().max(1) as f64)
    }

    /// Mean cosine between the text-stream latent and `w̄`.
    pub fn mean_cosine_to_average(&self, model: &Model, samples: &[PairedSample]) -> Result<f64> {
        let w_bar = self.world.average().flat();
        let mut total = 0.0;
        for s in samples {
            let w = model.text_latent(self.encoders, &[&s.captions[0]])?;
            total += cosine(w.tensor().data(), w_bar.data());
        }
        Ok(total / samples.len().max(1) as f64)
    }

    /// For each caption count `k`, the mean over samples of
    /// cos(image_encode(synthesize(first k captions)), mean embedding of those captions).
    pub fn caption_consistency(
        &self,
        model: &Model,
        samples: &[PairedSample],
        counts: &[usize],
        seed: u64,
    ) -> Result<Vec<f64>> {
        counts
            .iter()
            .map(|&k| {
                let mut total = 0.0;
                for (i, s) in samples.iter().enumerate() {
                    let caps: Vec<&Caption> = s.captions.iter().take(k).collect();
                    let (img, _) = model.synthesize(
                        self.world,
                        self.encoders,
                        &caps,
                        derive(seed, i as u64),
                    )?;
                    let f = self.encoders.image_encode(&img)?;
                    let t = self.encoders.caption_set_embedding(&caps)?;
                    total += cosine(f.data(), t.data());
                }
                Ok(total / samples.len().max(1) as f64)
            })
            .collect()
    }

    /// Text-relevance cosine at every split `0..=L`, averaged over
    /// `(source, caption)` pairs.
    pub fn manipulation_sweep(
        &self,
        model: &Model,
        pairs: &[(&ToyImage, &Caption)],
    ) -> Result<Vec<f64>> {
        let layers = self.world.layers();
        let mut out = vec![0.0; layers + 1];
        for &(src, cap) in pairs {
            let t = self.encoders.text_encode(cap)?;
            for (m, slot) in out.iter_mut().enumerate() {
                let img = model.manipulate(self.world, self.encoders, src, &[cap], m)?;
                *slot += cosine(self.encoders.image_encode(&img)?.data(), t.data());
            }
        }
        let n = pairs.len().max(1) as f64;
        Ok(out.into_iter().map(|v| v / n).collect())
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt() + crate::autodiff::COSINE_EPS)
}

/// Headline metrics written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: f64,
    pub rfrr: f64,
    pub rfrr_chance: f64,
    pub rfrr_sigma: f64,
    pub diversity: f64,
    pub samples: usize,
    pub gallery_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    pub gallery_size: usize,
    pub diversity_draws: usize,
    /// Prompts used for the diversity average.
    pub diversity_prompts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            gallery_size: 32,
            diversity_draws: 8,
            diversity_prompts: 50,
        }
    }
}

pub fn evaluate(
    ev: &Evaluator,
    model: &Model,
    samples: &[PairedSample],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let fid = ev.toy_fid(model, samples, derive(cfg.seed, 1))?;
    let rates = ev.rfrr_galleries(model, samples, cfg.gallery_size, derive(cfg.seed, 2))?;
    let prompts = &samples[..cfg.diversity_prompts.min(samples.len())];
    let diversity = ev.mean_diversity(model, prompts, cfg.diversity_draws, derive(cfg.seed, 3))?;
    let k = rates.len();
    Ok(EvalReport {
        fid,
        rfrr: rates.iter().sum::<f64>() / k as f64,
        rfrr_chance: 1.0 / cfg.gallery_size as f64,
        rfrr_sigma: chance_sigma(cfg.gallery_size) / (k as f64).sqrt(),
        diversity,
        samples: samples.len(),
        gallery_size: cfg.gallery_size,
    })
}
