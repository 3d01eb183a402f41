//! The synthetic face world: a frozen mapping network, a frozen affine+tanh
//! decoder with an exact inversion, attribute-driven latents and captions.
//!
//! Everything here is a pure function of one `u64` world seed.

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::linalg::LeastSquares;
use crate::rng::{self, derive, normals, seeded};
use crate::tensor::Tensor;

pub const CAPTIONS_PER_SAMPLE: usize = 10;
pub const MIN_CAPTION_ATTRIBUTES: usize = 3;
pub const MAX_CAPTION_ATTRIBUTES: usize = 8;
pub const DEFAULT_AVERAGE_SAMPLES: usize = 10_000;
const MIN_AVERAGE_SAMPLES: usize = 1_000;
/// Decoder maps must be at least this well conditioned to count as invertible.
const MAX_DECODER_CONDITION: f64 = 1e4;
/// `atanh` is refused within this distance of ±1.
const INVERT_MARGIN: f64 = 1e-6;

const ATTRIBUTE_WORDS: [(&str, [&str; 2], [&str; 2]); 12] = [
    ("smiling", ["smiling", "grinning"], ["serious", "unsmiling"]),
    ("wavy-hair", ["wavy", "curly"], ["straight", "sleek"]),
    (
        "eyeglasses",
        ["glasses", "spectacles"],
        ["bare-eyed", "glassless"],
    ),
    (
        "beard",
        ["bearded", "stubbled"],
        ["clean-shaven", "beardless"],
    ),
    ("bangs", ["bangs", "fringe"], ["open-forehead", "no-bangs"]),
    (
        "blond-hair",
        ["blond", "golden-haired"],
        ["dark-haired", "brunette"],
    ),
    (
        "makeup",
        ["made-up", "lipstick"],
        ["bare-faced", "no-makeup"],
    ),
    (
        "mouth-open",
        ["open-mouthed", "parted-lips"],
        ["closed-mouth", "tight-lipped"],
    ),
    (
        "bald",
        ["bald", "hairless"],
        ["full-haired", "thick-haired"],
    ),
    ("male", ["man", "male"], ["woman", "female"]),
    ("young", ["young", "youthful"], ["old", "elderly"]),
    (
        "pale-skin",
        ["pale", "fair-skinned"],
        ["tanned", "dark-skinned"],
    ),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    /// Latent rows `L`.
    pub layers: usize,
    /// Latent width `d`.
    pub latent_dim: usize,
    /// Mapping-network input width.
    pub noise_dim: usize,
    pub mapping_hidden: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    /// Number of binary attributes `k`.
    pub attributes: usize,
    /// Per-entry scale of the attribute contribution to `w*`.
    pub attribute_scale: f64,
    /// Per-entry scale of the style (noise-driven) part of mapping outputs.
    pub style_scale: f64,
    /// Per-entry scale of the mapping network's constant offset (sets `‖w̄‖`).
    pub mean_scale: f64,
    /// Pre-activation standard deviation per unit latent entry.
    pub decoder_gain: f64,
    pub decoder_bias_scale: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            latent_dim: 32,
            noise_dim: 32,
            mapping_hidden: 64,
            image_height: 16,
            image_width: 16,
            image_channels: 3,
            attributes: 12,
            attribute_scale: 1.0,
            style_scale: 0.7,
            mean_scale: 1.0,
            decoder_gain: 0.6,
            decoder_bias_scale: 0.2,
        }
    }
}

impl WorldConfig {
    pub fn pixels(&self) -> usize {
        self.image_height * self.image_width * self.image_channels
    }

    pub fn latent_len(&self) -> usize {
        self.layers * self.latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes == 0 || self.attributes > ATTRIBUTE_WORDS.len() {
            return Err(Error::Config(format!(
                "attributes must be in 1..={}, got {}",
                ATTRIBUTE_WORDS.len(),
                self.attributes
            )));
        }
        if self.attributes < MIN_CAPTION_ATTRIBUTES {
            return Err(Error::Config(
                "need at least 3 attributes for captions".into(),
            ));
        }
        if self.pixels() < self.latent_len() {
            return Err(Error::Config(format!(
                "decoder cannot be injective: {} pixels < {} latent entries",
                self.pixels(),
                self.latent_len()
            )));
        }
        if [
            self.layers,
            self.latent_dim,
            self.noise_dim,
            self.mapping_hidden,
        ]
        .contains(&0)
        {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Binary face attributes.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeVector(pub Vec<bool>);

impl AttributeVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// ±1 encoding used by the attribute projection.
    pub fn signed(&self) -> Vec<f64> {
        self.0.iter().map(|&a| if a { 1.0 } else { -1.0 }).collect()
    }
}

/// A token-id sequence over the world vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Caption {
    pub tokens: Vec<usize>,
}

impl Caption {
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("Caption"));
        }
        Ok(Self { tokens })
    }
}

/// Fixed vocabulary: for each attribute two synonyms per polarity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub words: Vec<String>,
    attributes: usize,
}

impl Vocabulary {
    pub fn new(attributes: usize) -> Self {
        let mut words = Vec::with_capacity(attributes * 4);
        for (_, pos, neg) in &ATTRIBUTE_WORDS[..attributes] {
            words.extend(pos.iter().map(|s| s.to_string()));
            words.extend(neg.iter().map(|s| s.to_string()));
        }
        Self { words, attributes }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn attribute_names(&self) -> Vec<&'static str> {
        ATTRIBUTE_WORDS[..self.attributes]
            .iter()
            .map(|(n, _, _)| *n)
            .collect()
    }

    pub fn token(attribute: usize, present: bool, synonym: usize) -> usize {
        attribute * 4 + if present { 0 } else { 2 } + synonym
    }

    /// `(attribute, present)` for a token id.
    pub fn meaning(&self, token: usize) -> Result<(usize, bool)> {
        if token >= self.len() {
            return Err(Error::Vocabulary {
                id: token,
                size: self.len(),
            });
        }
        Ok((token / 4, token % 4 < 2))
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn parse(&self, text: &str) -> Result<Caption> {
        let tokens = text
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|w| {
                self.id(w).ok_or_else(|| Error::Input {
                    op: "Vocabulary::parse",
                    detail: format!("unknown word {w:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Caption::new(tokens)
    }

    pub fn render(&self, caption: &Caption) -> String {
        caption
            .tokens
            .iter()
            .map(|&t| self.words.get(t).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }
}

/// `L×d` code in the decoder's extended latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(Tensor);

impl LatentCode {
    pub fn new(t: Tensor, layers: usize, dim: usize) -> Result<Self> {
        if t.shape() != [layers, dim] {
            return Err(Error::dim("LatentCode", t.shape(), &[layers, dim]));
        }
        if !t.is_finite() {
            return Err(Error::Numeric {
                op: "LatentCode",
                detail: "non-finite entry".into(),
            });
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Row-major `1×(L·d)` view.
    pub fn flat(&self) -> Tensor {
        Tensor::row(self.0.data().to_vec())
    }

    pub fn layers(&self) -> usize {
        self.0.rows()
    }
}

/// `H×W×C` image with entries in (−1, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage(Tensor);

impl ToyImage {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 3 {
            return Err(Error::Input {
                op: "ToyImage",
                detail: format!("expected H×W×C, got {:?}", t.shape()),
            });
        }
        Ok(Self(t))
    }

    pub fn from_flat(data: Vec<f64>, cfg: &WorldConfig) -> Result<Self> {
        Ok(Self(Tensor::new(
            vec![cfg.image_height, cfg.image_width, cfg.image_channels],
            data,
        )?))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn flat(&self) -> Tensor {
        Tensor::row(self.0.data().to_vec())
    }

    pub fn pixels(&self) -> &[f64] {
        self.0.data()
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[2]
    }
}

/// Flattened images as the rows of one `n × pixels` matrix.
pub fn stack_images<'a>(images: impl Iterator<Item = &'a ToyImage>) -> Tensor {
    let mut data = Vec::new();
    let mut rows = 0;
    for img in images {
        data.extend_from_slice(img.pixels());
        rows += 1;
    }
    let cols = data.len().checked_div(rows).unwrap_or(0);
    Tensor::matrix(rows, cols, data)
}

/// Frozen `z → w` network; the output is tiled across latent rows.
#[derive(Clone, Debug)]
pub struct MappingNetwork {
    kind: MappingKind,
    out_dim: usize,
}

#[derive(Clone, Debug)]
enum MappingKind {
    Mlp {
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        offset: Tensor,
    },
    Identity,
}

impl MappingNetwork {
    fn random(cfg: &WorldConfig, rng: &mut rng::Rng) -> Self {
        let (dz, hid, d) = (cfg.noise_dim, cfg.mapping_hidden, cfg.latent_dim);
        let w1 = scaled_normal(rng, dz, hid, (2.0 / dz as f64).sqrt());
        let b1 = scaled_normal(rng, 1, hid, 0.3);
        // tanh(N(0, ~2)) has second moment ~0.6; rescale to unit style variance.
        let w2 = scaled_normal(rng, hid, d, cfg.style_scale / (0.6 * hid as f64).sqrt());
        let offset = scaled_normal(rng, 1, d, cfg.mean_scale);
        Self {
            kind: MappingKind::Mlp { w1, b1, w2, offset },
            out_dim: d,
        }
    }

    /// `w = z`; only valid when noise and latent widths agree.
    pub fn identity(dim: usize) -> Self {
        Self {
            kind: MappingKind::Identity,
            out_dim: dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Maps each row of `z` to one `1×d` style vector.
    pub fn map_rows(&self, z: &Tensor) -> Result<Tensor> {
        match &self.kind {
            MappingKind::Identity => {
                if z.cols() != self.out_dim {
                    return Err(Error::dim("mapping_network", z.shape(), &[1, self.out_dim]));
                }
                Ok(Tensor::matrix(z.rows(), z.cols(), z.data().to_vec()))
            }
            MappingKind::Mlp { w1, b1, w2, offset } => {
                if z.cols() != w1.rows() {
                    return Err(Error::dim("mapping_network", z.shape(), w1.shape()));
                }
                let mut h = z.matmul(w1)?;
                let hid = h.cols();
                for (i, v) in h.data_mut().iter_mut().enumerate() {
                    *v = (*v + b1.data()[i % hid]).tanh();
                }
                let mut w = h.matmul(w2)?;
                let d = w.cols();
                for (i, v) in w.data_mut().iter_mut().enumerate() {
                    *v += offset.data()[i % d];
                }
                Ok(w)
            }
        }
    }

    fn digest_into(&self, h: &mut Sha256) {
        if let MappingKind::Mlp { w1, b1, w2, offset } = &self.kind {
            for t in [w1, b1, w2, offset] {
                t.digest_into(h);
            }
        }
    }
}

/// Empirical mean of the mapping network over `samples` draws of `z`.
pub fn empirical_average(
    mapping: &MappingNetwork,
    noise_dim: usize,
    samples: usize,
    seed: u64,
) -> Result<Tensor> {
    if samples == 0 {
        return Err(Error::Empty("average_latent"));
    }
    let mut rng = seeded(seed);
    let d = mapping.out_dim();
    let mut acc = vec![0.0; d];
    const CHUNK: usize = 1000;
    let mut left = samples;
    while left > 0 {
        let n = left.min(CHUNK);
        let z = Tensor::matrix(n, noise_dim, normals(&mut rng, n * noise_dim));
        let w = mapping.map_rows(&z)?;
        for r in 0..n {
            for (a, v) in acc.iter_mut().zip(w.row_slice(r)) {
                *a += v;
            }
        }
        left -= n;
    }
    Ok(Tensor::row(
        acc.into_iter().map(|v| v / samples as f64).collect(),
    ))
}

fn scaled_normal(rng: &mut rng::Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::matrix(
        r,
        c,
        normals(rng, r * c).into_iter().map(|v| v * scale).collect(),
    )
}

fn tile(row: &Tensor, rows: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * row.len());
    for _ in 0..rows {
        data.extend_from_slice(row.data());
    }
    Tensor::matrix(rows, row.len(), data)
}

/// Frozen decoder: `image = tanh(vec(w)·Aᵀ + b)`.
#[derive(Clone, Debug)]
pub struct Decoder {
    /// `(L·d) × pixels`, i.e. `Aᵀ`, so batches decode as row-major matmuls.
    weight_t: Tensor,
    bias: Tensor,
    inverse: LeastSquares,
}

impl Decoder {
    fn random(cfg: &WorldConfig, rng: &mut rng::Rng) -> Option<Self> {
        let n = cfg.latent_len();
        let weight_t = scaled_normal(rng, n, cfg.pixels(), cfg.decoder_gain / (n as f64).sqrt());
        let bias = scaled_normal(rng, 1, cfg.pixels(), cfg.decoder_bias_scale);
        let inverse = LeastSquares::new(&weight_t.transpose(), MAX_DECODER_CONDITION)?;
        Some(Self {
            weight_t,
            bias,
            inverse,
        })
    }

    /// Pre-activation for a batch of flattened latents (`B × L·d`).
    pub fn pre_activation(&self, flat: &Tensor) -> Result<Tensor> {
        let mut pre = flat.matmul(&self.weight_t)?;
        let p = pre.cols();
        for (i, v) in pre.data_mut().iter_mut().enumerate() {
            *v += self.bias.data()[i % p];
        }
        Ok(pre)
    }

    pub fn decode_rows(&self, flat: &Tensor) -> Result<Tensor> {
        Ok(self.pre_activation(flat)?.map(f64::tanh))
    }

    /// Differentiable decode on the tape; decoder weights enter as constants.
    pub fn decode_var<'g>(&self, flat: &Var<'g>) -> Result<Var<'g>> {
        let g = flat.graph();
        let a = g.constant(self.weight_t.clone());
        let b = g.constant(self.bias.clone());
        Ok(flat.matmul(&a)?.add_row(&b)?.tanh())
    }

    /// Least-squares latents for a batch of flattened images (`B × pixels`).
    pub fn invert_rows(&self, images: &Tensor) -> Result<Tensor> {
        let p = self.bias.cols();
        if images.cols() != p {
            return Err(Error::dim("invert", images.shape(), &[1, p]));
        }
        let mut target = images.clone();
        for (i, v) in target.data_mut().iter_mut().enumerate() {
            let x = *v;
            if !x.is_finite() || x.abs() > 1.0 {
                return Err(Error::Input {
                    op: "invert",
                    detail: format!("pixel {} = {x} outside [-1, 1]", i % p),
                });
            }
            if x.abs() >= 1.0 - INVERT_MARGIN {
                return Err(Error::Range {
                    index: i % p,
                    value: x,
                });
            }
            *v = x.atanh() - self.bias.data()[i % p];
        }
        Ok(self.inverse.solve_rows(&target))
    }

    fn digest_into(&self, h: &mut Sha256) {
        self.weight_t.digest_into(h);
        self.bias.digest_into(h);
    }
}

/// One synthetic dataset record.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: u64,
    pub attributes: AttributeVector,
    pub latent_true: LatentCode,
    pub image: ToyImage,
    pub captions: Vec<Caption>,
}

/// The frozen world. Immutable after construction.
#[derive(Debug)]
pub struct World {
    seed: u64,
    config: WorldConfig,
    vocab: Vocabulary,
    mapping: MappingNetwork,
    /// `(L·d) × k`, transposed for row-major application: `k × (L·d)`.
    attribute_map_t: Tensor,
    decoder: Decoder,
    average: OnceLock<LatentCode>,
}

impl World {
    pub fn new(seed: u64) -> Result<Self> {
        Self::with_config(seed, WorldConfig::default())
    }

    /// Builds the world, re-drawing the decoder until its affine map is
    /// well conditioned (and therefore exactly invertible).
    pub fn with_config(seed: u64, config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(derive(seed, 0));
        let mapping = MappingNetwork::random(&config, &mut rng);
        let k = config.attributes;
        let attribute_map_t = scaled_normal(
            &mut rng,
            k,
            config.latent_len(),
            config.attribute_scale / (k as f64).sqrt(),
        );
        let mut attempt = 1;
        let decoder = loop {
            let mut drng = seeded(derive(seed, 1_000 + attempt));
            if let Some(d) = Decoder::random(&config, &mut drng) {
                break d;
            }
            attempt += 1;
            if attempt > 64 {
                return Err(Error::Config("could not draw an invertible decoder".into()));
            }
        };
        Ok(Self {
            seed,
            vocab: Vocabulary::new(config.attributes),
            config,
            mapping,
            attribute_map_t,
            decoder,
            average: OnceLock::new(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn mapping(&self) -> &MappingNetwork {
        &self.mapping
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Style rows for noise `z` (`1 × noise_dim`), tiled to `rows × d`.
    pub fn mapping_network(&self, z: &Tensor, rows: usize) -> Result<Tensor> {
        if rows > self.config.layers {
            return Err(Error::dim(
                "mapping_network",
                &[rows],
                &[self.config.layers],
            ));
        }
        if rows == 0 {
            return Err(Error::Empty("mapping_network"));
        }
        if z.rows() != 1 {
            return Err(Error::dim(
                "mapping_network",
                z.shape(),
                &[1, self.config.noise_dim],
            ));
        }
        let w = self.mapping.map_rows(z)?;
        Ok(tile(&w, rows))
    }

    /// Standard-normal noise for a style seed.
    pub fn style_noise(&self, style_seed: u64) -> Tensor {
        let mut rng = seeded(derive(style_seed, 0x0057_171e));
        Tensor::row(normals(&mut rng, self.config.noise_dim))
    }

    /// `w̄`: mean mapping output over `samples` draws, tiled to `L×d`.
    pub fn average_latent(&self, samples: usize) -> Result<LatentCode> {
        if samples < MIN_AVERAGE_SAMPLES {
            return Err(Error::SampleCount {
                required: MIN_AVERAGE_SAMPLES,
                got: samples,
            });
        }
        let mean = empirical_average(
            &self.mapping,
            self.config.noise_dim,
            samples,
            derive(self.seed, 2),
        )?;
        LatentCode::new(
            tile(&mean, self.config.layers),
            self.config.layers,
            self.config.latent_dim,
        )
    }

    /// Cached `w̄` at the default sample count.
    pub fn average(&self) -> &LatentCode {
        self.average.get_or_init(|| {
            self.average_latent(DEFAULT_AVERAGE_SAMPLES)
                .expect("default sample count is valid")
        })
    }

    pub fn decode(&self, w: &LatentCode) -> Result<ToyImage> {
        if w.tensor().shape() != [self.config.layers, self.config.latent_dim] {
            return Err(Error::dim(
                "decode",
                w.tensor().shape(),
                &[self.config.layers, self.config.latent_dim],
            ));
        }
        let img = self.decoder.decode_rows(&w.flat())?;
        ToyImage::from_flat(img.into_data(), &self.config)
    }

    /// Pre-tanh decoder output, flattened.
    pub fn pre_activation(&self, w: &LatentCode) -> Result<Tensor> {
        self.decoder.pre_activation(&w.flat())
    }

    pub fn invert(&self, image: &ToyImage) -> Result<LatentCode> {
        let c = &self.config;
        if image.tensor().shape() != [c.image_height, c.image_width, c.image_channels] {
            return Err(Error::dim(
                "invert",
                image.tensor().shape(),
                &[c.image_height, c.image_width, c.image_channels],
            ));
        }
        let w = self.decoder.invert_rows(&image.flat())?;
        LatentCode::new(
            w.reshape(vec![c.layers, c.latent_dim])?,
            c.layers,
            c.latent_dim,
        )
    }

    /// `W_a · (2a − 1)` reshaped to `L×d`.
    pub fn attribute_latent(&self, a: &AttributeVector) -> Result<Tensor> {
        if a.len() != self.config.attributes {
            return Err(Error::dim(
                "attribute_latent",
                &[a.len()],
                &[self.config.attributes],
            ));
        }
        let e = Tensor::row(a.signed());
        e.matmul(&self.attribute_map_t)?
            .reshape(vec![self.config.layers, self.config.latent_dim])
    }

    pub fn sample_paired(&self, seed: u64, id: u64) -> Result<PairedSample> {
        let mut rng = seeded(derive(derive(seed, 0xda7a), id));
        let attributes = AttributeVector(
            (0..self.config.attributes)
                .map(|_| rng.random_bool(0.5))
                .collect(),
        );
        let z = Tensor::row(normals(&mut rng, self.config.noise_dim));
        let style = self.mapping_network(&z, self.config.layers)?;
        let w = self.attribute_latent(&attributes)?.add(&style)?;
        let latent_true = LatentCode::new(w, self.config.layers, self.config.latent_dim)?;
        let image = self.decode(&latent_true)?;
        let mut captions: Vec<Caption> = Vec::with_capacity(CAPTIONS_PER_SAMPLE);
        while captions.len() < CAPTIONS_PER_SAMPLE {
            let c = caption_from_attributes(&attributes, rng.next_u64());
            if !captions.contains(&c) {
                captions.push(c);
            }
        }
        Ok(PairedSample {
            id,
            attributes,
            latent_true,
            image,
            captions,
        })
    }

    /// Hash of every frozen world parameter.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        self.mapping.digest_into(&mut h);
        self.attribute_map_t.digest_into(&mut h);
        self.decoder.digest_into(&mut h);
        hex::encode(h.finalize())
    }
}

/// A caption mentioning a random subset of 3–8 attributes with random
/// synonyms, in random order. Deterministic in `subset_seed`.
pub fn caption_from_attributes(a: &AttributeVector, subset_seed: u64) -> Caption {
    let mut rng = seeded(subset_seed);
    let k = a.len();
    let hi = MAX_CAPTION_ATTRIBUTES.min(k);
    let size = rng.random_range(MIN_CAPTION_ATTRIBUTES..=hi);
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng);
    let tokens = order[..size]
        .iter()
        .map(|&i| Vocabulary::token(i, a.0[i], rng.random_range(0..2)))
        .collect();
    Caption { tokens }
}

/// The same attribute mentions as `c` with synonyms and order re-drawn.
pub fn paraphrase(c: &Caption, seed: u64) -> Caption {
    let mut rng = seeded(seed);
    let mut tokens: Vec<usize> = c
        .tokens
        .iter()
        .map(|&t| (t & !1) | rng.random_range(0..2usize))
        .collect();
    tokens.shuffle(&mut rng);
    Caption { tokens }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::new(7).unwrap()
    }

    #[test]
    fn world_is_reproducible() {
        assert_eq!(world().digest(), world().digest());
        assert_ne!(world().digest(), World::new(8).unwrap().digest());
    }

    #[test]
    fn mapping_is_deterministic_with_expected_shape() {
        let w = world();
        let z = w.style_noise(3);
        let a = w.mapping_network(&z, 4).unwrap();
        assert_eq!(a.shape(), &[4, 32]);
        assert_eq!(a, world().mapping_network(&z, 4).unwrap());
        assert!(matches!(
            w.mapping_network(&z, 9),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn mapping_mean_converges() {
        let w = world();
        let m1 = empirical_average(w.mapping(), 32, 10_000, 100).unwrap();
        let m2 = empirical_average(w.mapping(), 32, 20_000, 200).unwrap();
        assert!(m1.max_abs_diff(&m2) < 0.05);
    }

    #[test]
    fn average_latent_cases() {
        let w = world();
        let a = w.average_latent(10_000).unwrap();
        assert_eq!(&a, w.average());
        assert_eq!(a, world().average_latent(10_000).unwrap());
        let b = w.average_latent(40_000).unwrap();
        assert!(a.tensor().max_abs_diff(b.tensor()) < 0.05);
        assert!(w.average_latent(999).is_err());
        let rows = a.tensor();
        assert_eq!(rows.row_slice(0), rows.row_slice(7));
    }

    #[test]
    fn identity_mapping_average_is_zero() {
        let m = empirical_average(&MappingNetwork::identity(32), 32, 10_000, 4).unwrap();
        assert!(m.data().iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn decode_cases() {
        let w = world();
        let zero = LatentCode::new(Tensor::zeros(8, 32), 8, 32).unwrap();
        let img = w.decode(&zero).unwrap();
        let expected = w.decoder.bias.map(f64::tanh);
        assert_eq!(img.pixels(), expected.data());
        assert_eq!(img.tensor().shape(), &[16, 16, 3]);

        let s = w.sample_paired(1, 0).unwrap();
        assert_eq!(
            w.decode(&s.latent_true).unwrap(),
            w.decode(&s.latent_true).unwrap()
        );
    }

    #[test]
    fn pre_activation_is_affine() {
        let w = world();
        let a = w.sample_paired(1, 1).unwrap().latent_true;
        let b = w.sample_paired(1, 2).unwrap().latent_true;
        let sum = LatentCode::new(a.tensor().add(b.tensor()).unwrap(), 8, 32).unwrap();
        let zero = LatentCode::new(Tensor::zeros(8, 32), 8, 32).unwrap();
        let lhs = w
            .pre_activation(&a)
            .unwrap()
            .add(&w.pre_activation(&b).unwrap())
            .unwrap()
            .sub(&w.pre_activation(&zero).unwrap())
            .unwrap();
        assert!(lhs.max_abs_diff(&w.pre_activation(&sum).unwrap()) < 1e-9);
    }

    #[test]
    fn decode_rejects_wrong_shape() {
        let bad = LatentCode(Tensor::zeros(4, 32));
        assert!(matches!(world().decode(&bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn inversion_round_trips() {
        let w = world();
        for id in 0..100 {
            let s = w.sample_paired(3, id).unwrap();
            let back = w.invert(&s.image).unwrap();
            assert!(
                back.tensor().max_abs_diff(s.latent_true.tensor()) < 1e-6,
                "id {id}"
            );
            let again = w.decode(&back).unwrap();
            assert!(again.tensor().max_abs_diff(s.image.tensor()) < 1e-6);
        }
    }

    #[test]
    fn inversion_range_errors() {
        let w = world();
        let mut img = w.sample_paired(3, 0).unwrap().image;
        img.0.data_mut()[5] = 1.0;
        assert!(matches!(w.invert(&img), Err(Error::Range { index: 5, .. })));
        img.0.data_mut()[5] = 1.5;
        assert!(matches!(w.invert(&img), Err(Error::Input { .. })));
    }

    #[test]
    fn samples_are_deterministic_and_consistent() {
        let w = world();
        let a = w.sample_paired(9, 4).unwrap();
        assert_eq!(a, w.sample_paired(9, 4).unwrap());
        assert_ne!(a, w.sample_paired(9, 5).unwrap());
        assert_eq!(a.captions.len(), CAPTIONS_PER_SAMPLE);
        for (i, c) in a.captions.iter().enumerate() {
            assert!(!a.captions[..i].contains(c));
            for &t in &c.tokens {
                let (attr, present) = w.vocab().meaning(t).unwrap();
                assert_eq!(a.attributes.0[attr], present);
            }
        }
    }

    #[test]
    fn attribute_marginals_are_balanced() {
        let w = world();
        let mut counts = [0usize; 12];
        for id in 0..1000 {
            let s = w.sample_paired(21, id).unwrap();
            for (c, &a) in counts.iter_mut().zip(&s.attributes.0) {
                *c += a as usize;
            }
        }
        for c in counts {
            let f = c as f64 / 1000.0;
            assert!((0.45..=0.55).contains(&f), "{f}");
        }
    }

    #[test]
    fn captions_vary_with_seed() {
        let mut rng = seeded(77);
        let mut differ = 0;
        for trial in 0..1000 {
            let a = AttributeVector((0..12).map(|_| rng.random_bool(0.5)).collect());
            let c1 = caption_from_attributes(&a, 2 * trial);
            let c2 = caption_from_attributes(&a, 2 * trial + 1);
            for c in [&c1, &c2] {
                assert!((MIN_CAPTION_ATTRIBUTES..=MAX_CAPTION_ATTRIBUTES).contains(&c.tokens.len()));
                for &t in &c.tokens {
                    assert_eq!(a.0[t / 4], t % 4 < 2);
                }
            }
            differ += (c1 != c2) as usize;
        }
        assert!(differ >= 990, "{differ}");
    }

    #[test]
    fn paraphrase_keeps_meaning() {
        let v = Vocabulary::new(12);
        let c = v.parse("smiling blond woman old").unwrap();
        let p = paraphrase(&c, 3);
        let meanings = |c: &Caption| {
            let mut m: Vec<_> = c.tokens.iter().map(|&t| v.meaning(t).unwrap()).collect();
            m.sort();
            m
        };
        assert_eq!(meanings(&c), meanings(&p));
    }

    #[test]
    fn vocabulary_round_trip() {
        let v = Vocabulary::new(12);
        assert_eq!(v.len(), 48);
        let c = v.parse("smiling, blond woman").unwrap();
        assert_eq!(v.render(&c), "smiling blond woman");
        assert_eq!(
            v.meaning(Vocabulary::token(9, false, 0)).unwrap(),
            (9, false)
        );
        assert!(v.parse("unknown").is_err());
    }
}
