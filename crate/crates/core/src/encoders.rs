//! Text and image encoders sharing one embedding space, trained with a
//! symmetric InfoNCE objective and then frozen.
//!
//! Embeddings are unit-norm `1×d_e` rows, so cosine similarity is a dot
//! product.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Bound, Linear, ParamLayout, ParamStore};
use crate::rng::{derive, seeded};
use crate::tensor::{read_tns_all, write_tns_all, Tensor};
use crate::world::{stack_images, Caption, PairedSample, ToyImage, Vocabulary};

pub const RETRIEVAL_TARGET: f64 = 0.90;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub text_hidden: usize,
    pub image_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            text_hidden: 64,
            image_hidden: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    /// Samples at the end of the dataset kept out of training.
    pub held_out: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 40,
            batch_size: 32,
            temperature: 0.07,
            learning_rate: 3e-3,
            held_out: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderMeta {
    pub config: EncoderConfig,
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub pixels: usize,
    pub layout: ParamLayout,
    pub retrieval_accuracy: Option<f64>,
    pub retrieval_batch: usize,
    pub held_out_ids: Vec<u64>,
    pub digest: String,
}

/// The frozen encoder pair.
#[derive(Clone, Debug)]
pub struct Encoders {
    config: EncoderConfig,
    vocab_size: usize,
    vocab_hash: String,
    pixels: usize,
    store: ParamStore,
    token_table: crate::nn::ParamId,
    text: [Linear; 2],
    image: [Linear; 2],
}

impl Encoders {
    pub fn new(config: EncoderConfig, vocab: &Vocabulary, pixels: usize, seed: u64) -> Self {
        let mut rng = seeded(derive(seed, 0xe1c0));
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let table = crate::rng::normals(&mut rng, vocab.len() * d);
        let token_table = store.add("text.tokens", Tensor::matrix(vocab.len(), d, table));
        let text = [
            Linear::new(&mut store, "text.l1", d, config.text_hidden, 1.0, &mut rng),
            Linear::new(&mut store, "text.l2", config.text_hidden, d, 1.0, &mut rng),
        ];
        let image = [
            Linear::new(
                &mut store,
                "image.l1",
                pixels,
                config.image_hidden,
                1.0,
                &mut rng,
            ),
            Linear::new(
                &mut store,
                "image.l2",
                config.image_hidden,
                d,
                1.0,
                &mut rng,
            ),
        ];
        Self {
            config,
            vocab_size: vocab.len(),
            vocab_hash: vocab.hash(),
            pixels,
            store,
            token_table,
            text,
            image,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn digest(&self) -> String {
        self.store.digest()
    }

    /// Embeddings for each token sequence: `n × d_e`.
    pub fn text_var<'g>(&self, p: &Bound<'g>, sequences: &[Vec<usize>]) -> Result<Var<'g>> {
        let pooled = p[self.token_table].embed_mean(sequences)?;
        let h = self.text[0].forward(p, &pooled)?.gelu();
        Ok(self.text[1].forward(p, &h)?.normalize_rows())
    }

    /// Embeddings for each row of flattened images: `n × d_e`.
    pub fn image_var<'g>(&self, p: &Bound<'g>, pixels: &Var<'g>) -> Result<Var<'g>> {
        let cols = pixels.value().cols();
        if cols != self.pixels {
            return Err(Error::dim("image_encode", &[1, cols], &[1, self.pixels]));
        }
        let h = self.image[0].forward(p, pixels)?.gelu();
        Ok(self.image[1].forward(p, &h)?.normalize_rows())
    }

    pub fn text_encode_many(&self, captions: &[&Caption]) -> Result<Tensor> {
        if captions.is_empty() {
            return Err(Error::Empty("text_encode"));
        }
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        let seqs: Vec<Vec<usize>> = captions.iter().map(|c| c.tokens.clone()).collect();
        Ok((*self.text_var(&p, &seqs)?.value()).clone())
    }

    pub fn text_encode(&self, caption: &Caption) -> Result<Tensor> {
        self.text_encode_many(&[caption])
    }

    /// Unit-normalized mean of the caption embeddings.
    pub fn caption_set_embedding(&self, captions: &[&Caption]) -> Result<Tensor> {
        let e = self.text_encode_many(captions)?;
        Ok(normalize(&e.mean_rows()))
    }

    pub fn image_encode_rows(&self, pixels: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        let x = g.constant(pixels.clone());
        Ok((*self.image_var(&p, &x)?.value()).clone())
    }

    pub fn image_encode(&self, image: &ToyImage) -> Result<Tensor> {
        if image.pixels().len() != self.pixels {
            return Err(Error::dim(
                "image_encode",
                image.tensor().shape(),
                &[self.pixels],
            ));
        }
        self.image_encode_rows(&image.flat())
    }

    pub fn meta(
        &self,
        accuracy: Option<f64>,
        retrieval_batch: usize,
        held_out_ids: Vec<u64>,
    ) -> EncoderMeta {
        EncoderMeta {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            vocab_hash: self.vocab_hash.clone(),
            pixels: self.pixels,
            layout: self.store.layout(),
            retrieval_accuracy: accuracy,
            retrieval_batch,
            held_out_ids,
            digest: self.digest(),
        }
    }

    /// Writes `<dir>/encoders.tns` and `<dir>/encoders.json`.
    pub fn save(&self, dir: &Path, meta: &EncoderMeta) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("encoders.tns");
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let refs: Vec<&Tensor> = self.store.tensors().iter().collect();
        write_tns_all(&mut w, &refs)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&path, e))?;
        let path = dir.join("encoders.json");
        fs::write(&path, serde_json::to_vec_pretty(meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, vocab: &Vocabulary) -> Result<(Self, EncoderMeta)> {
        let path = dir.join("encoders.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let meta: EncoderMeta = serde_json::from_slice(&bytes)?;
        if meta.vocab_hash != vocab.hash() {
            return Err(Error::Format {
                what: "encoder checkpoint",
                detail: "vocabulary hash does not match the dataset".into(),
            });
        }
        let mut enc = Self::new(meta.config.clone(), vocab, meta.pixels, 0);
        let path = dir.join("encoders.tns");
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        enc.store.load(read_tns_all(&mut BufReader::new(file))?)?;
        if enc.digest() != meta.digest {
            return Err(Error::Format {
                what: "encoder checkpoint",
                detail: "parameter digest mismatch".into(),
            });
        }
        Ok((enc, meta))
    }
}

pub(crate) fn normalize(row: &Tensor) -> Tensor {
    let n = row.frobenius();
    if n > 0.0 {
        row.scale(1.0 / n)
    } else {
        row.clone()
    }
}

/// Symmetric InfoNCE between matched rows of unit-norm `text` and `image`.
pub fn info_nce<'g>(text: &Var<'g>, image: &Var<'g>, temperature: f64) -> Result<Var<'g>> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter {
            name: "temperature",
            detail: format!("must be positive, got {temperature}"),
        });
    }
    let n = text.value().rows();
    let targets: Vec<usize> = (0..n).collect();
    let logits = text.matmul(&image.transpose())?.scale(1.0 / temperature);
    let t2i = logits.cross_entropy(&targets)?;
    let i2t = logits.transpose().cross_entropy(&targets)?;
    Ok(t2i.add(&i2t)?.scale(0.5))
}

/// Caption-set → image top-1 retrieval inside consecutive chunks of
/// `batch` samples, each sample represented by the mean of all its
/// caption embeddings.
pub fn retrieval_accuracy(enc: &Encoders, samples: &[&PairedSample], batch: usize) -> Result<f64> {
    if samples.is_empty() || batch == 0 {
        return Err(Error::Empty("retrieval_accuracy"));
    }
    let mut hits = 0usize;
    for chunk in samples.chunks(batch) {
        let texts = chunk
            .iter()
            .map(|s| enc.caption_set_embedding(&s.captions.iter().collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let images = enc.image_encode_rows(&stack_images(chunk.iter().map(|s| &s.image)))?;
        for (i, t) in texts.iter().enumerate() {
            let best = argmax((0..chunk.len()).map(|j| dot(t.data(), images.row_slice(j))));
            hits += (best == i) as usize;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the first maximum.
pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub accuracy: f64,
    pub epochs: usize,
    pub final_loss: f64,
    pub held_out_ids: Vec<u64>,
}

/// Trains a fresh encoder pair. Each training row pairs an image with the
/// mean embedding of a random subset (1–10) of its captions.
pub fn contrastive_pretrain(
    samples: &[PairedSample],
    vocab: &Vocabulary,
    encoder: EncoderConfig,
    config: &PretrainConfig,
) -> Result<(Encoders, PretrainReport)> {
    let min = 500;
    if samples.len() < min {
        return Err(Error::SampleCount {
            required: min,
            got: samples.len(),
        });
    }
    if config.held_out == 0 || config.held_out >= samples.len() || config.batch_size < 2 {
        return Err(Error::Config(format!(
            "need 0 < held_out < {} and batch_size >= 2",
            samples.len()
        )));
    }
    let pixels = samples[0].image.pixels().len();
    let mut enc = Encoders::new(encoder, vocab, pixels, config.seed);
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        &enc.store,
    );
    let split = samples.len() - config.held_out;
    let (train, held) = samples.split_at(split);
    let mut rng = seeded(derive(config.seed, 0x7e7));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut final_loss = f64::NAN;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut seqs = Vec::new();
            let mut segments = Vec::with_capacity(chunk.len());
            let mut rows = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &train[i];
                let k = rng.random_range(1..=s.captions.len());
                let start = seqs.len();
                seqs.extend(
                    s.captions
                        .choose_multiple(&mut rng, k)
                        .map(|c| c.tokens.clone()),
                );
                segments.push((start, seqs.len()));
                rows.push(&s.image);
            }
            let g = Graph::new();
            let p = enc.store.bind(&g);
            let t = enc
                .text_var(&p, &seqs)?
                .segment_mean(&segments)?
                .normalize_rows();
            let x = g.constant(stack_images(rows.into_iter()));
            let im = enc.image_var(&p, &x)?;
            let loss = info_nce(&t, &im, config.temperature)?;
            final_loss = loss.item();
            if !final_loss.is_finite() {
                return Err(Error::Divergence {
                    step: epoch,
                    term: "info_nce",
                    value: final_loss,
                });
            }
            let grads = g.backward(loss)?;
            opt.update(&mut enc.store, &p.gradients(&grads))?;
        }
    }
    let held_refs: Vec<&PairedSample> = held.iter().collect();
    let accuracy = retrieval_accuracy(&enc, &held_refs, config.batch_size)?;
    let report = PretrainReport {
        accuracy,
        epochs: config.epochs,
        final_loss,
        held_out_ids: held.iter().map(|s| s.id).collect(),
    };
    Ok((enc, report))
}
