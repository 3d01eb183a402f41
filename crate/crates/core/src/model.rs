//! The trained two-stream model: checkpoint I/O and the inference paths
//! (synthesis from captions, manipulation of an existing image).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cmd::{check_split, compose_latent, CmdModule};
use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::nn::ParamLayout;
use crate::tensor::{read_tns_all, write_tns_all, Tensor};
use crate::trainer::TrainConfig;
use crate::world::{Caption, LatentCode, ToyImage, World, CAPTIONS_PER_SAMPLE};

const FORMAT: &str = "anyface-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenHashes {
    pub world: String,
    pub encoders: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: TrainConfig,
    pub step: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub latent_dim: usize,
    pub frozen: FrozenHashes,
    pub synthesis: ParamLayout,
    pub reconstruction: ParamLayout,
}

/// Both CMD instances plus the configuration that built them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub step: usize,
    pub layers: usize,
    pub latent_dim: usize,
    pub synthesis: CmdModule,
    pub reconstruction: CmdModule,
}

impl Model {
    /// Fresh modules; both streams start from the same seed.
    pub fn new(
        config: TrainConfig,
        embed_dim: usize,
        layers: usize,
        latent_dim: usize,
    ) -> Result<Self> {
        check_split(config.m_split, config.n_split, layers)?;
        let make = || {
            CmdModule::new(
                config.cmd.clone(),
                embed_dim,
                layers,
                latent_dim,
                config.seed,
            )
        };
        Ok(Self {
            synthesis: make()?,
            reconstruction: make()?,
            step: 0,
            layers,
            latent_dim,
            config,
        })
    }

    pub fn save(&self, path: &Path, frozen: &FrozenHashes) -> Result<()> {
        let header = CheckpointHeader {
            format: FORMAT.into(),
            config: self.config.clone(),
            step: self.step,
            embed_dim: self.synthesis.embed_dim(),
            layers: self.layers,
            latent_dim: self.latent_dim,
            frozen: frozen.clone(),
            synthesis: self.synthesis.params().layout(),
            reconstruction: self.reconstruction.params().layout(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let tensors: Vec<&Tensor> = self
            .synthesis
            .params()
            .tensors()
            .iter()
            .chain(self.reconstruction.params().tensors())
            .collect();
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")
            .and_then(|_| write_tns_all(&mut w, &tensors))
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
        if header.format != FORMAT {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("unsupported format {:?}", header.format),
            });
        }
        let mut model = Self::new(
            header.config.clone(),
            header.embed_dim,
            header.layers,
            header.latent_dim,
        )?;
        model.step = header.step;
        let mut tensors = read_tns_all(&mut r)?;
        let n_syn = model.synthesis.params().len();
        if tensors.len() < n_syn {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("expected at least {n_syn} tensors, got {}", tensors.len()),
            });
        }
        let rec = tensors.split_off(n_syn);
        model.synthesis.params_mut().load(tensors)?;
        model.reconstruction.params_mut().load(rec)?;
        Ok((model, header))
    }

    /// Checks the frozen components against the hashes stored at training time.
    pub fn verify_frozen(
        header: &CheckpointHeader,
        world: &World,
        encoders: &Encoders,
    ) -> Result<()> {
        if header.frozen.world != world.digest() || header.frozen.encoders != encoders.digest() {
            return Err(Error::Format {
                what: "checkpoint",
                detail: "frozen world/encoder hashes do not match the loaded artifacts".into(),
            });
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.synthesis.params().digest_into(&mut h);
        self.reconstruction.params().digest_into(&mut h);
        hex::encode(h.finalize())
    }

    fn check_caption_count(captions: &[&Caption]) -> Result<()> {
        if captions.is_empty() || captions.len() > CAPTIONS_PER_SAMPLE {
            return Err(Error::Input {
                op: "synthesize",
                detail: format!(
                    "need 1..={CAPTIONS_PER_SAMPLE} captions, got {}",
                    captions.len()
                ),
            });
        }
        Ok(())
    }

    /// Text-stream latent for a stack of captions.
    pub fn text_latent(&self, encoders: &Encoders, captions: &[&Caption]) -> Result<LatentCode> {
        Self::check_caption_count(captions)?;
        let features = encoders.text_encode_many(captions)?;
        Ok(self.synthesis.forward(&features)?.0)
    }

    /// Inference path of the synthesis stream: text rows `n..L`, style rows
    /// `0..n` from the mapping network at `style_seed`.
    pub fn synthesize(
        &self,
        world: &World,
        encoders: &Encoders,
        captions: &[&Caption],
        style_seed: u64,
    ) -> Result<(ToyImage, LatentCode)> {
        let w_t = self.text_latent(encoders, captions)?;
        let (m, n) = (self.config.m_split, self.config.n_split);
        let w = if n == 0 {
            w_t
        } else {
            let w_c = world.mapping_network(&world.style_noise(style_seed), n)?;
            compose_latent(&w_t, &w_c, m, n)?
        };
        Ok((world.decode(&w)?, w))
    }

    /// Keeps the first `L − m` rows of the inverted source and takes the
    /// last `m` rows from the text stream.
    pub fn manipulate(
        &self,
        world: &World,
        encoders: &Encoders,
        source: &ToyImage,
        captions: &[&Caption],
        m: usize,
    ) -> Result<ToyImage> {
        let layers = self.layers;
        if m > layers {
            return Err(Error::Split { m, n: 0, layers });
        }
        let w_src = world.invert(source)?;
        let w_t = self.text_latent(encoders, captions)?;
        let n = layers - m;
        let w = if n == 0 {
            w_t
        } else {
            compose_latent(&w_t, &w_src.tensor().slice_rows(0, n), m, n)?
        };
        world.decode(&w)
    }
}
