//! On-disk dataset layout: `manifest.json` plus one `sample_<id>.tns`
//! (latent, image, concatenated caption tokens) and `sample_<id>.json`
//! (attributes and caption offsets) per record.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{read_tns_all, write_tns_all, Tensor};
use crate::world::{
    AttributeVector, Caption, LatentCode, PairedSample, ToyImage, World, WorldConfig,
};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "anyface-dataset/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub world_seed: u64,
    pub world: WorldConfig,
    pub world_digest: String,
    pub ids: Vec<u64>,
    pub vocabulary: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    id: u64,
    attributes: Vec<bool>,
    /// `[start, end)` token ranges inside the caption tensor.
    caption_offsets: Vec<(usize, usize)>,
}

pub fn sample_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("sample_{id}.tns"))
}

fn sidecar_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("sample_{id}.json"))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// A loaded dataset: the rebuilt world and its records.
pub struct Dataset {
    pub manifest: Manifest,
    pub world: World,
    pub samples: Vec<PairedSample>,
}

impl Dataset {
    /// Generates `count` samples from the world with the given seed.
    pub fn generate(seed: u64, count: usize, config: WorldConfig) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("count must be positive".into()));
        }
        let world = World::with_config(seed, config)?;
        let samples = (0..count as u64)
            .map(|id| world.sample_paired(seed, id))
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            format: FORMAT.into(),
            world_seed: seed,
            world: world.config().clone(),
            world_digest: world.digest(),
            ids: samples.iter().map(|s| s.id).collect(),
            vocabulary: world.vocab().words.clone(),
        };
        Ok(Self {
            manifest,
            world,
            samples,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for s in &self.samples {
            let mut tokens = Vec::new();
            let mut offsets = Vec::new();
            for c in &s.captions {
                let start = tokens.len();
                tokens.extend(c.tokens.iter().map(|&t| t as f64));
                offsets.push((start, tokens.len()));
            }
            let tok = Tensor::row(tokens);
            let path = sample_path(dir, s.id);
            let mut w = create(&path)?;
            write_tns_all(&mut w, &[s.latent_true.tensor(), s.image.tensor(), &tok])
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&path, e))?;
            let sidecar = Sidecar {
                id: s.id,
                attributes: s.attributes.0.clone(),
                caption_offsets: offsets,
            };
            let path = sidecar_path(dir, s.id);
            fs::write(&path, serde_json::to_vec_pretty(&sidecar)?)
                .map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_vec_pretty(&self.manifest)?)
            .map_err(|e| Error::io(&path, e))
    }

    /// Reads only the manifest and rebuilds the world, skipping the records.
    pub fn read_world(dir: &Path) -> Result<(Manifest, World)> {
        let path = dir.join(MANIFEST);
        let manifest: Manifest = serde_json::from_reader(open(&path)?)?;
        if manifest.format != FORMAT {
            return Err(Error::Format {
                what: "manifest",
                detail: format!("unsupported format {:?}", manifest.format),
            });
        }
        let world = World::with_config(manifest.world_seed, manifest.world.clone())?;
        if world.digest() != manifest.world_digest {
            return Err(Error::Format {
                what: "manifest",
                detail: "world digest does not match the rebuilt world".into(),
            });
        }
        Ok((manifest, world))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let (manifest, world) = Self::read_world(dir)?;
        let cfg = world.config();
        let mut samples = Vec::with_capacity(manifest.ids.len());
        for &id in &manifest.ids {
            let path = sample_path(dir, id);
            let tensors = read_tns_all(&mut open(&path)?)?;
            let [latent, image, tokens]: [Tensor; 3] =
                tensors.try_into().map_err(|v: Vec<Tensor>| Error::Format {
                    what: "sample",
                    detail: format!("{}: expected 3 tensors, got {}", path.display(), v.len()),
                })?;
            let side: Sidecar = serde_json::from_reader(open(&sidecar_path(dir, id))?)?;
            let captions = side
                .caption_offsets
                .iter()
                .map(|&(s, e)| {
                    let ids = tokens.data().get(s..e).ok_or(Error::Format {
                        what: "sample",
                        detail: format!("caption range {s}..{e} out of bounds"),
                    })?;
                    Caption::new(ids.iter().map(|&v| v as usize).collect())
                })
                .collect::<Result<Vec<_>>>()?;
            samples.push(PairedSample {
                id,
                attributes: AttributeVector(side.attributes),
                latent_true: LatentCode::new(latent, cfg.layers, cfg.latent_dim)?,
                image: ToyImage::new(image)?,
                captions,
            });
        }
        Ok(Self {
            manifest,
            world,
            samples,
        })
    }

    /// SHA-256 of the manifest file as written.
    pub fn manifest_hash(dir: &Path) -> Result<String> {
        let path = dir.join(MANIFEST);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(hex::encode(Sha256::digest(bytes)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::generate(5, 6, WorldConfig::default()).unwrap();
        ds.write(dir.path()).unwrap();
        let back = Dataset::read(dir.path()).unwrap();
        assert_eq!(back.samples, ds.samples);
        assert_eq!(back.manifest, ds.manifest);
        let (manifest, world) = Dataset::read_world(dir.path()).unwrap();
        assert_eq!(manifest, ds.manifest);
        assert_eq!(world.digest(), ds.world.digest());
    }

    #[test]
    fn zero_count_is_rejected() {
        let err = Dataset::generate(5, 0, WorldConfig::default())
            .err()
            .unwrap();
        assert!(err.to_string().contains("count must be positive"));
    }
}
