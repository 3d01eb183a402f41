//! The cross-modal mapper: a pre-norm transformer over a stack of
//! embeddings, mean-pooled to a hidden feature `h`, then a three-layer head
//! that emits an `L×d` latent. Also the latent split/compose.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamId, ParamStore};
use crate::rng::{derive, seeded, Rng};
use crate::tensor::Tensor;
use crate::world::LatentCode;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmdConfig {
    pub transformer_layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Widths of the two hidden head layers.
    pub head_hidden: [usize; 2],
}

impl Default for CmdConfig {
    fn default() -> Self {
        Self {
            transformer_layers: 3,
            heads: 4,
            ff_mult: 4,
            head_hidden: [64, 128],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(1, d, 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, d)),
        }
    }

    fn forward<'g>(&self, p: &Bound<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        x.layer_norm_rows(LN_EPS)
            .mul_row(&p[self.gain])?
            .add_row(&p[self.bias])
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

/// One CMD instance with its own parameters.
#[derive(Clone, Debug)]
pub struct CmdModule {
    config: CmdConfig,
    embed_dim: usize,
    layers: usize,
    latent_dim: usize,
    store: ParamStore,
    blocks: Vec<Block>,
    final_norm: Norm,
    head: [Linear; 3],
}

/// Batched forward output: one row per segment.
pub struct CmdOutput<'g> {
    /// `B × (L·d)` flattened latents.
    pub latent: Var<'g>,
    /// `B × d_e` pooled transformer output.
    pub hidden: Var<'g>,
}

impl CmdModule {
    pub fn new(
        config: CmdConfig,
        embed_dim: usize,
        layers: usize,
        latent_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if config.heads == 0 || !embed_dim.is_multiple_of(config.heads) {
            return Err(Error::Config(format!(
                "cmd.heads = {} must divide the embedding width {embed_dim}",
                config.heads
            )));
        }
        if config.ff_mult == 0 || config.head_hidden.contains(&0) {
            return Err(Error::Config("cmd widths must be positive".into()));
        }
        let mut rng = seeded(derive(seed, 0xc3d));
        let mut store = ParamStore::new();
        let d = embed_dim;
        let ff = d * config.ff_mult;
        let residual_gain = 1.0 / (2.0 * config.transformer_layers.max(1) as f64).sqrt();
        let lin =
            |store: &mut ParamStore, rng: &mut Rng, name: String, i: usize, o: usize, gain: f64| {
                Linear::new(store, &name, i, o, gain, rng)
            };
        let blocks = (0..config.transformer_layers)
            .map(|b| Block {
                ln1: Norm::new(&mut store, &format!("block{b}.ln1"), d),
                q: lin(&mut store, &mut rng, format!("block{b}.q"), d, d, 1.0),
                k: lin(&mut store, &mut rng, format!("block{b}.k"), d, d, 1.0),
                v: lin(&mut store, &mut rng, format!("block{b}.v"), d, d, 1.0),
                o: lin(
                    &mut store,
                    &mut rng,
                    format!("block{b}.o"),
                    d,
                    d,
                    residual_gain,
                ),
                ln2: Norm::new(&mut store, &format!("block{b}.ln2"), d),
                ff1: lin(&mut store, &mut rng, format!("block{b}.ff1"), d, ff, 1.0),
                ff2: lin(
                    &mut store,
                    &mut rng,
                    format!("block{b}.ff2"),
                    ff,
                    d,
                    residual_gain,
                ),
            })
            .collect();
        let final_norm = Norm::new(&mut store, "final_ln", d);
        let [h1, h2] = config.head_hidden;
        let head = [
            lin(&mut store, &mut rng, "head.l1".into(), d, h1, 1.0),
            lin(&mut store, &mut rng, "head.l2".into(), h1, h2, 1.0),
            lin(
                &mut store,
                &mut rng,
                "head.l3".into(),
                h2,
                layers * latent_dim,
                1.0,
            ),
        ];
        Ok(Self {
            config,
            embed_dim,
            layers,
            latent_dim,
            store,
            blocks,
            final_norm,
            head,
        })
    }

    pub fn config(&self) -> &CmdConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Runs every segment of `features` (rows = stacked embeddings) through
    /// the transformer; rows attend only within their own segment.
    pub fn forward_var<'g>(
        &self,
        p: &Bound<'g>,
        features: &Var<'g>,
        segments: &[(usize, usize)],
    ) -> Result<CmdOutput<'g>> {
        let cols = features.value().cols();
        if cols != self.embed_dim {
            return Err(Error::dim("cmd_forward", &[1, cols], &[1, self.embed_dim]));
        }
        if segments.is_empty() || features.value().rows() == 0 {
            return Err(Error::Empty("cmd_forward"));
        }
        let mut x = *features;
        for b in &self.blocks {
            let n = b.ln1.forward(p, &x)?;
            let q = b.q.forward(p, &n)?;
            let k = b.k.forward(p, &n)?;
            let v = b.v.forward(p, &n)?;
            let a = q.attention(&k, &v, segments, self.config.heads)?;
            x = x.add(&b.o.forward(p, &a)?)?;
            let n = b.ln2.forward(p, &x)?;
            let f = b.ff2.forward(p, &b.ff1.forward(p, &n)?.gelu())?;
            x = x.add(&f)?;
        }
        let x = self.final_norm.forward(p, &x)?;
        let hidden = x.segment_mean(segments)?;
        let h1 = self.head[0].forward(p, &hidden)?.gelu();
        let h2 = self.head[1].forward(p, &h1)?.gelu();
        let latent = self.head[2].forward(p, &h2)?;
        Ok(CmdOutput { latent, hidden })
    }

    /// `F: n_cap × d_e → (w: L×d, h: 1×d_e)`.
    pub fn forward(&self, features: &Tensor) -> Result<(LatentCode, Tensor)> {
        let (latent, hidden) = self.forward_batch(features, &[(0, features.rows())])?;
        let w = latent.reshape(vec![self.layers, self.latent_dim])?;
        Ok((LatentCode::new(w, self.layers, self.latent_dim)?, hidden))
    }

    /// Value-only batched forward: `(B × L·d, B × d_e)`.
    pub fn forward_batch(
        &self,
        features: &Tensor,
        segments: &[(usize, usize)],
    ) -> Result<(Tensor, Tensor)> {
        if features.rows() == 0 {
            return Err(Error::Empty("cmd_forward"));
        }
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        let out = self.forward_var(&p, &g.constant(features.clone()), segments)?;
        Ok(((*out.latent.value()).clone(), (*out.hidden.value()).clone()))
    }
}

/// Checks `m + n = L`.
pub fn check_split(m: usize, n: usize, layers: usize) -> Result<()> {
    if m + n != layers {
        return Err(Error::Split { m, n, layers });
    }
    Ok(())
}

/// Rows `0..n` from `w_c`, rows `n..L` from `w_t`. `w_c` is ignored when `n = 0`.
pub fn compose_latent(w_t: &LatentCode, w_c: &Tensor, m: usize, n: usize) -> Result<LatentCode> {
    let t = w_t.tensor();
    let (layers, d) = (t.rows(), t.cols());
    check_split(m, n, layers)?;
    if n == 0 {
        return Ok(w_t.clone());
    }
    if w_c.rows() != n || w_c.cols() != d {
        return Err(Error::dim("compose_latent", w_c.shape(), &[n, d]));
    }
    let mut data = Vec::with_capacity(layers * d);
    data.extend_from_slice(w_c.data());
    data.extend_from_slice(&t.data()[n * d..]);
    LatentCode::new(Tensor::matrix(layers, d, data), layers, d)
}

/// Batched [`compose_latent`] on flattened rows: `w_t: B×(L·d)`, `w_c: B×(n·d)`.
pub fn compose_var<'g>(
    w_t: &Var<'g>,
    w_c: &Var<'g>,
    n: usize,
    latent_dim: usize,
) -> Result<Var<'g>> {
    let total = w_t.value().cols();
    let split = n * latent_dim;
    if split == 0 {
        return Ok(*w_t);
    }
    if w_c.value().cols() != split || w_c.value().rows() != w_t.value().rows() {
        return Err(Error::dim(
            "compose_latent",
            &w_c.shape(),
            &[w_t.value().rows(), split],
        ));
    }
    if split == total {
        return Ok(*w_c);
    }
    Var::concat_cols(&[*w_c, w_t.slice_cols(split, total)?])
}
