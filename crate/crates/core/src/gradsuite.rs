//! The full finite-difference suite: every loss and objective plus every
//! differentiable forward, each at many random points.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::cmd::{CmdConfig, CmdModule};
use crate::encoders::{EncoderConfig, Encoders};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check_at, DEFAULT_STEP};
use crate::losses::{
    clip_loss, cmt_loss, dt_loss, mse_loss, pair_loss, rec_loss, reconstruction_objective,
    synthesis_objective, DtOrientation, LossWeights, ReconstructionParts, SynthesisParts,
};
use crate::rng::{derive, normals, seeded, Rng};
use crate::tensor::Tensor;
use crate::world::World;

pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub points: usize,
    pub seed: u64,
    /// Inputs larger than this are probed on a random coordinate subset of this size per point.
    pub max_coords: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            points: 100,
            seed: 0,
            max_coords: 24,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub points: usize,
    pub checked: usize,
    pub kinks: usize,
    pub max_rel_error: f64,
}

impl SuiteEntry {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance && self.checked > 0
    }
}

type Probe<'a> = dyn for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>> + 'a;

/// One random point: the probed input and the scalar function of it.
struct Point<'a> {
    x: Tensor,
    f: Box<Probe<'a>>,
}

type Case<'a> = (&'static str, Box<dyn Fn(&mut Rng) -> Point<'a> + 'a>);

struct Fixture {
    world: World,
    encoders: Encoders,
    cmd: CmdModule,
    latent_len: usize,
    embed_dim: usize,
}

fn k<'g>(g: &'g Graph, t: &Tensor) -> Var<'g> {
    g.constant(t.clone())
}

fn gaussian(rng: &mut Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::matrix(
        r,
        c,
        normals(rng, r * c).into_iter().map(|v| v * scale).collect(),
    )
}

/// `Σ x ⊙ probe`, turning a tensor output into a generic scalar.
fn project<'g>(g: &'g Graph, x: &Var<'g>, probe: &Tensor) -> Result<Var<'g>> {
    x.mul(&g.constant(probe.clone()))?.sum().pipe(Ok)
}

trait Pipe: Sized {
    fn pipe<T>(self, f: impl FnOnce(Self) -> T) -> T {
        f(self)
    }
}
impl<T> Pipe for T {}

/// Latent triples with cosines to `w̄` bounded away from zero, so the
/// ratio in the triplet term stays in its well-conditioned region.
fn latent_family(rng: &mut Rng, rows: usize, n: usize) -> (Tensor, Tensor, Tensor, Tensor) {
    let w_bar = gaussian(rng, 1, n, 1.0);
    let tile = |t: &Tensor| Tensor::matrix(rows, n, t.data().repeat(rows));
    let w_bar = tile(&w_bar);
    let w = w_bar.add(&gaussian(rng, rows, n, 0.8)).unwrap();
    let w_t = w.add(&gaussian(rng, rows, n, 0.8)).unwrap();
    let w_neg = w_bar.add(&gaussian(rng, rows, n, 1.2)).unwrap();
    (w_t, w_neg, w, w_bar)
}

fn cases<'a>(fx: &'a Fixture) -> Vec<Case<'a>> {
    let n = fx.latent_len;
    let de = fx.embed_dim;
    let pixels = fx.world.config().pixels();
    let mut out: Vec<Case<'a>> = Vec::new();

    out.push((
        "cmt_loss",
        Box::new(move |rng| {
            let a = gaussian(rng, 2, de, 1.5);
            let b = gaussian(rng, 2, de, 1.5);
            Point {
                x: a,
                f: Box::new(move |g, x| cmt_loss(&x, &k(g, &b))),
            }
        }),
    ));
    for (name, order) in [("pair_loss_l2", 2u8), ("pair_loss_l1", 1)] {
        out.push((
            name,
            Box::new(move |rng| {
                let a = gaussian(rng, 2, n, 1.0);
                let b = gaussian(rng, 2, n, 1.0);
                Point {
                    x: a,
                    f: Box::new(move |g, x| pair_loss(&x, &k(g, &b), order)),
                }
            }),
        ));
    }
    for (name, orientation, wrt_neg) in [
        ("dt_loss_prose_wt", DtOrientation::Prose, false),
        ("dt_loss_prose_wneg", DtOrientation::Prose, true),
        ("dt_loss_as_written_wt", DtOrientation::AsWritten, false),
    ] {
        out.push((
            name,
            Box::new(move |rng| {
                let (w_t, w_neg, w, w_bar) = latent_family(rng, 2, n);
                let margin = rng.random_range(0.0..3.0);
                let (x, other) = if wrt_neg { (w_neg, w_t) } else { (w_t, w_neg) };
                Point {
                    x,
                    f: Box::new(move |g, x| {
                        let o = k(g, &other);
                        let (pos, neg) = if wrt_neg { (&o, &x) } else { (&x, &o) };
                        dt_loss(pos, neg, &k(g, &w), &k(g, &w_bar), margin, orientation)
                    }),
                }
            }),
        ));
    }
    out.push((
        "clip_loss",
        Box::new(move |rng| {
            let f_t = gaussian(rng, 2, de, 1.0);
            Point {
                x: gaussian(rng, 2, de, 1.0),
                f: Box::new(move |g, x| clip_loss(&k(g, &f_t), &x)),
            }
        }),
    ));
    out.push((
        "rec_loss",
        Box::new(move |rng| {
            let i = gaussian(rng, 1, pixels, 0.5);
            Point {
                x: gaussian(rng, 1, pixels, 0.5),
                f: Box::new(move |g, x| rec_loss(&x, &k(g, &i))),
            }
        }),
    ));
    out.push((
        "mse_loss",
        Box::new(move |rng| {
            let w = gaussian(rng, 2, n, 1.0);
            Point {
                x: gaussian(rng, 2, n, 1.0),
                f: Box::new(move |g, x| mse_loss(&x, &k(g, &w))),
            }
        }),
    ));
    out.push((
        "synthesis_objective",
        Box::new(move |rng| {
            let (w_t, w_neg, w, w_bar) = latent_family(rng, 1, n);
            let to_hidden = gaussian(rng, n, de, 0.1);
            let to_feature = gaussian(rng, n, de, 0.1);
            let (h_peer, f_t) = (gaussian(rng, 1, de, 1.0), gaussian(rng, 1, de, 1.0));
            let weights = LossWeights {
                lambda_cmt: rng.random_range(0.0..2.0),
                lambda_clip: rng.random_range(0.0..2.0),
                ..LossWeights::default()
            };
            Point {
                x: w_t,
                f: Box::new(move |g, x| {
                    let parts = SynthesisParts {
                        dt: dt_loss(
                            &x,
                            &k(g, &w_neg),
                            &k(g, &w),
                            &k(g, &w_bar),
                            weights.margin,
                            weights.dt_orientation,
                        )?,
                        cmt: cmt_loss(&x.matmul(&k(g, &to_hidden))?, &k(g, &h_peer))?,
                        clip: clip_loss(&k(g, &f_t), &x.matmul(&k(g, &to_feature))?)?,
                    };
                    synthesis_objective(&parts, &weights)
                }),
            }
        }),
    ));
    out.push((
        "reconstruction_objective",
        Box::new(move |rng| {
            let w = gaussian(rng, 1, n, 1.0);
            let image = fx
                .world
                .decoder()
                .decode_rows(&gaussian(rng, 1, n, 1.0))
                .unwrap();
            let to_hidden = gaussian(rng, n, de, 0.1);
            let h_peer = gaussian(rng, 1, de, 1.0);
            let weights = LossWeights {
                lambda_cmt: rng.random_range(0.0..2.0),
                lambda_rec: rng.random_range(0.0..2.0),
                ..LossWeights::default()
            };
            Point {
                x: gaussian(rng, 1, n, 1.0),
                f: Box::new(move |g, x| {
                    let parts = ReconstructionParts {
                        mse: mse_loss(&x, &k(g, &w))?,
                        cmt: cmt_loss(&x.matmul(&k(g, &to_hidden))?, &k(g, &h_peer))?,
                        rec: rec_loss(&fx.world.decoder().decode_var(&x)?, &k(g, &image))?,
                    };
                    reconstruction_objective(&parts, &weights)
                }),
            }
        }),
    ));
    for (name, hidden) in [("cmd_forward_latent", false), ("cmd_forward_hidden", true)] {
        out.push((
            name,
            Box::new(move |rng| {
                let caps = rng.random_range(1..=4);
                let width = if hidden { de } else { n };
                let probe = gaussian(rng, 1, width, 1.0);
                Point {
                    x: gaussian(rng, caps, de, 1.0),
                    f: Box::new(move |g, x| {
                        let p = fx.cmd.params().bind_frozen(g);
                        let o = fx.cmd.forward_var(&p, &x, &[(0, caps)])?;
                        project(g, if hidden { &o.hidden } else { &o.latent }, &probe)
                    }),
                }
            }),
        ));
    }
    for (name, param) in [
        ("cmd_param_head", "head.l3.weight"),
        ("cmd_param_attention", "block0.q.weight"),
    ] {
        out.push((
            name,
            Box::new(move |rng| {
                let id = fx.cmd.params().find(param).expect("known parameter");
                let feats = gaussian(rng, 3, de, 1.0);
                let probe = gaussian(rng, 1, n, 1.0);
                Point {
                    x: fx.cmd.params().get(id).clone(),
                    f: Box::new(move |g, x| {
                        let p = fx.cmd.params().bind_probe(g, id, x);
                        let o = fx.cmd.forward_var(&p, &k(g, &feats), &[(0, 3)])?;
                        project(g, &o.latent, &probe)
                    }),
                }
            }),
        ));
    }
    out.push((
        "decoder",
        Box::new(move |rng| {
            let probe = gaussian(rng, 1, pixels, 1.0);
            Point {
                x: gaussian(rng, 1, n, 1.0),
                f: Box::new(move |g, x| project(g, &fx.world.decoder().decode_var(&x)?, &probe)),
            }
        }),
    ));
    out.push((
        "image_encoder",
        Box::new(move |rng| {
            let probe = gaussian(rng, 1, de, 1.0);
            let img = fx
                .world
                .decoder()
                .decode_rows(&gaussian(rng, 1, n, 1.0))
                .unwrap();
            Point {
                x: img,
                f: Box::new(move |g, x| {
                    let p = fx.encoders.params().bind_frozen(g);
                    project(g, &fx.encoders.image_var(&p, &x)?, &probe)
                }),
            }
        }),
    ));
    out.push((
        "text_encoder",
        Box::new(move |rng| {
            let id = fx
                .encoders
                .params()
                .find("text.tokens")
                .expect("token table");
            let vocab = fx.world.vocab().len();
            let seqs: Vec<Vec<usize>> = (0..2)
                .map(|_| {
                    (0..rng.random_range(3..=8))
                        .map(|_| rng.random_range(0..vocab))
                        .collect()
                })
                .collect();
            let probe = gaussian(rng, 2, de, 1.0);
            Point {
                x: fx.encoders.params().get(id).clone(),
                f: Box::new(move |g, x| {
                    let p = fx.encoders.params().bind_probe(g, id, x);
                    project(g, &fx.encoders.text_var(&p, &seqs)?, &probe)
                }),
            }
        }),
    ));
    out
}

/// Runs every case at `cfg.points` random points and reports the worst
/// relative error per case.
pub fn run(cfg: &SuiteConfig) -> Result<Vec<SuiteEntry>> {
    if cfg.points == 0 || cfg.max_coords == 0 {
        return Err(Error::Config(
            "points and max_coords must be positive".into(),
        ));
    }
    let world = World::new(derive(cfg.seed, 1))?;
    let encoders = Encoders::new(
        EncoderConfig::default(),
        world.vocab(),
        world.config().pixels(),
        derive(cfg.seed, 2),
    );
    let embed_dim = encoders.embed_dim();
    let cmd = CmdModule::new(
        CmdConfig::default(),
        embed_dim,
        world.layers(),
        world.latent_dim(),
        derive(cfg.seed, 3),
    )?;
    let fx = Fixture {
        latent_len: world.config().latent_len(),
        world,
        encoders,
        cmd,
        embed_dim,
    };
    let mut entries = Vec::new();
    for (i, (name, make)) in cases(&fx).into_iter().enumerate() {
        let mut rng = seeded(derive(cfg.seed, 100 + i as u64));
        let mut entry = SuiteEntry {
            name,
            points: cfg.points,
            checked: 0,
            kinks: 0,
            max_rel_error: 0.0,
        };
        for _ in 0..cfg.points {
            let point = make(&mut rng);
            let len = point.x.len();
            let coords = if len <= cfg.max_coords {
                (0..len).collect()
            } else {
                sample(&mut rng, len, cfg.max_coords).into_vec()
            };
            let r = finite_diff_check_at(|g, x| (point.f)(g, x), &point.x, DEFAULT_STEP, &coords)?;
            entry.checked += r.checked;
            entry.kinks += r.kinks.len();
            entry.max_rel_error = entry.max_rel_error.max(r.max_rel_error);
        }
        entries.push(entry);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_on_a_few_points() {
        let cfg = SuiteConfig {
            points: 3,
            ..Default::default()
        };
        for e in run(&cfg).unwrap() {
            assert!(e.passed(SUITE_TOLERANCE), "{e:?}");
        }
    }

    #[test]
    fn zero_points_is_a_config_error() {
        let cfg = SuiteConfig {
            points: 0,
            ..Default::default()
        };
        assert!(matches!(run(&cfg), Err(Error::Config(_))));
    }
}
