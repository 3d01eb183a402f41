//! Parameter storage, dense layers and the Adam optimizer.

use std::ops::Index;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{normals, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Shape listing used to validate checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            names: self.names.clone(),
            shapes: self.tensors.iter().map(|t| t.shape().to_vec()).collect(),
        }
    }

    /// Replaces every tensor, checking shapes against the current layout.
    pub fn load(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::Format {
                what: "parameters",
                detail: format!(
                    "expected {} tensors, got {}",
                    self.tensors.len(),
                    tensors.len()
                ),
            });
        }
        for ((name, old), new) in self.names.iter().zip(&self.tensors).zip(&tensors) {
            if old.shape() != new.shape() {
                return Err(Error::Format {
                    what: "parameters",
                    detail: format!("{name}: expected {:?}, got {:?}", old.shape(), new.shape()),
                });
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    /// Puts every tensor on the tape as a trainable leaf.
    pub fn bind<'g>(&self, g: &'g Graph) -> Bound<'g> {
        Bound(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Puts every tensor on the tape as a constant.
    pub fn bind_frozen<'g>(&self, g: &'g Graph) -> Bound<'g> {
        Bound(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }

    /// Frozen binding with tensor `id` replaced by `var`; used to probe
    /// gradients with respect to one parameter.
    pub fn bind_probe<'g>(&self, g: &'g Graph, id: ParamId, var: Var<'g>) -> Bound<'g> {
        let mut b = self.bind_frozen(g);
        b.0[id.0] = var;
        b
    }

    /// Id of the tensor registered under `name`.
    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn digest_into(&self, h: &mut Sha256) {
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            t.digest_into(h);
        }
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.digest_into(&mut h);
        hex::encode(h.finalize())
    }
}

/// A [`ParamStore`] placed on one graph.
pub struct Bound<'g>(Vec<Var<'g>>);

impl<'g> Bound<'g> {
    /// Gradients for every bound tensor, zeros where unreached.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.0.iter().map(|&v| grads.wrt(v)).collect()
    }
}

impl<'g> Index<ParamId> for Bound<'g> {
    type Output = Var<'g>;

    fn index(&self, id: ParamId) -> &Var<'g> {
        &self.0[id.0]
    }
}

/// `x·W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Gaussian weights with variance `gain²/fan_in`, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let std = gain / (inputs as f64).sqrt();
        let w = normals(rng, inputs * outputs)
            .into_iter()
            .map(|v| v * std)
            .collect();
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::matrix(inputs, outputs, w)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, outputs)),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        x.matmul(&p[self.weight])?.add_row(&p[self.bias])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::dim("Adam::update", &[grads.len()], &[store.len()]));
        }
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (p, g)) in store.tensors.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                *w -= c.learning_rate * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint ℓ2 norm is at most `max_norm`;
/// returns the norm before clipping. Non-positive `max_norm` disables it.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn clipping_caps_joint_norm() {
        let mut g = vec![Tensor::row(vec![3.0, 0.0]), Tensor::row(vec![0.0, 4.0])];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[1].data(), &[0.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[1].data()[1] - 0.8).abs() < 1e-15);
        let mut h = vec![Tensor::row(vec![30.0])];
        clip_grad_norm(&mut h, 0.0);
        assert_eq!(h[0].data(), &[30.0]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::row(vec![1.0, -1.0]));
        let mut opt = Adam::new(AdamConfig::default(), &store);
        opt.update(&mut store, &[Tensor::row(vec![0.5, -2.0])])
            .unwrap();
        let x = store.get(id).data();
        assert!((x[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((x[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::row(vec![3.0, -2.0]));
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
            &store,
        );
        for _ in 0..2000 {
            let g = Graph::new();
            let p = store.bind(&g);
            let loss = p[id].add_const(-1.0).square().sum();
            let grads = g.backward(loss).unwrap();
            opt.update(&mut store, &p.gradients(&grads)).unwrap();
        }
        assert!(store.get(id).data().iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn frozen_binding_has_no_gradient() {
        let mut store = ParamStore::new();
        let mut rng = seeded(1);
        let lin = Linear::new(&mut store, "l", 3, 2, 1.0, &mut rng);
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let x = g.param(Tensor::row(vec![1.0, 2.0, 3.0]));
        let y = lin.forward(&p, &x).unwrap().sum();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(p[lin.weight]).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(2, 2));
        assert!(store.load(vec![Tensor::zeros(1, 2)]).is_err());
        assert!(store.load(vec![]).is_err());
        store.load(vec![Tensor::filled(2, 2, 1.0)]).unwrap();
        assert_eq!(store.get(ParamId(0)).sum(), 4.0);
    }
}
