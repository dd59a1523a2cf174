use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::rng::RngStream;

use super::tape::Var;
use super::tensor::DenseTensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    /// Group used for per-layer precision control.
    pub layer: String,
    pub value: DenseTensor,
    pub trainable: bool,
}

/// Named, ordered collection of model parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, layer: &str, value: DenseTensor, trainable: bool) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            layer: layer.to_string(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn from_params(params: Vec<Param>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Self { params, index }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &DenseTensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseTensor {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&DenseTensor> {
        self.id(name).map(|id| self.get(id))
    }

    /// Distinct layer names in first-appearance order.
    pub fn layers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.params {
            if !out.contains(&p.layer) {
                out.push(p.layer.clone());
            }
        }
        out
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Concatenation of all trainable values, in store order.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// Bitwise equality of every value.
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a
                        .value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Tape variables for every parameter of a store.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub(crate) fn new(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn get(&self, i: usize) -> Option<Var> {
        self.vars.get(i).copied()
    }
}

/// Gaussian init scaled by `1/sqrt(fan_in)`.
pub fn init_normal(rows: usize, cols: usize, scale: f64, rng: &mut RngStream) -> DenseTensor {
    DenseTensor::from_fn(&[rows, cols], |_| rng.normal() * scale)
}

pub fn init_fan_in(rows: usize, cols: usize, rng: &mut RngStream) -> DenseTensor {
    init_normal(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
}

pub fn ones(rows: usize, cols: usize) -> DenseTensor {
    DenseTensor::from_fn(&[rows, cols], |_| 1.0)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

/// Adam over the trainable parameters of a store.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Descent step along `grads` (one gradient vector per parameter).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        if self.cfg.lr == 0.0 {
            return;
        }
        self.t += 1;
        let scale = match self.cfg.clip_norm {
            Some(c) => {
                let norm = grads
                    .iter()
                    .zip(store.params())
                    .filter(|(_, p)| p.trainable)
                    .flat_map(|(g, _)| g.iter())
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            if !store.param(i).trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = store.get_mut(ParamId(i)).data_mut();
            for k in 0..w.len() {
                let gk = g[k] * scale;
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                w[k] -= self.cfg.lr * mh / (vh.sqrt() + self.cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", "l", DenseTensor::vector(vec![3.0, -2.0]).unwrap(), true);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..500 {
            let g: Vec<f64> = store.get(id).data().iter().map(|x| 2.0 * x).collect();
            opt.step(&mut store, &[g]);
        }
        assert!(store.get(id).data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn zero_lr_leaves_params_untouched() {
        let mut store = ParamStore::new();
        store.add("x", "l", DenseTensor::vector(vec![1.5]).unwrap(), true);
        let before = store.clone();
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
            &store,
        );
        opt.step(&mut store, &[vec![10.0]]);
        assert!(store.bitwise_eq(&before));
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut store = ParamStore::new();
        store.add("x", "l", DenseTensor::vector(vec![1.0]).unwrap(), false);
        let before = store.clone();
        Adam::new(AdamConfig::default(), &store).step(&mut store, &[vec![1.0]]);
        assert!(store.bitwise_eq(&before));
    }
}
