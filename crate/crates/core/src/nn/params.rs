use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::matrix::{axpy, dot, Matrix};
use crate::error::{dim_err, MergeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z`.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Shape and nonlinearity of one dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec {
            in_dim,
            out_dim,
            activation,
        }
    }
}

/// Builds `dims[0] - dims[1] - ... - dims[n]` with `hidden` activations and
/// an identity output layer.
pub fn mlp_specs(dims: &[usize], hidden: Activation) -> Vec<LayerSpec> {
    let n = dims.len().saturating_sub(1);
    (0..n)
        .map(|i| {
            let act = if i + 1 == n {
                Activation::Identity
            } else {
                hidden
            };
            LayerSpec::new(dims[i], dims[i + 1], act)
        })
        .collect()
}

/// One dense layer: `act(x Wᵀ + b)` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub act: Activation,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        LayerSpec::new(self.w.cols, self.w.rows, self.act)
    }
}

/// Parameters of a feed-forward network, layer by layer.
///
/// Parameter groups are numbered `2l` (weight of layer `l`) and `2l + 1`
/// (its bias). Flattening walks groups in that order, weights row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub layers: Vec<Layer>,
}

impl ParamSet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let p = ParamSet { layers };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(specs: &[LayerSpec]) -> Self {
        ParamSet {
            layers: specs
                .iter()
                .map(|s| Layer {
                    w: Matrix::zeros(s.out_dim, s.in_dim),
                    b: vec![0.0; s.out_dim],
                    act: s.activation,
                })
                .collect(),
        }
    }

    /// He-style Gaussian initialisation (std `sqrt(2 / fan_in)`), zero biases.
    pub fn init<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Self {
        let mut p = ParamSet::zeros(specs);
        for layer in &mut p.layers {
            let std = (2.0 / layer.w.cols as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in &mut layer.w.data {
                *v = normal.sample(rng);
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(MergeError::Empty("parameter set has no layers"));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.w.rows == 0 || layer.w.cols == 0 {
                return Err(dim_err(format!("layer {l} has a zero dimension")));
            }
            if layer.w.data.len() != layer.w.rows * layer.w.cols {
                return Err(dim_err(format!("layer {l} weight data length")));
            }
            if layer.b.len() != layer.w.rows {
                return Err(dim_err(format!(
                    "layer {l} bias length {} != out_dim {}",
                    layer.b.len(),
                    layer.w.rows
                )));
            }
            if l > 0 && self.layers[l - 1].w.rows != layer.w.cols {
                return Err(dim_err(format!(
                    "layer {} out_dim {} does not chain into layer {l} in_dim {}",
                    l - 1,
                    self.layers[l - 1].w.rows,
                    layer.w.cols
                )));
            }
            if !layer.w.is_finite() || layer.b.iter().any(|v| !v.is_finite()) {
                return Err(MergeError::NonFinite("parameter set"));
            }
        }
        Ok(())
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.rows)
    }

    pub fn num_groups(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.data.len() + l.b.len()).sum()
    }

    /// Shape equality: the compatibility predicate for all arithmetic.
    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.w.same_shape(&b.w) && a.b.len() == b.b.len())
    }

    pub fn check_shape(&self, other: &ParamSet, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(dim_err(format!("{what}: parameter shapes differ")))
        }
    }

    pub fn group(&self, g: usize) -> &[f64] {
        let layer = &self.layers[g / 2];
        if g.is_multiple_of(2) {
            &layer.w.data
        } else {
            &layer.b
        }
    }

    pub fn group_mut(&mut self, g: usize) -> &mut [f64] {
        let layer = &mut self.layers[g / 2];
        if g.is_multiple_of(2) {
            &mut layer.w.data
        } else {
            &mut layer.b
        }
    }

    pub fn groups(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.num_groups()).map(move |g| self.group(g))
    }

    pub fn zeros_like(&self) -> ParamSet {
        self.map(|_| 0.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamSet {
        let mut out = self.clone();
        for g in 0..out.num_groups() {
            for v in out.group_mut(g) {
                *v = f(*v);
            }
        }
        out
    }

    /// Element-wise combination of two same-shaped sets.
    pub fn zip_with(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<ParamSet> {
        self.check_shape(other, "zip_with")?;
        let mut out = self.clone();
        for g in 0..out.num_groups() {
            for (a, b) in out.group_mut(g).iter_mut().zip(other.group(g)) {
                *a = f(*a, *b);
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &ParamSet) -> Result<ParamSet> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ParamSet) -> Result<ParamSet> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> ParamSet {
        self.map(|v| v * s)
    }

    /// `self += a * x`.
    pub fn axpy(&mut self, a: f64, x: &ParamSet) -> Result<()> {
        self.check_shape(x, "axpy")?;
        for g in 0..self.num_groups() {
            axpy(self.group_mut(g), a, x.group(g));
        }
        Ok(())
    }

    pub fn dot(&self, other: &ParamSet) -> Result<f64> {
        self.check_shape(other, "dot")?;
        Ok((0..self.num_groups())
            .map(|g| dot(self.group(g), other.group(g)))
            .sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.groups().map(|g| dot(g, g)).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for g in self.groups() {
            out.extend_from_slice(g);
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) onto this set's shape.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.num_params() {
            return Err(dim_err(format!(
                "flat vector length {} != {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut out = self.clone();
        let mut off = 0;
        for g in 0..out.num_groups() {
            let dst = out.group_mut(g);
            let n = dst.len();
            dst.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(out)
    }

    /// SHA-256 over the little-endian bytes of every parameter and the
    /// layer shapes. Stable across runs and platforms.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for layer in &self.layers {
            h.update((layer.w.rows as u64).to_le_bytes());
            h.update((layer.w.cols as u64).to_le_bytes());
            h.update([layer.act as u8]);
        }
        for g in self.groups() {
            for v in g {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<ParamSet> {
        let p: ParamSet = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamSet> {
        let s = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                MergeError::MissingFile {
                    path: path.to_path_buf(),
                    hint: "checkpoint not found; run `finetune` to create checkpoints".into(),
                }
            } else {
                e.into()
            }
        })?;
        ParamSet::from_json(&s)
    }
}
