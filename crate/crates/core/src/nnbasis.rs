//! Neural basis functions.
//!
//! A [`BasisSet`] holds `n` basis functions `ψ_j : R^in -> R^d`, either as one
//! multi-headed MLP whose hidden layers are shared and whose output layer has
//! `n * d` rows, or as `n` independent MLPs with `d` outputs each. All weights
//! live in one flat [`ParameterVector`]; layers are stored as a row-major
//! `out x in` weight block followed by `out` biases.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("invalid basis spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid prune selection: {0}")]
    InvalidKeep(String),
    #[error("parameter vector has {actual} values, layout needs {expected}")]
    ParameterCount { expected: usize, actual: usize },
    #[error("non-finite basis output")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, BasisError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Hidden layers shared by every basis, one output head per basis.
    MultiHeaded,
    /// One disjoint network per basis.
    Independent,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            // Through exp: about twice as fast as libm tanh, and the absolute
            // error stays at rounding level.
            Activation::Tanh => 1.0 - 2.0 / ((2.0 * v).exp() + 1.0),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub n_basis: usize,
    pub architecture: Architecture,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.n_basis == 0 {
            return Err(BasisError::InvalidSpec(format!(
                "input_dim, output_dim and n_basis must be >= 1 (got {}, {}, {})",
                self.input_dim, self.output_dim, self.n_basis
            )));
        }
        if self.hidden_widths.contains(&0) {
            return Err(BasisError::InvalidSpec("hidden widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Per-layer layout of the flat parameter vector.
    pub fn layout(&self) -> Vec<LayerLayout> {
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut push_net = |network: usize, head_out: usize, layers: &mut Vec<LayerLayout>| {
            let mut in_dim = self.input_dim;
            for &w in &self.hidden_widths {
                layers.push(LayerLayout {
                    network,
                    in_dim,
                    out_dim: w,
                    offset,
                });
                offset += w * (in_dim + 1);
                in_dim = w;
            }
            layers.push(LayerLayout {
                network,
                in_dim,
                out_dim: head_out,
                offset,
            });
            offset += head_out * (in_dim + 1);
        };
        match self.architecture {
            Architecture::MultiHeaded => push_net(0, self.n_basis * self.output_dim, &mut layers),
            Architecture::Independent => {
                for j in 0..self.n_basis {
                    push_net(j, self.output_dim, &mut layers);
                }
            }
        }
        layers
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(LayerLayout::len).sum()
    }

    fn layers_per_net(&self) -> usize {
        self.hidden_widths.len() + 1
    }
}

/// One dense layer inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    /// Owning network (always 0 for multi-headed).
    pub network: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Start of the weight block; biases follow at `offset + out_dim * in_dim`.
    pub offset: usize,
}

impl LayerLayout {
    pub fn len(&self) -> usize {
        self.out_dim * (self.in_dim + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    #[inline]
    fn bias_offset(&self) -> usize {
        self.offset + self.out_dim * self.in_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub layout: Vec<LayerLayout>,
    pub frozen_mask: Vec<bool>,
    /// Multi-headed only: the shared hidden layers are frozen too.
    #[serde(default)]
    pub shared_frozen: bool,
}

impl ParameterVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    pub spec: MlpSpec,
    pub params: ParameterVector,
    pub rng_seed: u64,
}

/// Activations recorded during one network pass.
#[derive(Clone, Debug, Default)]
pub struct NetTrace {
    acts: Vec<Vec<f64>>,
}

/// Anything that maps an input vector to a `d x n` feature matrix with
/// trainable parameters. Implemented by [`BasisSet`] and by the neural-ODE
/// basis.
pub trait FeatureMap: Clone + Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn n_basis(&self) -> usize;

    /// Writes `φ(x)` row-major (`d x n`, column `j` is `ψ_j(x)`) into `out`.
    fn features_into(&self, x: &[f64], out: &mut [f64]) -> Result<()>;

    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// One forward/backward pass at `x`. `seed` receives the features and
    /// must fill `dL/dφ` (same `d x n` layout); the parameter gradient is
    /// added into `grad`.
    fn backprop(&self, x: &[f64], grad: &mut [f64], seed: &mut dyn FnMut(&[f64], &mut [f64])) -> Result<()>;

    /// Zeroes every gradient entry owned by a frozen basis.
    fn apply_freeze_mask(&self, grad: &mut [f64]);

    fn is_frozen(&self, j: usize) -> bool;
    fn freeze(&mut self, j: usize);
    /// Multi-headed bases also freeze the shared trunk; no-op otherwise.
    fn freeze_shared(&mut self);

    fn with_added_basis(&self, seed: u64) -> Result<Self>;
    fn prune(&self, keep: &[usize]) -> Result<Self>;

    fn features(&self, x: &[f64]) -> Result<Matrix> {
        let mut out = vec![0.0; self.output_dim() * self.n_basis()];
        self.features_into(x, &mut out)?;
        Ok(Matrix::from_raw(self.output_dim(), self.n_basis(), out))
    }

    /// Number of leading bases whose outputs cannot change under training.
    fn frozen_prefix(&self) -> usize {
        0
    }

    /// Columns `from..n` of `φ(x)`, written row-major as `d x (n - from)`.
    fn features_tail_into(&self, x: &[f64], from: usize, out: &mut [f64]) -> Result<()> {
        let (d, n) = (self.output_dim(), self.n_basis());
        let mut full = vec![0.0; d * n];
        self.features_into(x, &mut full)?;
        copy_tail(&full, d, n, from, out);
        Ok(())
    }

    /// [`FeatureMap::backprop`] restricted to columns `from..n`: `seed` sees
    /// and fills only the tail block.
    fn backprop_tail(
        &self,
        x: &[f64],
        from: usize,
        grad: &mut [f64],
        seed: &mut dyn FnMut(&[f64], &mut [f64]),
    ) -> Result<()> {
        let (d, n) = (self.output_dim(), self.n_basis());
        let w = n - from;
        let mut tail = vec![0.0; d * w];
        let mut tail_seed = vec![0.0; d * w];
        self.backprop(x, grad, &mut |feats, g| {
            copy_tail(feats, d, n, from, &mut tail);
            tail_seed.fill(0.0);
            seed(&tail, &mut tail_seed);
            g.fill(0.0);
            for r in 0..d {
                g[r * n + from..(r + 1) * n].copy_from_slice(&tail_seed[r * w..(r + 1) * w]);
            }
        })
    }
}

fn copy_tail(full: &[f64], d: usize, n: usize, from: usize, out: &mut [f64]) {
    let w = n - from;
    for r in 0..d {
        out[r * w..(r + 1) * w].copy_from_slice(&full[r * n + from..(r + 1) * n]);
    }
}

/// Dot product with four independent accumulators, so the adds pipeline.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn init_layer(rng: &mut ChaCha8Rng, layer: &LayerLayout, values: &mut [f64]) {
    let bound = 1.0 / (layer.in_dim as f64).sqrt();
    for v in &mut values[layer.range()] {
        *v = rng.gen_range(-bound..=bound);
    }
}

impl BasisSet {
    /// Draws every layer from `uniform(±1/√fan_in)` using a ChaCha stream
    /// seeded by `seed`.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let mut values = vec![0.0; layout.iter().map(LayerLayout::len).sum()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &layout {
            init_layer(&mut rng, layer, &mut values);
        }
        let n = spec.n_basis;
        Ok(Self {
            spec,
            params: ParameterVector {
                values,
                layout,
                frozen_mask: vec![false; n],
                shared_frozen: false,
            },
            rng_seed: seed,
        })
    }

    /// Rebuilds a basis set from stored values, checking them against the
    /// spec's layout.
    pub fn from_values(spec: MlpSpec, values: Vec<f64>, frozen_mask: Vec<bool>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let expected = layout.iter().map(LayerLayout::len).sum();
        if values.len() != expected {
            return Err(BasisError::ParameterCount {
                expected,
                actual: values.len(),
            });
        }
        if frozen_mask.len() != spec.n_basis {
            return Err(BasisError::DimensionMismatch {
                expected: spec.n_basis,
                actual: frozen_mask.len(),
            });
        }
        Ok(Self {
            spec,
            params: ParameterVector {
                values,
                layout,
                frozen_mask,
                shared_frozen: false,
            },
            rng_seed: seed,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.values.len()
    }

    fn net_layers(&self, net: usize) -> &[LayerLayout] {
        let per = self.spec.layers_per_net();
        &self.params.layout[net * per..(net + 1) * per]
    }

    /// Parameter ranges owned exclusively by basis `j`.
    pub fn owned_ranges(&self, j: usize) -> Vec<Range<usize>> {
        let d = self.spec.output_dim;
        match self.spec.architecture {
            Architecture::Independent => self.net_layers(j).iter().map(LayerLayout::range).collect(),
            Architecture::MultiHeaded => {
                let head = self.params.layout.last().expect("head layer");
                let w = head.offset + j * d * head.in_dim..head.offset + (j + 1) * d * head.in_dim;
                let b = head.bias_offset() + j * d..head.bias_offset() + (j + 1) * d;
                vec![w, b]
            }
        }
    }

    /// Parameter ranges of the shared trunk (empty for independent bases).
    pub fn shared_ranges(&self) -> Vec<Range<usize>> {
        match self.spec.architecture {
            Architecture::Independent => Vec::new(),
            Architecture::MultiHeaded => {
                let layers = &self.params.layout;
                layers[..layers.len() - 1].iter().map(LayerLayout::range).collect()
            }
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.input_dim {
            return Err(BasisError::DimensionMismatch {
                expected: self.spec.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// `φ(x)` as a `d x n` matrix.
    pub fn forward_features(&self, x: &[f64]) -> Result<Matrix> {
        FeatureMap::features(self, x)
    }

    /// Runs network `net` on `x`, recording activations in `trace`, and
    /// writes output rows `rows` of its last layer into `out`.
    fn run_net(&self, net: usize, x: &[f64], rows: Range<usize>, trace: &mut NetTrace, out: &mut [f64]) {
        let layers = self.net_layers(net);
        let p = &self.params.values;
        let act = self.spec.activation;
        trace.acts.resize_with(layers.len(), Vec::new);
        trace.acts[0].clear();
        trace.acts[0].extend_from_slice(x);
        for (l, layer) in layers[..layers.len() - 1].iter().enumerate() {
            let (prev, next) = trace.acts.split_at_mut(l + 1);
            let input = &prev[l];
            let h = &mut next[0];
            h.clear();
            h.reserve(layer.out_dim);
            let w = &p[layer.offset..layer.bias_offset()];
            let b = &p[layer.bias_offset()..layer.bias_offset() + layer.out_dim];
            for i in 0..layer.out_dim {
                let row = &w[i * layer.in_dim..(i + 1) * layer.in_dim];
                h.push(act.apply(dot(row, input) + b[i]));
            }
        }
        let head = layers.last().expect("head layer");
        let input = &trace.acts[layers.len() - 1];
        let w = &p[head.offset..head.bias_offset()];
        let b = &p[head.bias_offset()..head.bias_offset() + head.out_dim];
        for (o, i) in out.iter_mut().zip(rows) {
            let row = &w[i * head.in_dim..(i + 1) * head.in_dim];
            *o = dot(row, input) + b[i];
        }
    }

    /// Reverse pass through network `net` for the output rows `rows` with
    /// upstream gradient `d_out`. Adds parameter gradients into `grad`
    /// unless `trunk_grads` is false (the hidden layers then only propagate),
    /// and optionally writes the gradient with respect to the input.
    #[allow(clippy::too_many_arguments)]
    fn backprop_net(
        &self,
        net: usize,
        trace: &NetTrace,
        rows: Range<usize>,
        d_out: &[f64],
        grad: &mut [f64],
        trunk_grads: bool,
        mut d_input: Option<&mut [f64]>,
    ) {
        let layers = self.net_layers(net);
        let p = &self.params.values;
        let act = self.spec.activation;
        let head = layers.last().expect("head layer");
        let last = &trace.acts[layers.len() - 1];
        let mut delta = vec![0.0; head.in_dim];
        for (&g, i) in d_out.iter().zip(rows) {
            if g == 0.0 {
                continue;
            }
            let wrow = head.offset + i * head.in_dim;
            axpy(g, last, &mut grad[wrow..wrow + head.in_dim]);
            axpy(g, &p[wrow..wrow + head.in_dim], &mut delta);
            grad[head.bias_offset() + i] += g;
        }
        let need_input = d_input.is_some();
        if layers.len() == 1 {
            if let Some(di) = d_input.as_deref_mut() {
                di.copy_from_slice(&delta);
            }
            return;
        }
        if !trunk_grads && !need_input {
            return;
        }
        for l in (0..layers.len() - 1).rev() {
            let layer = &layers[l];
            let out_act = &trace.acts[l + 1];
            let input = &trace.acts[l];
            for (dk, &a) in delta.iter_mut().zip(out_act) {
                *dk *= act.derivative_from_output(a);
            }
            let mut prev = vec![0.0; layer.in_dim];
            for i in 0..layer.out_dim {
                let g = delta[i];
                if g == 0.0 {
                    continue;
                }
                let wrow = layer.offset + i * layer.in_dim;
                if trunk_grads {
                    axpy(g, input, &mut grad[wrow..wrow + layer.in_dim]);
                    grad[layer.bias_offset() + i] += g;
                }
                if l > 0 || need_input {
                    axpy(g, &p[wrow..wrow + layer.in_dim], &mut prev);
                }
            }
            delta = prev;
        }
        if let Some(di) = d_input {
            di.copy_from_slice(&delta);
        }
    }

    /// Evaluates basis `j` alone at `x`, returning its `d` outputs and the
    /// trace needed by [`BasisSet::backprop_basis`].
    pub fn forward_basis(&self, j: usize, x: &[f64], trace: &mut NetTrace) -> Vec<f64> {
        let d = self.spec.output_dim;
        let mut out = vec![0.0; d];
        match self.spec.architecture {
            Architecture::Independent => self.run_net(j, x, 0..d, trace, &mut out),
            Architecture::MultiHeaded => self.run_net(0, x, j * d..(j + 1) * d, trace, &mut out),
        }
        out
    }

    /// Reverse pass for basis `j` alone. Frozen parameters still receive no
    /// gradient after [`FeatureMap::apply_freeze_mask`]; `d_input` receives
    /// `∂L/∂x` when requested.
    pub fn backprop_basis(
        &self,
        j: usize,
        trace: &NetTrace,
        d_out: &[f64],
        grad: &mut [f64],
        d_input: Option<&mut [f64]>,
    ) {
        let d = self.spec.output_dim;
        match self.spec.architecture {
            Architecture::Independent => {
                let trunk = !self.params.frozen_mask[j];
                self.backprop_net(j, trace, 0..d, d_out, grad, trunk, d_input)
            }
            Architecture::MultiHeaded => {
                let trunk = !self.params.shared_frozen;
                self.backprop_net(0, trace, j * d..(j + 1) * d, d_out, grad, trunk, d_input)
            }
        }
    }

    /// Gradient of a scalar loss given `(x, ∂L/∂φ(x))` pairs. Entries owned
    /// by frozen bases are exactly zero.
    pub fn loss_gradient(&self, batch: &[(Vec<f64>, Matrix)]) -> Result<ParameterVector> {
        let (d, n) = (self.spec.output_dim, self.spec.n_basis);
        let mut grad = vec![0.0; self.param_count()];
        for (x, residual) in batch {
            if residual.rows() != d || residual.cols() != n {
                return Err(BasisError::DimensionMismatch {
                    expected: d * n,
                    actual: residual.rows() * residual.cols(),
                });
            }
            self.backprop(x, &mut grad, &mut |_, seed| seed.copy_from_slice(residual.values()))?;
        }
        self.apply_freeze_mask(&mut grad);
        Ok(ParameterVector {
            values: grad,
            layout: self.params.layout.clone(),
            frozen_mask: self.params.frozen_mask.clone(),
            shared_frozen: self.params.shared_frozen,
        })
    }

    /// Keeps the bases listed in `keep` (strictly increasing). Outputs of the
    /// result equal the selected columns of the original exactly.
    pub fn prune_heads(&self, keep: &[usize]) -> Result<Self> {
        let n = self.spec.n_basis;
        if keep.is_empty() {
            return Err(BasisError::InvalidKeep("keep set is empty".into()));
        }
        if keep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(BasisError::InvalidKeep("indices must be strictly increasing".into()));
        }
        if let Some(&bad) = keep.iter().find(|&&k| k >= n) {
            return Err(BasisError::InvalidKeep(format!(
                "index {bad} out of range for {n} bases"
            )));
        }
        let spec = MlpSpec {
            n_basis: keep.len(),
            ..self.spec.clone()
        };
        let d = self.spec.output_dim;
        let old = &self.params.values;
        let mut values = Vec::with_capacity(spec.param_count());
        match self.spec.architecture {
            Architecture::Independent => {
                for &k in keep {
                    for layer in self.net_layers(k) {
                        values.extend_from_slice(&old[layer.range()]);
                    }
                }
            }
            Architecture::MultiHeaded => {
                let layers = &self.params.layout;
                for layer in &layers[..layers.len() - 1] {
                    values.extend_from_slice(&old[layer.range()]);
                }
                let head = layers.last().expect("head layer");
                for &k in keep {
                    let start = head.offset + k * d * head.in_dim;
                    values.extend_from_slice(&old[start..start + d * head.in_dim]);
                }
                for &k in keep {
                    let start = head.bias_offset() + k * d;
                    values.extend_from_slice(&old[start..start + d]);
                }
            }
        }
        let frozen = keep.iter().map(|&k| self.params.frozen_mask[k]).collect();
        let mut out = Self::from_values(spec, values, frozen, self.rng_seed)?;
        out.params.shared_frozen = self.params.shared_frozen;
        Ok(out)
    }

    /// Appends one freshly initialized basis (new sub-network or new head
    /// rows), leaving every existing parameter untouched.
    pub fn add_basis(&self, seed: u64) -> Result<Self> {
        let spec = MlpSpec {
            n_basis: self.spec.n_basis + 1,
            ..self.spec.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let old = &self.params.values;
        let d = self.spec.output_dim;
        let values = match self.spec.architecture {
            Architecture::Independent => {
                let mut values = old.clone();
                let new_layout = spec.layout();
                let per = spec.layers_per_net();
                values.resize(spec.param_count(), 0.0);
                for layer in &new_layout[self.spec.n_basis * per..] {
                    init_layer(&mut rng, layer, &mut values);
                }
                values
            }
            Architecture::MultiHeaded => {
                let layers = &self.params.layout;
                let head = *layers.last().expect("head layer");
                let mut values = old[..head.offset].to_vec();
                values.extend_from_slice(&old[head.offset..head.bias_offset()]);
                let bound = 1.0 / (head.in_dim as f64).sqrt();
                for _ in 0..d * head.in_dim {
                    values.push(rng.gen_range(-bound..=bound));
                }
                values.extend_from_slice(&old[head.bias_offset()..head.offset + head.len()]);
                for _ in 0..d {
                    values.push(rng.gen_range(-bound..=bound));
                }
                values
            }
        };
        let mut frozen = self.params.frozen_mask.clone();
        frozen.push(false);
        let mut out = Self::from_values(spec, values, frozen, self.rng_seed)?;
        out.params.shared_frozen = self.params.shared_frozen;
        Ok(out)
    }
}

impl FeatureMap for BasisSet {
    fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    fn n_basis(&self) -> usize {
        self.spec.n_basis
    }

    fn features_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_input(x)?;
        let (d, n) = (self.spec.output_dim, self.spec.n_basis);
        let mut trace = NetTrace::default();
        match self.spec.architecture {
            Architecture::MultiHeaded => {
                // Head rows are ordered basis-major: row j*d + r is ψ_j(x)_r.
                let mut heads = vec![0.0; n * d];
                self.run_net(0, x, 0..n * d, &mut trace, &mut heads);
                for j in 0..n {
                    for r in 0..d {
                        out[r * n + j] = heads[j * d + r];
                    }
                }
            }
            Architecture::Independent => {
                let mut col = vec![0.0; d];
                for j in 0..n {
                    self.run_net(j, x, 0..d, &mut trace, &mut col);
                    for r in 0..d {
                        out[r * n + j] = col[r];
                    }
                }
            }
        }
        Ok(())
    }

    fn params(&self) -> &[f64] {
        &self.params.values
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params.values
    }

    fn backprop(&self, x: &[f64], grad: &mut [f64], seed: &mut dyn FnMut(&[f64], &mut [f64])) -> Result<()> {
        self.check_input(x)?;
        let (d, n) = (self.spec.output_dim, self.spec.n_basis);
        let mut feats = vec![0.0; d * n];
        let mut g = vec![0.0; d * n];
        match self.spec.architecture {
            Architecture::MultiHeaded => {
                let mut trace = NetTrace::default();
                let mut heads = vec![0.0; n * d];
                self.run_net(0, x, 0..n * d, &mut trace, &mut heads);
                for j in 0..n {
                    for r in 0..d {
                        feats[r * n + j] = heads[j * d + r];
                    }
                }
                seed(&feats, &mut g);
                let mut d_heads = vec![0.0; n * d];
                for j in 0..n {
                    if self.params.frozen_mask[j] {
                        continue;
                    }
                    for r in 0..d {
                        d_heads[j * d + r] = g[r * n + j];
                    }
                }
                let trunk = !self.params.shared_frozen;
                self.backprop_net(0, &trace, 0..n * d, &d_heads, grad, trunk, None);
            }
            Architecture::Independent => {
                let mut traces = vec![NetTrace::default(); n];
                let mut col = vec![0.0; d];
                for j in 0..n {
                    self.run_net(j, x, 0..d, &mut traces[j], &mut col);
                    for r in 0..d {
                        feats[r * n + j] = col[r];
                    }
                }
                seed(&feats, &mut g);
                for j in 0..n {
                    if self.params.frozen_mask[j] {
                        continue;
                    }
                    for r in 0..d {
                        col[r] = g[r * n + j];
                    }
                    self.backprop_net(j, &traces[j], 0..d, &col, grad, true, None);
                }
            }
        }
        Ok(())
    }

    fn apply_freeze_mask(&self, grad: &mut [f64]) {
        for j in 0..self.spec.n_basis {
            if self.params.frozen_mask[j] {
                for r in self.owned_ranges(j) {
                    grad[r].fill(0.0);
                }
            }
        }
        if self.params.shared_frozen {
            for r in self.shared_ranges() {
                grad[r].fill(0.0);
            }
        }
    }

    fn is_frozen(&self, j: usize) -> bool {
        self.params.frozen_mask[j]
    }

    fn freeze(&mut self, j: usize) {
        self.params.frozen_mask[j] = true;
    }

    fn freeze_shared(&mut self) {
        if self.spec.architecture == Architecture::MultiHeaded {
            self.params.shared_frozen = true;
        }
    }

    fn with_added_basis(&self, seed: u64) -> Result<Self> {
        self.add_basis(seed)
    }

    fn frozen_prefix(&self) -> usize {
        if self.spec.architecture == Architecture::MultiHeaded && !self.params.shared_frozen {
            return 0;
        }
        self.params.frozen_mask.iter().take_while(|&&f| f).count()
    }

    fn features_tail_into(&self, x: &[f64], from: usize, out: &mut [f64]) -> Result<()> {
        if self.spec.architecture == Architecture::MultiHeaded {
            let (d, n) = (self.spec.output_dim, self.spec.n_basis);
            let mut full = vec![0.0; d * n];
            self.features_into(x, &mut full)?;
            copy_tail(&full, d, n, from, out);
            return Ok(());
        }
        self.check_input(x)?;
        let (d, n) = (self.spec.output_dim, self.spec.n_basis);
        let w = n - from;
        let mut trace = NetTrace::default();
        let mut col = vec![0.0; d];
        for j in from..n {
            self.run_net(j, x, 0..d, &mut trace, &mut col);
            for r in 0..d {
                out[r * w + j - from] = col[r];
            }
        }
        Ok(())
    }

    fn backprop_tail(
        &self,
        x: &[f64],
        from: usize,
        grad: &mut [f64],
        seed: &mut dyn FnMut(&[f64], &mut [f64]),
    ) -> Result<()> {
        let (d, n) = (self.spec.output_dim, self.spec.n_basis);
        if self.spec.architecture == Architecture::MultiHeaded {
            let w = n - from;
            let mut tail = vec![0.0; d * w];
            let mut tail_seed = vec![0.0; d * w];
            return self.backprop(x, grad, &mut |feats, g| {
                copy_tail(feats, d, n, from, &mut tail);
                tail_seed.fill(0.0);
                seed(&tail, &mut tail_seed);
                g.fill(0.0);
                for r in 0..d {
                    g[r * n + from..(r + 1) * n].copy_from_slice(&tail_seed[r * w..(r + 1) * w]);
                }
            });
        }
        self.check_input(x)?;
        let w = n - from;
        let mut traces = vec![NetTrace::default(); w];
        let mut feats = vec![0.0; d * w];
        let mut col = vec![0.0; d];
        for j in from..n {
            self.run_net(j, x, 0..d, &mut traces[j - from], &mut col);
            for r in 0..d {
                feats[r * w + j - from] = col[r];
            }
        }
        let mut g = vec![0.0; d * w];
        seed(&feats, &mut g);
        for j in from..n {
            if self.params.frozen_mask[j] {
                continue;
            }
            for r in 0..d {
                col[r] = g[r * w + j - from];
            }
            self.backprop_net(j, &traces[j - from], 0..d, &col, grad, true, None);
        }
        Ok(())
    }

    fn prune(&self, keep: &[usize]) -> Result<Self> {
        self.prune_heads(keep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(
        arch: Architecture,
        act: Activation,
        input: usize,
        hidden: &[usize],
        d: usize,
        n: usize,
    ) -> MlpSpec {
        MlpSpec {
            input_dim: input,
            hidden_widths: hidden.to_vec(),
            output_dim: d,
            n_basis: n,
            architecture: arch,
            activation: act,
        }
    }

    #[test]
    fn parameter_counts() {
        let mh = spec(Architecture::MultiHeaded, Activation::Tanh, 1, &[32], 1, 4);
        assert_eq!(BasisSet::init(mh, 0).unwrap().param_count(), 196);
        let ind = spec(Architecture::Independent, Activation::Tanh, 1, &[32], 1, 4);
        assert_eq!(BasisSet::init(ind, 0).unwrap().param_count(), 388);
    }

    #[test]
    fn layout_partitions_values() {
        for arch in [Architecture::MultiHeaded, Architecture::Independent] {
            let s = spec(arch, Activation::Tanh, 3, &[5, 4], 2, 3);
            let b = BasisSet::init(s, 1).unwrap();
            let mut next = 0;
            for layer in &b.params.layout {
                assert_eq!(layer.offset, next);
                next += layer.len();
            }
            assert_eq!(next, b.params.values.len());
            assert_eq!(b.params.frozen_mask.len(), 3);
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let s = spec(Architecture::MultiHeaded, Activation::Tanh, 2, &[8], 1, 3);
        let a = BasisSet::init(s.clone(), 42).unwrap();
        let b = BasisSet::init(s.clone(), 42).unwrap();
        assert_eq!(a.params.values, b.params.values);
        let c = BasisSet::init(s, 43).unwrap();
        assert_ne!(a.params.values, c.params.values);
        for layer in &a.params.layout {
            let bound = 1.0 / (layer.in_dim as f64).sqrt();
            assert!(a.params.values[layer.range()].iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(Architecture::MultiHeaded, Activation::Tanh, 1, &[4], 1, 1);
        s.n_basis = 0;
        assert!(BasisSet::init(s.clone(), 0).is_err());
        s.n_basis = 1;
        s.hidden_widths = vec![0];
        assert!(BasisSet::init(s, 0).is_err());
    }

    #[test]
    fn zero_network_gives_zero_features() {
        let s = spec(Architecture::Independent, Activation::Tanh, 2, &[4], 2, 3);
        let mut b = BasisSet::init(s, 0).unwrap();
        b.params.values.fill(0.0);
        let f = b.forward_features(&[0.3, -1.2]).unwrap();
        assert_eq!((f.rows(), f.cols()), (2, 3));
        assert!(f.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_bias_perturbation_moves_one_entry() {
        let s = spec(Architecture::MultiHeaded, Activation::Tanh, 1, &[6], 2, 3);
        let b = BasisSet::init(s, 5).unwrap();
        let x = [0.4];
        let base = b.forward_features(&x).unwrap();
        let eps = 1e-3;
        let head = *b.params.layout.last().unwrap();
        // Bias of basis 1, output row 0.
        let mut p = b.clone();
        p.params.values[head.bias_offset() + 2] += eps;
        let moved = p.forward_features(&x).unwrap();
        for r in 0..2 {
            for j in 0..3 {
                let diff = moved[(r, j)] - base[(r, j)];
                if (r, j) == (0, 1) {
                    assert!((diff - eps).abs() < 1e-12);
                } else {
                    assert_eq!(diff, 0.0);
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_reported() {
        let b = BasisSet::init(spec(Architecture::MultiHeaded, Activation::Tanh, 2, &[3], 1, 2), 0).unwrap();
        assert!(matches!(
            b.forward_features(&[1.0]),
            Err(BasisError::DimensionMismatch { expected: 2, actual: 1 })
        ));
        let batch = vec![(vec![1.0, 2.0], Matrix::zeros(2, 2))];
        assert!(b.loss_gradient(&batch).is_err());
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let b = BasisSet::init(spec(Architecture::Independent, Activation::Tanh, 2, &[4], 1, 3), 0).unwrap();
        let batch = vec![
            (vec![0.1, 0.2], Matrix::zeros(1, 3)),
            (vec![-0.5, 0.7], Matrix::zeros(1, 3)),
        ];
        let g = b.loss_gradient(&batch).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    /// Scalar test loss `Σ_x Σ_{r,j} w_{rj}(x) φ_{rj}(x)` whose φ-gradient is `w`.
    fn linear_loss(b: &BasisSet, batch: &[(Vec<f64>, Matrix)]) -> f64 {
        batch
            .iter()
            .map(|(x, w)| {
                let f = b.forward_features(x).unwrap();
                f.values().iter().zip(w.values()).map(|(a, c)| a * c).sum::<f64>()
            })
            .sum()
    }

    fn fd_check(b: &BasisSet, batch: &[(Vec<f64>, Matrix)]) -> f64 {
        let g = b.loss_gradient(batch).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        let scale = g.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        for i in 0..b.param_count() {
            let mut plus = b.clone();
            plus.params.values[i] += h;
            let mut minus = b.clone();
            minus.params.values[i] -= h;
            let fd = (linear_loss(&plus, batch) - linear_loss(&minus, batch)) / (2.0 * h);
            let err = (g.values[i] - fd).abs() / (fd.abs().max(g.values[i].abs()).max(1e-3 * scale));
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for arch in [Architecture::MultiHeaded, Architecture::Independent] {
            for act in [Activation::Tanh, Activation::Relu] {
                let s = spec(arch, act, 2, &[5, 4], 2, 3);
                let b = BasisSet::init(s, rng.gen()).unwrap();
                let batch: Vec<_> = (0..4)
                    .map(|_| {
                        let x = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                        let w = Matrix::from_fn(2, 3, |_, _| rng.gen_range(-1.0..1.0));
                        (x, w)
                    })
                    .collect();
                let err = fd_check(&b, &batch);
                assert!(err <= 1e-4, "{arch:?}/{act:?}: {err}");
            }
        }
    }

    #[test]
    fn frozen_blocks_have_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for arch in [Architecture::MultiHeaded, Architecture::Independent] {
            let mut b = BasisSet::init(spec(arch, Activation::Tanh, 1, &[6], 1, 3), 2).unwrap();
            b.freeze(1);
            let batch: Vec<_> = (0..5)
                .map(|_| {
                    (
                        vec![rng.gen_range(-1.0..1.0)],
                        Matrix::from_fn(1, 3, |_, _| rng.gen_range(-1.0..1.0)),
                    )
                })
                .collect();
            let g = b.loss_gradient(&batch).unwrap();
            for r in b.owned_ranges(1) {
                assert!(g.values[r].iter().all(|&v| v == 0.0));
            }
            for r in b.owned_ranges(0) {
                assert!(g.values[r].iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn shared_freeze_zeroes_trunk() {
        let mut b = BasisSet::init(spec(Architecture::MultiHeaded, Activation::Tanh, 1, &[6], 1, 2), 2).unwrap();
        b.freeze_shared();
        let g = b
            .loss_gradient(&[(vec![0.3], Matrix::from_fn(1, 2, |_, _| 1.0))])
            .unwrap();
        for r in b.shared_ranges() {
            assert!(g.values[r].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn prune_selects_columns_exactly() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for arch in [Architecture::MultiHeaded, Architecture::Independent] {
            let b = BasisSet::init(spec(arch, Activation::Tanh, 1, &[8], 2, 4), 11).unwrap();
            let all = b.prune_heads(&[0, 1, 2, 3]).unwrap();
            assert_eq!(all.params.values, b.params.values);
            let one = b.prune_heads(&[1]).unwrap();
            let pair = b.prune_heads(&[0, 3]).unwrap();
            for _ in 0..100 {
                let x = [rng.gen_range(-2.0..2.0)];
                let full = b.forward_features(&x).unwrap();
                let f1 = one.forward_features(&x).unwrap();
                let f2 = pair.forward_features(&x).unwrap();
                for r in 0..2 {
                    assert_eq!(f1[(r, 0)], full[(r, 1)]);
                    assert_eq!(f2[(r, 0)], full[(r, 0)]);
                    assert_eq!(f2[(r, 1)], full[(r, 3)]);
                }
            }
        }
    }

    #[test]
    fn multi_headed_prune_shrinks_head() {
        let b = BasisSet::init(spec(Architecture::MultiHeaded, Activation::Tanh, 1, &[32], 1, 4), 0).unwrap();
        let p = b.prune_heads(&[0, 2]).unwrap();
        assert_eq!(b.param_count() - p.param_count(), (32 * 4 + 4) - (32 * 2 + 2));
    }

    #[test]
    fn prune_rejects_bad_keep() {
        let b = BasisSet::init(spec(Architecture::MultiHeaded, Activation::Tanh, 1, &[3], 1, 3), 0).unwrap();
        assert!(b.prune_heads(&[]).is_err());
        assert!(b.prune_heads(&[2, 1]).is_err());
        assert!(b.prune_heads(&[0, 3]).is_err());
    }

    #[test]
    fn added_basis_keeps_existing_outputs() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for arch in [Architecture::MultiHeaded, Architecture::Independent] {
            let b = BasisSet::init(spec(arch, Activation::Tanh, 2, &[5], 2, 2), 1).unwrap();
            let grown = b.add_basis(99).unwrap();
            assert_eq!(grown.spec.n_basis, 3);
            assert_eq!(grown.param_count(), grown.spec.param_count());
            for _ in 0..20 {
                let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let f = b.forward_features(&x).unwrap();
                let g = grown.forward_features(&x).unwrap();
                for r in 0..2 {
                    for j in 0..2 {
                        assert_eq!(f[(r, j)], g[(r, j)]);
                    }
                }
            }
        }
    }
}
