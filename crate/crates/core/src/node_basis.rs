//! Neural-ODE bases for dynamics tasks.
//!
//! Basis `j` is a learned vector field `g_j`; its output at input
//! `(context, Δt)` is the RK4 flow of `g_j` from the state held in the
//! context, minus that state. Predictions `Σ_j c_j ψ_j` stay linear in the
//! coefficients, so the usual ridge solve applies.
//!
//! Inputs are laid out as the field network's input followed by `Δt`; the
//! state occupies `state_offset..state_offset + state_dim` of the field
//! input and any other entries (such as `μ`) are passed through unchanged.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{CoefficientVector, EncoderError, FunctionEncoder};
use crate::nnbasis::{self, Architecture, BasisError, BasisSet, FeatureMap, MlpSpec, NetTrace};

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("invalid node basis: {0}")]
    InvalidSpec(String),
    #[error("rollout produced a non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub type Result<T> = std::result::Result<T, NodeError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeBasisSet {
    /// One independent field network per basis, `field input -> state_dim`.
    pub fields: BasisSet,
    pub state_offset: usize,
    pub integrator_steps: usize,
}

/// Field networks evaluated during one flow, four per substep.
type FlowTrace = Vec<NetTrace>;

impl NodeBasisSet {
    /// `field_spec.input_dim` is the context width (state included),
    /// `field_spec.output_dim` the state dimension.
    pub fn init(field_spec: MlpSpec, state_offset: usize, integrator_steps: usize, seed: u64) -> Result<Self> {
        let fields = BasisSet::init(field_spec, seed)?;
        Self::from_fields(fields, state_offset, integrator_steps)
    }

    pub fn from_fields(fields: BasisSet, state_offset: usize, integrator_steps: usize) -> Result<Self> {
        if fields.spec.architecture != Architecture::Independent {
            return Err(NodeError::InvalidSpec("field networks must be independent".into()));
        }
        if integrator_steps == 0 {
            return Err(NodeError::InvalidSpec("integrator_steps must be >= 1".into()));
        }
        if state_offset + fields.spec.output_dim > fields.spec.input_dim {
            return Err(NodeError::InvalidSpec(format!(
                "state {}..{} does not fit a field input of width {}",
                state_offset,
                state_offset + fields.spec.output_dim,
                fields.spec.input_dim
            )));
        }
        Ok(Self {
            fields,
            state_offset,
            integrator_steps,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.fields.spec.output_dim
    }

    fn context_dim(&self) -> usize {
        self.fields.spec.input_dim
    }

    fn check_input(&self, x: &[f64]) -> nnbasis::Result<()> {
        if x.len() != self.context_dim() + 1 {
            return Err(BasisError::DimensionMismatch {
                expected: self.context_dim() + 1,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// `ψ_j(x)`: RK4 flow of field `j` over the trailing `Δt`, minus the
    /// starting state. Records the field traces when `trace` is given.
    fn flow(&self, j: usize, x: &[f64], mut trace: Option<&mut FlowTrace>) -> nnbasis::Result<Vec<f64>> {
        let (sd, off, m) = (self.state_dim(), self.state_offset, self.context_dim());
        let h = x[m] / self.integrator_steps as f64;
        let start = &x[off..off + sd];
        let mut z = x[..m].to_vec();
        let mut s = start.to_vec();
        let mut scratch = NetTrace::default();
        if let Some(t) = trace.as_deref_mut() {
            t.clear();
        }
        let mut eval = |z: &[f64]| match trace.as_deref_mut() {
            Some(t) => {
                let mut tr = NetTrace::default();
                let out = self.fields.forward_basis(j, z, &mut tr);
                t.push(tr);
                out
            }
            None => self.fields.forward_basis(j, z, &mut scratch),
        };
        for _ in 0..self.integrator_steps {
            z[off..off + sd].copy_from_slice(&s);
            let k1 = eval(&z);
            for i in 0..sd {
                z[off + i] = s[i] + 0.5 * h * k1[i];
            }
            let k2 = eval(&z);
            for i in 0..sd {
                z[off + i] = s[i] + 0.5 * h * k2[i];
            }
            let k3 = eval(&z);
            for i in 0..sd {
                z[off + i] = s[i] + h * k3[i];
            }
            let k4 = eval(&z);
            for i in 0..sd {
                s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        for (v, x0) in s.iter_mut().zip(start) {
            *v -= x0;
        }
        if s.iter().all(|v| v.is_finite()) {
            Ok(s)
        } else {
            Err(BasisError::NonFinite)
        }
    }

    /// Reverse pass through the unrolled RK4 stages of basis `j`.
    fn flow_backward(&self, j: usize, x: &[f64], trace: &FlowTrace, upstream: &[f64], grad: &mut [f64]) {
        let (sd, off, m) = (self.state_dim(), self.state_offset, self.context_dim());
        let h = x[m] / self.integrator_steps as f64;
        let mut d_in = vec![0.0; m];
        let mut adj = upstream.to_vec();
        for step in (0..self.integrator_steps).rev() {
            let tr = &trace[4 * step..4 * step + 4];
            let weights = [h / 6.0, h / 3.0, h / 3.0, h / 6.0];
            let mut k_bar: Vec<Vec<f64>> = weights.iter().map(|w| adj.iter().map(|a| a * w).collect()).collect();
            let mut s_bar = adj.clone();
            // Stage k reads s + scale * k_{k-1}.
            let scales = [0.0, 0.5 * h, 0.5 * h, h];
            for stage in (0..4).rev() {
                self.fields
                    .backprop_basis(j, &tr[stage], &k_bar[stage], grad, Some(&mut d_in));
                let u = &d_in[off..off + sd];
                for i in 0..sd {
                    s_bar[i] += u[i];
                }
                if stage > 0 {
                    for i in 0..sd {
                        k_bar[stage - 1][i] += scales[stage] * u[i];
                    }
                }
            }
            adj = s_bar;
        }
    }
}

impl FeatureMap for NodeBasisSet {
    fn input_dim(&self) -> usize {
        self.context_dim() + 1
    }

    fn output_dim(&self) -> usize {
        self.state_dim()
    }

    fn n_basis(&self) -> usize {
        self.fields.spec.n_basis
    }

    fn features_into(&self, x: &[f64], out: &mut [f64]) -> nnbasis::Result<()> {
        self.features_tail_into(x, 0, out)
    }

    fn params(&self) -> &[f64] {
        &self.fields.params.values
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.fields.params.values
    }

    fn backprop(&self, x: &[f64], grad: &mut [f64], seed: &mut dyn FnMut(&[f64], &mut [f64])) -> nnbasis::Result<()> {
        self.backprop_tail(x, 0, grad, seed)
    }

    fn apply_freeze_mask(&self, grad: &mut [f64]) {
        self.fields.apply_freeze_mask(grad)
    }

    fn is_frozen(&self, j: usize) -> bool {
        self.fields.is_frozen(j)
    }

    fn freeze(&mut self, j: usize) {
        self.fields.freeze(j)
    }

    fn freeze_shared(&mut self) {}

    fn with_added_basis(&self, seed: u64) -> nnbasis::Result<Self> {
        Ok(Self {
            fields: self.fields.add_basis(seed)?,
            ..self.clone()
        })
    }

    fn prune(&self, keep: &[usize]) -> nnbasis::Result<Self> {
        Ok(Self {
            fields: self.fields.prune_heads(keep)?,
            ..self.clone()
        })
    }

    fn frozen_prefix(&self) -> usize {
        self.fields.frozen_prefix()
    }

    fn features_tail_into(&self, x: &[f64], from: usize, out: &mut [f64]) -> nnbasis::Result<()> {
        self.check_input(x)?;
        let (d, n) = (self.state_dim(), self.n_basis());
        let w = n - from;
        for j in from..n {
            let col = self.flow(j, x, None)?;
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
    ) -> nnbasis::Result<()> {
        self.check_input(x)?;
        let (d, n) = (self.state_dim(), self.n_basis());
        let w = n - from;
        let mut traces = vec![FlowTrace::new(); w];
        let mut feats = vec![0.0; d * w];
        for j in from..n {
            let col = self.flow(j, x, Some(&mut traces[j - from]))?;
            for r in 0..d {
                feats[r * w + j - from] = col[r];
            }
        }
        let mut g = vec![0.0; d * w];
        seed(&feats, &mut g);
        let mut col = vec![0.0; d];
        for j in from..n {
            if self.is_frozen(j) {
                continue;
            }
            for r in 0..d {
                col[r] = g[r * w + j - from];
            }
            if col.iter().all(|&v| v == 0.0) {
                continue;
            }
            self.flow_backward(j, x, &traces[j - from], &col, grad);
        }
        Ok(())
    }
}

/// Iterates `x̂ ← x̂ + Σ_j c_j ψ_j(x̂, Δt)` for `steps` steps. `context` is
/// the model input without `Δt`; its state slice at `state_offset` is the
/// starting state and the remaining entries stay fixed. Returns the
/// `steps + 1` states including the start.
pub fn rollout<F: FeatureMap>(
    enc: &FunctionEncoder<F>,
    c: &CoefficientVector,
    context: &[f64],
    state_offset: usize,
    dt: f64,
    steps: usize,
) -> Result<Vec<Vec<f64>>> {
    let sd = enc.output_dim();
    if steps == 0 {
        return Err(NodeError::InvalidSpec("rollout needs at least one step".into()));
    }
    if context.len() + 1 != enc.basis.input_dim() || state_offset + sd > context.len() {
        return Err(NodeError::InvalidSpec(format!(
            "context of width {} does not match model input {}",
            context.len(),
            enc.basis.input_dim()
        )));
    }
    let mut input = context.to_vec();
    input.push(dt);
    let mut states = Vec::with_capacity(steps + 1);
    states.push(context[state_offset..state_offset + sd].to_vec());
    for step in 1..=steps {
        let delta = enc.predict(c, &input)?;
        for i in 0..sd {
            input[state_offset + i] += delta[i];
        }
        let next = input[state_offset..state_offset + sd].to_vec();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(NodeError::NonFinite { step });
        }
        states.push(next);
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{integrate, rk4_step, FnSystem, VanDerPol};
    use crate::linalg::Matrix;
    use crate::nnbasis::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field_spec(context: usize, hidden: &[usize], state: usize, n: usize) -> MlpSpec {
        MlpSpec {
            input_dim: context,
            hidden_widths: hidden.to_vec(),
            output_dim: state,
            n_basis: n,
            architecture: Architecture::Independent,
            activation: Activation::Tanh,
        }
    }

    /// One basis whose field is exactly `g(x) = x` in 1-D.
    fn identity_field(steps: usize) -> NodeBasisSet {
        let fields = BasisSet::from_values(field_spec(1, &[], 1, 1), vec![1.0, 0.0], vec![false], 0).unwrap();
        NodeBasisSet::from_fields(fields, 0, steps).unwrap()
    }

    #[test]
    fn zero_field_gives_zero_column() {
        let mut nb = NodeBasisSet::init(field_spec(3, &[4], 2, 2), 0, 1, 0).unwrap();
        let ranges = nb.fields.owned_ranges(1);
        for r in ranges {
            nb.fields.params.values[r].fill(0.0);
        }
        let f = nb.features(&[0.3, -0.2, 1.5, 0.1]).unwrap();
        assert_eq!(f[(0, 1)], 0.0);
        assert_eq!(f[(1, 1)], 0.0);
        assert!(f[(0, 0)] != 0.0);
    }

    #[test]
    fn linear_field_matches_taylor_polynomial() {
        let nb = identity_field(1);
        let f = nb.features(&[1.0, 0.1]).unwrap();
        let taylor = 0.1 + 0.1f64.powi(2) / 2.0 + 0.1f64.powi(3) / 6.0 + 0.1f64.powi(4) / 24.0;
        assert!((f[(0, 0)] - taylor).abs() < 1e-15);
        assert!((f[(0, 0)] - 0.1051708333).abs() < 1e-10);
    }

    #[test]
    fn features_vanish_linearly_in_dt() {
        let nb = NodeBasisSet::init(field_spec(3, &[8], 2, 3), 0, 2, 4).unwrap();
        let ctx = [0.7, -1.1, 1.3];
        let mut z = ctx.to_vec();
        let mut trace = NetTrace::default();
        for dt in [1e-2, 1e-3, 1e-4] {
            z.truncate(3);
            z.push(dt);
            let f = nb.features(&z).unwrap();
            for j in 0..3 {
                let g = nb.fields.forward_basis(j, &ctx, &mut trace);
                let speed = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                let norm = (f[(0, j)].powi(2) + f[(1, j)].powi(2)).sqrt();
                assert!(norm <= 1.1 * speed * dt + 1e-15, "dt {dt}: {norm} vs {}", speed * dt);
            }
        }
    }

    #[test]
    fn features_match_reference_integrator() {
        let nb = NodeBasisSet::init(field_spec(3, &[6], 2, 2), 1, 3, 11).unwrap();
        let x = [0.9, 0.4, -0.8, 0.2];
        let f = nb.features(&x).unwrap();
        for j in 0..2 {
            let sys = FnSystem {
                dim: 2,
                f: |s: &[f64], out: &mut [f64]| {
                    let mut trace = NetTrace::default();
                    out.copy_from_slice(&nb.fields.forward_basis(j, &[x[0], s[0], s[1]], &mut trace));
                },
            };
            let mut s = vec![x[1], x[2]];
            for _ in 0..3 {
                s = rk4_step(&sys, &s, x[3] / 3.0).unwrap();
            }
            assert!((f[(0, j)] - (s[0] - x[1])).abs() < 1e-14);
            assert!((f[(1, j)] - (s[1] - x[2])).abs() < 1e-14);
        }
    }

    #[test]
    fn substep_halving_error_is_fifth_order() {
        let one = identity_field(1);
        let two = identity_field(2);
        let hs = [0.2, 0.1, 0.05, 0.025];
        let diffs: Vec<f64> = hs
            .iter()
            .map(|&h| (one.features(&[1.0, h]).unwrap()[(0, 0)] - two.features(&[1.0, h]).unwrap()[(0, 0)]).abs())
            .collect();
        let slope = crate::datasets::tests::log_log_slope(&hs, &diffs);
        assert!(slope >= 4.5, "slope {slope}");
    }

    fn linear_loss(nb: &NodeBasisSet, batch: &[(Vec<f64>, Matrix)]) -> f64 {
        batch
            .iter()
            .map(|(x, w)| {
                let f = nb.features(x).unwrap();
                f.values().iter().zip(w.values()).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for steps in [1, 2] {
            let nb = NodeBasisSet::init(field_spec(3, &[5], 2, 2), 0, steps, rng.gen()).unwrap();
            let batch: Vec<(Vec<f64>, Matrix)> = (0..3)
                .map(|_| {
                    let x = vec![
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(0.5..2.5),
                        0.3,
                    ];
                    (x, Matrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0)))
                })
                .collect();
            let mut grad = vec![0.0; nb.params().len()];
            for (x, w) in &batch {
                nb.backprop(x, &mut grad, &mut |_, g| g.copy_from_slice(w.values()))
                    .unwrap();
            }
            let scale = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let h = 1e-5;
            for i in 0..grad.len() {
                let mut p = nb.clone();
                p.params_mut()[i] += h;
                let mut q = nb.clone();
                q.params_mut()[i] -= h;
                let fd = (linear_loss(&p, &batch) - linear_loss(&q, &batch)) / (2.0 * h);
                let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3 * scale);
                assert!(err <= 1e-4, "param {i}: {} vs {fd}", grad[i]);
            }
        }
    }

    #[test]
    fn tail_pass_matches_full_pass() {
        let mut nb = NodeBasisSet::init(field_spec(2, &[4], 2, 3), 0, 1, 2).unwrap();
        nb.freeze(0);
        let x = [0.5, -0.5, 0.2];
        let seed_of = |g: &mut [f64]| {
            for (i, v) in g.iter_mut().enumerate() {
                *v = 0.1 * (i as f64 + 1.0);
            }
        };
        let mut full = vec![0.0; nb.params().len()];
        nb.backprop(&x, &mut full, &mut |_, g| {
            seed_of(g);
            // Column 0 of each row belongs to the frozen prefix.
            g[0] = 0.0;
            g[3] = 0.0;
        })
        .unwrap();
        let mut tail = vec![0.0; nb.params().len()];
        nb.backprop_tail(&x, 1, &mut tail, &mut |_, g| {
            let mut all = [0.0; 6];
            seed_of(&mut all);
            g.copy_from_slice(&[all[1], all[2], all[4], all[5]]);
        })
        .unwrap();
        assert_eq!(full, tail);
    }

    #[test]
    fn zero_coefficients_hold_state() {
        let nb = NodeBasisSet::init(field_spec(3, &[4], 2, 2), 0, 1, 3).unwrap();
        let enc = FunctionEncoder::new(nb, 1e-3).unwrap();
        let states = rollout(&enc, &CoefficientVector(vec![0.0, 0.0]), &[1.0, 2.0, 0.7], 0, 0.1, 5).unwrap();
        assert_eq!(states.len(), 6);
        assert!(states.iter().all(|s| s == &vec![1.0, 2.0]));
    }

    /// Feature map whose single basis is the exact Van der Pol flow.
    #[derive(Clone)]
    struct ExactVdp;

    impl FeatureMap for ExactVdp {
        fn input_dim(&self) -> usize {
            4
        }
        fn output_dim(&self) -> usize {
            2
        }
        fn n_basis(&self) -> usize {
            1
        }
        fn features_into(&self, x: &[f64], out: &mut [f64]) -> nnbasis::Result<()> {
            let next = rk4_step(&VanDerPol { mu: x[2] }, &x[..2], x[3]).map_err(|_| BasisError::NonFinite)?;
            out[0] = next[0] - x[0];
            out[1] = next[1] - x[1];
            Ok(())
        }
        fn params(&self) -> &[f64] {
            &[]
        }
        fn params_mut(&mut self) -> &mut [f64] {
            &mut []
        }
        fn backprop(&self, _: &[f64], _: &mut [f64], _: &mut dyn FnMut(&[f64], &mut [f64])) -> nnbasis::Result<()> {
            Ok(())
        }
        fn apply_freeze_mask(&self, _: &mut [f64]) {}
        fn is_frozen(&self, _: usize) -> bool {
            true
        }
        fn freeze(&mut self, _: usize) {}
        fn freeze_shared(&mut self) {}
        fn with_added_basis(&self, _: u64) -> nnbasis::Result<Self> {
            Ok(Self)
        }
        fn prune(&self, _: &[usize]) -> nnbasis::Result<Self> {
            Ok(Self)
        }
    }

    #[test]
    fn exact_field_rollout_matches_ground_truth() {
        let enc = FunctionEncoder::new(ExactVdp, 1e-3).unwrap();
        let mu = 1.3;
        let states = rollout(&enc, &CoefficientVector(vec![1.0]), &[2.0, -1.0, mu], 0, 0.1, 100).unwrap();
        let truth = integrate(&VanDerPol { mu }, &[2.0, -1.0], 0.1, 100).unwrap();
        for (a, b) in states.iter().zip(&truth) {
            assert!((a[0] - b[0]).abs() <= 1e-10 && (a[1] - b[1]).abs() <= 1e-10);
        }
    }

    #[test]
    fn learned_field_rollout_matches_its_own_integration() {
        let nb = NodeBasisSet::init(field_spec(3, &[8], 2, 1), 0, 1, 5).unwrap();
        let mu = 0.9;
        let sys = FnSystem {
            dim: 2,
            f: |s: &[f64], out: &mut [f64]| {
                let mut trace = NetTrace::default();
                out.copy_from_slice(&nb.fields.forward_basis(0, &[s[0], s[1], mu], &mut trace));
            },
        };
        let truth = integrate(&sys, &[0.5, 0.5], 0.1, 50).unwrap();
        let enc = FunctionEncoder::new(nb.clone(), 1e-3).unwrap();
        let states = rollout(&enc, &CoefficientVector(vec![1.0]), &[0.5, 0.5, mu], 0, 0.1, 50).unwrap();
        for (a, b) in states.iter().zip(&truth) {
            assert!((a[0] - b[0]).abs() <= 1e-10 && (a[1] - b[1]).abs() <= 1e-10);
        }
    }

    #[test]
    fn invalid_layouts_rejected() {
        assert!(NodeBasisSet::init(field_spec(2, &[4], 2, 1), 1, 1, 0).is_err());
        assert!(NodeBasisSet::init(field_spec(2, &[4], 2, 1), 0, 0, 0).is_err());
        let mut mh = field_spec(2, &[4], 2, 1);
        mh.architecture = Architecture::MultiHeaded;
        assert!(NodeBasisSet::init(mh, 0, 1, 0).is_err());
        let nb = NodeBasisSet::init(field_spec(2, &[4], 2, 1), 0, 1, 0).unwrap();
        assert!(nb.features(&[0.1, 0.2]).is_err());
        let enc = FunctionEncoder::new(nb, 1e-3).unwrap();
        assert!(rollout(&enc, &CoefficientVector(vec![1.0]), &[0.1, 0.2], 0, 0.1, 0).is_err());
    }
}
