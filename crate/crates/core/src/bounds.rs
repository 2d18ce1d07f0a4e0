//! Generalization certificates for a fitted function encoder: the
//! Rademacher bound, the PAC-Bayes bound, and empirical estimates of the
//! constants they assume.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderError, FunctionEncoder, TaskDataset};
use crate::linalg::{self, LinalgError, Matrix};
use crate::nnbasis::{BasisError, FeatureMap};

/// Minimum eigenvalue the eval-feature Gram must exceed before the
/// injectivity hypothesis of the PAC-Bayes bound is taken to hold.
pub const INJECTIVITY_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum BoundError {
    #[error("invalid bound input: {0}")]
    InvalidInput(String),
    #[error("probe set is empty")]
    EmptyProbe,
    #[error("coefficient norm {norm} exceeds certificate cap {cap}")]
    CertificateViolated { norm: f64, cap: f64 },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, BoundError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub n: usize,
    pub m: usize,
    pub lambda: f64,
    /// Uniform bound on `|ψ_j(x)|`.
    pub r: f64,
    /// Uniform bound on `‖y‖₂`.
    pub y: f64,
    pub delta: f64,
    pub empirical_risk: f64,
}

impl BoundInputs {
    /// `δ = 1` is accepted: it zeroes the confidence term.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BoundError::InvalidInput(m));
        if self.n == 0 || self.m == 0 {
            return bad(format!("n and m must be >= 1 (got n={}, m={})", self.n, self.m));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return bad(format!("R must be positive, got {}", self.r));
        }
        if !(self.y > 0.0 && self.y.is_finite()) {
            return bad(format!("Y must be positive, got {}", self.y));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad(format!("delta must lie in (0, 1], got {}", self.delta));
        }
        if !(self.empirical_risk >= 0.0 && self.empirical_risk.is_finite()) {
            return bad(format!("empirical risk must be >= 0, got {}", self.empirical_risk));
        }
        Ok(())
    }

    fn log_term(&self) -> f64 {
        ((1.0 / self.delta).ln() / 2.0).sqrt()
    }
}

/// `Y R √(n / (m λ))`, the complexity term of the regularized class.
pub fn rademacher_complexity(b: &BoundInputs) -> Result<f64> {
    b.validate()?;
    Ok(b.y * b.r * (b.n as f64 / (b.m as f64 * b.lambda)).sqrt())
}

/// `L̂ + 2 Y² R √(n/(mλ)) (R √(n/λ) + 1) (2 + √(log(1/δ)/2))`.
pub fn rademacher_bound(b: &BoundInputs) -> Result<f64> {
    b.validate()?;
    let n = b.n as f64;
    let root = (n / (b.m as f64 * b.lambda)).sqrt();
    let lipschitz = b.r * (n / b.lambda).sqrt() + 1.0;
    Ok(b.empirical_risk + 2.0 * b.y * b.y * b.r * root * lipschitz * (2.0 + b.log_term()))
}

/// Loss cap `A_σ = Y² max(n R² / λ, 1)`.
pub fn loss_cap(b: &BoundInputs) -> Result<f64> {
    b.validate()?;
    Ok(b.y * b.y * (b.n as f64 * b.r * b.r / b.lambda).max(1.0))
}

/// `L̂ + A_σ / √m · (4.5 √(2n) + √(log(1/δ)/2))`.
pub fn pac_bayes_bound(b: &BoundInputs) -> Result<f64> {
    let cap = loss_cap(b)?;
    let n = b.n as f64;
    Ok(b.empirical_risk + cap / (b.m as f64).sqrt() * (4.5 * (2.0 * n).sqrt() + b.log_term()))
}

/// Which inputs were measured from data rather than supplied. Measured
/// maxima are lower bounds of the true suprema.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimateFlags {
    pub r: bool,
    pub y: bool,
}

/// `R̂ = max |ψ_j(x)_k|` over probes, bases and output components.
pub fn estimate_r<F: FeatureMap>(enc: &FunctionEncoder<F>, probe_inputs: &[Vec<f64>]) -> Result<f64> {
    if probe_inputs.is_empty() {
        return Err(BoundError::EmptyProbe);
    }
    let mut r = 0.0f64;
    for x in probe_inputs {
        let phi = enc.basis.features(x)?;
        r = r.max(phi.max_abs());
    }
    Ok(r)
}

/// `Ŷ = max ‖y_i‖₂` over every sample of every task.
pub fn estimate_y(tasks: &[TaskDataset]) -> f64 {
    tasks
        .iter()
        .flat_map(|t| t.targets.iter())
        .map(|y| y.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Fills [`BoundInputs`] from a fitted encoder. `m` is the smallest eval
/// count over tasks (the bounds are non-increasing in `m`), and the
/// empirical risk is the mean eval-set MSE.
pub fn estimate_inputs<F: FeatureMap>(
    enc: &FunctionEncoder<F>,
    probe_inputs: &[Vec<f64>],
    tasks: &[TaskDataset],
    delta: f64,
) -> Result<(BoundInputs, EstimateFlags)> {
    if tasks.is_empty() {
        return Err(BoundError::InvalidInput("no tasks".into()));
    }
    let r = estimate_r(enc, probe_inputs)?;
    let y = estimate_y(tasks);
    let m = tasks.iter().map(|t| t.eval_indices.len()).min().unwrap_or(0);
    let mut risk = 0.0;
    for t in tasks {
        let c = enc.solve_coefficients(t)?;
        risk += enc.mse_on(&c, t, &t.eval_indices)?;
    }
    let inputs = BoundInputs {
        n: enc.n_basis(),
        m,
        lambda: enc.lambda,
        r,
        y,
        delta,
        empirical_risk: risk / tasks.len() as f64,
    };
    inputs.validate()?;
    Ok((inputs, EstimateFlags { r: true, y: true }))
}

/// `(‖ĉ_λ‖₂, Ŷ/√λ)` for one task, with `Ŷ` the largest eval target norm.
pub fn coefficient_norm_certificate<F: FeatureMap>(enc: &FunctionEncoder<F>, data: &TaskDataset) -> Result<(f64, f64)> {
    let c = enc.solve_coefficients(data)?;
    let y = data
        .eval_indices
        .iter()
        .map(|&i| data.targets[i].iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let norm = c.norm();
    let cap = y / enc.lambda.sqrt();
    // Rounding in the solve can nudge a tight case past the cap by an ulp.
    if norm > cap * (1.0 + 1e-10) + 1e-300 {
        return Err(BoundError::CertificateViolated { norm, cap });
    }
    Ok((norm, cap))
}

/// Smallest eigenvalue of `(1/m) Σ φ(x_i)ᵀ φ(x_i)` over one task's eval set.
pub fn eval_gram_min_eigenvalue<F: FeatureMap>(enc: &FunctionEncoder<F>, data: &TaskDataset) -> Result<f64> {
    let n = enc.n_basis();
    let mut g = Matrix::zeros(n, n).into_values();
    for &i in &data.eval_indices {
        let phi = enc.basis.features(&data.inputs[i])?;
        for r in 0..phi.rows() {
            let row = phi.row(r);
            for a in 0..n {
                for b in 0..n {
                    g[a * n + b] += row[a] * row[b];
                }
            }
        }
    }
    let m = data.eval_indices.len().max(1) as f64;
    for v in &mut g {
        *v /= m;
    }
    let eig = linalg::sym_eig(&Matrix::new(n, n, g)?)?;
    Ok(eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub inputs: BoundInputs,
    pub rademacher_complexity: f64,
    pub rademacher_bound: f64,
    pub pac_bayes_bound: f64,
    pub estimated: EstimateFlags,
    /// Smallest eval-feature Gram eigenvalue over tasks.
    pub min_gram_eigenvalue: f64,
    /// False when that eigenvalue is at most [`INJECTIVITY_TOL`]; the
    /// PAC-Bayes value is then reported without its hypothesis.
    pub injectivity_holds: bool,
}

pub fn report_from_inputs(
    inputs: BoundInputs,
    estimated: EstimateFlags,
    min_gram_eigenvalue: f64,
) -> Result<BoundReport> {
    Ok(BoundReport {
        rademacher_complexity: rademacher_complexity(&inputs)?,
        rademacher_bound: rademacher_bound(&inputs)?,
        pac_bayes_bound: pac_bayes_bound(&inputs)?,
        inputs,
        estimated,
        min_gram_eigenvalue,
        injectivity_holds: min_gram_eigenvalue > INJECTIVITY_TOL,
    })
}

/// Estimates the inputs, checks injectivity on every task and evaluates
/// both bounds.
pub fn bound_report<F: FeatureMap>(
    enc: &FunctionEncoder<F>,
    probe_inputs: &[Vec<f64>],
    tasks: &[TaskDataset],
    delta: f64,
) -> Result<BoundReport> {
    let (inputs, flags) = estimate_inputs(enc, probe_inputs, tasks, delta)?;
    let mut min_eig = f64::INFINITY;
    for t in tasks {
        min_eig = min_eig.min(eval_gram_min_eigenvalue(enc, t)?);
    }
    report_from_inputs(inputs, flags, min_eig)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnbasis::{Activation, Architecture, BasisSet, MlpSpec};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn inputs(n: usize, m: usize, lambda: f64, r: f64, y: f64, delta: f64, risk: f64) -> BoundInputs {
        BoundInputs {
            n,
            m,
            lambda,
            r,
            y,
            delta,
            empirical_risk: risk,
        }
    }

    #[test]
    fn rademacher_example() {
        let b = inputs(1, 4, 1.0, 1.0, 1.0, 1.0, 0.0);
        assert!((rademacher_bound(&b).unwrap() - 4.0).abs() < 1e-12);
        assert!((rademacher_complexity(&b).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pac_bayes_example() {
        let b = inputs(2, 100, 1.0, 1.0, 1.0, 1.0, 0.0);
        assert_eq!(loss_cap(&b).unwrap(), 2.0);
        assert!((pac_bayes_bound(&b).unwrap() - 1.8).abs() < 1e-12);
    }

    #[test]
    fn loss_cap_floor() {
        let b = inputs(1, 10, 4.0, 1.0, 3.0, 0.5, 0.0);
        assert_eq!(loss_cap(&b).unwrap(), 9.0);
    }

    #[test]
    fn pac_bayes_grows_like_n_to_three_halves() {
        let v = |n| pac_bayes_bound(&inputs(n, 100, 1.0, 1.0, 1.0, 1.0, 0.0)).unwrap();
        for n in [2, 8, 32] {
            assert!((v(4 * n) / v(n) - 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pac_bayes_dominates_at_large_n() {
        for n in [16, 64, 256] {
            let b = inputs(n, 1000, 0.1, 1.0, 1.0, 0.05, 0.01);
            assert!(pac_bayes_bound(&b).unwrap() >= rademacher_bound(&b).unwrap());
        }
    }

    #[test]
    fn invalid_inputs_rejected() {
        let ok = inputs(2, 10, 0.1, 1.0, 1.0, 0.05, 0.0);
        assert!(ok.validate().is_ok());
        for bad in [
            BoundInputs { n: 0, ..ok.clone() },
            BoundInputs { m: 0, ..ok.clone() },
            BoundInputs {
                lambda: 0.0,
                ..ok.clone()
            },
            BoundInputs { r: 0.0, ..ok.clone() },
            BoundInputs { y: -1.0, ..ok.clone() },
            BoundInputs {
                delta: 0.0,
                ..ok.clone()
            },
            BoundInputs {
                delta: 1.5,
                ..ok.clone()
            },
            BoundInputs {
                empirical_risk: -1e-3,
                ..ok.clone()
            },
        ] {
            assert!(rademacher_bound(&bad).is_err());
            assert!(pac_bayes_bound(&bad).is_err());
        }
    }

    fn poly_encoder(lambda: f64) -> FunctionEncoder {
        let spec = MlpSpec {
            input_dim: 1,
            hidden_widths: vec![8],
            output_dim: 1,
            n_basis: 3,
            architecture: Architecture::MultiHeaded,
            activation: Activation::Tanh,
        };
        FunctionEncoder::new(BasisSet::init(spec, 2).unwrap(), lambda).unwrap()
    }

    #[test]
    fn zero_basis_is_rejected() {
        let mut enc = poly_encoder(1e-3);
        enc.basis.params.values.fill(0.0);
        let probe = vec![vec![0.0], vec![0.5]];
        assert_eq!(estimate_r(&enc, &probe).unwrap(), 0.0);
        let task = TaskDataset::all_eval(vec![vec![0.1]], vec![vec![1.0]]).unwrap();
        assert!(matches!(
            estimate_inputs(&enc, &probe, &[task], 0.05),
            Err(BoundError::InvalidInput(_))
        ));
        assert!(matches!(estimate_r(&enc, &[]), Err(BoundError::EmptyProbe)));
    }

    #[test]
    fn constant_basis_estimate() {
        let spec = MlpSpec {
            input_dim: 1,
            hidden_widths: vec![],
            output_dim: 1,
            n_basis: 1,
            architecture: Architecture::MultiHeaded,
            activation: Activation::Tanh,
        };
        let basis = BasisSet::from_values(spec, vec![0.0, 3.0], vec![false], 0).unwrap();
        let enc = FunctionEncoder::new(basis, 1e-3).unwrap();
        let probe: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64 - 3.0]).collect();
        assert_eq!(estimate_r(&enc, &probe).unwrap(), 3.0);
    }

    #[test]
    fn estimate_over_superset_is_larger() {
        let enc = poly_encoder(1e-3);
        let fine: Vec<Vec<f64>> = (0..10_000).map(|i| vec![-1.0 + 2.0 * i as f64 / 9_999.0]).collect();
        let coarse: Vec<Vec<f64>> = fine.iter().step_by(100).cloned().collect();
        assert!(estimate_r(&enc, &fine).unwrap() >= estimate_r(&enc, &coarse).unwrap());
    }

    #[test]
    fn certificate_examples() {
        let enc = poly_encoder(4.0);
        let zero = TaskDataset::all_eval(vec![vec![0.2], vec![0.4]], vec![vec![0.0], vec![0.0]]).unwrap();
        let (norm, cap) = coefficient_norm_certificate(&enc, &zero).unwrap();
        assert_eq!((norm, cap), (0.0, 0.0));
        let one = TaskDataset::all_eval(vec![vec![0.2], vec![0.4]], vec![vec![1.0], vec![-0.5]]).unwrap();
        let (norm, cap) = coefficient_norm_certificate(&enc, &one).unwrap();
        assert_eq!(cap, 0.5);
        assert!(norm <= cap);
    }

    #[test]
    fn report_flags_rank_deficiency() {
        // Two identical heads make the eval Gram singular.
        let spec = MlpSpec {
            input_dim: 1,
            hidden_widths: vec![],
            output_dim: 1,
            n_basis: 2,
            architecture: Architecture::MultiHeaded,
            activation: Activation::Tanh,
        };
        let basis = BasisSet::from_values(spec, vec![1.0, 1.0, 0.5, 0.5], vec![false; 2], 0).unwrap();
        let enc = FunctionEncoder::new(basis, 1e-2).unwrap();
        let task = TaskDataset::all_eval(
            vec![vec![0.1], vec![0.7], vec![-0.4]],
            vec![vec![1.0], vec![0.2], vec![0.3]],
        )
        .unwrap();
        let probe = vec![vec![0.0], vec![1.0]];
        let rep = bound_report(&enc, &probe, std::slice::from_ref(&task), 0.05).unwrap();
        assert!(!rep.injectivity_holds);
        assert!(rep.estimated.r && rep.estimated.y);
        assert!(rep.rademacher_bound >= rep.inputs.empirical_risk);
        assert!(rep.pac_bayes_bound >= rep.inputs.empirical_risk);

        let good = poly_encoder(1e-2);
        let rep = bound_report(&good, &probe, &[task], 0.05).unwrap();
        assert!(rep.injectivity_holds, "{}", rep.min_gram_eigenvalue);
    }

    #[test]
    fn certificate_holds_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let lambda = [1e-3, 1e-1, 1.0][rng.gen_range(0..3)];
            let mut enc = poly_encoder(lambda);
            for v in enc.basis.params.values.iter_mut() {
                *v = rng.gen_range(-2.0..2.0);
            }
            let m = rng.gen_range(1..30);
            let xs: Vec<Vec<f64>> = (0..m).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
            let ys: Vec<Vec<f64>> = (0..m).map(|_| vec![rng.gen_range(-5.0..5.0)]).collect();
            let task = TaskDataset::all_eval(xs, ys).unwrap();
            coefficient_norm_certificate(&enc, &task).unwrap();
        }
    }

    fn arb_inputs(rng: &mut ChaCha8Rng) -> BoundInputs {
        BoundInputs {
            n: rng.gen_range(1..200),
            m: rng.gen_range(1..10_000),
            lambda: 10f64.powf(rng.gen_range(-6.0..2.0)),
            r: 10f64.powf(rng.gen_range(-3.0..2.0)),
            y: 10f64.powf(rng.gen_range(-3.0..2.0)),
            delta: rng.gen_range(1e-6..1.0),
            empirical_risk: rng.gen_range(0.0..10.0),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn bounds_are_monotone(seed in 0u64..u64::MAX) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = arb_inputs(&mut rng);
            for f in [rademacher_bound, pac_bayes_bound] {
                let base = f(&b).unwrap();
                prop_assert!(base >= b.empirical_risk);
                let larger = [
                    BoundInputs { n: b.n + 1, ..b.clone() },
                    BoundInputs { r: b.r * 1.5, ..b.clone() },
                    BoundInputs { y: b.y * 1.5, ..b.clone() },
                    BoundInputs { empirical_risk: b.empirical_risk + 0.1, ..b.clone() },
                ];
                let smaller = [
                    BoundInputs { m: b.m + 1, ..b.clone() },
                    BoundInputs { lambda: b.lambda * 1.5, ..b.clone() },
                    BoundInputs { delta: (b.delta * 1.5).min(1.0), ..b.clone() },
                ];
                for c in &larger {
                    let v = f(c).unwrap();
                    prop_assert!(v >= base, "{:?}: {} < {}", c, v, base);
                }
                for c in &smaller {
                    let v = f(c).unwrap();
                    prop_assert!(v <= base, "{:?}: {} > {}", c, v, base);
                }
            }
        }
    }
}
