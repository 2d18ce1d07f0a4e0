//! Coefficient estimation, prediction and the induced kernel.
//!
//! The primal path solves the ridge normal equations
//! `((1/m) Σ φ(x_i)ᵀφ(x_i) + λI) c = (1/m) Σ φ(x_i)ᵀ y_i` for the `n`
//! coefficients of a task. The dual path solves `(K + λ m I) α = Y` over the
//! Gram matrix of the induced kernel `k(x, x') = Σ_j ψ_j(x) ψ_j(x')`; both give
//! the same predictions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Cholesky, LinalgError, Matrix};
use crate::nnbasis::{BasisError, BasisSet, FeatureMap};

/// Largest `m * d` accepted by the vector-valued dual solve.
pub const MAX_DUAL_SIZE: usize = 500;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("regularization must be positive and finite, got {0}")]
    InvalidLambda(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite features at sample {0}")]
    NonFiniteFeatures(usize),
    #[error("empty sample set")]
    EmptySample,
    #[error("scalar kernel needs output_dim 1, got {0}; use operator_kernel")]
    NotScalar(usize),
    #[error("dual system of size {0} exceeds the limit of {MAX_DUAL_SIZE}")]
    DualTooLarge(usize),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

/// One function's samples with a disjoint split into the points used to
/// solve for coefficients (`eval_indices`) and the points used for loss and
/// metrics (`query_indices`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub eval_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
}

impl TaskDataset {
    pub fn new(
        inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
        eval_indices: Vec<usize>,
        query_indices: Vec<usize>,
    ) -> Result<Self> {
        let task = Self {
            inputs,
            targets,
            eval_indices,
            query_indices,
        };
        task.validate()?;
        Ok(task)
    }

    /// A dataset whose every sample is both solved on and scored.
    pub fn all_eval(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self> {
        let m = inputs.len();
        Self::new(inputs, targets, (0..m).collect(), Vec::new())
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.inputs.len();
        if m == 0 {
            return Err(EncoderError::EmptySample);
        }
        if self.targets.len() != m {
            return Err(EncoderError::InvalidDataset(format!(
                "{} inputs but {} targets",
                m,
                self.targets.len()
            )));
        }
        let d = self.targets[0].len();
        if self.targets.iter().any(|t| t.len() != d) {
            return Err(EncoderError::InvalidDataset("inconsistent target dimension".into()));
        }
        let k = self.inputs[0].len();
        if self.inputs.iter().any(|x| x.len() != k) {
            return Err(EncoderError::InvalidDataset("inconsistent input dimension".into()));
        }
        let mut seen = vec![false; m];
        for &i in self.eval_indices.iter().chain(&self.query_indices) {
            if i >= m {
                return Err(EncoderError::InvalidDataset(format!("index {i} out of range")));
            }
            if seen[i] {
                return Err(EncoderError::InvalidDataset(format!(
                    "index {i} repeated or shared between eval and query"
                )));
            }
            seen[i] = true;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn eval_inputs(&self) -> Vec<Vec<f64>> {
        self.eval_indices.iter().map(|&i| self.inputs[i].clone()).collect()
    }

    pub fn eval_targets(&self) -> Vec<Vec<f64>> {
        self.eval_indices.iter().map(|&i| self.targets[i].clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector(pub Vec<f64>);

impl CoefficientVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A basis set plus the ridge parameter used for every coefficient solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionEncoder<F = BasisSet> {
    pub basis: F,
    pub lambda: f64,
}

impl<F: FeatureMap> FunctionEncoder<F> {
    pub fn new(basis: F, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(EncoderError::InvalidLambda(lambda));
        }
        Ok(Self { basis, lambda })
    }

    pub fn n_basis(&self) -> usize {
        self.basis.n_basis()
    }

    pub fn output_dim(&self) -> usize {
        self.basis.output_dim()
    }

    fn check_sample(&self, x: &[f64], y: Option<&[f64]>) -> Result<()> {
        if x.len() != self.basis.input_dim() {
            return Err(EncoderError::DimensionMismatch(format!(
                "input has {} entries, basis expects {}",
                x.len(),
                self.basis.input_dim()
            )));
        }
        if let Some(y) = y {
            if y.len() != self.basis.output_dim() {
                return Err(EncoderError::DimensionMismatch(format!(
                    "target has {} entries, basis outputs {}",
                    y.len(),
                    self.basis.output_dim()
                )));
            }
        }
        Ok(())
    }

    /// `φ(x)` as `d x n`, rejecting non-finite values.
    pub fn features(&self, x: &[f64]) -> Result<Matrix> {
        self.check_sample(x, None)?;
        let f = self.basis.features(x)?;
        if f.values().iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::NonFiniteFeatures(0));
        }
        Ok(f)
    }

    /// Solves the ridge normal equations over `(inputs, targets)`.
    pub fn solve_on(&self, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<CoefficientVector> {
        if targets.len() != inputs.len() {
            return Err(EncoderError::DimensionMismatch(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let xs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
        let ys: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
        self.solve_slices(&xs, &ys)
    }

    /// Ridge solve over the dataset's eval subset.
    pub fn solve_coefficients(&self, data: &TaskDataset) -> Result<CoefficientVector> {
        if data.eval_indices.is_empty() {
            return Err(EncoderError::EmptySample);
        }
        let inputs: Vec<&[f64]> = data.eval_indices.iter().map(|&i| data.inputs[i].as_slice()).collect();
        let targets: Vec<&[f64]> = data.eval_indices.iter().map(|&i| data.targets[i].as_slice()).collect();
        self.solve_slices(&inputs, &targets)
    }

    pub(crate) fn solve_slices(&self, inputs: &[&[f64]], targets: &[&[f64]]) -> Result<CoefficientVector> {
        let m = inputs.len();
        if m == 0 {
            return Err(EncoderError::EmptySample);
        }
        let (d, n) = (self.basis.output_dim(), self.basis.n_basis());
        let mut gram = vec![0.0; n * n];
        let mut rhs = vec![0.0; n];
        let mut phi = vec![0.0; d * n];
        for (i, (x, y)) in inputs.iter().zip(targets).enumerate() {
            self.check_sample(x, Some(y))?;
            self.basis.features_into(x, &mut phi)?;
            if phi.iter().any(|v| !v.is_finite()) {
                return Err(EncoderError::NonFiniteFeatures(i));
            }
            accumulate_normal_equations(&phi, y, d, n, &mut gram, &mut rhs);
        }
        Ok(CoefficientVector(self.solve_normal_equations(gram, rhs, m)?))
    }

    pub(crate) fn solve_normal_equations(&self, mut gram: Vec<f64>, mut rhs: Vec<f64>, m: usize) -> Result<Vec<f64>> {
        let n = rhs.len();
        let inv_m = 1.0 / m as f64;
        for i in 0..n {
            for j in 0..i {
                gram[i * n + j] = gram[j * n + i];
            }
        }
        for v in &mut gram {
            *v *= inv_m;
        }
        for i in 0..n {
            gram[i * n + i] += self.lambda;
        }
        for v in &mut rhs {
            *v *= inv_m;
        }
        let a = Matrix::from_raw(n, n, gram);
        let chol = Cholesky::factor(&a)?;
        chol.solve_in_place(&mut rhs);
        Ok(rhs)
    }

    /// `φ(x) c`.
    pub fn predict(&self, c: &CoefficientVector, x: &[f64]) -> Result<Vec<f64>> {
        if c.len() != self.basis.n_basis() {
            return Err(EncoderError::DimensionMismatch(format!(
                "{} coefficients for {} bases",
                c.len(),
                self.basis.n_basis()
            )));
        }
        let phi = self.features(x)?;
        Ok(phi.matvec(&c.0)?)
    }

    /// Operator-valued kernel `κ(x, x') = Σ_j ψ_j(x) ψ_j(x')ᵀ`, a `d x d` matrix.
    pub fn operator_kernel(&self, x: &[f64], x_prime: &[f64]) -> Result<Matrix> {
        let a = self.features(x)?;
        let b = self.features(x_prime)?;
        Ok(a.matmul(&b.transpose())?)
    }

    /// Scalar kernel `k(x, x') = Σ_j ψ_j(x) ψ_j(x')`; only for `d = 1`.
    pub fn kernel(&self, x: &[f64], x_prime: &[f64]) -> Result<f64> {
        let d = self.basis.output_dim();
        if d != 1 {
            return Err(EncoderError::NotScalar(d));
        }
        let a = self.features(x)?;
        let b = self.features(x_prime)?;
        Ok(linalg::dot(a.values(), b.values()))
    }

    /// Gram matrix over `inputs`: `m x m` for scalar outputs, `md x md` with
    /// `d x d` blocks `κ(x_i, x_j)` otherwise.
    pub fn gram(&self, inputs: &[Vec<f64>]) -> Result<Matrix> {
        if inputs.is_empty() {
            return Err(EncoderError::EmptySample);
        }
        let d = self.basis.output_dim();
        let feats = inputs.iter().map(|x| self.features(x)).collect::<Result<Vec<_>>>()?;
        let m = inputs.len();
        let mut k = Matrix::zeros(m * d, m * d);
        for i in 0..m {
            for j in i..m {
                let block = feats[i].matmul(&feats[j].transpose())?;
                for r in 0..d {
                    for s in 0..d {
                        k[(i * d + r, j * d + s)] = block[(r, s)];
                        k[(j * d + s, i * d + r)] = block[(r, s)];
                    }
                }
            }
        }
        Ok(k)
    }

    /// Dual coefficients `α` solving `(K + λ m I) α = Y` on the eval subset
    /// (scalar outputs).
    pub fn solve_dual(&self, data: &TaskDataset) -> Result<Vec<f64>> {
        let d = self.basis.output_dim();
        if d != 1 {
            return Err(EncoderError::NotScalar(d));
        }
        let alpha = self.solve_dual_vector(data)?;
        Ok(alpha)
    }

    /// Block dual system for vector outputs; `α` is returned stacked as
    /// `m` blocks of `d`. Limited to `m * d <= MAX_DUAL_SIZE`.
    pub fn solve_dual_vector(&self, data: &TaskDataset) -> Result<Vec<f64>> {
        if data.eval_indices.is_empty() {
            return Err(EncoderError::EmptySample);
        }
        let d = self.basis.output_dim();
        let m = data.eval_indices.len();
        if m * d > MAX_DUAL_SIZE {
            return Err(EncoderError::DualTooLarge(m * d));
        }
        let inputs = data.eval_inputs();
        let mut k = self.gram(&inputs)?;
        let shift = self.lambda * m as f64;
        for i in 0..m * d {
            k[(i, i)] += shift;
        }
        let mut y = Vec::with_capacity(m * d);
        for &i in &data.eval_indices {
            self.check_sample(&data.inputs[i], Some(&data.targets[i]))?;
            y.extend_from_slice(&data.targets[i]);
        }
        Ok(linalg::spd_solve_vec(&k, &y)?)
    }

    /// `Σ_i κ(x, x_i) α_i` for vector outputs.
    pub fn predict_dual_vector(&self, alpha: &[f64], eval_inputs: &[Vec<f64>], x: &[f64]) -> Result<Vec<f64>> {
        let d = self.basis.output_dim();
        if alpha.len() != eval_inputs.len() * d {
            return Err(EncoderError::DimensionMismatch(format!(
                "{} dual coefficients for {} points of dimension {d}",
                alpha.len(),
                eval_inputs.len()
            )));
        }
        let mut out = vec![0.0; d];
        for (i, xi) in eval_inputs.iter().enumerate() {
            let block = self.operator_kernel(x, xi)?;
            let contrib = block.matvec(&alpha[i * d..(i + 1) * d])?;
            for (o, v) in out.iter_mut().zip(contrib) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// `Σ_i α_i k(x, x_i)` for scalar outputs.
    pub fn predict_dual(&self, alpha: &[f64], eval_inputs: &[Vec<f64>], x: &[f64]) -> Result<f64> {
        let d = self.basis.output_dim();
        if d != 1 {
            return Err(EncoderError::NotScalar(d));
        }
        Ok(self.predict_dual_vector(alpha, eval_inputs, x)?[0])
    }

    /// Mean of `‖y - φ(x)c‖²` over the given indices.
    pub fn mse_on(&self, c: &CoefficientVector, data: &TaskDataset, indices: &[usize]) -> Result<f64> {
        if indices.is_empty() {
            return Err(EncoderError::EmptySample);
        }
        let mut total = 0.0;
        for &i in indices {
            let pred = self.predict(c, &data.inputs[i])?;
            total += pred
                .iter()
                .zip(&data.targets[i])
                .map(|(p, y)| (p - y) * (p - y))
                .sum::<f64>();
        }
        Ok(total / indices.len() as f64)
    }
}

/// Adds `φᵀφ` (upper triangle) and `φᵀy` for one sample.
#[inline]
pub(crate) fn accumulate_normal_equations(
    phi: &[f64],
    y: &[f64],
    d: usize,
    n: usize,
    gram: &mut [f64],
    rhs: &mut [f64],
) {
    for r in 0..d {
        let row = &phi[r * n..(r + 1) * n];
        let yr = y[r];
        for a in 0..n {
            let pa = row[a];
            rhs[a] += pa * yr;
            let g = &mut gram[a * n..(a + 1) * n];
            for b in a..n {
                g[b] += pa * row[b];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnbasis::{Activation, Architecture, MlpSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn basis(d: usize, n: usize, seed: u64) -> BasisSet {
        BasisSet::init(
            MlpSpec {
                input_dim: 2,
                hidden_widths: vec![8],
                output_dim: d,
                n_basis: n,
                architecture: Architecture::MultiHeaded,
                activation: Activation::Tanh,
            },
            seed,
        )
        .unwrap()
    }

    /// Basis with every output equal to the constant 1 (zero weights, unit head bias).
    fn constant_basis(value: f64) -> BasisSet {
        let mut b = BasisSet::init(
            MlpSpec {
                input_dim: 1,
                hidden_widths: vec![3],
                output_dim: 1,
                n_basis: 1,
                architecture: Architecture::MultiHeaded,
                activation: Activation::Tanh,
            },
            0,
        )
        .unwrap();
        b.params.values.fill(0.0);
        let last = b.params.values.len() - 1;
        b.params.values[last] = value;
        b
    }

    fn random_task(rng: &mut ChaCha8Rng, m: usize, d: usize) -> TaskDataset {
        let inputs: Vec<Vec<f64>> = (0..m)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let targets: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        TaskDataset::all_eval(inputs, targets).unwrap()
    }

    /// Explicit inverse via Gauss-Jordan elimination.
    fn invert(a: &Matrix) -> Matrix {
        let n = a.rows();
        let mut aug: Vec<Vec<f64>> = (0..n)
            .map(|r| {
                let mut row = a.row(r).to_vec();
                row.extend((0..n).map(|c| if c == r { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs()))
                .unwrap();
            aug.swap(col, piv);
            let p = aug[col][col];
            for v in &mut aug[col] {
                *v /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = aug[r][col];
                    let pivot_row = aug[col].clone();
                    for (v, pv) in aug[r].iter_mut().zip(pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
        Matrix::from_fn(n, n, |r, c| aug[r][n + c])
    }

    #[test]
    fn lambda_must_be_positive() {
        assert!(FunctionEncoder::new(basis(1, 2, 0), 0.0).is_err());
        assert!(FunctionEncoder::new(basis(1, 2, 0), f64::NAN).is_err());
    }

    #[test]
    fn zero_targets_give_zero_coefficients() {
        let enc = FunctionEncoder::new(basis(1, 3, 1), 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut task = random_task(&mut rng, 10, 1);
        for t in &mut task.targets {
            t[0] = 0.0;
        }
        let c = enc.solve_coefficients(&task).unwrap();
        assert!(c.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_basis_scalar_solution() {
        let lambda = 0.25;
        let enc = FunctionEncoder::new(constant_basis(1.0), lambda).unwrap();
        let inputs: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64]).collect();
        let targets = vec![vec![2.0]; 7];
        let c = enc
            .solve_coefficients(&TaskDataset::all_eval(inputs, targets).unwrap())
            .unwrap();
        assert!((c.0[0] - 2.0 / (1.0 + lambda)).abs() < 1e-14);
    }

    #[test]
    fn matches_direct_inversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for d in [1, 2] {
            let enc = FunctionEncoder::new(basis(d, 3, 4), 1e-2).unwrap();
            let task = random_task(&mut rng, 10, d);
            let c = enc.solve_coefficients(&task).unwrap();
            let n = 3;
            let mut a = Matrix::zeros(n, n);
            let mut b = vec![0.0; n];
            for (x, y) in task.inputs.iter().zip(&task.targets) {
                let phi = enc.features(x).unwrap();
                let ptp = phi.transpose().matmul(&phi).unwrap();
                let pty = phi.transpose().matvec(y).unwrap();
                for i in 0..n {
                    b[i] += pty[i] / 10.0;
                    for j in 0..n {
                        a[(i, j)] += ptp[(i, j)] / 10.0;
                    }
                }
            }
            for i in 0..n {
                a[(i, i)] += 1e-2;
            }
            let expected = invert(&a).matvec(&b).unwrap();
            for (ci, ei) in c.0.iter().zip(&expected) {
                assert!((ci - ei).abs() < 1e-10, "{ci} vs {ei}");
            }
        }
    }

    #[test]
    fn predict_is_linear_in_coefficients() {
        let enc = FunctionEncoder::new(basis(2, 3, 2), 1e-3).unwrap();
        let x = [0.3, -0.2];
        let zero = enc.predict(&CoefficientVector(vec![0.0; 3]), &x).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);
        let c = CoefficientVector(vec![0.5, -1.0, 2.0]);
        let c2 = CoefficientVector(c.0.iter().map(|v| 2.0 * v).collect());
        let p = enc.predict(&c, &x).unwrap();
        let p2 = enc.predict(&c2, &x).unwrap();
        for (a, b) in p.iter().zip(&p2) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
        assert!(enc.predict(&CoefficientVector(vec![1.0]), &x).is_err());
    }

    #[test]
    fn kernel_properties() {
        let enc = FunctionEncoder::new(basis(1, 4, 3), 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let y = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let kxx = enc.kernel(&x, &x).unwrap();
            let phi = enc.features(&x).unwrap();
            assert!((kxx - phi.values().iter().map(|v| v * v).sum::<f64>()).abs() < 1e-14);
            assert!(kxx >= 0.0);
            assert_eq!(enc.kernel(&x, &y).unwrap(), enc.kernel(&y, &x).unwrap());
            assert_eq!(
                enc.operator_kernel(&x, &y).unwrap()[(0, 0)],
                enc.kernel(&x, &y).unwrap()
            );
        }
        let mut zero = basis(1, 4, 3);
        zero.params.values.fill(0.0);
        let z = FunctionEncoder::new(zero, 1e-3).unwrap();
        assert_eq!(z.kernel(&[0.1, 0.2], &[0.4, -0.3]).unwrap(), 0.0);
        let vec_enc = FunctionEncoder::new(basis(2, 4, 3), 1e-3).unwrap();
        assert!(matches!(
            vec_enc.kernel(&[0.0, 0.0], &[0.0, 0.0]),
            Err(EncoderError::NotScalar(2))
        ));
    }

    #[test]
    fn operator_kernel_symmetry() {
        let enc = FunctionEncoder::new(basis(3, 4, 6), 1e-3).unwrap();
        let x = [0.2, 0.9];
        let y = [-0.7, 0.1];
        let kxx = enc.operator_kernel(&x, &x).unwrap();
        assert_eq!(kxx.max_asymmetry(), 0.0);
        let e = linalg::sym_eig(&kxx).unwrap();
        assert!(e.eigenvalues.iter().all(|&l| l >= -1e-10));
        let kxy = enc.operator_kernel(&x, &y).unwrap();
        let kyx = enc.operator_kernel(&y, &x).unwrap();
        assert_eq!(kxy.transpose(), kyx);
    }

    #[test]
    fn constant_basis_gram_is_all_ones() {
        let enc = FunctionEncoder::new(constant_basis(1.0), 1e-3).unwrap();
        let inputs: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.3]).collect();
        let k = enc.gram(&inputs).unwrap();
        assert!(k.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dual_single_point() {
        let enc = FunctionEncoder::new(basis(1, 3, 8), 0.1).unwrap();
        let x = vec![0.4, -0.6];
        let task = TaskDataset::all_eval(vec![x.clone()], vec![vec![1.7]]).unwrap();
        let alpha = enc.solve_dual(&task).unwrap();
        let kxx = enc.kernel(&x, &x).unwrap();
        assert!((alpha[0] - 1.7 / (kxx + 0.1)).abs() < 1e-14);
        let z = TaskDataset::all_eval(vec![x.clone()], vec![vec![0.0]]).unwrap();
        assert_eq!(enc.solve_dual(&z).unwrap(), vec![0.0]);
        let probe = [0.1, 0.1];
        assert_eq!(
            enc.predict_dual(&[1.0], std::slice::from_ref(&x), &probe).unwrap(),
            enc.kernel(&probe, &x).unwrap()
        );
        assert_eq!(enc.predict_dual(&[0.0], &[x], &probe).unwrap(), 0.0);
    }

    #[test]
    fn dual_rejects_oversized_vector_system() {
        let enc = FunctionEncoder::new(basis(2, 3, 8), 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let task = random_task(&mut rng, 251, 2);
        assert!(matches!(
            enc.solve_dual_vector(&task),
            Err(EncoderError::DualTooLarge(502))
        ));
    }

    #[test]
    fn primal_dual_agree_vector_valued() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let enc = FunctionEncoder::new(basis(2, 5, 9), 1e-2).unwrap();
        let task = random_task(&mut rng, 30, 2);
        let c = enc.solve_coefficients(&task).unwrap();
        let alpha = enc.solve_dual_vector(&task).unwrap();
        let ymax = task.targets.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        for _ in 0..20 {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let p = enc.predict(&c, &x).unwrap();
            let q = enc.predict_dual_vector(&alpha, &task.inputs, &x).unwrap();
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() <= 1e-8 * (1.0 + ymax));
            }
        }
    }

    #[test]
    fn dataset_validation() {
        assert!(TaskDataset::new(vec![], vec![], vec![], vec![]).is_err());
        assert!(TaskDataset::new(vec![vec![0.0]], vec![vec![1.0]], vec![0], vec![0]).is_err());
        assert!(TaskDataset::new(vec![vec![0.0]], vec![vec![1.0]], vec![1], vec![]).is_err());
        assert!(TaskDataset::new(
            vec![vec![0.0], vec![1.0]],
            vec![vec![1.0], vec![1.0, 2.0]],
            vec![0],
            vec![1]
        )
        .is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn primal_dual_equivalence(seed in any::<u64>(), n in 1usize..8, m in 1usize..60, li in 0usize..3) {
                let lambda = [1e-3, 1e-1, 1.0][li];
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let enc = FunctionEncoder::new(basis(1, n, seed), lambda).unwrap();
                let task = random_task(&mut rng, m, 1);
                let c = enc.solve_coefficients(&task).unwrap();
                let alpha = enc.solve_dual(&task).unwrap();
                let ymax = task.targets.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
                for _ in 0..10 {
                    let x = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
                    let p = enc.predict(&c, &x).unwrap()[0];
                    let q = enc.predict_dual(&alpha, &task.inputs, &x).unwrap();
                    prop_assert!((p - q).abs() <= 1e-8 * (1.0 + ymax));
                }
            }

            #[test]
            fn norm_certificate_and_shrinkage(seed in any::<u64>(), n in 1usize..8, m in 1usize..40) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let task = random_task(&mut rng, m, 1);
                let ymax = task.targets.iter().map(|t| t[0].abs()).fold(0.0, f64::max);
                let mut prev = f64::INFINITY;
                for lambda in [1e-3, 1e-2, 1e-1, 1.0, 10.0] {
                    let enc = FunctionEncoder::new(basis(1, n, seed ^ 1), lambda).unwrap();
                    let norm = enc.solve_coefficients(&task).unwrap().norm();
                    prop_assert!(norm <= ymax / lambda.sqrt() * (1.0 + 1e-12));
                    prop_assert!(norm <= prev * (1.0 + 1e-12));
                    prev = norm;
                }
            }

            #[test]
            fn gram_is_psd(seed in any::<u64>(), m in 1usize..30, d in 1usize..3) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let enc = FunctionEncoder::new(basis(d, 4, seed), 1e-3).unwrap();
                let inputs: Vec<Vec<f64>> = (0..m).map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
                let k = enc.gram(&inputs).unwrap();
                prop_assert_eq!(k.max_asymmetry(), 0.0);
                let e = linalg::sym_eig(&k).unwrap();
                let max = e.eigenvalues[0].max(0.0);
                prop_assert!(*e.eigenvalues.last().unwrap() >= -1e-8 * max);
            }
        }
    }

    #[test]
    fn interpolation_limit() {
        // m <= n with independent features: the eval residual vanishes as λ -> 0.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let task = random_task(&mut rng, 3, 1);
        let mut prev = f64::INFINITY;
        for lambda in [1e-2, 1e-4, 1e-6, 1e-8] {
            let enc = FunctionEncoder::new(basis(1, 5, 2), lambda).unwrap();
            let c = enc.solve_coefficients(&task).unwrap();
            let resid = enc.mse_on(&c, &task, &task.eval_indices).unwrap();
            assert!(resid <= prev);
            prev = resid;
        }
        assert!(prev < 1e-8, "{prev}");
    }
}
