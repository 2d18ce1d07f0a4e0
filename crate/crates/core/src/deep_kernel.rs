//! Deep-kernel baseline: a feature network feeding an RBF-ARD or linear
//! kernel, fitted per task by kernel ridge regression and trained by
//! backpropagating through the ridge solve.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::encoder::{EncoderError, TaskDataset};
use crate::linalg::{self, Cholesky, LinalgError, Matrix};
use crate::nnbasis::{BasisError, BasisSet, FeatureMap};
use crate::training::{Adam, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum DklError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("deep kernels here take scalar targets, got dimension {0}")]
    NotScalar(usize),
    #[error("empty evaluation set")]
    EmptySample,
    #[error("correlation undefined: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, DklError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    RbfArd,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepKernelModel {
    /// Embedding network; embedding coordinate `j` is head `j` (scalar
    /// output, `n_basis` = embedding width).
    pub feature_net: BasisSet,
    pub kind: KernelKind,
    /// `log ℓ_j`, one per embedding coordinate (RBF only).
    pub log_lengthscales: Vec<f64>,
    /// `log σ²` (RBF only).
    pub log_output_scale: f64,
    pub lambda: f64,
}

impl DeepKernelModel {
    /// Lengthscales and output scale start at 1.
    pub fn new(feature_net: BasisSet, kind: KernelKind, lambda: f64) -> Result<Self> {
        if feature_net.spec.output_dim != 1 {
            return Err(DklError::DimensionMismatch(
                "feature network heads must be scalar; use n_basis for the embedding width".into(),
            ));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(DklError::Encoder(EncoderError::InvalidLambda(lambda)));
        }
        let e = feature_net.spec.n_basis;
        Ok(Self {
            feature_net,
            kind,
            log_lengthscales: vec![0.0; e],
            log_output_scale: 0.0,
            lambda,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.feature_net.spec.n_basis
    }

    pub fn input_dim(&self) -> usize {
        self.feature_net.spec.input_dim
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = vec![0.0; self.embedding_dim()];
        self.feature_net.features_into(x, &mut z)?;
        Ok(z)
    }

    pub fn output_scale(&self) -> f64 {
        self.log_output_scale.exp()
    }

    fn inv_sq_lengths(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|u| (-2.0 * u).exp()).collect()
    }

    fn k_embedded(&self, a: &[f64], b: &[f64], inv_sq: &[f64]) -> f64 {
        match self.kind {
            KernelKind::Linear => linalg::dot(a, b),
            KernelKind::RbfArd => {
                let q: f64 = a
                    .iter()
                    .zip(b)
                    .zip(inv_sq)
                    .map(|((x, y), w)| (x - y) * (x - y) * w)
                    .sum();
                self.output_scale() * (-0.5 * q).exp()
            }
        }
    }

    pub fn kernel(&self, x: &[f64], x_prime: &[f64]) -> Result<f64> {
        let (a, b) = (self.embed(x)?, self.embed(x_prime)?);
        Ok(self.k_embedded(&a, &b, &self.inv_sq_lengths()))
    }

    fn embed_all(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        xs.iter()
            .map(|x| {
                if x.len() != self.input_dim() {
                    return Err(DklError::DimensionMismatch(format!(
                        "input has {} entries, model expects {}",
                        x.len(),
                        self.input_dim()
                    )));
                }
                self.embed(x)
            })
            .collect()
    }

    fn matrix_from_embeddings(&self, za: &[Vec<f64>], zb: &[Vec<f64>]) -> Matrix {
        let inv_sq = self.inv_sq_lengths();
        let mut v = Vec::with_capacity(za.len() * zb.len());
        for a in za {
            for b in zb {
                v.push(self.k_embedded(a, b, &inv_sq));
            }
        }
        Matrix::new(za.len(), zb.len(), v).expect("sized buffer")
    }

    /// `K_ij = k(a_i, b_j)`.
    pub fn kernel_matrix(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Matrix> {
        let (za, zb) = (self.embed_all(a)?, self.embed_all(b)?);
        Ok(self.matrix_from_embeddings(&za, &zb))
    }

    /// Network weights followed by `log ℓ` and `log σ²`.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = self.feature_net.params().to_vec();
        p.extend_from_slice(&self.log_lengthscales);
        p.push(self.log_output_scale);
        p
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<()> {
        let net = self.feature_net.params().len();
        let e = self.embedding_dim();
        if p.len() != net + e + 1 {
            return Err(DklError::DimensionMismatch(format!(
                "{} parameters, model has {}",
                p.len(),
                net + e + 1
            )));
        }
        self.feature_net.params_mut().copy_from_slice(&p[..net]);
        self.log_lengthscales.copy_from_slice(&p[net..net + e]);
        self.log_output_scale = p[net + e];
        Ok(())
    }

    fn trainable_mask(&self) -> Vec<bool> {
        let net = self.feature_net.params().len();
        let kernel = self.kind == KernelKind::RbfArd;
        (0..net + self.embedding_dim() + 1).map(|i| i < net || kernel).collect()
    }
}

fn scalar_targets(targets: &[Vec<f64>]) -> Result<Vec<f64>> {
    targets
        .iter()
        .map(|y| {
            if y.len() == 1 {
                Ok(y[0])
            } else {
                Err(DklError::NotScalar(y.len()))
            }
        })
        .collect()
}

fn factor_ridge(k: &Matrix, lambda: f64) -> Result<Cholesky> {
    let n = k.rows();
    let mut a = k.clone().into_values();
    for i in 0..n {
        a[i * n + i] += lambda;
    }
    Ok(Cholesky::factor(&Matrix::new(n, n, a)?)?)
}

/// Fits `(K_EE + λI) α = y_E` and returns `K_QE α`.
pub fn krr_fit_predict(
    model: &DeepKernelModel,
    eval_inputs: &[Vec<f64>],
    eval_targets: &[Vec<f64>],
    query_inputs: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if eval_inputs.is_empty() {
        return Err(DklError::EmptySample);
    }
    if eval_inputs.len() != eval_targets.len() {
        return Err(DklError::DimensionMismatch(format!(
            "{} eval inputs, {} targets",
            eval_inputs.len(),
            eval_targets.len()
        )));
    }
    let y = scalar_targets(eval_targets)?;
    let ze = model.embed_all(eval_inputs)?;
    let zq = model.embed_all(query_inputs)?;
    let chol = factor_ridge(&model.matrix_from_embeddings(&ze, &ze), model.lambda)?;
    let alpha = chol.solve_vec(&y)?;
    Ok(model.matrix_from_embeddings(&zq, &ze).matvec(&alpha)?)
}

/// Query MSE after a KRR fit on the eval split, averaged over tasks.
pub fn dkl_query_mse(model: &DeepKernelModel, tasks: &[TaskDataset], parallel: bool) -> Result<f64> {
    if tasks.is_empty() {
        return Err(TrainError::NoTasks.into());
    }
    let one = |t: &TaskDataset| -> Result<f64> {
        let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
            (
                idx.iter().map(|&i| t.inputs[i].clone()).collect(),
                idx.iter().map(|&i| t.targets[i].clone()).collect(),
            )
        };
        let (xe, ye) = pick(&t.eval_indices);
        let score = if t.query_indices.is_empty() {
            &t.eval_indices
        } else {
            &t.query_indices
        };
        let (xq, yq) = pick(score);
        let pred = krr_fit_predict(model, &xe, &ye, &xq)?;
        Ok(pred.iter().zip(&yq).map(|(p, y)| (p - y[0]).powi(2)).sum::<f64>() / pred.len() as f64)
    };
    let errs: Result<Vec<f64>> = if parallel {
        tasks.par_iter().map(one).collect()
    } else {
        tasks.iter().map(one).collect()
    };
    Ok(errs?.iter().sum::<f64>() / tasks.len() as f64)
}

/// `(Σ squared error, count, gradient)` of `scale · Σ_q (ŷ_q - y_q)²` for
/// one task, differentiating through the ridge solve with the adjoint
/// `β = (K_EE + λI)⁻¹ K_QEᵀ g`.
pub fn task_loss_gradient(
    model: &DeepKernelModel,
    task: &TaskDataset,
    query: &[usize],
    scale: f64,
) -> Result<(f64, usize, Vec<f64>)> {
    let e_idx = &task.eval_indices;
    if e_idx.is_empty() {
        return Err(DklError::EmptySample);
    }
    let emb = |idx: &[usize]| -> Result<Vec<Vec<f64>>> { idx.iter().map(|&i| model.embed(&task.inputs[i])).collect() };
    let target = |i: usize| -> Result<f64> {
        let y = &task.targets[i];
        if y.len() == 1 {
            Ok(y[0])
        } else {
            Err(DklError::NotScalar(y.len()))
        }
    };
    let ze = emb(e_idx)?;
    let zq = emb(query)?;
    let ye: Vec<f64> = e_idx.iter().map(|&i| target(i)).collect::<Result<_>>()?;
    let yq: Vec<f64> = query.iter().map(|&i| target(i)).collect::<Result<_>>()?;
    let chol = factor_ridge(&model.matrix_from_embeddings(&ze, &ze), model.lambda)?;
    let alpha = chol.solve_vec(&ye)?;
    let kqe = model.matrix_from_embeddings(&zq, &ze);
    let pred = kqe.matvec(&alpha)?;
    let (m, q, e) = (ze.len(), zq.len(), model.embedding_dim());
    let mut sq = 0.0;
    let mut g = vec![0.0; q];
    for i in 0..q {
        let r = pred[i] - yq[i];
        sq += r * r;
        g[i] = 2.0 * scale * r;
    }
    let a = kqe.transpose().matvec(&g)?;
    let beta = chol.solve_vec(&a)?;

    let inv_sq = model.inv_sq_lengths();
    let net = model.feature_net.params().len();
    let mut grad = vec![0.0; net + e + 1];
    let mut dze = vec![vec![0.0; e]; m];
    let mut dzq = vec![vec![0.0; e]; q];
    // Entry (i, j) with upstream w adds w ∂k(a_i, b_j) to both embeddings
    // and to the kernel parameters.
    let entry = |za: &[f64], zb: &[f64], w: f64, da: &mut [f64], db: &mut [f64], kgrad: &mut [f64]| {
        if w == 0.0 {
            return;
        }
        match model.kind {
            KernelKind::Linear => {
                for k in 0..e {
                    da[k] += w * zb[k];
                    db[k] += w * za[k];
                }
            }
            KernelKind::RbfArd => {
                let kv = model.k_embedded(za, zb, &inv_sq);
                for k in 0..e {
                    let diff = za[k] - zb[k];
                    let t = w * kv * diff * inv_sq[k];
                    da[k] -= t;
                    db[k] += t;
                    kgrad[k] += w * kv * diff * diff * inv_sq[k];
                }
                kgrad[e] += w * kv;
            }
        }
    };
    let mut kgrad = vec![0.0; e + 1];
    for i in 0..q {
        for j in 0..m {
            let w = g[i] * alpha[j];
            entry(&zq[i], &ze[j], w, &mut dzq[i], &mut dze[j], &mut kgrad);
        }
    }
    for i in 0..m {
        for j in 0..m {
            let w = -beta[i] * alpha[j];
            if i == j {
                let mut tmp_a = vec![0.0; e];
                let mut tmp_b = vec![0.0; e];
                entry(&ze[i], &ze[j], w, &mut tmp_a, &mut tmp_b, &mut kgrad);
                for k in 0..e {
                    dze[i][k] += tmp_a[k] + tmp_b[k];
                }
            } else {
                let (lo, hi) = (i.min(j), i.max(j));
                let (head, tail) = dze.split_at_mut(hi);
                let (di, dj) = if i < j {
                    (&mut head[lo], &mut tail[0])
                } else {
                    (&mut tail[0], &mut head[lo])
                };
                entry(&ze[i], &ze[j], w, di, dj, &mut kgrad);
            }
        }
    }
    grad[net..].copy_from_slice(&kgrad);
    let (net_grad, _) = grad.split_at_mut(net);
    for (idx, dz) in e_idx.iter().zip(&dze).chain(query.iter().zip(&dzq)) {
        if dz.iter().all(|&v| v == 0.0) {
            continue;
        }
        model
            .feature_net
            .backprop(&task.inputs[*idx], net_grad, &mut |_, seed| seed.copy_from_slice(dz))?;
    }
    Ok((sq, q, grad))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DklReport {
    /// Mean query MSE per epoch.
    pub loss_curve: Vec<f64>,
    /// Seconds per optimizer step.
    pub step_wall_times: Vec<f64>,
    pub final_query_mse: f64,
}

/// Trains feature network and kernel parameters with Adam, batching tasks
/// the same way the function-encoder trainer does. `config.lambda` is
/// ignored in favour of the model's own ridge parameter.
pub fn dkl_train(
    mut model: DeepKernelModel,
    tasks: &[TaskDataset],
    config: &TrainConfig,
) -> Result<(DeepKernelModel, DklReport)> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(TrainError::NoTasks.into());
    }
    for t in tasks {
        t.validate()?;
    }
    let trainable = model.trainable_mask();
    let mut params = model.flat_params();
    let mut adam = Adam::new(params.len(), config.learning_rate);
    let batch = if config.tasks_per_batch == 0 {
        tasks.len()
    } else {
        config.tasks_per_batch.min(tasks.len())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x646b_6c00));
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    let mut report = DklReport::default();
    for epoch in 0..config.epochs {
        if batch < tasks.len() {
            order.shuffle(&mut rng);
        }
        let (mut epoch_sq, mut epoch_count) = (0.0, 0usize);
        for chunk in order.chunks(batch) {
            let start = Instant::now();
            let queries: Vec<Vec<usize>> = chunk
                .iter()
                .map(|&t| {
                    let task = &tasks[t];
                    let all = if task.query_indices.is_empty() {
                        &task.eval_indices
                    } else {
                        &task.query_indices
                    };
                    let k = config.query_points_per_step;
                    if k == 0 || k >= all.len() {
                        all.clone()
                    } else {
                        let mut pick: Vec<usize> = all.choose_multiple(&mut rng, k).copied().collect();
                        pick.sort_unstable();
                        pick
                    }
                })
                .collect();
            let n_b = chunk.len() as f64;
            let run = |(slot, &t): (usize, &usize)| {
                let q = &queries[slot];
                task_loss_gradient(&model, &tasks[t], q, 1.0 / (n_b * q.len() as f64))
            };
            let passes: Result<Vec<_>> = if config.parallel {
                chunk.par_iter().enumerate().map(run).collect()
            } else {
                chunk.iter().enumerate().map(run).collect()
            };
            let mut grad = vec![0.0; params.len()];
            for (sq, count, g) in passes? {
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
                epoch_sq += sq / count as f64;
                epoch_count += 1;
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged { stage: 0, epoch }.into());
            }
            adam.step(&mut params, &grad, &trainable);
            model.set_flat_params(&params)?;
            report.step_wall_times.push(start.elapsed().as_secs_f64());
        }
        let mse = epoch_sq / epoch_count as f64;
        if !mse.is_finite() {
            return Err(TrainError::Diverged { stage: 0, epoch }.into());
        }
        report.loss_curve.push(mse);
    }
    report.final_query_mse = dkl_query_mse(&model, tasks, config.parallel)?;
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramComparison {
    /// Pearson correlation of the upper triangles (diagonal included) after
    /// scaling each matrix to unit Frobenius norm.
    pub correlation: f64,
    pub spectrum_a: Vec<f64>,
    pub spectrum_b: Vec<f64>,
}

pub fn gram_compare(k1: &Matrix, k2: &Matrix) -> Result<GramComparison> {
    if !k1.is_square() || k1.rows() != k2.rows() || k1.cols() != k2.cols() {
        return Err(DklError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            k1.rows(),
            k1.cols(),
            k2.rows(),
            k2.cols()
        )));
    }
    for k in [k1, k2] {
        if k.max_asymmetry() > linalg::SYMMETRY_TOL * k.max_abs().max(1.0) {
            return Err(LinalgError::NotSymmetric {
                asymmetry: k.max_asymmetry(),
            }
            .into());
        }
    }
    let n = k1.rows();
    let upper = |k: &Matrix| -> Result<Vec<f64>> {
        let f = k.frobenius_norm();
        if f == 0.0 {
            return Err(DklError::Degenerate("zero matrix".into()));
        }
        Ok((0..n)
            .flat_map(|i| (i..n).map(move |j| (i, j)))
            .map(|(i, j)| k[(i, j)] / f)
            .collect())
    };
    let (a, b) = (upper(k1)?, upper(k2)?);
    let len = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / len, b.iter().sum::<f64>() / len);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(&b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(DklError::Degenerate("constant upper triangle".into()));
    }
    Ok(GramComparison {
        correlation: sab / (saa * sbb).sqrt(),
        spectrum_a: linalg::sym_eig(k1)?.eigenvalues,
        spectrum_b: linalg::sym_eig(k2)?.eigenvalues,
    })
}
