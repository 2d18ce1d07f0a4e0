//! Training loop, coefficient-covariance spectra and the two compact-basis
//! procedures (grow-and-freeze, train-then-prune).

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::encoder::{accumulate_normal_equations, CoefficientVector, EncoderError, FunctionEncoder, TaskDataset};
use crate::linalg::{self, LinalgError, Matrix};
use crate::nnbasis::{Architecture, BasisError, BasisSet, FeatureMap, MlpSpec};

/// Eigenvalue sums at or below this are treated as a spectrum with no variance.
pub const ZERO_VARIANCE: f64 = 1e-14;

/// Slack on the cumulative-variance comparison against `tau`.
const CEV_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no training tasks")]
    NoTasks,
    #[error("covariance needs at least 2 coefficient vectors, got {0}")]
    TooFewSamples(usize),
    #[error("coefficient vectors have inconsistent lengths")]
    RaggedCoefficients,
    #[error("loss became non-finite at stage {stage}, epoch {epoch}")]
    Diverged { stage: usize, epoch: usize },
    #[error("coefficient covariance has no variance; effective rank is 0")]
    DegenerateRank,
    #[error("grow-and-freeze training needs independent bases")]
    SharedTrunk,
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Stop once the newest principal component explains less than `1 - tau`.
    #[default]
    NewestComponent,
    /// Stop once the leading `b - 1` components of a `b`-basis run explain `tau`.
    Cumulative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Passes over the task collection (per stage when growing bases).
    pub epochs: usize,
    pub learning_rate: f64,
    /// Tasks per optimizer step; 0 means the whole collection.
    pub tasks_per_batch: usize,
    pub lambda: f64,
    pub tau: f64,
    pub seed: u64,
    pub fine_tune_fraction: f64,
    pub max_bases: usize,
    pub initial_bases: usize,
    pub stop_rule: StopRule,
    /// Query points drawn per task and step; 0 uses every query point.
    pub query_points_per_step: usize,
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            learning_rate: 1e-3,
            tasks_per_batch: 0,
            lambda: 1e-3,
            tau: 0.99,
            seed: 0,
            fine_tune_fraction: 0.1,
            max_bases: 10,
            initial_bases: 20,
            stop_rule: StopRule::NewestComponent,
            query_points_per_step: 0,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be positive");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.fine_tune_fraction) {
            return bad("fine_tune_fraction must lie in [0, 1]");
        }
        if self.max_bases == 0 || self.initial_bases == 0 {
            return bad("basis counts must be at least 1");
        }
        Ok(())
    }

    pub fn fine_tune_epochs(&self) -> usize {
        (self.fine_tune_fraction * self.epochs as f64).ceil() as usize
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One update. Entries with `trainable[i] == false` are left untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], trainable: &[bool]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            if !trainable[i] {
                continue;
            }
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub covariance: Matrix,
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
    pub evr: Vec<f64>,
    pub cev: Vec<f64>,
    pub effective_rank: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean query squared error per epoch, all stages concatenated.
    pub loss_curve: Vec<f64>,
    /// Epoch losses of the post-pruning fine-tune.
    pub fine_tune_curve: Vec<f64>,
    /// Basis count of each stage in order.
    pub bases_history: Vec<usize>,
    /// Covariance spectrum after each stage.
    pub stage_spectra: Vec<SpectrumReport>,
    /// Spectrum that decided the basis count.
    pub spectrum: Option<SpectrumReport>,
    pub selected_indices: Vec<usize>,
    pub scores: Vec<f64>,
    /// Seconds per stage (the fine-tune counts as its own stage).
    pub stage_wall_times: Vec<f64>,
    /// Seconds per optimizer step, all stages concatenated.
    pub step_wall_times: Vec<f64>,
    /// Full-query MSE of the model before pruning.
    pub pre_prune_query_mse: Option<f64>,
    pub final_query_mse: f64,
}

/// Unbiased covariance of the coefficient vectors.
pub fn coefficient_covariance(coeffs: &[CoefficientVector]) -> Result<Matrix> {
    let n = coeffs.len();
    if n < 2 {
        return Err(TrainError::TooFewSamples(n));
    }
    let b = coeffs[0].len();
    if coeffs.iter().any(|c| c.len() != b) {
        return Err(TrainError::RaggedCoefficients);
    }
    let mut mean = vec![0.0; b];
    for c in coeffs {
        for (m, v) in mean.iter_mut().zip(&c.0) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; b * b];
    let mut centered = vec![0.0; b];
    for c in coeffs {
        for k in 0..b {
            centered[k] = c.0[k] - mean[k];
        }
        for i in 0..b {
            for j in i..b {
                cov[i * b + j] += centered[i] * centered[j];
            }
        }
    }
    let scale = 1.0 / (n - 1) as f64;
    for i in 0..b {
        for j in i..b {
            let v = cov[i * b + j] * scale;
            cov[i * b + j] = v;
            cov[j * b + i] = v;
        }
    }
    Ok(Matrix::from_raw(b, b, cov))
}

/// Smallest `r` with `cev[r - 1] >= tau`.
fn rank_from_cev(cev: &[f64], tau: f64) -> usize {
    cev.iter()
        .position(|&c| c >= tau - CEV_SLACK)
        .map_or(cev.len(), |p| p + 1)
}

/// Eigen-spectrum, explained-variance ratios and effective rank of a
/// covariance matrix.
pub fn spectrum(cov: &Matrix, tau: f64) -> Result<SpectrumReport> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(TrainError::InvalidConfig(format!("tau {tau} outside (0, 1]")));
    }
    let eig = linalg::sym_eig(cov)?;
    // Round-off can leave tiny negative eigenvalues on a PSD input.
    let clipped: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    let (evr, cev, effective_rank) = if eig.eigenvalues.iter().all(|&l| l <= ZERO_VARIANCE) || total <= 0.0 {
        let zeros = vec![0.0; clipped.len()];
        (zeros.clone(), zeros, 0)
    } else {
        let evr: Vec<f64> = clipped.iter().map(|l| l / total).collect();
        let mut acc = 0.0;
        let cev: Vec<f64> = evr
            .iter()
            .map(|e| {
                acc += e;
                acc
            })
            .collect();
        let r = rank_from_cev(&cev, tau);
        (evr, cev, r)
    };
    Ok(SpectrumReport {
        covariance: cov.clone(),
        eigenvalues: eig.eigenvalues,
        eigenvectors: eig.eigenvectors,
        evr,
        cev,
        effective_rank,
    })
}

/// Per-basis importance `Σ_{i<r} λ_i U[p][i]²`.
pub fn basis_scores(report: &SpectrumReport) -> Result<Vec<f64>> {
    let r = report.effective_rank;
    if r == 0 {
        return Err(TrainError::DegenerateRank);
    }
    let u = &report.eigenvectors;
    Ok((0..u.rows())
        .map(|p| (0..r).map(|i| report.eigenvalues[i] * u[(p, i)] * u[(p, i)]).sum())
        .collect())
}

/// Indices of the `r` largest scores, ties to the lower index, returned in
/// increasing order.
pub fn top_indices(scores: &[f64], r: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = order.into_iter().take(r).collect();
    keep.sort_unstable();
    keep
}

/// Mean over tasks of query MSE plus `λ‖c‖²`. Tasks without a query split
/// are scored on their eval points.
pub fn fe_loss<F: FeatureMap>(
    enc: &FunctionEncoder<F>,
    tasks: &[TaskDataset],
    coeffs: &[CoefficientVector],
) -> Result<f64> {
    if tasks.is_empty() {
        return Err(TrainError::NoTasks);
    }
    if coeffs.len() != tasks.len() {
        return Err(EncoderError::DimensionMismatch(format!(
            "{} coefficient vectors for {} tasks",
            coeffs.len(),
            tasks.len()
        ))
        .into());
    }
    let mut total = 0.0;
    for (task, c) in tasks.iter().zip(coeffs) {
        let mse = enc.mse_on(c, task, scoring_indices(task))?;
        total += mse + enc.lambda * c.0.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total / tasks.len() as f64)
}

fn scoring_indices(task: &TaskDataset) -> &[usize] {
    if task.query_indices.is_empty() {
        &task.eval_indices
    } else {
        &task.query_indices
    }
}

/// Coefficients of every task, solved on its eval split.
pub fn solve_all<F: FeatureMap>(
    enc: &FunctionEncoder<F>,
    tasks: &[TaskDataset],
    parallel: bool,
) -> Result<Vec<CoefficientVector>> {
    let solve = |t: &TaskDataset| enc.solve_coefficients(t);
    let out: std::result::Result<Vec<_>, _> = if parallel {
        tasks.par_iter().map(solve).collect()
    } else {
        tasks.iter().map(solve).collect()
    };
    Ok(out?)
}

/// Query MSE averaged over tasks, with coefficients from each eval split.
pub fn query_mse<F: FeatureMap>(enc: &FunctionEncoder<F>, tasks: &[TaskDataset], parallel: bool) -> Result<f64> {
    if tasks.is_empty() {
        return Err(TrainError::NoTasks);
    }
    let eval = |t: &TaskDataset| -> std::result::Result<f64, EncoderError> {
        let c = enc.solve_coefficients(t)?;
        enc.mse_on(&c, t, scoring_indices(t))
    };
    let per: std::result::Result<Vec<f64>, _> = if parallel {
        tasks.par_iter().map(eval).collect()
    } else {
        tasks.iter().map(eval).collect()
    };
    Ok(per?.iter().sum::<f64>() / tasks.len() as f64)
}

/// Spectrum of the coefficient covariance over all tasks.
pub fn task_spectrum<F: FeatureMap>(
    enc: &FunctionEncoder<F>,
    tasks: &[TaskDataset],
    tau: f64,
    parallel: bool,
) -> Result<SpectrumReport> {
    let coeffs = solve_all(enc, tasks, parallel)?;
    spectrum(&coefficient_covariance(&coeffs)?, tau)
}

/// Features of the frozen leading bases, cached per task over all points.
struct PrefixCache {
    width: usize,
    per_task: Vec<Vec<f64>>,
}

impl PrefixCache {
    fn build<F: FeatureMap>(basis: &F, tasks: &[TaskDataset], parallel: bool) -> std::result::Result<Self, BasisError> {
        let width = basis.frozen_prefix();
        if width == 0 {
            return Ok(Self {
                width,
                per_task: Vec::new(),
            });
        }
        let (d, n) = (basis.output_dim(), basis.n_basis());
        let one = |task: &TaskDataset| -> std::result::Result<Vec<f64>, BasisError> {
            let mut out = vec![0.0; task.len() * d * width];
            let mut full = vec![0.0; d * n];
            for (i, x) in task.inputs.iter().enumerate() {
                basis.features_into(x, &mut full)?;
                let block = &mut out[i * d * width..(i + 1) * d * width];
                for r in 0..d {
                    block[r * width..(r + 1) * width].copy_from_slice(&full[r * n..r * n + width]);
                }
            }
            Ok(out)
        };
        let per_task = if parallel {
            tasks.par_iter().map(one).collect::<std::result::Result<Vec<_>, _>>()?
        } else {
            tasks.iter().map(one).collect::<std::result::Result<Vec<_>, _>>()?
        };
        Ok(Self { width, per_task })
    }
}

struct TaskPass {
    sq_error: f64,
    count: usize,
    grad: Vec<f64>,
}

/// Solves one task's coefficients on its eval split, scores `query`, and
/// accumulates the loss gradient scaled by `scale`. Coefficients are held
/// constant in the backward pass.
fn task_pass<F: FeatureMap>(
    enc: &FunctionEncoder<F>,
    task: &TaskDataset,
    prefix: Option<&[f64]>,
    width: usize,
    query: &[usize],
    scale: f64,
) -> std::result::Result<TaskPass, EncoderError> {
    let basis = &enc.basis;
    let (d, n) = (basis.output_dim(), basis.n_basis());
    let tail_w = n - width;
    let mut phi = vec![0.0; d * n];
    let mut tail = vec![0.0; d * tail_w];
    let mut gram = vec![0.0; n * n];
    let mut rhs = vec![0.0; n];
    for &i in &task.eval_indices {
        basis.features_tail_into(&task.inputs[i], width, &mut tail)?;
        assemble(
            &mut phi,
            prefix.map(|p| &p[i * d * width..(i + 1) * d * width]),
            &tail,
            d,
            width,
            tail_w,
        );
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::NonFiniteFeatures(i));
        }
        accumulate_normal_equations(&phi, &task.targets[i], d, n, &mut gram, &mut rhs);
    }
    let c = enc.solve_normal_equations(gram, rhs, task.eval_indices.len())?;
    let mut grad = vec![0.0; basis.params().len()];
    let mut sq_error = 0.0;
    let mut residual = vec![0.0; d];
    for &i in query {
        let target = &task.targets[i];
        let fixed: Vec<f64> = match prefix {
            Some(p) => {
                let block = &p[i * d * width..(i + 1) * d * width];
                (0..d)
                    .map(|r| linalg::dot(&block[r * width..(r + 1) * width], &c[..width]))
                    .collect()
            }
            None => vec![0.0; d],
        };
        basis.backprop_tail(&task.inputs[i], width, &mut grad, &mut |feats, seed| {
            for r in 0..d {
                let pred = fixed[r] + linalg::dot(&feats[r * tail_w..(r + 1) * tail_w], &c[width..]);
                residual[r] = pred - target[r];
            }
            for r in 0..d {
                let g = 2.0 * scale * residual[r];
                for j in 0..tail_w {
                    seed[r * tail_w + j] = g * c[width + j];
                }
            }
        })?;
        sq_error += residual.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(TaskPass {
        sq_error,
        count: query.len(),
        grad,
    })
}

fn assemble(phi: &mut [f64], prefix: Option<&[f64]>, tail: &[f64], d: usize, width: usize, tail_w: usize) {
    let n = width + tail_w;
    for r in 0..d {
        if let Some(p) = prefix {
            phi[r * n..r * n + width].copy_from_slice(&p[r * width..(r + 1) * width]);
        }
        phi[r * n + width..(r + 1) * n].copy_from_slice(&tail[r * tail_w..(r + 1) * tail_w]);
    }
}

fn trainable_mask<F: FeatureMap>(basis: &F) -> Vec<bool> {
    let mut ones = vec![1.0; basis.params().len()];
    basis.apply_freeze_mask(&mut ones);
    ones.into_iter().map(|v| v != 0.0).collect()
}

fn check_tasks(tasks: &[TaskDataset]) -> Result<()> {
    if tasks.is_empty() {
        return Err(TrainError::NoTasks);
    }
    for t in tasks {
        t.validate()?;
        if t.eval_indices.is_empty() {
            return Err(EncoderError::EmptySample.into());
        }
    }
    Ok(())
}

/// Gradient steps over the task collection for `epochs` passes. Returns
/// per-epoch mean query MSE and per-step wall times.
pub fn train_epochs<F: FeatureMap>(
    enc: &mut FunctionEncoder<F>,
    tasks: &[TaskDataset],
    config: &TrainConfig,
    epochs: usize,
    stage: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_tasks(tasks)?;
    let cache = PrefixCache::build(&enc.basis, tasks, config.parallel)?;
    let width = cache.width;
    let trainable = trainable_mask(&enc.basis);
    let mut adam = Adam::new(trainable.len(), config.learning_rate);
    let batch = if config.tasks_per_batch == 0 {
        tasks.len()
    } else {
        config.tasks_per_batch.min(tasks.len())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x7472_6169_6e00 + stage as u64));
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    let mut curve = Vec::with_capacity(epochs);
    let mut step_times = Vec::new();
    for epoch in 0..epochs {
        if batch < tasks.len() {
            order.shuffle(&mut rng);
        }
        let mut epoch_sq = 0.0;
        let mut epoch_count = 0usize;
        for chunk in order.chunks(batch) {
            let start = Instant::now();
            let queries: Vec<Vec<usize>> = chunk
                .iter()
                .map(|&t| {
                    let all = scoring_indices(&tasks[t]);
                    let k = config.query_points_per_step;
                    if k == 0 || k >= all.len() {
                        all.to_vec()
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
                let scale = 1.0 / (n_b * q.len() as f64);
                let prefix = cache.per_task.get(t).map(Vec::as_slice);
                task_pass(enc, &tasks[t], prefix, width, q, scale)
            };
            let passes: std::result::Result<Vec<TaskPass>, EncoderError> = if config.parallel {
                chunk.par_iter().enumerate().map(run).collect()
            } else {
                chunk.iter().enumerate().map(run).collect()
            };
            let passes = passes?;
            let mut grad = vec![0.0; trainable.len()];
            let mut batch_loss = 0.0;
            for p in &passes {
                for (g, v) in grad.iter_mut().zip(&p.grad) {
                    *g += v;
                }
                batch_loss += p.sq_error / p.count as f64;
                epoch_sq += p.sq_error / p.count as f64;
                epoch_count += 1;
            }
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged { stage, epoch });
            }
            enc.basis.apply_freeze_mask(&mut grad);
            adam.step(enc.basis.params_mut(), &grad, &trainable);
            step_times.push(start.elapsed().as_secs_f64());
        }
        let mse = epoch_sq / epoch_count as f64;
        if !mse.is_finite() {
            return Err(TrainError::Diverged { stage, epoch });
        }
        curve.push(mse);
    }
    Ok((curve, step_times))
}

/// Joint training of every basis in `basis`.
pub fn joint_train_with<F: FeatureMap>(
    basis: F,
    tasks: &[TaskDataset],
    config: &TrainConfig,
) -> Result<(FunctionEncoder<F>, TrainReport)> {
    config.validate()?;
    let mut enc = FunctionEncoder::new(basis, config.lambda)?;
    let start = Instant::now();
    let (curve, steps) = train_epochs(&mut enc, tasks, config, config.epochs, 0)?;
    let report = TrainReport {
        loss_curve: curve,
        bases_history: vec![enc.n_basis()],
        stage_wall_times: vec![start.elapsed().as_secs_f64()],
        step_wall_times: steps,
        final_query_mse: query_mse(&enc, tasks, config.parallel)?,
        ..TrainReport::default()
    };
    Ok((enc, report))
}

/// Initializes an MLP basis from `spec` (seeded by the config) and trains it
/// jointly.
pub fn joint_train(
    spec: &MlpSpec,
    tasks: &[TaskDataset],
    config: &TrainConfig,
) -> Result<(FunctionEncoder, TrainReport)> {
    let basis = BasisSet::init(spec.clone(), derive_seed(config.seed, 1))?;
    joint_train_with(basis, tasks, config)
}

fn newest_component_passes(report: &SpectrumReport, config: &TrainConfig) -> bool {
    let b = report.evr.len();
    if report.effective_rank == 0 {
        return false;
    }
    match config.stop_rule {
        StopRule::NewestComponent => report.evr[b - 1] >= 1.0 - config.tau,
        StopRule::Cumulative => b == 1 || report.cev[b - 2] < config.tau - CEV_SLACK,
    }
}

/// Grows the basis one function at a time from the single-basis `initial`,
/// freezing each basis once trained. Stops when the newest principal
/// component falls under the variance threshold (or at `max_bases`) and
/// returns the bases before the one that triggered the stop.
pub fn progressive_train_with<F: FeatureMap>(
    initial: F,
    tasks: &[TaskDataset],
    config: &TrainConfig,
) -> Result<(FunctionEncoder<F>, TrainReport)> {
    config.validate()?;
    if initial.n_basis() != 1 {
        return Err(TrainError::InvalidConfig(
            "progressive training starts from one basis".into(),
        ));
    }
    check_tasks(tasks)?;
    if tasks.len() < 2 {
        return Err(TrainError::TooFewSamples(tasks.len()));
    }
    let mut report = TrainReport::default();
    let mut enc = FunctionEncoder::new(initial, config.lambda)?;
    let mut accepted: Option<FunctionEncoder<F>> = None;
    let mut accepted_spectrum = None;
    for b in 1..=config.max_bases {
        if b > 1 {
            let mut basis = enc.basis.with_added_basis(derive_seed(config.seed, b as u64))?;
            basis.freeze_shared();
            enc = FunctionEncoder::new(basis, config.lambda)?;
        }
        let start = Instant::now();
        let (curve, steps) = train_epochs(&mut enc, tasks, config, config.epochs, b - 1)?;
        report.loss_curve.extend(curve);
        report.step_wall_times.extend(steps);
        enc.basis.freeze(b - 1);
        enc.basis.freeze_shared();
        let spec = task_spectrum(&enc, tasks, config.tau, config.parallel)?;
        report.stage_wall_times.push(start.elapsed().as_secs_f64());
        report.bases_history.push(b);
        report.stage_spectra.push(spec.clone());
        let passes = newest_component_passes(&spec, config);
        if passes {
            accepted = Some(enc.clone());
            accepted_spectrum = Some(spec.clone());
        }
        if !passes {
            report.spectrum = Some(spec);
            break;
        }
        if b == config.max_bases {
            report.spectrum = accepted_spectrum.clone();
        }
    }
    let enc = accepted.ok_or(TrainError::DegenerateRank)?;
    report.final_query_mse = query_mse(&enc, tasks, config.parallel)?;
    report.selected_indices = (0..enc.n_basis()).collect();
    Ok((enc, report))
}

/// [`progressive_train_with`] over independent MLP bases built from
/// `spec_template` (its `n_basis` is ignored).
pub fn progressive_train(
    spec_template: &MlpSpec,
    tasks: &[TaskDataset],
    config: &TrainConfig,
) -> Result<(FunctionEncoder, TrainReport)> {
    if spec_template.architecture != Architecture::Independent {
        return Err(TrainError::SharedTrunk);
    }
    let spec = MlpSpec {
        n_basis: 1,
        ..spec_template.clone()
    };
    let basis = BasisSet::init(spec, derive_seed(config.seed, 1))?;
    progressive_train_with(basis, tasks, config)
}

/// Trains all bases of `initial` jointly, keeps the `r` highest-scoring
/// ones where `r` is the effective rank of the coefficient covariance, and
/// fine-tunes the pruned model.
pub fn train_then_prune_with<F: FeatureMap>(
    initial: F,
    tasks: &[TaskDataset],
    config: &TrainConfig,
) -> Result<(FunctionEncoder<F>, TrainReport)> {
    config.validate()?;
    if initial.n_basis() < 2 {
        return Err(TrainError::InvalidConfig(
            "pruning needs at least 2 initial bases".into(),
        ));
    }
    if tasks.len() < 2 {
        return Err(TrainError::TooFewSamples(tasks.len()));
    }
    let (full, mut report) = joint_train_with(initial, tasks, config)?;
    report.pre_prune_query_mse = Some(report.final_query_mse);
    let spec = task_spectrum(&full, tasks, config.tau, config.parallel)?;
    let scores = basis_scores(&spec)?;
    let keep = top_indices(&scores, spec.effective_rank);
    let pruned = full.basis.prune(&keep)?;
    let mut enc = FunctionEncoder::new(pruned, config.lambda)?;
    let ft = config.fine_tune_epochs();
    if ft > 0 {
        let start = Instant::now();
        let (curve, steps) = train_epochs(&mut enc, tasks, config, ft, 1)?;
        report.fine_tune_curve = curve;
        report.step_wall_times.extend(steps);
        report.stage_wall_times.push(start.elapsed().as_secs_f64());
    }
    report.bases_history.push(enc.n_basis());
    report.stage_spectra.push(spec.clone());
    report.spectrum = Some(spec);
    report.scores = scores;
    report.selected_indices = keep;
    report.final_query_mse = query_mse(&enc, tasks, config.parallel)?;
    Ok((enc, report))
}

/// [`train_then_prune_with`] over an MLP basis with `config.initial_bases`
/// bases built from `spec_template`.
pub fn train_then_prune(
    spec_template: &MlpSpec,
    tasks: &[TaskDataset],
    config: &TrainConfig,
) -> Result<(FunctionEncoder, TrainReport)> {
    let spec = MlpSpec {
        n_basis: config.initial_bases,
        ..spec_template.clone()
    };
    let basis = BasisSet::init(spec, derive_seed(config.seed, 1))?;
    train_then_prune_with(basis, tasks, config)
}
