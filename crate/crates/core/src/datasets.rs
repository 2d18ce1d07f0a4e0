//! Task-family generators: random polynomials, Van der Pol trajectories and
//! planar two-body orbits, plus the RK4 integrator they share.

use std::f64::consts::PI;
use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::encoder::{EncoderError, TaskDataset};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("invalid dataset parameters: {0}")]
    InvalidParameters(String),
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error("integration failed for elements {elements:?}: non-finite state at step {step}")]
    OrbitFailed { elements: KeplerElements, step: usize },
    #[error("eccentricity {0} outside [0, 1)")]
    Unbound(f64),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// `a_0 + a_1 x + ... + a_d x^d`, coefficients in ascending power order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolynomialTask {
    pub degree: usize,
    pub coefficients: Vec<f64>,
}

impl PolynomialTask {
    pub fn new(coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.is_empty() {
            return Err(DatasetError::InvalidParameters(
                "polynomial needs at least one coefficient".into(),
            ));
        }
        Ok(Self {
            degree: coefficients.len() - 1,
            coefficients,
        })
    }

    pub fn evaluate(&self, x: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, a| acc * x + a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolynomialConfig {
    pub degree: usize,
    pub points: usize,
    pub eval_points: usize,
    pub x_range: (f64, f64),
}

impl Default for PolynomialConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            points: 1000,
            eval_points: 100,
            x_range: (-1.0, 1.0),
        }
    }
}

fn random_split(rng: &mut ChaCha8Rng, total: usize, eval: usize) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(rng);
    let mut e = idx[..eval].to_vec();
    let mut q = idx[eval..].to_vec();
    e.sort_unstable();
    q.sort_unstable();
    (e, q)
}

/// Random polynomial tasks with coefficients i.i.d. uniform on `[-1, 1]`
/// and inputs i.i.d. uniform on `x_range`. Also returns the drawn
/// polynomials.
pub fn sample_polynomial_family(
    n_tasks: usize,
    config: &PolynomialConfig,
    seed: u64,
) -> Result<Vec<(PolynomialTask, TaskDataset)>> {
    let (lo, hi) = config.x_range;
    if n_tasks == 0 || config.points == 0 || config.eval_points == 0 || config.eval_points >= config.points {
        return Err(DatasetError::InvalidParameters(format!(
            "need tasks >= 1 and 0 < eval_points < points, got {n_tasks} tasks, {}/{}",
            config.eval_points, config.points
        )));
    }
    if !(lo < hi && lo.is_finite() && hi.is_finite()) {
        return Err(DatasetError::InvalidParameters(format!("bad x_range ({lo}, {hi})")));
    }
    (0..n_tasks)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t as u64));
            let poly = PolynomialTask::new((0..=config.degree).map(|_| rng.gen_range(-1.0..=1.0)).collect())?;
            let xs: Vec<f64> = (0..config.points).map(|_| rng.gen_range(lo..hi)).collect();
            let inputs = xs.iter().map(|&x| vec![x]).collect();
            let targets = xs.iter().map(|&x| vec![poly.evaluate(x)]).collect();
            let (e, q) = random_split(&mut rng, config.points, config.eval_points);
            Ok((poly, TaskDataset::new(inputs, targets, e, q)?))
        })
        .collect()
}

pub fn sample_polynomial_tasks(n_tasks: usize, config: &PolynomialConfig, seed: u64) -> Result<Vec<TaskDataset>> {
    Ok(sample_polynomial_family(n_tasks, config, seed)?
        .into_iter()
        .map(|(_, t)| t)
        .collect())
}

/// Autonomous ODE `ẋ = f(x)`.
pub trait OdeSystem {
    fn state_dim(&self) -> usize;
    fn field(&self, x: &[f64], out: &mut [f64]);
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanDerPol {
    pub mu: f64,
}

impl OdeSystem for VanDerPol {
    fn state_dim(&self) -> usize {
        2
    }

    fn field(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[1];
        out[1] = self.mu * (1.0 - x[0] * x[0]) * x[1] - x[0];
    }
}

/// Planar point mass around a fixed centre; state `(r_x, r_y, v_x, v_y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoBody {
    pub mu: f64,
}

impl TwoBody {
    pub fn energy(&self, s: &[f64]) -> f64 {
        0.5 * (s[2] * s[2] + s[3] * s[3]) - self.mu / s[0].hypot(s[1])
    }

    pub fn angular_momentum(s: &[f64]) -> f64 {
        s[0] * s[3] - s[1] * s[2]
    }
}

impl OdeSystem for TwoBody {
    fn state_dim(&self) -> usize {
        4
    }

    fn field(&self, x: &[f64], out: &mut [f64]) {
        let r2 = x[0] * x[0] + x[1] * x[1];
        let k = -self.mu / (r2 * r2.sqrt());
        out[0] = x[2];
        out[1] = x[3];
        out[2] = k * x[0];
        out[3] = k * x[1];
    }
}

/// Wraps a closure as an [`OdeSystem`].
pub struct FnSystem<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], &mut [f64])> OdeSystem for FnSystem<F> {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn field(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
}

/// Classical four-stage Runge-Kutta step.
pub fn rk4_step<S: OdeSystem + ?Sized>(sys: &S, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let n = sys.state_dim();
    if x.len() != n {
        return Err(DatasetError::InvalidParameters(format!(
            "state has {} entries, system {n}",
            x.len()
        )));
    }
    if !(h > 0.0) {
        return Err(DatasetError::InvalidParameters(format!("step {h} must be positive")));
    }
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    sys.field(x, &mut k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    sys.field(&tmp, &mut k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    sys.field(&tmp, &mut k3);
    for i in 0..n {
        tmp[i] = x[i] + h * k3[i];
    }
    sys.field(&tmp, &mut k4);
    let out: Vec<f64> = (0..n)
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(DatasetError::NonFinite { step: 0 });
    }
    Ok(out)
}

/// `steps` RK4 steps of size `h`; the trajectory includes `x0`.
pub fn integrate<S: OdeSystem + ?Sized>(sys: &S, x0: &[f64], h: f64, steps: usize) -> Result<Vec<Vec<f64>>> {
    integrate_substeps(sys, x0, h, steps, 1)
}

/// Like [`integrate`] but each recorded step of size `h` is taken as
/// `substeps` RK4 steps of `h / substeps`.
pub fn integrate_substeps<S: OdeSystem + ?Sized>(
    sys: &S,
    x0: &[f64],
    h: f64,
    steps: usize,
    substeps: usize,
) -> Result<Vec<Vec<f64>>> {
    if steps == 0 || substeps == 0 {
        return Err(DatasetError::InvalidParameters(
            "steps and substeps must be at least 1".into(),
        ));
    }
    let hs = h / substeps as f64;
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(x0.to_vec());
    let mut x = x0.to_vec();
    for step in 1..=steps {
        for _ in 0..substeps {
            x = rk4_step(sys, &x, hs).map_err(|e| match e {
                DatasetError::NonFinite { .. } => DatasetError::NonFinite { step },
                other => other,
            })?;
        }
        traj.push(x.clone());
    }
    Ok(traj)
}

/// One transition `(x_t, Δt, x_{t+1} - x_t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaSample {
    pub state: Vec<f64>,
    pub dt: f64,
    pub delta: Vec<f64>,
}

pub fn delta_samples(trajectory: &[Vec<f64>], dt: f64) -> Vec<DeltaSample> {
    trajectory
        .windows(2)
        .map(|w| DeltaSample {
            state: w[0].clone(),
            dt,
            delta: w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect(),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeplerElements {
    pub a: f64,
    pub e: f64,
    pub omega: f64,
    pub nu: f64,
    pub mu: f64,
}

/// Planar Cartesian state `(r_x, r_y, v_x, v_y)` of an orbit.
pub fn kepler_to_cartesian(el: &KeplerElements) -> Result<[f64; 4]> {
    if !(el.e >= 0.0 && el.e < 1.0) {
        return Err(DatasetError::Unbound(el.e));
    }
    if !(el.a > 0.0 && el.mu > 0.0) {
        return Err(DatasetError::InvalidParameters(format!(
            "semi-major axis {} and mu {} must be positive",
            el.a, el.mu
        )));
    }
    let p = el.a * (1.0 - el.e * el.e);
    let r = p / (1.0 + el.e * el.nu.cos());
    let theta = el.omega + el.nu;
    let rf = (r * el.nu.cos(), r * el.nu.sin());
    let k = (el.mu / p).sqrt();
    let vf = (-k * el.nu.sin(), k * (el.e + el.nu.cos()));
    let (s, c) = el.omega.sin_cos();
    debug_assert!((rf.0 * c - rf.1 * s - r * theta.cos()).abs() < 1e-9 * (1.0 + r));
    Ok([
        c * rf.0 - s * rf.1,
        s * rf.0 + c * rf.1,
        c * vf.0 - s * vf.1,
        s * vf.0 + c * vf.1,
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VdpConfig {
    pub mu_range: (f64, f64),
    pub x0_range: (f64, f64),
    pub dt: f64,
    pub steps_per_trajectory: usize,
    pub query_points: usize,
    pub eval_points: usize,
    /// RK4 substeps per recorded step. Large `|x_1|` with large `μ` is
    /// stiff enough to blow up a single step of 0.1.
    pub substeps: usize,
}

impl Default for VdpConfig {
    fn default() -> Self {
        Self {
            mu_range: (0.5, 2.5),
            x0_range: (-3.5, 3.5),
            dt: 0.1,
            steps_per_trajectory: 100,
            query_points: 1000,
            eval_points: 100,
            substeps: 10,
        }
    }
}

/// Samples of a dynamics task alongside the generating parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsTask {
    pub mu: f64,
    pub elements: Option<KeplerElements>,
    pub samples: Vec<DeltaSample>,
    pub data: TaskDataset,
}

fn dynamics_dataset(
    samples: &[DeltaSample],
    mu: f64,
    mu_first: bool,
    eval: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TaskDataset> {
    let inputs = samples
        .iter()
        .map(|s| {
            let mut x = Vec::with_capacity(s.state.len() + 2);
            if mu_first {
                x.push(mu);
                x.extend_from_slice(&s.state);
            } else {
                x.extend_from_slice(&s.state);
                x.push(mu);
            }
            x.push(s.dt);
            x
        })
        .collect();
    let targets = samples.iter().map(|s| s.delta.clone()).collect();
    let (e, q) = random_split(rng, samples.len(), eval);
    Ok(TaskDataset::new(inputs, targets, e, q)?)
}

/// Van der Pol tasks, one `μ` per task. Inputs are `(x_1, x_2, μ, Δt)`,
/// targets the one-step state change.
pub fn make_vdp_tasks(n_tasks: usize, config: &VdpConfig, seed: u64) -> Result<Vec<DynamicsTask>> {
    let total = config.query_points + config.eval_points;
    if n_tasks == 0
        || config.eval_points == 0
        || config.query_points == 0
        || config.steps_per_trajectory == 0
        || config.substeps == 0
    {
        return Err(DatasetError::InvalidParameters("counts must be positive".into()));
    }
    if !(config.dt > 0.0) || config.mu_range.0 > config.mu_range.1 || config.x0_range.0 >= config.x0_range.1 {
        return Err(DatasetError::InvalidParameters("bad Van der Pol ranges".into()));
    }
    (0..n_tasks)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t as u64));
            let mu = if config.mu_range.0 == config.mu_range.1 {
                config.mu_range.0
            } else {
                rng.gen_range(config.mu_range.0..config.mu_range.1)
            };
            let sys = VanDerPol { mu };
            let mut samples = Vec::with_capacity(total);
            while samples.len() < total {
                let x0 = [
                    rng.gen_range(config.x0_range.0..config.x0_range.1),
                    rng.gen_range(config.x0_range.0..config.x0_range.1),
                ];
                let traj = integrate_substeps(&sys, &x0, config.dt, config.steps_per_trajectory, config.substeps)?;
                let need = total - samples.len();
                samples.extend(delta_samples(&traj, config.dt).into_iter().take(need));
            }
            let data = dynamics_dataset(&samples, mu, false, config.eval_points, &mut rng)?;
            Ok(DynamicsTask {
                mu,
                elements: None,
                samples,
                data,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoBodyConfig {
    pub a_range: (f64, f64),
    pub e_range: (f64, f64),
    pub mu_range: (f64, f64),
    pub dt: f64,
    pub horizon: f64,
    /// Transitions kept per trajectory (evenly strided over the horizon).
    pub points: usize,
    pub eval_points: usize,
    /// RK4 substeps per recorded step.
    pub substeps: usize,
    /// Minimum periapsis distance `a(1 - e)`; draws below it are redrawn.
    pub periapsis_floor: f64,
}

impl Default for TwoBodyConfig {
    fn default() -> Self {
        Self {
            a_range: (1.0, 3.0),
            e_range: (0.0, 0.7),
            mu_range: (0.8, 1.1),
            dt: 0.05,
            horizon: 50.0,
            points: 1000,
            eval_points: 100,
            substeps: 4,
            periapsis_floor: 0.25,
        }
    }
}

/// Draws orbital elements within the configured ranges, redrawing any
/// orbit whose periapsis falls below the floor.
pub fn sample_elements(rng: &mut ChaCha8Rng, config: &TwoBodyConfig) -> KeplerElements {
    loop {
        let el = KeplerElements {
            a: rng.gen_range(config.a_range.0..=config.a_range.1),
            e: rng.gen_range(config.e_range.0..=config.e_range.1),
            omega: rng.gen_range(0.0..=2.0 * PI),
            nu: rng.gen_range(0.0..2.0 * PI),
            mu: rng.gen_range(config.mu_range.0..=config.mu_range.1),
        };
        if el.a * (1.0 - el.e) > config.periapsis_floor && el.e < 1.0 {
            return el;
        }
    }
}

/// Two-body tasks, one orbit per task. Inputs are `(μ, r_x, r_y, v_x, v_y, Δt)`.
pub fn make_twobody_tasks(n_tasks: usize, config: &TwoBodyConfig, seed: u64) -> Result<Vec<DynamicsTask>> {
    if n_tasks == 0 || config.points == 0 || config.eval_points == 0 || config.eval_points >= config.points {
        return Err(DatasetError::InvalidParameters("need 0 < eval_points < points".into()));
    }
    if !(config.dt > 0.0 && config.horizon >= config.dt) || config.substeps == 0 {
        return Err(DatasetError::InvalidParameters("bad two-body step settings".into()));
    }
    if config.e_range.1 >= 1.0 {
        return Err(DatasetError::Unbound(config.e_range.1));
    }
    let steps = (config.horizon / config.dt).round() as usize;
    if config.points > steps {
        return Err(DatasetError::InvalidParameters(format!(
            "{} points requested from a {steps}-step trajectory",
            config.points
        )));
    }
    (0..n_tasks)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t as u64));
            let el = sample_elements(&mut rng, config);
            let sys = TwoBody { mu: el.mu };
            let x0 = kepler_to_cartesian(&el)?;
            let traj = integrate_substeps(&sys, &x0, config.dt, steps, config.substeps).map_err(|e| match e {
                DatasetError::NonFinite { step } => DatasetError::OrbitFailed { elements: el, step },
                other => other,
            })?;
            let all = delta_samples(&traj, config.dt);
            let stride = all.len() / config.points;
            let samples: Vec<DeltaSample> = all.into_iter().step_by(stride).take(config.points).collect();
            let data = dynamics_dataset(&samples, el.mu, true, config.eval_points, &mut rng)?;
            Ok(DynamicsTask {
                mu: el.mu,
                elements: Some(el),
                samples,
                data,
            })
        })
        .collect()
}

/// Writes `task_id,split,x0..,y0..` rows with 17 significant digits.
pub fn write_tasks_csv<W: Write>(tasks: &[TaskDataset], mut out: W) -> io::Result<()> {
    let (k, d) = tasks.first().map_or((0, 0), |t| (t.input_dim(), t.output_dim()));
    let mut header = vec!["task_id".to_string(), "split".to_string()];
    header.extend((0..k).map(|i| format!("x{i}")));
    header.extend((0..d).map(|i| format!("y{i}")));
    writeln!(out, "{}", header.join(","))?;
    for (t, task) in tasks.iter().enumerate() {
        let mut split = vec![""; task.len()];
        for &i in &task.eval_indices {
            split[i] = "eval";
        }
        for &i in &task.query_indices {
            split[i] = "query";
        }
        for i in 0..task.len() {
            write!(out, "{t},{}", split[i])?;
            for v in task.inputs[i].iter().chain(&task.targets[i]) {
                write!(out, ",{}", fmt_f64(*v))?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Scientific notation with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
