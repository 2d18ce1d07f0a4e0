//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use function_encoder::bounds::{bound_report, BoundReport};
use function_encoder::datasets::{
    integrate_substeps, make_twobody_tasks, make_vdp_tasks, sample_polynomial_tasks, write_tasks_csv, DynamicsTask,
    TwoBody, VanDerPol,
};
use function_encoder::deep_kernel::{dkl_train, gram_compare, DeepKernelModel, GramComparison, KernelKind};
use function_encoder::node_basis::{rollout, NodeBasisSet};
use function_encoder::training::{
    joint_train, progressive_train, progressive_train_with, task_spectrum, train_then_prune, train_then_prune_with,
    SpectrumReport, TrainError, TrainReport,
};
use function_encoder::{derive_seed, BasisSet, FeatureMap, FunctionEncoder, MlpSpec, TaskDataset};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Algorithm, Experiment, ExperimentConfig};
use crate::model_file::{self, LoadError, Model, Provenance, FORMAT_VERSION};
use crate::output;
use crate::CliError;

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

/// Non-finite values surfacing anywhere in training count as divergence.
fn train_failed(e: TrainError) -> CliError {
    use function_encoder::{nnbasis::BasisError, EncoderError};
    match e {
        TrainError::Diverged { .. }
        | TrainError::Encoder(EncoderError::NonFiniteFeatures(_))
        | TrainError::Basis(BasisError::NonFinite) => CliError::Diverged(e.to_string()),
        other => failed(other),
    }
}

/// Generated data for one experiment.
pub struct Data {
    pub tasks: Vec<TaskDataset>,
    /// Generating systems of the dynamics experiments.
    pub dynamics: Vec<DynamicsTask>,
}

pub fn generate_data(cfg: &ExperimentConfig) -> Result<Data, CliError> {
    let schema = |e: function_encoder::datasets::DatasetError| CliError::Schema(e.to_string());
    let seed = derive_seed(cfg.seed, 0x6461_7461);
    Ok(match cfg.experiment {
        Experiment::Polynomial => Data {
            tasks: sample_polynomial_tasks(cfg.n_tasks, &cfg.polynomial, seed).map_err(schema)?,
            dynamics: Vec::new(),
        },
        Experiment::Vdp | Experiment::Twobody => {
            let dynamics = if cfg.experiment == Experiment::Vdp {
                make_vdp_tasks(cfg.n_tasks, &cfg.vdp, seed).map_err(schema)?
            } else {
                make_twobody_tasks(cfg.n_tasks, &cfg.twobody, seed).map_err(schema)?
            };
            Data {
                tasks: dynamics.iter().map(|t| t.data.clone()).collect(),
                dynamics,
            }
        }
    })
}

/// `(context width, state width, state offset)` of a dynamics experiment.
fn dynamics_layout(experiment: Experiment) -> (usize, usize, usize) {
    match experiment {
        Experiment::Vdp => (3, 2, 0),
        _ => (5, 4, 1),
    }
}

pub fn basis_spec(cfg: &ExperimentConfig, n_basis: usize) -> MlpSpec {
    let (input_dim, output_dim) = match cfg.experiment {
        Experiment::Polynomial => (1, 1),
        e => {
            let (ctx, sd, _) = dynamics_layout(e);
            (ctx, sd)
        }
    };
    MlpSpec {
        input_dim,
        hidden_widths: cfg.model.hidden_widths.clone(),
        output_dim,
        n_basis,
        architecture: cfg.architecture(),
        activation: cfg.model.activation,
    }
}

fn node_basis(cfg: &ExperimentConfig, n_basis: usize) -> Result<NodeBasisSet, CliError> {
    let (_, _, offset) = dynamics_layout(cfg.experiment);
    NodeBasisSet::init(
        basis_spec(cfg, n_basis),
        offset,
        cfg.model.integrator_steps,
        derive_seed(cfg.seed, 1),
    )
    .map_err(failed)
}

pub struct Trained {
    pub model: Model,
    pub report: Option<TrainReport>,
    pub dkl_curve: Vec<f64>,
    pub final_query_mse: f64,
    pub step_wall_times: Vec<f64>,
}

pub fn train(cfg: &ExperimentConfig, tasks: &[TaskDataset]) -> Result<Trained, CliError> {
    let t = &cfg.train;
    let from_report = |model: Model, r: TrainReport| Trained {
        model,
        final_query_mse: r.final_query_mse,
        step_wall_times: r.step_wall_times.clone(),
        dkl_curve: Vec::new(),
        report: Some(r),
    };
    if cfg.algorithm.is_dkl() {
        let (kind, spec) = if cfg.algorithm == Algorithm::DklRbf {
            let spec = MlpSpec {
                hidden_widths: vec![cfg.dkl.hidden_width],
                ..basis_spec(cfg, cfg.dkl.embedding_dim)
            };
            (KernelKind::RbfArd, spec)
        } else {
            (KernelKind::Linear, basis_spec(cfg, cfg.dkl.embedding_dim))
        };
        let net = BasisSet::init(spec, derive_seed(cfg.seed, 1)).map_err(failed)?;
        let model = DeepKernelModel::new(net, kind, t.lambda).map_err(failed)?;
        let (model, report) = dkl_train(model, tasks, t).map_err(|e| match e {
            function_encoder::deep_kernel::DklError::Train(te) => train_failed(te),
            other => failed(other),
        })?;
        return Ok(Trained {
            model: Model::DeepKernel(model),
            report: None,
            dkl_curve: report.loss_curve,
            final_query_mse: report.final_query_mse,
            step_wall_times: report.step_wall_times,
        });
    }
    if cfg.experiment == Experiment::Polynomial {
        let (enc, r) = match cfg.algorithm {
            Algorithm::Joint => joint_train(&basis_spec(cfg, cfg.model.n_basis), tasks, t),
            Algorithm::Progressive => progressive_train(&basis_spec(cfg, 1), tasks, t),
            _ => train_then_prune(&basis_spec(cfg, t.initial_bases), tasks, t),
        }
        .map_err(train_failed)?;
        return Ok(from_report(Model::Encoder(enc), r));
    }
    let (enc, r) = match cfg.algorithm {
        Algorithm::Joint => function_encoder::training::joint_train_with(node_basis(cfg, cfg.model.n_basis)?, tasks, t),
        Algorithm::Progressive => progressive_train_with(node_basis(cfg, 1)?, tasks, t),
        _ => train_then_prune_with(node_basis(cfg, t.initial_bases)?, tasks, t),
    }
    .map_err(train_failed)?;
    Ok(from_report(Model::NodeEncoder(enc), r))
}

/// Up to `count` query inputs, taken round-robin across tasks.
pub fn probe_inputs(tasks: &[TaskDataset], count: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    let mut k = 0;
    while out.len() < count {
        let before = out.len();
        for t in tasks {
            if let Some(&i) = t.query_indices.get(k) {
                out.push(t.inputs[i].clone());
                if out.len() == count {
                    break;
                }
            }
        }
        if out.len() == before {
            break;
        }
        k += 1;
    }
    out
}

/// Ground truth and model rollout from the first state of the first task.
fn trajectories<F: FeatureMap>(
    cfg: &ExperimentConfig,
    enc: &FunctionEncoder<F>,
    dynamics: &[DynamicsTask],
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>), CliError> {
    let task = &dynamics[0];
    let x0 = task.samples[0].state.clone();
    let steps = cfg.outputs.rollout_steps;
    let (dt, truth) = match cfg.experiment {
        Experiment::Vdp => (
            cfg.vdp.dt,
            integrate_substeps(&VanDerPol { mu: task.mu }, &x0, cfg.vdp.dt, steps, cfg.vdp.substeps),
        ),
        _ => (
            cfg.twobody.dt,
            integrate_substeps(
                &TwoBody { mu: task.mu },
                &x0,
                cfg.twobody.dt,
                steps,
                cfg.twobody.substeps,
            ),
        ),
    };
    let truth = truth.map_err(failed)?;
    let (_, _, offset) = dynamics_layout(cfg.experiment);
    let context: Vec<f64> = task.data.inputs[0][..enc.basis.input_dim() - 1].to_vec();
    let mut context = context;
    context[offset..offset + x0.len()].copy_from_slice(&x0);
    let c = enc.solve_coefficients(&task.data).map_err(failed)?;
    let predicted = rollout(enc, &c, &context, offset, dt, steps).map_err(failed)?;
    Ok((dt, truth, predicted))
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub format_version: u32,
    pub crate_version: &'static str,
    pub experiment: Experiment,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub config: String,
    pub config_hash: String,
    pub n_basis: Option<usize>,
    pub selected_indices: Vec<usize>,
    pub effective_rank: Option<usize>,
    pub bases_history: Vec<usize>,
    pub final_query_mse: f64,
    pub pre_prune_query_mse: Option<f64>,
    pub wall_time_seconds: f64,
    pub stage_wall_times: Vec<f64>,
    pub median_step_seconds: f64,
    pub files: Vec<String>,
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    hex::encode(Sha256::digest(cfg.echo().as_bytes()))
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

/// Runs one experiment and writes every artifact into `out_dir`.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Manifest, CliError> {
    let start = Instant::now();
    let data = generate_data(cfg)?;
    let trained = train(cfg, &data.tasks)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let mut files = Vec::new();
    let mut put = |name: &str, contents: &str| -> Result<(), CliError> {
        output::write(&out_dir.join(name), contents)?;
        files.push(name.to_string());
        Ok(())
    };

    let hash = config_hash(cfg);
    let provenance = Provenance {
        config_hash: hash.clone(),
        seed: cfg.seed,
    };
    put("model.json", &trained.model.to_file(provenance).render())?;

    let (curve, fine) = match &trained.report {
        Some(r) => (r.loss_curve.as_slice(), r.fine_tune_curve.as_slice()),
        None => (trained.dkl_curve.as_slice(), &[][..]),
    };
    put("loss_curve.csv", &output::loss_csv(curve, fine))?;

    let spectrum: Option<SpectrumReport> = match (&trained.report, &trained.model) {
        (Some(r), _) if r.spectrum.is_some() => r.spectrum.clone(),
        (_, Model::Encoder(e)) => task_spectrum(e, &data.tasks, cfg.train.tau, cfg.train.parallel).ok(),
        (_, Model::NodeEncoder(e)) => task_spectrum(e, &data.tasks, cfg.train.tau, cfg.train.parallel).ok(),
        _ => None,
    };
    if let Some(s) = &spectrum {
        put("scree.csv", &output::scree_csv(s))?;
    }

    let probes = probe_inputs(&data.tasks, cfg.outputs.probes);
    put("probes.csv", &output::points_csv(&probes))?;
    put(
        "gram.csv",
        &output::matrix_csv(&trained.model.gram(&probes).map_err(failed)?),
    )?;

    let bounds: Option<BoundReport> = match &trained.model {
        Model::Encoder(e) => Some(bound_report(e, &probes, &data.tasks, cfg.outputs.delta).map_err(failed)?),
        Model::NodeEncoder(e) => Some(bound_report(e, &probes, &data.tasks, cfg.outputs.delta).map_err(failed)?),
        Model::DeepKernel(_) => None,
    };
    if let Some(b) = &bounds {
        put(
            "bounds.json",
            &(serde_json::to_string_pretty(b).expect("report serializes") + "\n"),
        )?;
    }

    if let Model::NodeEncoder(e) = &trained.model {
        let (dt, truth, pred) = trajectories(cfg, e, &data.dynamics)?;
        put("trajectory.csv", &output::trajectory_csv(dt, &truth, &pred))?;
    }

    let report = trained.report.as_ref();
    let n_basis = match &trained.model {
        Model::Encoder(e) => Some(e.n_basis()),
        Model::NodeEncoder(e) => Some(e.n_basis()),
        Model::DeepKernel(_) => None,
    };
    files.push("manifest.json".into());
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION"),
        experiment: cfg.experiment,
        algorithm: cfg.algorithm,
        seed: cfg.seed,
        config: cfg.echo(),
        config_hash: hash,
        n_basis,
        selected_indices: report.map(|r| r.selected_indices.clone()).unwrap_or_default(),
        effective_rank: spectrum.as_ref().map(|s| s.effective_rank),
        bases_history: report.map(|r| r.bases_history.clone()).unwrap_or_default(),
        final_query_mse: trained.final_query_mse,
        pre_prune_query_mse: report.and_then(|r| r.pre_prune_query_mse),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        stage_wall_times: report.map(|r| r.stage_wall_times.clone()).unwrap_or_default(),
        median_step_seconds: median(&trained.step_wall_times),
        files,
    };
    output::write(
        &out_dir.join("manifest.json"),
        &(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"),
    )?;
    Ok(manifest)
}

pub fn load(path: &Path) -> Result<(Model, Provenance), CliError> {
    model_file::load_model(path).map_err(|e| match e {
        LoadError::Io(source) => CliError::io(path, source),
        LoadError::File(source) => CliError::ModelFile {
            path: path.to_path_buf(),
            source,
        },
    })
}

pub fn export_gram(model_path: &Path, probe_path: &Path, out_path: &Path) -> Result<(), CliError> {
    let (model, _) = load(model_path)?;
    let probes = output::read_rows(probe_path)?;
    if probes.is_empty() {
        return Err(CliError::Input(format!("{}: no probe rows", probe_path.display())));
    }
    if let Some(p) = probes.iter().find(|p| p.len() != model.input_dim()) {
        return Err(CliError::Input(format!(
            "probes have {} columns, model takes {} inputs",
            p.len(),
            model.input_dim()
        )));
    }
    let k = model.gram(&probes).map_err(failed)?;
    output::write(out_path, &output::matrix_csv(&k))
}

pub fn compare_grams(a: &Path, b: &Path) -> Result<GramComparison, CliError> {
    let (ka, kb) = (output::read_matrix(a)?, output::read_matrix(b)?);
    gram_compare(&ka, &kb).map_err(|e| CliError::Input(e.to_string()))
}

/// Bound report for a saved encoder on the tasks its config generates.
pub fn bounds(model_path: &Path, cfg: &ExperimentConfig) -> Result<BoundReport, CliError> {
    let (model, _) = load(model_path)?;
    let data = generate_data(cfg)?;
    let probes = probe_inputs(&data.tasks, cfg.outputs.probes);
    match &model {
        Model::Encoder(e) => bound_report(e, &probes, &data.tasks, cfg.outputs.delta).map_err(failed),
        Model::NodeEncoder(e) => bound_report(e, &probes, &data.tasks, cfg.outputs.delta).map_err(failed),
        Model::DeepKernel(_) => Err(CliError::Input("bounds apply to function encoders only".into())),
    }
}

/// Writes `tasks.csv` for the configured experiment.
pub fn gen_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf, CliError> {
    let data = generate_data(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let path = out_dir.join("tasks.csv");
    let file = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    write_tasks_csv(&data.tasks, std::io::BufWriter::new(file)).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}
