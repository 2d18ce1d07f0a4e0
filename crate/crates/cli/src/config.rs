//! TOML experiment configuration. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use function_encoder::datasets::{PolynomialConfig, TwoBodyConfig, VdpConfig};
use function_encoder::nnbasis::{Activation, Architecture};
use function_encoder::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Polynomial,
    Vdp,
    Twobody,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Joint,
    Progressive,
    Prune,
    DklRbf,
    DklLinear,
}

impl Algorithm {
    pub fn is_dkl(self) -> bool {
        matches!(self, Algorithm::DklRbf | Algorithm::DklLinear)
    }
}

/// Basis network shape. For the dynamics experiments this describes one
/// vector field network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    /// Defaults to independent networks for progressive training and the
    /// dynamics experiments, multi-headed otherwise.
    pub architecture: Option<Architecture>,
    /// Basis count for joint training.
    pub n_basis: usize,
    /// RK4 substeps per flow (dynamics only).
    pub integrator_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_widths: vec![32],
            activation: Activation::Tanh,
            architecture: None,
            n_basis: 8,
            integrator_steps: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DklConfig {
    pub embedding_dim: usize,
    /// Hidden width of the RBF feature network; the linear variant uses the
    /// `[model]` network instead.
    pub hidden_width: usize,
}

impl Default for DklConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 8,
            hidden_width: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Probe inputs used for the bound report and the Gram export.
    pub probes: usize,
    pub delta: f64,
    /// Rollout length of the trajectory export (dynamics only).
    pub rollout_steps: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            probes: 50,
            delta: 0.05,
            rollout_steps: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_n_tasks")]
    pub n_tasks: usize,
    /// Training settings; `train.seed` is ignored in favour of `seed`.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub polynomial: PolynomialConfig,
    #[serde(default)]
    pub vdp: VdpConfig,
    #[serde(default)]
    pub twobody: TwoBodyConfig,
    #[serde(default)]
    pub dkl: DklConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_n_tasks() -> usize {
    200
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Schema(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let schema = |msg: String| Err(CliError::Schema(msg));
        self.train.validate().map_err(|e| CliError::Schema(e.to_string()))?;
        if self.n_tasks < 2 {
            return schema("n_tasks must be at least 2".into());
        }
        if self.algorithm.is_dkl() && self.experiment != Experiment::Polynomial {
            return schema("deep-kernel baselines run on the polynomial experiment only".into());
        }
        if self.model.hidden_widths.contains(&0) || self.model.n_basis == 0 {
            return schema("model widths and n_basis must be positive".into());
        }
        if self.model.integrator_steps == 0 {
            return schema("integrator_steps must be positive".into());
        }
        if self.dkl.embedding_dim == 0 || self.dkl.hidden_width == 0 {
            return schema("dkl sizes must be positive".into());
        }
        if !(self.outputs.delta > 0.0 && self.outputs.delta <= 1.0) {
            return schema(format!("outputs.delta must lie in (0, 1], got {}", self.outputs.delta));
        }
        if self.outputs.probes == 0 {
            return schema("outputs.probes must be positive".into());
        }
        if self.algorithm == Algorithm::Progressive && self.architecture() == Architecture::MultiHeaded {
            return schema("progressive training needs independent basis networks".into());
        }
        if self.experiment != Experiment::Polynomial && self.architecture() == Architecture::MultiHeaded {
            return schema("vector-field bases must be independent networks".into());
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        self.model.architecture.unwrap_or(
            if self.algorithm == Algorithm::Progressive || self.experiment != Experiment::Polynomial {
                Architecture::Independent
            } else {
                Architecture::MultiHeaded
            },
        )
    }

    /// Canonical TOML echo, used for the manifest and the config hash.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::parse("experiment = \"polynomial\"\nalgorithm = \"prune\"\nseed = 4\n").unwrap();
        assert_eq!(cfg.train.seed, 4);
        assert_eq!(cfg.n_tasks, 200);
        assert_eq!(cfg.architecture(), Architecture::MultiHeaded);
        assert_eq!(cfg.polynomial.degree, 3);
    }

    #[test]
    fn unknown_keys_rejected_at_any_depth() {
        for text in [
            "experiment = \"polynomial\"\nalgorithm = \"prune\"\nbogus = 1\n",
            "experiment = \"polynomial\"\nalgorithm = \"prune\"\n[train]\nepochz = 3\n",
            "experiment = \"polynomial\"\nalgorithm = \"prune\"\n[vdp]\nmu = 1.0\n",
            "experiment = \"cubic\"\nalgorithm = \"prune\"\n",
        ] {
            assert!(
                matches!(ExperimentConfig::parse(text), Err(CliError::Schema(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn semantic_checks() {
        let bad = [
            "experiment = \"vdp\"\nalgorithm = \"dkl_rbf\"\n",
            "experiment = \"polynomial\"\nalgorithm = \"progressive\"\n[model]\narchitecture = \"multi_headed\"\n",
            "experiment = \"polynomial\"\nalgorithm = \"prune\"\n[train]\ntau = 1.5\n",
            "experiment = \"polynomial\"\nalgorithm = \"prune\"\n[outputs]\ndelta = 0.0\n",
        ];
        for text in bad {
            assert!(
                matches!(ExperimentConfig::parse(text), Err(CliError::Schema(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn echo_reparses_to_same_config() {
        let cfg = ExperimentConfig::parse("experiment = \"twobody\"\nalgorithm = \"prune\"\nseed = 9\n").unwrap();
        assert_eq!(ExperimentConfig::parse(&cfg.echo()).unwrap(), cfg);
    }
}
