//! Versioned, checksummed model files.
//!
//! The file is JSON with one top-level section per line, so a truncated
//! file can be traced to the first section that did not survive.

use std::path::Path;

use function_encoder::deep_kernel::{DeepKernelModel, KernelKind};
use function_encoder::node_basis::NodeBasisSet;
use function_encoder::{BasisSet, FeatureMap, FunctionEncoder, Matrix, MlpSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

const SECTIONS: [&str; 6] = [
    "format_version",
    "model",
    "parameters",
    "lambda",
    "provenance",
    "checksum",
];

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("model file format_version {found}, this build reads {expected}")]
    VersionMismatch { found: u64, expected: u32 },
    #[error("model file is truncated in section `{section}`")]
    Truncated { section: &'static str },
    #[error("model file lacks section `{0}`")]
    MissingSection(&'static str),
    #[error("model file checksum mismatch (stored {stored}, computed {computed})")]
    Checksum { stored: String, computed: String },
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error("stored parameters do not fit the model: {0}")]
    Rebuild(String),
}

/// Architecture and everything besides the flat parameter vector needed
/// to rebuild a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelMeta {
    Encoder {
        spec: MlpSpec,
        frozen_mask: Vec<bool>,
        shared_frozen: bool,
        rng_seed: u64,
    },
    NodeEncoder {
        spec: MlpSpec,
        frozen_mask: Vec<bool>,
        rng_seed: u64,
        state_offset: usize,
        integrator_steps: usize,
    },
    DeepKernel {
        spec: MlpSpec,
        rng_seed: u64,
        kernel: KernelKind,
        log_lengthscales: Vec<f64>,
        log_output_scale: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// SHA-256 of the canonical config echo.
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub model: ModelMeta,
    pub parameters: Vec<f64>,
    pub lambda: f64,
    pub provenance: Provenance,
    /// SHA-256 over the other sections.
    pub checksum: String,
}

#[derive(Serialize)]
struct Body<'a> {
    format_version: u32,
    model: &'a ModelMeta,
    parameters: &'a [f64],
    lambda: f64,
    provenance: &'a Provenance,
}

fn body_checksum(
    format_version: u32,
    model: &ModelMeta,
    parameters: &[f64],
    lambda: f64,
    provenance: &Provenance,
) -> String {
    let body = Body {
        format_version,
        model,
        parameters,
        lambda,
        provenance,
    };
    hex::encode(Sha256::digest(serde_json::to_vec(&body).expect("body serializes")))
}

/// Any model the CLI trains.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Encoder(FunctionEncoder<BasisSet>),
    NodeEncoder(FunctionEncoder<NodeBasisSet>),
    DeepKernel(DeepKernelModel),
}

impl Model {
    pub fn input_dim(&self) -> usize {
        match self {
            Model::Encoder(e) => e.basis.input_dim(),
            Model::NodeEncoder(e) => e.basis.input_dim(),
            Model::DeepKernel(m) => m.input_dim(),
        }
    }

    /// Kernel Gram over `inputs` (`md x md` for vector-valued encoders).
    pub fn gram(&self, inputs: &[Vec<f64>]) -> Result<Matrix, String> {
        match self {
            Model::Encoder(e) => e.gram(inputs).map_err(|e| e.to_string()),
            Model::NodeEncoder(e) => e.gram(inputs).map_err(|e| e.to_string()),
            Model::DeepKernel(m) => m.kernel_matrix(inputs, inputs).map_err(|e| e.to_string()),
        }
    }

    pub fn to_file(&self, provenance: Provenance) -> ModelFile {
        let (model, parameters, lambda) = match self {
            Model::Encoder(e) => {
                let p = &e.basis.params;
                let meta = ModelMeta::Encoder {
                    spec: e.basis.spec.clone(),
                    frozen_mask: p.frozen_mask.clone(),
                    shared_frozen: p.shared_frozen,
                    rng_seed: e.basis.rng_seed,
                };
                (meta, p.values.clone(), e.lambda)
            }
            Model::NodeEncoder(e) => {
                let f = &e.basis.fields;
                let meta = ModelMeta::NodeEncoder {
                    spec: f.spec.clone(),
                    frozen_mask: f.params.frozen_mask.clone(),
                    rng_seed: f.rng_seed,
                    state_offset: e.basis.state_offset,
                    integrator_steps: e.basis.integrator_steps,
                };
                (meta, f.params.values.clone(), e.lambda)
            }
            Model::DeepKernel(m) => {
                let meta = ModelMeta::DeepKernel {
                    spec: m.feature_net.spec.clone(),
                    rng_seed: m.feature_net.rng_seed,
                    kernel: m.kind,
                    log_lengthscales: m.log_lengthscales.clone(),
                    log_output_scale: m.log_output_scale,
                };
                (meta, m.feature_net.params.values.clone(), m.lambda)
            }
        };
        let checksum = body_checksum(FORMAT_VERSION, &model, &parameters, lambda, &provenance);
        ModelFile {
            format_version: FORMAT_VERSION,
            model,
            parameters,
            lambda,
            provenance,
            checksum,
        }
    }
}

impl ModelFile {
    pub fn render(&self) -> String {
        let values = [
            serde_json::to_string(&self.format_version),
            serde_json::to_string(&self.model),
            serde_json::to_string(&self.parameters),
            serde_json::to_string(&self.lambda),
            serde_json::to_string(&self.provenance),
            serde_json::to_string(&self.checksum),
        ];
        let mut out = String::from("{\n");
        for (i, (key, v)) in SECTIONS.iter().zip(values).enumerate() {
            let sep = if i + 1 < SECTIONS.len() { "," } else { "" };
            out.push_str(&format!("\"{key}\":{}{sep}\n", v.expect("section serializes")));
        }
        out.push_str("}\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self, ModelFileError> {
        let value: Value = match serde_json::from_str(text) {
            Ok(v) => v,
            Err(e) if e.is_eof() => {
                return Err(ModelFileError::Truncated {
                    section: truncated_section(text),
                })
            }
            Err(e) => return Err(ModelFileError::Malformed(e.to_string())),
        };
        let obj = value
            .as_object()
            .ok_or_else(|| ModelFileError::Malformed("top level is not an object".into()))?;
        let version = obj
            .get("format_version")
            .ok_or(ModelFileError::MissingSection("format_version"))?
            .as_u64()
            .ok_or_else(|| ModelFileError::Malformed("format_version is not an integer".into()))?;
        if version != u64::from(FORMAT_VERSION) {
            return Err(ModelFileError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        for key in SECTIONS {
            if !obj.contains_key(key) {
                return Err(ModelFileError::MissingSection(key));
            }
        }
        let file: ModelFile = serde_json::from_value(value).map_err(|e| ModelFileError::Malformed(e.to_string()))?;
        let computed = body_checksum(
            file.format_version,
            &file.model,
            &file.parameters,
            file.lambda,
            &file.provenance,
        );
        if computed != file.checksum {
            return Err(ModelFileError::Checksum {
                stored: file.checksum,
                computed,
            });
        }
        Ok(file)
    }

    pub fn into_model(self) -> Result<Model, ModelFileError> {
        let rebuild = |e: String| ModelFileError::Rebuild(e);
        Ok(match self.model {
            ModelMeta::Encoder {
                spec,
                frozen_mask,
                shared_frozen,
                rng_seed,
            } => {
                let mut basis = BasisSet::from_values(spec, self.parameters, frozen_mask, rng_seed)
                    .map_err(|e| rebuild(e.to_string()))?;
                basis.params.shared_frozen = shared_frozen;
                Model::Encoder(FunctionEncoder::new(basis, self.lambda).map_err(|e| rebuild(e.to_string()))?)
            }
            ModelMeta::NodeEncoder {
                spec,
                frozen_mask,
                rng_seed,
                state_offset,
                integrator_steps,
            } => {
                let fields = BasisSet::from_values(spec, self.parameters, frozen_mask, rng_seed)
                    .map_err(|e| rebuild(e.to_string()))?;
                let basis = NodeBasisSet::from_fields(fields, state_offset, integrator_steps)
                    .map_err(|e| rebuild(e.to_string()))?;
                Model::NodeEncoder(FunctionEncoder::new(basis, self.lambda).map_err(|e| rebuild(e.to_string()))?)
            }
            ModelMeta::DeepKernel {
                spec,
                rng_seed,
                kernel,
                log_lengthscales,
                log_output_scale,
            } => {
                let frozen = vec![false; spec.n_basis];
                let net = BasisSet::from_values(spec, self.parameters, frozen, rng_seed)
                    .map_err(|e| rebuild(e.to_string()))?;
                let mut m = DeepKernelModel::new(net, kernel, self.lambda).map_err(|e| rebuild(e.to_string()))?;
                if log_lengthscales.len() != m.embedding_dim() {
                    return Err(rebuild(format!(
                        "{} lengthscales for embedding width {}",
                        log_lengthscales.len(),
                        m.embedding_dim()
                    )));
                }
                m.log_lengthscales = log_lengthscales;
                m.log_output_scale = log_output_scale;
                Model::DeepKernel(m)
            }
        })
    }
}

/// First section whose line is absent or does not parse on its own.
fn truncated_section(text: &str) -> &'static str {
    let mut lines = text.lines().skip(1);
    for key in SECTIONS {
        let Some(line) = lines.next() else {
            return key;
        };
        let prefix = format!("\"{key}\":");
        let Some(rest) = line.strip_prefix(&prefix) else {
            return key;
        };
        let rest = rest.strip_suffix(',').unwrap_or(rest);
        if serde_json::from_str::<Value>(rest).is_err() {
            return key;
        }
    }
    "end of file"
}

pub fn save_model(model: &Model, provenance: Provenance, path: &Path) -> std::io::Result<()> {
    std::fs::write(path, model.to_file(provenance).render())
}

pub enum LoadError {
    Io(std::io::Error),
    File(ModelFileError),
}

pub fn load_model(path: &Path) -> Result<(Model, Provenance), LoadError> {
    let text = std::fs::read_to_string(path).map_err(LoadError::Io)?;
    let file = ModelFile::parse(&text).map_err(LoadError::File)?;
    let provenance = file.provenance.clone();
    Ok((file.into_model().map_err(LoadError::File)?, provenance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use function_encoder::{Activation, Architecture};

    fn encoder() -> Model {
        let spec = MlpSpec {
            input_dim: 1,
            hidden_widths: vec![6],
            output_dim: 1,
            n_basis: 3,
            architecture: Architecture::MultiHeaded,
            activation: Activation::Tanh,
        };
        Model::Encoder(FunctionEncoder::new(BasisSet::init(spec, 3).unwrap(), 1e-3).unwrap())
    }

    fn prov() -> Provenance {
        Provenance {
            config_hash: "ab".into(),
            seed: 1,
        }
    }

    #[test]
    fn render_parse_render_is_identical() {
        let text = encoder().to_file(prov()).render();
        let parsed = ModelFile::parse(&text).unwrap();
        assert_eq!(parsed.render(), text);
        let model = parsed.into_model().unwrap();
        assert_eq!(model, encoder());
        assert_eq!(model.to_file(prov()).render(), text);
    }

    #[test]
    fn version_mismatch_is_an_error() {
        let text = encoder()
            .to_file(prov())
            .render()
            .replacen("\"format_version\":1", "\"format_version\":999", 1);
        assert!(matches!(
            ModelFile::parse(&text),
            Err(ModelFileError::VersionMismatch {
                found: 999,
                expected: 1
            })
        ));
    }

    #[test]
    fn truncation_names_the_section() {
        let text = encoder().to_file(prov()).render();
        let cut = text.find("\"parameters\"").unwrap() + 30;
        match ModelFile::parse(&text[..cut]) {
            Err(ModelFileError::Truncated { section }) => assert_eq!(section, "parameters"),
            other => panic!("{other:?}"),
        }
        let cut = text.find("\"checksum\"").unwrap();
        match ModelFile::parse(&text[..cut]) {
            Err(ModelFileError::Truncated { section }) => assert_eq!(section, "checksum"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tampering_fails_the_checksum() {
        let file = encoder().to_file(prov());
        let mut tampered = file.clone();
        tampered.parameters[0] += 1e-9;
        assert!(matches!(
            ModelFile::parse(&tampered.render()),
            Err(ModelFileError::Checksum { .. })
        ));
    }

    #[test]
    fn missing_section_detected() {
        let text = encoder().to_file(prov()).render();
        let without: String = text
            .lines()
            .filter(|l| !l.starts_with("\"lambda\""))
            .collect::<Vec<_>>()
            .join("\n");
        assert!(matches!(
            ModelFile::parse(&without),
            Err(ModelFileError::MissingSection("lambda"))
        ));
    }
}
