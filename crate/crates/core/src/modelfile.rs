//! On-disk model format.
//!
//! One JSON schema covers both stages of a model's life: freshly trained
//! (float parameter arrays, no `precision_p`) and quantized (integer arrays
//! plus `precision_p` and `group_widths`). Field order is fixed by the
//! struct definitions, so serializing the same model always produces the
//! same bytes; [`model_hash`] over those bytes identifies a model in
//! reports.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{FloatParams, GroupWidths, QuantParams, Topology};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("model JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported format_version {0}")]
    Version(u32),
    #[error("inconsistent model file: {0}")]
    Inconsistent(String),
}

/// Provenance of the trained parameters, carried through quantization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub lambda: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

/// Parameter payload: float right after training, integer once quantized.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Float(FloatParams),
    Quant(QuantParams),
}

/// A model as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedModel {
    pub key_byte: u8,
    pub metadata: TrainingMetadata,
    pub kind: ModelKind,
}

impl LoadedModel {
    pub fn topology(&self) -> Topology {
        match &self.kind {
            ModelKind::Float(p) => p.topology,
            ModelKind::Quant(q) => q.topology,
        }
    }

    /// The quantized parameters, or an error naming what was loaded.
    pub fn require_quant(&self) -> Result<&QuantParams, ModelFileError> {
        match &self.kind {
            ModelKind::Quant(q) => Ok(q),
            ModelKind::Float(_) => Err(ModelFileError::Inconsistent(
                "expected a quantized model (integer parameters with precision_p), got a float model".into(),
            )),
        }
    }

    pub fn require_float(&self) -> Result<&FloatParams, ModelFileError> {
        match &self.kind {
            ModelKind::Float(p) => Ok(p),
            ModelKind::Quant(_) => Err(ModelFileError::Inconsistent(
                "expected a float model, got a quantized one".into(),
            )),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TopologyDto {
    l: usize,
    m: usize,
    n: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ParamArray {
    Int(Vec<i64>),
    Float(Vec<f64>),
}

impl ParamArray {
    fn len(&self) -> usize {
        match self {
            ParamArray::Int(v) => v.len(),
            ParamArray::Float(v) => v.len(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDto {
    format_version: u32,
    topology: TopologyDto,
    key_byte: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    precision_p: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    group_widths: Option<GroupWidths>,
    #[serde(rename = "W1")]
    w1: ParamArray,
    b1: ParamArray,
    #[serde(rename = "W2")]
    w2: ParamArray,
    b2: ParamArray,
    training_metadata: TrainingMetadata,
}

fn float_dto(params: &FloatParams, key_byte: u8, metadata: &TrainingMetadata) -> ModelDto {
    let t = params.topology;
    ModelDto {
        format_version: FORMAT_VERSION,
        topology: TopologyDto { l: t.inputs, m: t.hidden, n: t.outputs },
        key_byte,
        precision_p: None,
        group_widths: None,
        w1: ParamArray::Float(params.w1.clone()),
        b1: ParamArray::Float(params.b1.clone()),
        w2: ParamArray::Float(params.w2.clone()),
        b2: ParamArray::Float(params.b2.clone()),
        training_metadata: metadata.clone(),
    }
}

fn quant_dto(params: &QuantParams, key_byte: u8, metadata: &TrainingMetadata) -> ModelDto {
    let t = params.topology;
    ModelDto {
        format_version: FORMAT_VERSION,
        topology: TopologyDto { l: t.inputs, m: t.hidden, n: t.outputs },
        key_byte,
        precision_p: Some(params.precision),
        group_widths: Some(params.widths),
        w1: ParamArray::Int(params.w1.clone()),
        b1: ParamArray::Int(params.b1.clone()),
        w2: ParamArray::Int(params.w2.clone()),
        b2: ParamArray::Int(params.b2.clone()),
        training_metadata: metadata.clone(),
    }
}

/// Serializes a float model to the JSON format.
pub fn float_model_json(
    params: &FloatParams,
    key_byte: u8,
    metadata: &TrainingMetadata,
) -> Result<String, ModelFileError> {
    Ok(serde_json::to_string_pretty(&float_dto(params, key_byte, metadata))?)
}

/// Serializes a quantized model to the JSON format.
pub fn quant_model_json(
    params: &QuantParams,
    key_byte: u8,
    metadata: &TrainingMetadata,
) -> Result<String, ModelFileError> {
    Ok(serde_json::to_string_pretty(&quant_dto(params, key_byte, metadata))?)
}

pub fn save_float_model(
    path: &Path,
    params: &FloatParams,
    key_byte: u8,
    metadata: &TrainingMetadata,
) -> Result<(), ModelFileError> {
    let json = float_model_json(params, key_byte, metadata)?;
    fs::write(path, json).map_err(|source| ModelFileError::Io { path: path.to_owned(), source })
}

pub fn save_quant_model(
    path: &Path,
    params: &QuantParams,
    key_byte: u8,
    metadata: &TrainingMetadata,
) -> Result<(), ModelFileError> {
    let json = quant_model_json(params, key_byte, metadata)?;
    fs::write(path, json).map_err(|source| ModelFileError::Io { path: path.to_owned(), source })
}

pub fn load_model(path: &Path) -> Result<LoadedModel, ModelFileError> {
    let text = fs::read_to_string(path)
        .map_err(|source| ModelFileError::Io { path: path.to_owned(), source })?;
    parse_model(&text)
}

/// Parses and validates the JSON format.
pub fn parse_model(text: &str) -> Result<LoadedModel, ModelFileError> {
    let dto: ModelDto = serde_json::from_str(text)?;
    if dto.format_version != FORMAT_VERSION {
        return Err(ModelFileError::Version(dto.format_version));
    }
    let topology = Topology::new(dto.topology.l, dto.topology.m, dto.topology.n);
    let expect = |name: &str, got: usize, want: usize| -> Result<(), ModelFileError> {
        if got == want {
            Ok(())
        } else {
            Err(ModelFileError::Inconsistent(format!(
                "{name} has {got} entries, topology requires {want}"
            )))
        }
    };
    expect("W1", dto.w1.len(), topology.hidden * topology.inputs)?;
    expect("b1", dto.b1.len(), topology.hidden)?;
    expect("W2", dto.w2.len(), topology.outputs * topology.hidden)?;
    expect("b2", dto.b2.len(), topology.outputs)?;

    let kind = match dto.precision_p {
        Some(precision) => {
            let widths = dto.group_widths.ok_or_else(|| {
                ModelFileError::Inconsistent("precision_p present but group_widths missing".into())
            })?;
            let as_int = |name: &str, a: ParamArray| -> Result<Vec<i64>, ModelFileError> {
                match a {
                    ParamArray::Int(v) => Ok(v),
                    ParamArray::Float(_) => Err(ModelFileError::Inconsistent(format!(
                        "{name} must be an integer array in a quantized model"
                    ))),
                }
            };
            let q = QuantParams {
                topology,
                precision,
                w1: as_int("W1", dto.w1)?,
                b1: as_int("b1", dto.b1)?,
                w2: as_int("W2", dto.w2)?,
                b2: as_int("b2", dto.b2)?,
                widths,
            };
            if !q.fits_widths() {
                return Err(ModelFileError::Inconsistent(
                    "a parameter does not fit its declared group width".into(),
                ));
            }
            ModelKind::Quant(q)
        }
        None => {
            let as_float = |a: ParamArray| -> Vec<f64> {
                match a {
                    ParamArray::Float(v) => v,
                    // Integer literals are valid floats; accept them.
                    ParamArray::Int(v) => v.into_iter().map(|x| x as f64).collect(),
                }
            };
            let p = FloatParams {
                topology,
                w1: as_float(dto.w1),
                b1: as_float(dto.b1),
                w2: as_float(dto.w2),
                b2: as_float(dto.b2),
            };
            if !p.all_finite() {
                return Err(ModelFileError::Inconsistent("non-finite parameter value".into()));
            }
            ModelKind::Float(p)
        }
    };
    Ok(LoadedModel { key_byte: dto.key_byte, metadata: dto.training_metadata, kind })
}

/// SHA-256 (hex) of a model's serialized JSON; stable because serialization
/// is deterministic.
pub fn model_hash(json: &str) -> String {
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
