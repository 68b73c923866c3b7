//! JSON model checkpoints.
//!
//! Matrices are stored row-major with their shape. The fingerprint of the
//! shift operator the model was trained with is stored alongside and checked
//! on load.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::model::{GraphModel, GraphShiftOp, ModelConfig, Param, SignalScaler};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "gridgsp-model";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MatrixRecord {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    input_scaler: SignalScaler,
    output_scaler: Option<SignalScaler>,
    gso_fingerprint: String,
    params: Vec<MatrixRecord>,
}

/// Serializes a model together with the fingerprint of its shift operator.
pub fn checkpoint_json(model: &GraphModel, shift: &GraphShiftOp) -> Result<String> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: model.config,
        input_scaler: model.input_scaler.clone(),
        output_scaler: model.output_scaler.clone(),
        gso_fingerprint: shift.fingerprint().to_string(),
        params: model
            .params
            .iter()
            .map(|p| MatrixRecord {
                name: p.name.clone(),
                rows: p.value.nrows(),
                cols: p.value.ncols(),
                data: p.value.transpose().iter().copied().collect(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &GraphModel, shift: &GraphShiftOp) -> Result<()> {
    let path = path.as_ref();
    let text = checkpoint_json(model, shift)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a checkpoint and checks it was trained on `shift`.
pub fn parse_checkpoint(text: &str, shift: &GraphShiftOp) -> Result<GraphModel> {
    let file: CheckpointFile = serde_json::from_str(text)?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", file.format)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", file.version)));
    }
    if file.gso_fingerprint != shift.fingerprint() {
        return Err(Error::Checkpoint(format!(
            "shift operator fingerprint mismatch: checkpoint {}, given {}",
            file.gso_fingerprint,
            shift.fingerprint()
        )));
    }
    let params = file
        .params
        .into_iter()
        .map(|r| {
            if r.data.len() != r.rows * r.cols {
                return Err(Error::Checkpoint(format!("parameter `{}` has wrong length", r.name)));
            }
            Ok(Param {
                value: DMatrix::from_row_slice(r.rows, r.cols, &r.data),
                name: r.name,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // shapes must match a freshly initialized model with the same config
    let template = GraphModel::init(
        file.config,
        file.input_scaler.clone(),
        file.output_scaler.clone(),
        &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
    )?;
    if template.params.len() != params.len()
        || template
            .params
            .iter()
            .zip(&params)
            .any(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape())
    {
        return Err(Error::Checkpoint("parameter layout does not match the configuration".into()));
    }
    Ok(GraphModel {
        config: file.config,
        params,
        input_scaler: file.input_scaler,
        output_scaler: file.output_scaler,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>, shift: &GraphShiftOp) -> Result<GraphModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text, shift)
}
