//! Weight checkpoints.
//!
//! On disk a checkpoint is a little JSON header in front of a flat binary
//! payload:
//!
//! ```text
//! [u64 LE header length] [header JSON] [payload: little-endian f64 ...]
//! ```
//!
//! The header records the model config, the init seed, and one entry per
//! tensor with its shape and element offset into the payload, in the same
//! fixed order the initializer fills them. Save and load round-trip bit
//! for bit.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{tensor_plan, weights_from_tensors, ModelConfig, Weights};

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Element (not byte) offset into the f64 payload.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

/// Write a checkpoint. The parent directory is created if missing.
pub fn save_weights(weights: &Weights, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let named = weights.named_tensors();
    let mut tensors = Vec::with_capacity(named.len());
    let mut offset = 0usize;
    for (name, tensor) in &named {
        tensors.push(TensorEntry {
            name: name.clone(),
            rows: tensor.nrows(),
            cols: tensor.ncols(),
            offset,
        });
        offset += tensor.len();
    }
    let header = CheckpointHeader {
        config: weights.config.clone(),
        seed: weights.config.init_seed,
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    for (_, tensor) in &named {
        for &x in tensor.iter() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Read a checkpoint back, verifying that the header's tensor listing
/// matches both the config and the payload it sits in front of.
pub fn load_weights(path: &Path) -> Result<Weights> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Data(format!("malformed checkpoint header: {e}")))?;
    header.config.validate()?;

    // The tensor listing must be exactly the plan for this config: same
    // names, same shapes, contiguous offsets.
    let plan = tensor_plan(&header.config);
    if header.tensors.len() != plan.len() {
        return Err(Error::Data(format!(
            "checkpoint lists {} tensors but the config requires {}",
            header.tensors.len(),
            plan.len()
        )));
    }
    let mut expect_offset = 0usize;
    for (entry, (name, rows, cols)) in header.tensors.iter().zip(&plan) {
        if &entry.name != name || entry.rows != *rows || entry.cols != *cols {
            return Err(Error::Data(format!(
                "checkpoint tensor '{}' ({}x{}) does not match expected '{}' ({}x{})",
                entry.name, entry.rows, entry.cols, name, rows, cols
            )));
        }
        if entry.offset != expect_offset {
            return Err(Error::Data(format!(
                "checkpoint tensor '{}' at offset {} but {} expected",
                entry.name, entry.offset, expect_offset
            )));
        }
        expect_offset += rows * cols;
    }

    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() != expect_offset * 8 {
        return Err(Error::Data(format!(
            "checkpoint payload holds {} bytes but the header describes {} elements \
             ({} bytes)",
            payload.len(),
            expect_offset,
            expect_offset * 8
        )));
    }

    let mut tensors = Vec::with_capacity(plan.len());
    for entry in &header.tensors {
        let start = entry.offset * 8;
        let end = start + entry.rows * entry.cols * 8;
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push(
            Array2::from_shape_vec((entry.rows, entry.cols), data)
                .expect("shape validated against plan"),
        );
    }
    Ok(weights_from_tensors(header.config, tensors))
}
