//! Single-file checkpoints: a JSON header (config and parameter layout)
//! followed by raw little-endian `f64` values in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ModelParams;
use super::{ModelError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"STRKSEG1";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<Entry>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io { path: path.to_path_buf(), source }
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let header = Header {
        config: cfg.clone(),
        params: params
            .iter()
            .map(|(name, p)| Entry { name: name.to_string(), shape: p.tensor.shape().to_vec(), trainable: p.trainable })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut w = BufWriter::new(File::create(path).map_err(io(path))?);
    w.write_all(MAGIC).map_err(io(path))?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io(path))?;
    w.write_all(&json).map_err(io(path))?;
    for (_, p) in params.iter() {
        for v in p.tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(io(path))?;
        }
    }
    w.flush().map_err(io(path))
}

/// Reads a checkpoint and checks its parameters against the layout implied by
/// the stored config, naming the first missing, unexpected or misshapen entry.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let bad = |reason: String| ModelError::Checkpoint { path: path.to_path_buf(), reason };
    let mut r = BufReader::new(File::open(path).map_err(io(path))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io(path))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io(path))?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(io(path))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;
    let expected = ModelParams::zeros(&header.config)?;

    for e in &header.params {
        match expected.get(&e.name) {
            None => return Err(bad(format!("unexpected parameter {}", e.name))),
            Some(p) if p.tensor.shape() != e.shape.as_slice() => {
                return Err(bad(format!("parameter {} has shape {:?}, expected {:?}", e.name, e.shape, p.tensor.shape())))
            }
            Some(_) => {}
        }
    }
    if let Some(missing) = expected.names().find(|n| !header.params.iter().any(|e| e.name == *n)) {
        return Err(bad(format!("missing parameter {missing}")));
    }

    let mut params = ModelParams::new();
    let mut buf = [0u8; 8];
    for e in header.params {
        let n: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf).map_err(io(path))?;
            data.push(f64::from_le_bytes(buf));
        }
        params.insert(e.name, Tensor::from_vec(&e.shape, data), e.trainable);
    }
    Ok((header.config, params))
}
