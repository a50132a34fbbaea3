//! Single-file checkpoint: magic bytes, a little-endian u64 header length, a
//! JSON header (model config, optional experiment config, tensor index), then
//! every tensor as little-endian f64 in index order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, S3Mamba};
use crate::error::{io_err, Error, Result};
use crate::nn::{Module, Slot};

const MAGIC: &[u8; 8] = b"S3MCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the data section, in elements.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    experiment: Option<serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: S3Mamba,
    /// The experiment configuration stored alongside, if any.
    pub experiment: Option<serde_json::Value>,
}

/// Tensor names in checkpoint order, e.g. `stage0.block1.ss2d.dir2.a_log`.
pub fn tensor_names(model: &S3Mamba) -> Vec<String> {
    let mut names = Vec::new();
    model.visit("", &mut |n, _, _| names.push(n.to_string()));
    names
}

pub fn save_checkpoint(path: &Path, model: &S3Mamba, experiment: Option<serde_json::Value>) -> Result<()> {
    let mut tensors = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    model.visit("", &mut |name, _, a| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: a.shape().to_vec(),
            offset: data.len(),
        });
        data.extend(a.iter().copied());
    });
    let header = serde_json::to_vec(&Header {
        model: model.config.clone(),
        experiment,
        tensors,
    })?;
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(io_err(path));
    write(MAGIC)?;
    write(&(header.len() as u64).to_le_bytes())?;
    write(&header)?;
    for v in data {
        write(&v.to_le_bytes())?;
    }
    out.flush().map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut input = BufReader::new(file);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len).map_err(io_err(path))?;
    let len = usize::try_from(u64::from_le_bytes(len)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut header = vec![0u8; len];
    input.read_exact(&mut header).map_err(io_err(path))?;
    let header: Header = serde_json::from_slice(&header)?;
    let mut raw = Vec::new();
    input.read_to_end(&mut raw).map_err(io_err(path))?;
    if raw.len() % 8 != 0 {
        return Err(Error::Checkpoint("data section is not a whole number of f64".into()));
    }
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    // Parameters are all overwritten below; the init seed is irrelevant.
    let mut model = S3Mamba::new(&header.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    let index: HashMap<&str, &TensorEntry> = header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut problem: Option<String> = None;
    let mut used = 0;
    model.visit_mut("", &mut |name, _: Slot, mut a| {
        if problem.is_some() {
            return;
        }
        let Some(entry) = index.get(name) else {
            problem = Some(format!("tensor {name} missing"));
            return;
        };
        if entry.shape != a.shape() {
            problem = Some(format!("tensor {name}: stored {:?}, model {:?}", entry.shape, a.shape()));
            return;
        }
        let Some(src) = data.get(entry.offset..entry.offset + a.len()) else {
            problem = Some(format!("tensor {name} runs past the data section"));
            return;
        };
        a.iter_mut().zip(src).for_each(|(d, s)| *d = *s);
        used += 1;
    });
    if let Some(p) = problem {
        return Err(Error::Checkpoint(p));
    }
    if used != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model uses {used}",
            header.tensors.len()
        )));
    }
    Ok(Checkpoint {
        model,
        experiment: header.experiment,
    })
}
