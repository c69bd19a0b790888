//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      4 bytes  "SLMT"
//! version    u32      currently 1
//! digest     32 bytes SHA-256 of the model config's canonical JSON
//! count      u32      number of parameter records
//! record*    count times, sorted by path:
//!   path_len u32
//!   path     path_len bytes of UTF-8
//!   ndim     u32
//!   dims     ndim x u64
//!   data     prod(dims) x f64
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::model::Model;
use super::params::ModelParams;
use super::ModelConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SLMT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, model: &Model) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&model.config().digest())?;
    let params = model.params();
    let count = params.iter().count() as u32;
    w.write_all(&count.to_le_bytes())?;
    for (path, t) in params.iter() {
        w.write_all(&(path.len() as u32).to_le_bytes())?;
        w.write_all(path.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

/// Reads a checkpoint written for `config`. The parameter set must match the
/// architecture `config` describes exactly. No adaptable subset is selected.
pub fn read_checkpoint<R: Read>(mut r: R, config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let magic: [u8; 4] = read_array(&mut r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let digest: [u8; 32] = read_array(&mut r)?;
    if digest != config.digest() {
        return Err(Error::Format(
            "config digest does not match the checkpoint".into(),
        ));
    }
    let count = read_u32(&mut r)? as usize;
    let reference = Model::build(config.clone(), 0)?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut path = vec![0u8; len];
        r.read_exact(&mut path)
            .map_err(|e| Error::Format(format!("truncated path: {e}")))?;
        let path = String::from_utf8(path)
            .map_err(|e| Error::Format(format!("path is not UTF-8: {e}")))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(read_array(&mut r)?) as usize);
        }
        let expected = reference
            .params()
            .get(&path)
            .ok_or_else(|| Error::Format(format!("unexpected parameter {path}")))?;
        if expected.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "{path}: shape {shape:?}, expected {:?}",
                expected.shape()
            )));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_array(&mut r)?));
        }
        tensors.insert(path, Tensor::new(data, shape)?);
    }
    if tensors.len() != reference.params().iter().count() {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameters, architecture needs {}",
            tensors.len(),
            reference.params().iter().count()
        )));
    }
    Ok(Model::from_parts(
        config.clone(),
        ModelParams::from_tensors(tensors),
    ))
}

impl Model {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_checkpoint(std::io::BufWriter::new(f), self)
    }

    pub fn load(path: impl AsRef<std::path::Path>, config: &ModelConfig) -> Result<Model> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        read_checkpoint(std::io::BufReader::new(f), config)
    }
}
