//! Versioned binary checkpoints: a text manifest (layer specs, shapes)
//! followed by raw little-endian f64 parameter data.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::scalar::Scalar;

use super::Tensor;

const MAGIC: &[u8; 4] = b"RCPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    /// Free-form description of the architecture that produced the tensors.
    pub manifest: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

pub fn write_checkpoint<T: Scalar>(
    path: &Path,
    manifest: &str,
    tensors: &[(String, &Tensor<T>)],
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let mb = manifest.as_bytes();
    w.write_all(&(mb.len() as u32).to_le_bytes())?;
    w.write_all(mb)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &t.data {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Format("wrong magic".to_string()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Format(format!(
            "version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    r.read_exact(&mut b4)?;
    let mlen = u32::from_le_bytes(b4) as usize;
    let mut mbuf = vec![0u8; mlen];
    r.read_exact(&mut mbuf)?;
    let manifest = String::from_utf8(mbuf)
        .map_err(|_| CheckpointError::Format("manifest is not utf-8".to_string()))?;
    r.read_exact(&mut b4)?;
    let n_tensors = u32::from_le_bytes(b4) as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        r.read_exact(&mut b4)?;
        let nlen = u32::from_le_bytes(b4) as usize;
        let mut nbuf = vec![0u8; nlen];
        r.read_exact(&mut nbuf)?;
        let name = String::from_utf8(nbuf)
            .map_err(|_| CheckpointError::Format("tensor name is not utf-8".to_string()))?;
        r.read_exact(&mut b4)?;
        let ndim = u32::from_le_bytes(b4) as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut b8 = [0u8; 8];
        for _ in 0..ndim {
            r.read_exact(&mut b8)?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut b8).map_err(|_| {
                CheckpointError::Format(format!("tensor '{name}' data truncated"))
            })?;
            data.push(T::lit(f64::from_le_bytes(b8)));
        }
        tensors.push((name, Tensor::from_vec(&shape, data)));
    }
    Ok(Checkpoint { manifest, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let a = Tensor::from_vec(&[2, 3], vec![1.0f64, -2.0, 3.5, 0.0, 1e-9, 7.25]);
        let b = Tensor::from_vec(&[4], vec![0.1, 0.2, 0.3, 0.4]);
        write_checkpoint(
            &path,
            "arch v1\nomega_c 3x16\n",
            &[("a".to_string(), &a), ("b".to_string(), &b)],
        )
        .unwrap();
        let ck: Checkpoint<f64> = read_checkpoint(&path).unwrap();
        assert_eq!(ck.manifest, "arch v1\nomega_c 3x16\n");
        assert_eq!(ck.tensor("a").unwrap(), &a);
        assert_eq!(ck.tensor("b").unwrap(), &b);
    }

    #[test]
    fn truncated_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let a = Tensor::from_vec(&[8], vec![1.0f64; 8]);
        write_checkpoint(&path, "m", &[("a".to_string(), &a)]).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 12]).unwrap();
        let err = read_checkpoint::<f64>(&path).unwrap_err();
        assert!(format!("{err}").contains("truncated"));
    }
}
