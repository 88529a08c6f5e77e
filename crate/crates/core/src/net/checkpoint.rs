//! `VMCK` checkpoints: magic, version byte, `u32` entry count, then per entry a
//! `u16` name length, the UTF-8 name and a `VTNS` tensor.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::VmUnet;
use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::layers::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VMCK";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn write_checkpoint<S: Scalar, W: Write>(w: &mut W, params: &ParamStore<S>) -> Result<()> {
    let count = u32::try_from(params.len()).map_err(|_| Error::Format("too many entries".into()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[CHECKPOINT_VERSION])?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("parameter name too long: {name:?}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated checkpoint {what}")),
        _ => Error::Io(e),
    })
}

/// Named tensors in file order.
pub fn read_checkpoint<S: Scalar, R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<S>)>> {
    let mut head = [0u8; 9];
    read_exact(r, &mut head, "header")?;
    if &head[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}, expected \"VMCK\"",
            String::from_utf8_lossy(&head[..4])
        )));
    }
    if head[4] != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            head[4]
        )));
    }
    let count = u32::from_le_bytes([head[5], head[6], head[7], head[8]]) as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for k in 0..count {
        let mut len = [0u8; 2];
        read_exact(r, &mut len, "entry name length")?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact(r, &mut name, "entry name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Format(format!("entry {k} name is not UTF-8")))?;
        let t = read_tensor(r).map_err(|e| e.tagged(format!("checkpoint entry {name:?}")))?;
        entries.push((name, t));
    }
    Ok(entries)
}

pub fn save_checkpoint<S: Scalar>(path: impl AsRef<Path>, params: &ParamStore<S>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<S>)>> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

impl<S: Scalar> VmUnet<S> {
    /// Replaces every parameter; the entry set must match the model exactly.
    pub fn load_entries(&mut self, entries: Vec<(String, Tensor<S>)>) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} entries, model has {} parameters",
                entries.len(),
                self.params.len()
            )));
        }
        for (name, t) in entries {
            self.params.set(&name, t).map_err(|e| e.tagged("loading checkpoint"))?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.params)
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.load_entries(load_checkpoint(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ModelConfig;

    fn bytes(m: &VmUnet<f64>) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m.params).unwrap();
        buf
    }

    #[test]
    fn roundtrip_restores_every_tensor() {
        let a = VmUnet::<f64>::new(ModelConfig::micro(), 1).unwrap();
        let mut b = VmUnet::<f64>::new(ModelConfig::micro(), 2).unwrap();
        assert_ne!(a.params.values(), b.params.values());
        b.load_entries(read_checkpoint(&mut bytes(&a).as_slice()).unwrap()).unwrap();
        assert_eq!(a.params.values(), b.params.values());
    }

    #[test]
    fn entry_sizes_sum_to_param_count() {
        let a = VmUnet::<f64>::new(ModelConfig::micro(), 1).unwrap();
        let entries: Vec<(String, Tensor<f64>)> = read_checkpoint(&mut bytes(&a).as_slice()).unwrap();
        assert_eq!(entries.iter().map(|(_, t)| t.len()).sum::<usize>(), a.param_count());
    }

    #[test]
    fn corrupted_header_is_diagnosed() {
        let a = VmUnet::<f64>::new(ModelConfig::micro(), 1).unwrap();
        let good = bytes(&a);
        let mut bad = good.clone();
        bad[1] = b'X';
        let err = read_checkpoint::<f64, _>(&mut bad.as_slice()).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
        let mut bad = good.clone();
        bad[4] = 7;
        let err = read_checkpoint::<f64, _>(&mut bad.as_slice()).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        let err = read_checkpoint::<f64, _>(&mut &good[..good.len() / 2]).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn mismatched_model_rejected() {
        let a = VmUnet::<f64>::new(ModelConfig::micro(), 1).unwrap();
        let mut other = VmUnet::<f64>::new(ModelConfig { deep_supervision: false, ..ModelConfig::micro() }, 1).unwrap();
        assert!(other.load_entries(read_checkpoint(&mut bytes(&a).as_slice()).unwrap()).is_err());
    }
}
