//! Binary checkpoint codec.
//!
//! Layout, little-endian throughout: magic `CKPT`, u32 parameter count, then
//! per parameter a u16 name length, the name bytes, a u8 rank, u32 dims and
//! the f32 values. Round-trips are bit-exact for `f32` stores.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::params::ParamStore;
use super::scalar::Scalar;
use super::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CKPT";

pub fn write_checkpoint<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        if name.len() > usize::from(u16::MAX) {
            return Err(Error::invalid(format!("parameter name too long: {}", p.name)));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value.shape();
        if shape.len() > usize::from(u8::MAX) {
            return Err(Error::invalid("tensor rank exceeds u8".to_string()));
        }
        w.write_all(&[shape.len() as u8])?;
        for d in shape {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read every named tensor from a checkpoint file.
pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format {
            format: "CKPT",
            detail: format!("bad magic {magic:?}"),
        });
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format {
            format: "CKPT",
            detail: e.to_string(),
        })?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 4];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            data.push(T::from_f64(f64::from(f32::from_le_bytes(buf))));
        }
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(out)
}

/// Assign checkpointed values into an existing store, matching by name.
/// Every store entry must be present with an identical shape.
pub fn load_into<T: Scalar>(store: &mut ParamStore<T>, entries: &[(String, Tensor<T>)]) -> Result<()> {
    for (name, value) in entries {
        let id = store
            .lookup(name)
            .ok_or_else(|| Error::invalid(format!("checkpoint names unknown parameter {name:?}")))?;
        if store.value(id).shape() != value.shape() {
            return Err(Error::shape(
                "load_checkpoint",
                format!("{:?} for {name}", store.value(id).shape()),
                format!("{:?}", value.shape()),
            ));
        }
        *store.value_mut(id) = value.clone();
    }
    if entries.len() != store.len() {
        return Err(Error::invalid(format!(
            "checkpoint has {} entries, store expects {}",
            entries.len(),
            store.len()
        )));
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store = ParamStore::<f32>::new();
        store
            .add("conv.w", Tensor::from_fn(&[2, 3, 1, 1], |i| i as f32 * 0.37 - 1.0), true)
            .unwrap();
        store
            .add("bn.running_mean", Tensor::from_fn(&[3], |i| (i as f32).exp()), false)
            .unwrap();
        write_checkpoint(&store, &path).unwrap();

        let mut restored = ParamStore::<f32>::new();
        restored.add("conv.w", Tensor::zeros(&[2, 3, 1, 1]), true).unwrap();
        restored.add("bn.running_mean", Tensor::zeros(&[3]), false).unwrap();
        load_into(&mut restored, &read_checkpoint(&path).unwrap()).unwrap();
        assert_eq!(store.checksum(), restored.checksum());

        // Second write of the restored store produces identical bytes.
        let path2 = dir.path().join("model2.ckpt");
        write_checkpoint(&restored, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn load_rejects_shape_and_name_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(&[4]), true).unwrap();
        write_checkpoint(&store, &path).unwrap();
        let entries = read_checkpoint::<f32>(&path).unwrap();

        let mut other = ParamStore::<f32>::new();
        other.add("w", Tensor::zeros(&[5]), true).unwrap();
        assert!(load_into(&mut other, &entries).is_err());

        let mut missing = ParamStore::<f32>::new();
        missing.add("v", Tensor::zeros(&[4]), true).unwrap();
        assert!(load_into(&mut missing, &entries).is_err());
    }
}
