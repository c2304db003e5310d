//! `VAGW` weight checkpoints.
//!
//! Layout: magic `VAGW`, u32 version, u32 tensor count, then per tensor a
//! u32 name length, the UTF-8 name, a u8 rank, u32 extents and the f32
//! payload. All integers and floats are little-endian. Batch-norm running
//! statistics are stored as `<name>.running_mean` / `<name>.running_var`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::tensor::{Real, Tensor};

pub const VAGW_MAGIC: [u8; 4] = *b"VAGW";
pub const VAGW_VERSION: u32 = 1;

/// Every tensor of `store` with its checkpoint name, in storage order.
pub fn named_tensors<T: Real>(store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
    let mut out: Vec<(String, Tensor<T>)> = store
        .names()
        .iter()
        .cloned()
        .zip(store.values().iter().cloned())
        .collect();
    for (name, s) in store.bn_names().iter().zip(store.bn_states()) {
        let c = s.channels();
        out.push((format!("{name}.running_mean"), Tensor::new(&[c], s.running_mean.clone()).expect("extent")));
        out.push((format!("{name}.running_var"), Tensor::new(&[c], s.running_var.clone()).expect("extent")));
    }
    out
}

pub fn encode<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let tensors = named_tensors(store);
    let mut buf = Vec::new();
    buf.extend_from_slice(&VAGW_MAGIC);
    buf.extend_from_slice(&VAGW_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Length {
                expected: self.at + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a checkpoint into `(name, tensor)` pairs.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut c = Cursor { bytes, at: 0 };
    let found: [u8; 4] = c.take(4)?.try_into().expect("4 bytes");
    if found != VAGW_MAGIC {
        return Err(Error::BadMagic {
            expected: VAGW_MAGIC,
            found,
        });
    }
    let version = c.u32()?;
    if version != VAGW_VERSION {
        return Err(Error::Version(version));
    }
    let count = c.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::CheckpointMismatch("tensor name is not UTF-8".into()))?;
        let rank = c.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = c
            .take(4 * numel)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if c.at != bytes.len() {
        return Err(Error::Length {
            expected: c.at,
            found: bytes.len(),
        });
    }
    Ok(out)
}

/// Overwrites every tensor of `store` from a decoded checkpoint. Names and
/// shapes must match exactly, with nothing missing or extra.
pub fn restore<T: Real>(store: &mut ParamStore<T>, tensors: Vec<(String, Tensor<f32>)>) -> Result<()> {
    let expected = named_tensors(store);
    if expected.len() != tensors.len() {
        return Err(Error::CheckpointMismatch(format!(
            "model has {} tensors, checkpoint has {}",
            expected.len(),
            tensors.len()
        )));
    }
    let mut lookup: std::collections::HashMap<String, Tensor<f32>> = tensors.into_iter().collect();
    for (name, t) in &expected {
        let got = lookup
            .remove(name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {name}")))?;
        if got.shape() != t.shape() {
            return Err(Error::CheckpointMismatch(format!(
                "{name}: model shape {:?}, checkpoint shape {:?}",
                t.shape(),
                got.shape()
            )));
        }
        let v: Tensor<T> = got.cast();
        if let Some(p) = store.by_name_mut(name) {
            *p = v;
        } else {
            let (bn, field) = name.rsplit_once('.').expect("bn tensor name");
            let i = store.bn_names().iter().position(|n| n == bn).expect("bn state");
            let s = &mut store.bn_states_mut()[i];
            match field {
                "running_mean" => s.running_mean = v.into_data(),
                _ => s.running_var = v.into_data(),
            }
        }
    }
    Ok(())
}

pub fn write<T: Real, W: Write>(store: &ParamStore<T>, mut w: W) -> Result<()> {
    w.write_all(&encode(store))?;
    Ok(())
}

pub fn read<T: Real, R: Read>(store: &mut ParamStore<T>, mut r: R) -> Result<()> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    restore(store, decode(&bytes)?)
}

pub fn save<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(store)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load<T: Real>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    restore(store, decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::SharedMlp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(seed: u64, widths: &[usize]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        SharedMlp::new(&mut s, &mut ChaCha8Rng::seed_from_u64(seed), "m", widths).unwrap();
        s.bn_states_mut()[0].running_mean[1] = 0.25;
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let a = store(1, &[3, 5, 2]);
        let bytes = encode(&a);
        let mut b = store(2, &[3, 5, 2]);
        assert_ne!(a, b);
        restore(&mut b, decode(&bytes).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(encode(&b), bytes);
    }

    #[test]
    fn mismatches_are_reported() {
        let bytes = encode(&store(1, &[3, 5, 2]));
        let mut other = store(1, &[3, 6, 2]);
        assert!(matches!(restore(&mut other, decode(&bytes).unwrap()), Err(Error::CheckpointMismatch(_))));
        let mut deeper = store(1, &[3, 5, 2, 2]);
        assert!(matches!(restore(&mut deeper, decode(&bytes).unwrap()), Err(Error::CheckpointMismatch(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 2]), Err(Error::Length { .. })));
        let mut bad = bytes.clone();
        bad[3] = b'X';
        assert!(matches!(decode(&bad), Err(Error::BadMagic { .. })));
    }
}
