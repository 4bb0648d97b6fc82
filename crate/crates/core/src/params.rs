//! Named parameter tensors and the binary checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! magic  b"UDMACKPT"
//! u32    format version (1)
//! u32    tensor count
//! per tensor:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, rank x u64 dims
//!   prod(dims) x f64 row-major data
//! ```

use std::io::{Read, Write};

use rand::Rng;

use crate::autodiff::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UDMACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// He-style uniform init: `U(-a, a)` with `a = sqrt(6 / fan_in)`.
    pub fn add_he(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, stores: &[(&str, &ParamStore)]) -> Result<(), CheckpointError> {
    let total: usize = stores.iter().map(|(_, s)| s.len()).sum();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(total as u32).to_le_bytes())?;
    for (prefix, store) in stores {
        for (name, t) in store.names.iter().zip(&store.tensors) {
            let full = format!("{}/{}", prefix, name);
            w.write_all(&(full.len() as u32).to_le_bytes())?;
            w.write_all(full.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Read a checkpoint into stores whose layout (names, shapes) must match.
pub fn read_checkpoint<R: Read>(mut r: R, stores: &mut [(&str, &mut ParamStore)]) -> Result<(), CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = read_u32(&mut r)? as usize;
    let expected: usize = stores.iter().map(|(_, s)| s.len()).sum();
    if count != expected {
        return Err(CheckpointError::Mismatch(format!(
            "{} tensors in file, model has {}",
            count, expected
        )));
    }
    for (prefix, store) in stores.iter_mut() {
        for i in 0..store.len() {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8_lossy(&name).into_owned();
            let want = format!("{}/{}", prefix, store.names[i]);
            if name != want {
                return Err(CheckpointError::Mismatch(format!("expected {}, found {}", want, name)));
            }
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            if shape != store.tensors[i].shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "{}: shape {:?} vs {:?}",
                    want,
                    shape,
                    store.tensors[i].shape()
                )));
            }
            for v in store.tensors[i].data_mut() {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = ParamStore::new();
        a.add_he("w", &[3, 2], 2, &mut rng);
        a.add_zeros("b", &[2]);
        let mut b = ParamStore::new();
        b.add_he("m", &[4], 4, &mut rng);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("gen", &a), ("disc", &b)]).unwrap();

        let mut a2 = a.clone();
        let mut b2 = b.clone();
        a2.tensors_mut()[0].data_mut().iter_mut().for_each(|v| *v = 0.0);
        b2.tensors_mut()[0].data_mut().iter_mut().for_each(|v| *v = 9.0);
        read_checkpoint(&buf[..], &mut [("gen", &mut a2), ("disc", &mut b2)]).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn checkpoint_rejects_wrong_layout() {
        let mut a = ParamStore::new();
        a.add_zeros("w", &[2]);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("gen", &a)]).unwrap();
        let mut other = ParamStore::new();
        other.add_zeros("w", &[3]);
        assert!(matches!(
            read_checkpoint(&buf[..], &mut [("gen", &mut other)]),
            Err(CheckpointError::Mismatch(_))
        ));
        assert!(matches!(
            read_checkpoint(&b"garbage!garbage!"[..], &mut [("gen", &mut other)]),
            Err(CheckpointError::BadMagic)
        ));
    }
}
