//! Named parameter storage and the binary checkpoint format.
//!
//! Layout (little-endian): `"SPHT"`, version `u32`, scalar width in bytes
//! `u32`, then until end of file, per tensor: name length `u32`, UTF-8
//! name, rank `u32`, `rank` extents as `u64`, raw values.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::DenseTensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPHT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: DenseTensor<T>,
    trainable: bool,
}

/// Learnable parameters plus non-trainable buffers (running statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: DenseTensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &DenseTensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseTensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&i| self.is_trainable(i)).collect()
    }

    /// Mutable views of the trainable tensors, in [`Self::trainable_ids`] order.
    pub fn trainable_mut(&mut self) -> Vec<&mut [T]> {
        self.entries
            .iter_mut()
            .filter(|e| e.trainable)
            .map(|e| e.value.data_mut())
            .collect()
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
        for e in &self.entries {
            buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(e.name.as_bytes());
            buf.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
            for &d in e.value.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in e.value.data() {
                v.write_le(&mut buf);
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads every tensor of a checkpoint in file order.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, DenseTensor<T>)>> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { buf: &bytes, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let width = cur.u32()? as usize;
        let mut out = Vec::new();
        while cur.pos < bytes.len() {
            let len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = cur.take(n * width)?;
            let data: Vec<T> = match width {
                4 => raw.chunks(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
                8 => raw.chunks(8).map(|c| T::of(f64::read_le(c))).collect(),
                w => return Err(Error::Format(format!("unsupported scalar width {w}"))),
            };
            out.push((name, DenseTensor::new(shape, data)?));
        }
        Ok(out)
    }

    /// Overwrites every stored tensor from a checkpoint, matching by name
    /// and shape. Every entry of the store must be present.
    pub fn load_checkpoint<R: Read>(&mut self, r: R) -> Result<()> {
        let tensors = Self::read_checkpoint(r)?;
        for e in &mut self.entries {
            let Some((_, t)) = tensors.iter().find(|(n, _)| *n == e.name) else {
                return Err(Error::Format(format!("checkpoint lacks {}", e.name)));
            };
            if t.shape() != e.value.shape() {
                return Err(Error::Format(format!(
                    "{}: checkpoint shape {:?}, model shape {:?}",
                    e.name,
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t.clone();
        }
        Ok(())
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let mut s = ParamStore::<f64>::new();
        s.add("a.w", DenseTensor::from_f64([2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap(), true);
        s.add("a.mean", DenseTensor::from_f64([3], &[0.1, 0.2, 0.3]).unwrap(), false);
        s.add("scalar", DenseTensor::scalar(7.5), true);
        let mut bytes = Vec::new();
        s.write_checkpoint(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"SPHT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);

        let mut t = s.clone();
        for id in t.ids().collect::<Vec<_>>() {
            t.get_mut(id).data_mut().fill(0.0);
        }
        t.load_checkpoint(&bytes[..]).unwrap();
        for id in s.ids() {
            assert_eq!(s.get(id), t.get(id));
        }

        // f64 file read into an f32 store.
        let mut f = ParamStore::<f32>::new();
        f.add("a.w", DenseTensor::zeros([2, 3]), true);
        f.add("a.mean", DenseTensor::zeros([3]), false);
        f.add("scalar", DenseTensor::zeros(Vec::<usize>::new()), true);
        f.load_checkpoint(&bytes[..]).unwrap();
        assert_eq!(f.get(ParamId(0)).data()[5], 6.0);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let s = ParamStore::<f32>::new();
        let mut bytes = Vec::new();
        s.write_checkpoint(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParamStore::<f32>::read_checkpoint(&bad[..]).is_err());
        let mut s2 = ParamStore::<f32>::new();
        s2.add("w", DenseTensor::zeros([4]), true);
        let mut b2 = Vec::new();
        s2.write_checkpoint(&mut b2).unwrap();
        b2.truncate(b2.len() - 1);
        assert!(ParamStore::<f32>::read_checkpoint(&b2[..]).is_err());
    }
}
