//! Sparse 4D tensors: active sites, their row index and features.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::{Arc, Mutex};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor, Tape, Var};

use super::conv::Rulebook;
use super::coord::{Coord4, CoordIndex};

/// The active-site set of a sparse tensor: coordinates, the exact
/// coordinate-to-row index, and the grid resolution `(T, Gx, Gy, Gz)`.
///
/// Immutable once built; neighbor rulebooks are cached per kernel extent.
#[derive(Debug)]
pub struct SparseLayout {
    coords: Vec<Coord4>,
    index: CoordIndex,
    resolution: [usize; 4],
    batch_size: usize,
    rulebooks: Mutex<HashMap<[usize; 4], Arc<Rulebook>>>,
}

impl SparseLayout {
    pub fn new(coords: Vec<Coord4>, resolution: [usize; 4], batch_size: usize) -> Result<Self> {
        let mut index = CoordIndex::with_capacity(coords.len());
        for (row, c) in coords.iter().enumerate() {
            c.check()?;
            let s = c.spatial();
            if c.batch as usize >= batch_size
                || s.iter().zip(&resolution).any(|(&v, &r)| v as usize >= r)
            {
                return Err(Error::Config(format!(
                    "site {c:?} outside resolution {resolution:?} / batch {batch_size}"
                )));
            }
            if index.insert(c.pack(), row as u32).is_some() {
                return Err(Error::Config(format!("duplicate site {c:?}")));
            }
        }
        Ok(Self {
            coords,
            index,
            resolution,
            batch_size,
            rulebooks: Mutex::new(HashMap::new()),
        })
    }

    pub fn coords(&self) -> &[Coord4] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn resolution(&self) -> [usize; 4] {
        self.resolution
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn row_of(&self, c: &Coord4) -> Option<usize> {
        self.index.get(c.pack()).map(|r| r as usize)
    }

    pub(crate) fn rulebook(&self, extent: [usize; 4]) -> Arc<Rulebook> {
        let mut cache = self.rulebooks.lock().expect("rulebook cache poisoned");
        cache
            .entry(extent)
            .or_insert_with(|| Arc::new(Rulebook::build(self, extent)))
            .clone()
    }

    /// Same sites, rows permuted so that row `i` of the result is row
    /// `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Self::new(
            perm.iter().map(|&i| self.coords[i]).collect(),
            self.resolution,
            self.batch_size,
        )
    }
}

/// A sparse tensor value: layout plus `M x C` features.
#[derive(Clone, Debug)]
pub struct SparseTensor<T> {
    pub layout: Arc<SparseLayout>,
    pub feats: DenseTensor<T>,
}

impl<T: Scalar> SparseTensor<T> {
    pub fn new(layout: Arc<SparseLayout>, feats: DenseTensor<T>) -> Result<Self> {
        if feats.rank() != 2 || feats.shape()[0] != layout.len() {
            return Err(shape_err(
                "sparse tensor",
                format!("{} sites, features {:?}", layout.len(), feats.shape()),
            ));
        }
        Ok(Self { layout, feats })
    }

    pub fn channels(&self) -> usize {
        self.feats.shape()[1]
    }

    /// Places the tensor on a tape.
    pub fn to_var(&self, tape: &mut Tape<T>, requires_grad: bool) -> SparseVar {
        SparseVar {
            layout: self.layout.clone(),
            feats: tape.leaf(self.feats.clone(), requires_grad),
        }
    }

    /// Text dump, one line `b t x y z c0 c1 ...` per site, sorted by
    /// coordinate. Values use the shortest round-trip representation.
    pub fn dump(&self) -> String {
        let c = self.channels();
        let mut order: Vec<usize> = (0..self.layout.len()).collect();
        order.sort_by_key(|&i| self.layout.coords[i]);
        let mut s = String::new();
        for i in order {
            let p = self.layout.coords[i];
            let _ = write!(s, "{} {} {} {} {}", p.batch, p.t, p.x, p.y, p.z);
            for v in &self.feats.data()[i * c..(i + 1) * c] {
                let _ = write!(s, " {v}");
            }
            s.push('\n');
        }
        s
    }
}

/// A sparse tensor whose features live on a tape.
#[derive(Clone, Debug)]
pub struct SparseVar {
    pub layout: Arc<SparseLayout>,
    pub feats: Var,
}

impl SparseVar {
    pub fn channels<T: Scalar>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.feats)[1]
    }

    pub fn value<T: Scalar>(&self, tape: &Tape<T>) -> SparseTensor<T> {
        SparseTensor {
            layout: self.layout.clone(),
            feats: tape.value(self.feats).clone(),
        }
    }
}
