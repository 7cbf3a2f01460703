//! Point-to-voxel assignment.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor, Reduce, Tape, Var};

use super::coord::{Coord4, CoordIndex};
use super::tensor::{SparseLayout, SparseTensor, SparseVar};

/// Voxel index of a normalized coordinate: `floor(p / cell)`, clamped to
/// `[0, extent - 1]` so that `p = 1.0` lands in the last cell.
pub fn voxel_index(p: f64, cell: f64, extent: usize) -> u32 {
    let v = (p / cell).floor();
    if v.is_nan() || v < 0.0 {
        0
    } else {
        (v as usize).min(extent - 1) as u32
    }
}

/// Placement of each input row: its batch entry and time cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RowPlacement {
    pub batch: u32,
    pub t: u32,
}

impl<T: Scalar> Tape<T> {
    /// Groups rows of `points[P x C]` into voxels of the grid
    /// `(T, Gx, Gy, Gz)`, using channels 0..3 as coordinates in `[0, 1]`.
    /// Sites are ordered by coordinate, so the result does not depend on
    /// the input row order.
    pub fn voxelize(
        &mut self,
        points: Var,
        placement: &[RowPlacement],
        resolution: [usize; 4],
        batch_size: usize,
        aggregation: Reduce,
    ) -> Result<SparseVar> {
        let &[p, c] = self.shape(points) else {
            return Err(shape_err("voxelize", "points must be rank 2"));
        };
        if c < 3 {
            return Err(shape_err("voxelize", format!("{c} channels, need at least 3")));
        }
        if placement.len() != p {
            return Err(shape_err(
                "voxelize",
                format!("{} placements for {} rows", placement.len(), p),
            ));
        }
        if resolution.contains(&0) {
            return Err(Error::Config(format!("grid resolution {resolution:?}")));
        }
        let cells = [1.0 / resolution[1] as f64, 1.0 / resolution[2] as f64, 1.0 / resolution[3] as f64];
        let data = self.data(points);
        let mut keys = Vec::with_capacity(p);
        for (row, pl) in placement.iter().enumerate() {
            if pl.t as usize >= resolution[0] || pl.batch as usize >= batch_size {
                return Err(Error::Config(format!(
                    "row {row} placed at batch {}, t {} outside ({batch_size}, {})",
                    pl.batch, pl.t, resolution[0]
                )));
            }
            let q = &data[row * c..row * c + 3];
            let coord = Coord4::new(
                pl.batch,
                pl.t,
                voxel_index(q[0].as_f64(), cells[0], resolution[1]),
                voxel_index(q[1].as_f64(), cells[1], resolution[2]),
                voxel_index(q[2].as_f64(), cells[2], resolution[3]),
            );
            coord.check()?;
            keys.push(coord.pack());
        }
        let mut unique = keys.clone();
        unique.sort_unstable();
        unique.dedup();
        let mut index = CoordIndex::with_capacity(unique.len());
        for (r, &k) in unique.iter().enumerate() {
            index.insert(k, r as u32);
        }
        let segment_of: Arc<[u32]> = keys
            .iter()
            .map(|&k| index.get(k).expect("inserted above"))
            .collect();
        let coords = unique.iter().map(|&k| Coord4::unpack(k)).collect();
        let layout = Arc::new(SparseLayout::new(coords, resolution, batch_size)?);
        let feats = self.segment_reduce(points, segment_of, layout.len(), aggregation)?;
        Ok(SparseVar { layout, feats })
    }
}

/// Value-level voxelization without gradient tracking.
pub fn voxelize_points<T: Scalar>(
    points: &DenseTensor<T>,
    placement: &[RowPlacement],
    resolution: [usize; 4],
    batch_size: usize,
    aggregation: Reduce,
) -> Result<SparseTensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(points.clone());
    let s = tape.voxelize(v, placement, resolution, batch_size, aggregation)?;
    Ok(s.value(&tape))
}
