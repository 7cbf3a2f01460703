//! Sparse max pooling over `(t, x, y, z)` and global per-batch pooling.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor, Tape};

use super::coord::Coord4;
use super::tensor::{SparseLayout, SparseVar};

/// Window geometry shared by all four pooled axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for PoolSpec {
    fn default() -> Self {
        Self {
            kernel: 3,
            stride: 2,
            padding: 1,
        }
    }
}

impl PoolSpec {
    pub fn output_extent(&self, input: usize) -> usize {
        (input + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1
    }

    /// Output indices whose window `[s*o - p, s*o - p + k)` covers `pos`.
    fn covering(&self, pos: usize, out_extent: usize) -> std::ops::Range<usize> {
        let (k, s, p) = (self.kernel as i64, self.stride as i64, self.padding as i64);
        let pos = pos as i64;
        let lo = (pos + p - k + 1).max(0);
        let lo = (lo + s - 1) / s;
        let hi = ((pos + p) / s).min(out_extent as i64 - 1);
        if hi < lo {
            0..0
        } else {
            lo as usize..hi as usize + 1
        }
    }
}

/// Maps input rows onto the pooled site set.
#[derive(Debug)]
pub struct PoolPlan {
    pub layout: Arc<SparseLayout>,
    /// For each output row, the contributing input rows in ascending order.
    pub sources: Vec<Vec<u32>>,
}

impl PoolPlan {
    pub fn build(input: &SparseLayout, spec: PoolSpec) -> Result<Self> {
        if spec.kernel == 0 || spec.stride == 0 || spec.padding >= spec.kernel {
            return Err(Error::Config(format!("invalid pooling window {spec:?}")));
        }
        let res_in = input.resolution();
        let res_out = res_in.map(|r| spec.output_extent(r));
        let mut pairs: Vec<(u64, u32)> = Vec::new();
        for (row, c) in input.coords().iter().enumerate() {
            let s = c.spatial();
            let ranges: Vec<_> = (0..4).map(|a| spec.covering(s[a] as usize, res_out[a])).collect();
            for t in ranges[0].clone() {
                for x in ranges[1].clone() {
                    for y in ranges[2].clone() {
                        for z in ranges[3].clone() {
                            let o = Coord4::new(c.batch, t as u32, x as u32, y as u32, z as u32);
                            pairs.push((o.pack(), row as u32));
                        }
                    }
                }
            }
        }
        pairs.sort_unstable();
        let mut coords = Vec::new();
        let mut sources: Vec<Vec<u32>> = Vec::new();
        for (key, row) in pairs {
            if coords.last().map(|c: &Coord4| c.pack()) != Some(key) {
                coords.push(Coord4::unpack(key));
                sources.push(Vec::new());
            }
            sources.last_mut().expect("pushed above").push(row);
        }
        let layout = Arc::new(SparseLayout::new(coords, res_out, input.batch_size())?);
        Ok(Self { layout, sources })
    }
}

impl<T: Scalar> Tape<T> {
    /// Max pooling that emits a site only for windows holding at least one
    /// active input. Ties resolve to the lowest input row.
    pub fn sparse_max_pool(&mut self, x: &SparseVar, spec: PoolSpec) -> Result<SparseVar> {
        let plan = PoolPlan::build(&x.layout, spec)?;
        let c = x.channels(self);
        let xd = self.data(x.feats);
        let mo = plan.sources.len();
        let mut out = vec![T::zero(); mo * c];
        let mut arg = vec![0u32; mo * c];
        for (o, src) in plan.sources.iter().enumerate() {
            for ch in 0..c {
                let mut best = src[0];
                for &i in &src[1..] {
                    if xd[i as usize * c + ch] > xd[best as usize * c + ch] {
                        best = i;
                    }
                }
                out[o * c + ch] = xd[best as usize * c + ch];
                arg[o * c + ch] = best;
            }
        }
        let xf = x.feats;
        let feats = self.push(DenseTensor::new([mo, c], out)?, &[xf], move |_, g, grads| {
            if let Some(slot) = grads.slot(xf) {
                for (j, &i) in arg.iter().enumerate() {
                    slot[i as usize * c + j % c] += g[j];
                }
            }
        });
        Ok(SparseVar {
            layout: plan.layout,
            feats,
        })
    }

    /// Per-batch, per-channel maximum over all active sites: `[B x C]`.
    pub fn global_sparse_max_pool(&mut self, x: &SparseVar) -> Result<crate::tensor::Var> {
        let &[m, c] = self.shape(x.feats) else {
            return Err(shape_err("global_sparse_max_pool", "features must be rank 2"));
        };
        let b = x.layout.batch_size();
        let xd = self.data(x.feats);
        let mut arg: Vec<Option<u32>> = vec![None; b * c];
        for (row, site) in x.layout.coords().iter().enumerate().take(m) {
            let bi = site.batch as usize;
            for ch in 0..c {
                let slot = &mut arg[bi * c + ch];
                // Rows arrive in ascending order, so ties keep the lowest row.
                match *slot {
                    Some(best) if xd[best as usize * c + ch] >= xd[row * c + ch] => {}
                    _ => *slot = Some(row as u32),
                }
            }
        }
        if let Some(empty) = (0..b).find(|&bi| c > 0 && arg[bi * c].is_none()) {
            return Err(Error::EmptyBatch(empty));
        }
        if m == 0 && b > 0 {
            return Err(Error::Empty("global_sparse_max_pool"));
        }
        let arg: Vec<u32> = arg.into_iter().map(|a| a.unwrap_or(0)).collect();
        let out: Vec<T> = arg
            .iter()
            .enumerate()
            .map(|(j, &i)| xd[i as usize * c + j % c])
            .collect();
        let xf = x.feats;
        Ok(self.push(DenseTensor::new([b, c], out)?, &[xf], move |_, g, grads| {
            if let Some(slot) = grads.slot(xf) {
                for (j, &i) in arg.iter().enumerate() {
                    slot[i as usize * c + j % c] += g[j];
                }
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covering_windows() {
        let s = PoolSpec::default();
        assert_eq!(s.output_extent(32), 16);
        assert_eq!(s.output_extent(5), 3);
        assert_eq!(s.output_extent(1), 1);
        assert_eq!(s.covering(2, 16), 1..2);
        assert_eq!(s.covering(3, 16), 1..3);
        assert_eq!(s.covering(0, 16), 0..1);
        // Last odd position of an even extent only reaches the final output.
        assert_eq!(s.covering(31, 16), 15..16);
    }
}
