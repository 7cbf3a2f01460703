//! Submanifold sparse convolution.
//!
//! Outputs exist exactly at the input sites. For each site the kernel
//! gathers features from whichever neighbor offsets are active; inactive
//! or out-of-grid neighbors contribute zero.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::layers::{init_tensor, Init, Session};
use crate::scalar::{gemm, MatLayout, Scalar};
use crate::tensor::{ParamId, ParamStore, Tape, Var};

use super::coord::{Coord4, CoordIndex, SPACE_BITS};
use super::tensor::{SparseLayout, SparseVar};

/// Tasks when reducing weight gradients.
const GRAD_TASKS: usize = 16;

/// Rows per block in the gather-GEMM-scatter kernels.
const BLOCK_ROWS: usize = 8192;

/// Per-site pair counts and `(offset, neighbor row)` entries of one column.
type ColumnPairs = (Vec<u32>, Vec<(u32, u32)>);

/// The rulebook pairs of a block of consecutive rows, grouped by offset.
struct BlockPairs {
    /// Start of each offset's run in `src` / `dst`.
    starts: Vec<usize>,
    /// Rows to gather from.
    src: Vec<u32>,
    /// Block-local rows to scatter into.
    dst: Vec<u32>,
}

impl BlockPairs {
    /// Pairs of rows `first..first + n`; `map` renumbers offsets.
    fn collect(book: &Rulebook, first: usize, n: usize, map: impl Fn(usize) -> usize) -> Self {
        let kvol = book.kernel_volume();
        let mut starts = vec![0usize; kvol + 1];
        for r in first..first + n {
            for &(k, _) in book.neighbors(r) {
                starts[map(k as usize) + 1] += 1;
            }
        }
        for k in 0..kvol {
            starts[k + 1] += starts[k];
        }
        let total = starts[kvol];
        let mut fill = starts.clone();
        let mut src = vec![0u32; total];
        let mut dst = vec![0u32; total];
        for r in first..first + n {
            for &(k, i) in book.neighbors(r) {
                let at = &mut fill[map(k as usize)];
                src[*at] = i;
                dst[*at] = (r - first) as u32;
                *at += 1;
            }
        }
        Self { starts, src, dst }
    }

    fn runs(&self) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> + '_ {
        self.starts
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[1] > w[0])
            .map(|(k, w)| (k, w[0]..w[1]))
    }

    /// `out[dst] += x[src] * W_k` per offset, `W_k` at `k * ci * co` with layout `wl`.
    fn apply<T: Scalar>(&self, x: &[T], ci: usize, w: &[T], wl: MatLayout, out: &mut [T], co: usize) {
        let mut xg = Vec::new();
        let mut yg = Vec::new();
        for (k, run) in self.runs() {
            let n = run.len();
            xg.clear();
            for &i in &self.src[run.clone()] {
                xg.extend_from_slice(&x[i as usize * ci..(i as usize + 1) * ci]);
            }
            yg.resize(n * co, T::zero());
            gemm(
                &xg,
                MatLayout::row_major(n, ci),
                &w[k * ci * co..(k + 1) * ci * co],
                wl,
                &mut yg,
                MatLayout::row_major(n, co),
                false,
            );
            for (&o, y) in self.dst[run].iter().zip(yg.chunks(co)) {
                let row = &mut out[o as usize * co..(o as usize + 1) * co];
                row.iter_mut().zip(y).for_each(|(a, &v)| *a += v);
            }
        }
    }

    /// `p_k += x[src]^T * g[dst]` per offset.
    fn outer<T: Scalar>(&self, x: &[T], ci: usize, g: &[T], co: usize, p: &mut [T]) {
        let mut xg = Vec::new();
        let mut gg = Vec::new();
        for (k, run) in self.runs() {
            let n = run.len();
            xg.clear();
            gg.clear();
            for (&i, &o) in self.src[run.clone()].iter().zip(&self.dst[run]) {
                xg.extend_from_slice(&x[i as usize * ci..(i as usize + 1) * ci]);
                gg.extend_from_slice(&g[o as usize * co..(o as usize + 1) * co]);
            }
            gemm(
                &xg,
                MatLayout::transposed(n, ci),
                &gg,
                MatLayout::row_major(n, co),
                &mut p[k * ci * co..(k + 1) * ci * co],
                MatLayout::row_major(ci, co),
                true,
            );
        }
    }
}

/// Neighbor lists for one kernel extent: for every site, the pairs
/// `(offset index, neighbor row)` of active neighbors, in offset order.
#[derive(Debug)]
pub struct Rulebook {
    pub extent: [usize; 4],
    pub offsets: Vec<[i64; 4]>,
    row_ptr: Vec<usize>,
    entries: Vec<(u32, u32)>,
}

impl Rulebook {
    /// Sites are grouped into z-columns `(batch, t, x, y)`; each column
    /// looks up its neighbor columns once and merges z ranges per site.
    pub(crate) fn build(layout: &SparseLayout, extent: [usize; 4]) -> Self {
        let offsets = kernel_offsets(extent);
        let res = layout.resolution();
        let coords = layout.coords();
        let rz = (extent[3] / 2) as i64;
        let ez = extent[3];

        let mut order: Vec<u32> = (0..coords.len() as u32).collect();
        order.sort_unstable_by_key(|&r| coords[r as usize].pack());
        // Column boundaries in `order`.
        let mut starts = Vec::new();
        let mut index = CoordIndex::with_capacity(coords.len());
        for (p, &r) in order.iter().enumerate() {
            let key = column_key(&coords[r as usize]);
            if p == 0 || column_key(&coords[order[p - 1] as usize]) != key {
                index.insert(key, starts.len() as u32);
                starts.push(p);
            }
        }
        starts.push(order.len());

        let planes: Vec<[i64; 3]> = offsets
            .iter()
            .step_by(ez)
            .map(|o| [o[0], o[1], o[2]])
            .collect();
        let per_column: Vec<ColumnPairs> = (0..starts.len() - 1)
            .into_par_iter()
            .map(|col| {
                let sites = &order[starts[col]..starts[col + 1]];
                let c0 = coords[sites[0] as usize];
                let mut neighbors = Vec::with_capacity(planes.len());
                'planes: for (pi, d) in planes.iter().enumerate() {
                    let mut n = [0u32; 3];
                    for a in 0..3 {
                        let v = c0.spatial()[a] as i64 + d[a];
                        if v < 0 || v >= res[a] as i64 {
                            continue 'planes;
                        }
                        n[a] = v as u32;
                    }
                    let key = column_key(&Coord4::new(c0.batch, n[0], n[1], n[2], 0));
                    if let Some(nc) = index.get(key) {
                        let nc = nc as usize;
                        neighbors.push((pi, &order[starts[nc]..starts[nc + 1]]));
                    }
                }
                let mut counts = Vec::with_capacity(sites.len());
                let mut entries = Vec::new();
                for &row in sites {
                    let z = coords[row as usize].z as i64;
                    let before = entries.len();
                    for &(pi, list) in &neighbors {
                        let lo = list.partition_point(|&r| (coords[r as usize].z as i64) < z - rz);
                        for &r in &list[lo..] {
                            let dz = coords[r as usize].z as i64 - z;
                            if dz > rz {
                                break;
                            }
                            entries.push(((pi * ez) as u32 + (dz + rz) as u32, r));
                        }
                    }
                    counts.push((entries.len() - before) as u32);
                }
                (counts, entries)
            })
            .collect();

        let mut row_len = vec![0usize; coords.len()];
        for (col, (counts, _)) in per_column.iter().enumerate() {
            for (&row, &c) in order[starts[col]..starts[col + 1]].iter().zip(counts) {
                row_len[row as usize] = c as usize;
            }
        }
        let mut row_ptr = Vec::with_capacity(coords.len() + 1);
        row_ptr.push(0);
        let mut total = 0;
        for &l in &row_len {
            total += l;
            row_ptr.push(total);
        }
        let mut entries = vec![(0u32, 0u32); total];
        for (col, (counts, list)) in per_column.iter().enumerate() {
            let mut at = 0;
            for (&row, &c) in order[starts[col]..starts[col + 1]].iter().zip(counts) {
                let c = c as usize;
                let dst = row_ptr[row as usize];
                entries[dst..dst + c].copy_from_slice(&list[at..at + c]);
                at += c;
            }
        }
        Self {
            extent,
            offsets,
            row_ptr,
            entries,
        }
    }

    pub fn kernel_volume(&self) -> usize {
        self.offsets.len()
    }

    /// Active neighbors of site `row`.
    pub fn neighbors(&self, row: usize) -> &[(u32, u32)] {
        &self.entries[self.row_ptr[row]..self.row_ptr[row + 1]]
    }

    pub fn pair_count(&self) -> usize {
        self.entries.len()
    }
}

fn column_key(c: &Coord4) -> u64 {
    c.pack() >> SPACE_BITS
}

/// Offsets of a centered kernel, lexicographic in `(t, x, y, z)`.
/// Offset `k` and offset `K - 1 - k` are negatives of each other.
pub fn kernel_offsets(extent: [usize; 4]) -> Vec<[i64; 4]> {
    let r: Vec<i64> = extent.iter().map(|&e| (e / 2) as i64).collect();
    let mut out = Vec::with_capacity(extent.iter().product());
    for dt in -r[0]..=r[0] {
        for dx in -r[1]..=r[1] {
            for dy in -r[2]..=r[2] {
                for dz in -r[3]..=r[3] {
                    out.push([dt, dx, dy, dz]);
                }
            }
        }
    }
    out
}

pub(crate) fn check_extent(extent: [usize; 4]) -> Result<()> {
    if extent.iter().any(|&e| e == 0 || e % 2 == 0) {
        return Err(Error::Config(format!(
            "kernel extent {extent:?} must be odd on every axis"
        )));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    /// Submanifold convolution with weights `[K x Cin x Cout]` (offsets in
    /// [`kernel_offsets`] order) and bias `[Cout]`.
    pub fn submanifold_conv(
        &mut self,
        x: &SparseVar,
        extent: [usize; 4],
        weight: Var,
        bias: Var,
    ) -> Result<SparseVar> {
        check_extent(extent)?;
        let kvol: usize = extent.iter().product();
        let &[m, cin] = self.shape(x.feats) else {
            return Err(shape_err("submanifold_conv", "features must be rank 2"));
        };
        let &[wk, wcin, cout] = self.shape(weight) else {
            return Err(shape_err("submanifold_conv", "weights must be rank 3"));
        };
        if wk != kvol || wcin != cin || self.shape(bias) != [cout] {
            return Err(shape_err(
                "submanifold_conv",
                format!(
                    "input has {cin} channels, extent {extent:?}; weights {:?}, bias {:?}",
                    self.shape(weight),
                    self.shape(bias)
                ),
            ));
        }
        if m != x.layout.len() {
            return Err(shape_err("submanifold_conv", "feature rows differ from site count"));
        }
        if kvol == 1 {
            let w2 = self.reshape(weight, &[cin, cout])?;
            let feats = self.affine(x.feats, w2, bias)?;
            return Ok(SparseVar {
                layout: x.layout.clone(),
                feats,
            });
        }

        let book = x.layout.rulebook(extent);
        let xd = self.data(x.feats);
        let wd = self.data(weight);
        let bd = self.data(bias);
        let mut out = vec![T::zero(); m * cout];
        if cout > 0 {
            out.par_chunks_mut(BLOCK_ROWS * cout)
                .enumerate()
                .for_each(|(b, dst)| {
                    for row in dst.chunks_mut(cout) {
                        row.copy_from_slice(bd);
                    }
                    let pairs = BlockPairs::collect(&book, b * BLOCK_ROWS, dst.len() / cout, |k| k);
                    pairs.apply(xd, cin, wd, MatLayout::row_major(cin, cout), dst, cout);
                });
        }
        let feats = self.push(
            crate::tensor::DenseTensor::new([m, cout], out)?,
            &[x.feats, weight, bias],
            {
                let xf = x.feats;
                move |tape, g, grads| {
                    let xd = tape.data(xf);
                    let wd = tape.data(weight);
                    if grads.wants(xf) && cin > 0 && cout > 0 {
                        let mut gx = vec![T::zero(); m * cin];
                        // Neighbor o of i at offset k' sees i at offset K-1-k'.
                        gx.par_chunks_mut(BLOCK_ROWS * cin)
                            .enumerate()
                            .for_each(|(b, dst)| {
                                let pairs = BlockPairs::collect(&book, b * BLOCK_ROWS, dst.len() / cin, |k| {
                                    kvol - 1 - k
                                });
                                pairs.apply(g, cout, wd, MatLayout::transposed(cin, cout), dst, cin);
                            });
                        grads.accumulate(xf, &gx);
                    }
                    if grads.wants(weight) && cin > 0 && cout > 0 {
                        let per = m.div_ceil(GRAD_TASKS).max(1);
                        let partials: Vec<Vec<T>> = (0..m.div_ceil(per))
                            .into_par_iter()
                            .map(|task| {
                                let mut p = vec![T::zero(); kvol * cin * cout];
                                let end = ((task + 1) * per).min(m);
                                let mut lo = task * per;
                                while lo < end {
                                    let n = BLOCK_ROWS.min(end - lo);
                                    let pairs = BlockPairs::collect(&book, lo, n, |k| k);
                                    pairs.outer(xd, cin, &g[lo * cout..(lo + n) * cout], cout, &mut p);
                                    lo += n;
                                }
                                p
                            })
                            .collect();
                        let mut gw = vec![T::zero(); kvol * cin * cout];
                        for p in partials {
                            gw.iter_mut().zip(p).for_each(|(a, v)| *a += v);
                        }
                        grads.accumulate(weight, &gw);
                    }
                    if grads.wants(bias) {
                        let mut gb = vec![T::zero(); cout];
                        for row in g.chunks(cout.max(1)) {
                            gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                        grads.accumulate(bias, &gb);
                    }
                }
            },
        );
        Ok(SparseVar {
            layout: x.layout.clone(),
            feats,
        })
    }
}

/// Learnable submanifold convolution: extent plus weights and bias.
#[derive(Clone, Debug)]
pub struct SubmConv {
    pub extent: [usize; 4],
    pub cin: usize,
    pub cout: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl SubmConv {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        extent: [usize; 4],
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(store, name, extent, cin, cout, true, rng)
    }

    /// Without a bias term, for layers followed by batch norm.
    pub fn unbiased<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        extent: [usize; 4],
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(store, name, extent, cin, cout, false, rng)
    }

    fn build<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        extent: [usize; 4],
        cin: usize,
        cout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        check_extent(extent)?;
        let kvol: usize = extent.iter().product();
        let fan_in = kvol * cin;
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(&[kvol, cin, cout], fan_in, Init::FanIn, rng),
            true,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                init_tensor(&[cout], fan_in, Init::FanIn, rng),
                true,
            )
        });
        Ok(Self {
            extent,
            cin,
            cout,
            weight,
            bias,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: &SparseVar) -> Result<SparseVar> {
        let w = s.param(self.weight);
        let b = s.bias(self.bias, self.cout);
        s.tape.submanifold_conv(x, self.extent, w, b)
    }
}
