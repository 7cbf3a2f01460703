//! Dense masked reference implementations of the sparse layers, written
//! independently of the rulebook machinery. Shared with the harness
//! acceptance suite.
#![allow(dead_code)]

pub mod classic;
pub mod ensemble;
pub mod gradsuite;

use std::sync::Arc;

use convot_core::layers::BatchNorm;
use convot_core::sparse::{Bottleneck, ConvBnRelu, Coord4, MsTcn, SparseLayout, SparseTensor, SubmConv};
use convot_core::{DenseTensor, ParamStore};
use rand::seq::SliceRandom;
use rand::Rng;

/// Fully materialized `B x T x X x Y x Z x C` grid with an activity mask.
#[derive(Clone, Debug)]
pub struct Grid {
    pub batch: usize,
    pub res: [usize; 4],
    pub channels: usize,
    pub data: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Grid {
    pub fn empty(batch: usize, res: [usize; 4], channels: usize) -> Self {
        let cells = batch * res.iter().product::<usize>();
        Self {
            batch,
            res,
            channels,
            data: vec![0.0; cells * channels],
            mask: vec![false; cells],
        }
    }

    pub fn cells(&self) -> usize {
        self.mask.len()
    }

    pub fn cell(&self, b: usize, s: [i64; 4]) -> Option<usize> {
        let mut i = b;
        for (&v, &r) in s.iter().zip(&self.res) {
            if v < 0 || v >= r as i64 {
                return None;
            }
            i = i * r + v as usize;
        }
        Some(i)
    }

    pub fn coords_of(&self, mut cell: usize) -> (usize, [i64; 4]) {
        let mut s = [0i64; 4];
        for a in (0..4).rev() {
            s[a] = (cell % self.res[a]) as i64;
            cell /= self.res[a];
        }
        (cell, s)
    }

    pub fn at(&self, cell: usize) -> &[f64] {
        &self.data[cell * self.channels..(cell + 1) * self.channels]
    }

    pub fn at_mut(&mut self, cell: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.data[cell * c..(cell + 1) * c]
    }

    pub fn from_sparse(t: &SparseTensor<f64>) -> Self {
        let c = t.channels();
        let mut g = Self::empty(t.layout.batch_size(), t.layout.resolution(), c);
        for (row, co) in t.layout.coords().iter().enumerate() {
            let s = co.spatial().map(i64::from);
            let cell = g.cell(co.batch as usize, s).expect("in range");
            g.mask[cell] = true;
            g.at_mut(cell).copy_from_slice(&t.feats.data()[row * c..(row + 1) * c]);
        }
        g
    }

    fn like(&self, channels: usize) -> Self {
        let mut g = Self::empty(self.batch, self.res, channels);
        g.mask.clone_from(&self.mask);
        g
    }
}

pub fn random_layout<R: Rng>(rng: &mut R, batch: usize, res: [usize; 4], density: f64) -> SparseLayout {
    let mut coords = Vec::new();
    for b in 0..batch {
        let start = coords.len();
        for t in 0..res[0] {
            for x in 0..res[1] {
                for y in 0..res[2] {
                    for z in 0..res[3] {
                        if rng.random_bool(density) {
                            coords.push(Coord4::new(b as u32, t as u32, x as u32, y as u32, z as u32));
                        }
                    }
                }
            }
        }
        if coords.len() == start {
            let s = res.map(|r| rng.random_range(0..r) as u32);
            coords.push(Coord4::with_spatial(b as u32, s));
        }
    }
    coords.shuffle(rng);
    SparseLayout::new(coords, res, batch).expect("valid layout")
}

pub fn random_sparse<R: Rng>(
    rng: &mut R,
    batch: usize,
    res: [usize; 4],
    density: f64,
    channels: usize,
) -> SparseTensor<f64> {
    let layout = Arc::new(random_layout(rng, batch, res, density));
    let data = (0..layout.len() * channels).map(|_| rng.random_range(-1.0..1.0)).collect();
    let feats = DenseTensor::new([layout.len(), channels], data).unwrap();
    SparseTensor::new(layout, feats).unwrap()
}

/// Submanifold convolution on the dense grid: every active cell sums
/// `W[k]` over the active cells at each kernel offset, offsets enumerated
/// with `t` outermost and `z` innermost.
pub fn subm_conv(g: &Grid, extent: [usize; 4], w: &[f64], bias: &[f64]) -> Grid {
    let cout = bias.len();
    let cin = g.channels;
    let r = extent.map(|e| (e / 2) as i64);
    let mut out = g.like(cout);
    for cell in 0..g.cells() {
        if !g.mask[cell] {
            continue;
        }
        let (b, s) = g.coords_of(cell);
        let mut acc = bias.to_vec();
        let mut k = 0;
        for dt in -r[0]..=r[0] {
            for dx in -r[1]..=r[1] {
                for dy in -r[2]..=r[2] {
                    for dz in -r[3]..=r[3] {
                        let q = [s[0] + dt, s[1] + dx, s[2] + dy, s[3] + dz];
                        if let Some(n) = g.cell(b, q).filter(|&n| g.mask[n]) {
                            let xin = g.at(n);
                            for i in 0..cin {
                                for o in 0..cout {
                                    acc[o] += xin[i] * w[(k * cin + i) * cout + o];
                                }
                            }
                        }
                        k += 1;
                    }
                }
            }
        }
        out.at_mut(cell).copy_from_slice(&acc);
    }
    out
}

/// Training-mode batch norm over the active cells (biased variance).
pub fn batch_norm_train(g: &Grid, gamma: &[f64], beta: &[f64]) -> Grid {
    let c = g.channels;
    let active: Vec<usize> = (0..g.cells()).filter(|&i| g.mask[i]).collect();
    let n = active.len() as f64;
    let mut out = g.like(c);
    for ch in 0..c {
        let mean = active.iter().map(|&i| g.at(i)[ch]).sum::<f64>() / n;
        let var = active.iter().map(|&i| (g.at(i)[ch] - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for &i in &active {
            out.at_mut(i)[ch] = (g.at(i)[ch] - mean) * inv * gamma[ch] + beta[ch];
        }
    }
    out
}

pub fn relu(g: &Grid) -> Grid {
    let mut out = g.clone();
    for v in &mut out.data {
        *v = v.max(0.0);
    }
    out
}

pub fn add(a: &Grid, b: &Grid) -> Grid {
    let mut out = a.clone();
    for (v, w) in out.data.iter_mut().zip(&b.data) {
        *v += w;
    }
    out
}

pub fn concat_channels(parts: &[Grid]) -> Grid {
    let c: usize = parts.iter().map(|p| p.channels).sum();
    let mut out = parts[0].like(c);
    for cell in 0..out.cells() {
        if !out.mask[cell] {
            continue;
        }
        let row: Vec<f64> = parts.iter().flat_map(|p| p.at(cell).to_vec()).collect();
        out.at_mut(cell).copy_from_slice(&row);
    }
    out
}

/// Max pooling; an output cell is active when its window holds an active
/// input cell.
pub fn max_pool(g: &Grid, kernel: usize, stride: usize, padding: usize) -> Grid {
    let res = g.res.map(|r| (r + 2 * padding - kernel) / stride + 1);
    let mut out = Grid::empty(g.batch, res, g.channels);
    for cell in 0..out.cells() {
        let (b, o) = out.coords_of(cell);
        let mut best: Option<Vec<f64>> = None;
        for it in 0..kernel as i64 {
            for ix in 0..kernel as i64 {
                for iy in 0..kernel as i64 {
                    for iz in 0..kernel as i64 {
                        let d = [it, ix, iy, iz];
                        let q: [i64; 4] =
                            std::array::from_fn(|a| o[a] * stride as i64 - padding as i64 + d[a]);
                        let Some(n) = g.cell(b, q).filter(|&n| g.mask[n]) else {
                            continue;
                        };
                        let v = g.at(n);
                        match &mut best {
                            None => best = Some(v.to_vec()),
                            Some(m) => m.iter_mut().zip(v).for_each(|(a, &b)| *a = a.max(b)),
                        }
                    }
                }
            }
        }
        if let Some(m) = best {
            out.mask[cell] = true;
            out.at_mut(cell).copy_from_slice(&m);
        }
    }
    out
}

/// Per-batch channel maxima, `B x C` row-major.
pub fn global_max(g: &Grid) -> Vec<f64> {
    let per = g.cells() / g.batch;
    let mut out = vec![f64::NEG_INFINITY; g.batch * g.channels];
    for cell in 0..g.cells() {
        if g.mask[cell] {
            let b = cell / per;
            for (o, v) in out[b * g.channels..(b + 1) * g.channels].iter_mut().zip(g.at(cell)) {
                *o = o.max(*v);
            }
        }
    }
    out
}

fn param(store: &ParamStore<f64>, id: convot_core::tensor::ParamId) -> &[f64] {
    store.get(id).data()
}

pub fn conv_layer(g: &Grid, store: &ParamStore<f64>, c: &SubmConv) -> Grid {
    let bias = c.bias.map_or(vec![0.0; c.cout], |b| param(store, b).to_vec());
    subm_conv(g, c.extent, param(store, c.weight), &bias)
}

pub fn norm_layer(g: &Grid, store: &ParamStore<f64>, n: &BatchNorm) -> Grid {
    batch_norm_train(g, param(store, n.gamma), param(store, n.beta))
}

pub fn conv_bn_relu(g: &Grid, store: &ParamStore<f64>, l: &ConvBnRelu) -> Grid {
    relu(&norm_layer(&conv_layer(g, store, &l.conv), store, &l.norm))
}

pub fn ms_tcn(g: &Grid, store: &ParamStore<f64>, l: &MsTcn) -> Grid {
    let parts: Vec<Grid> = l.branches.iter().map(|b| conv_layer(g, store, b)).collect();
    concat_channels(&parts)
}

pub fn bottleneck(g: &Grid, store: &ParamStore<f64>, l: &Bottleneck) -> Grid {
    let h = conv_bn_relu(g, store, &l.reduce);
    let h = conv_bn_relu(&h, store, &l.spatial);
    let h = conv_bn_relu(&h, store, &l.expand);
    let skip = match &l.matching {
        Some(m) => conv_layer(g, store, m),
        None => g.clone(),
    };
    add(&h, &skip)
}

/// Relative error between a sparse result and a dense oracle, or a
/// description of the first active-set mismatch.
pub fn compare(sparse: &SparseTensor<f64>, dense: &Grid) -> Result<f64, String> {
    let other = Grid::from_sparse(sparse);
    if other.res != dense.res || other.channels != dense.channels {
        return Err(format!(
            "shape {:?}x{} vs oracle {:?}x{}",
            other.res, other.channels, dense.res, dense.channels
        ));
    }
    if let Some(cell) = (0..dense.cells()).find(|&i| other.mask[i] != dense.mask[i]) {
        return Err(format!("active sets differ at {:?}", dense.coords_of(cell)));
    }
    Ok(rel_err(&other.data, &dense.data))
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let s = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if s == 0.0 {
        0.0
    } else {
        d / s
    }
}
