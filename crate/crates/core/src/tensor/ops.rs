//! Shape-manipulating and structural differentiable operations.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::scalar::{gemm, MatLayout, Scalar};

use super::{DenseTensor, Tape, Var};

/// How co-located rows are combined by [`Tape::segment_reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Reduce {
    #[default]
    Mean,
    Max,
}

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let out = DenseTensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, &[a, b], move |_, g, grads| {
            grads.accumulate(a, g);
            grads.accumulate(b, g);
        }))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.data(a).iter().copied().sum();
        let n = self.value(a).numel();
        self.push(DenseTensor::scalar(s), &[a], move |_, g, grads| {
            if let Some(slot) = grads.slot(a) {
                debug_assert_eq!(slot.len(), n);
                for v in slot.iter_mut() {
                    *v += g[0];
                }
            }
        })
    }

    /// Weighted sum `sum(a * w)` against a constant weight tensor.
    pub fn dot_const(&mut self, a: Var, w: &[T]) -> Result<Var> {
        if w.len() != self.value(a).numel() {
            return Err(shape_err("dot_const", "weight length differs"));
        }
        let s: T = self.data(a).iter().zip(w).map(|(&x, &y)| x * y).sum();
        let w = w.to_vec();
        Ok(self.push(DenseTensor::scalar(s), &[a], move |_, g, grads| {
            if let Some(slot) = grads.slot(a) {
                for (v, &wi) in slot.iter_mut().zip(&w) {
                    *v += g[0] * wi;
                }
            }
        }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, &[a], move |_, g, grads| grads.accumulate(a, g)))
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose12(&mut self, a: Var) -> Result<Var> {
        let &[b, p, q] = self.shape(a) else {
            return Err(shape_err("transpose12", "expected rank 3"));
        };
        let out = DenseTensor::new([b, q, p], swap_last2(self.data(a), p, q))?;
        Ok(self.push(out, &[a], move |_, g, grads| {
            if grads.wants(a) {
                let back = swap_last2(g, q, p);
                grads.accumulate(a, &back);
            }
        }))
    }

    /// Concatenation along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("concat"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} on rank {}", base.len())));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(shape_err("concat", format!("{:?} vs {:?}", base, s)));
            }
            widths.push(s[axis] * inner);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let parts = parts.to_vec();
        Ok(self.push(DenseTensor::new(shape, data)?, &parts.clone(), move |_, g, grads| {
            let mut start = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                if let Some(slot) = grads.slot(p) {
                    for o in 0..outer {
                        let src = &g[o * total + start..o * total + start + w];
                        for (d, &s) in slot[o * w..(o + 1) * w].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                start += w;
            }
        }))
    }

    /// Batched matrix product `[B x M x K] * [B x K x N] -> [B x M x N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (&[ba, m, k], &[bb, k2, n]) = (self.shape(a), self.shape(b)) else {
            return Err(shape_err("bmm", "expected rank-3 operands"));
        };
        if ba != bb || k != k2 {
            return Err(shape_err(
                "bmm",
                format!("[{ba}x{m}x{k}] * [{bb}x{k2}x{n}]"),
            ));
        }
        let mut out = vec![T::zero(); ba * m * n];
        let (da, db) = (self.data(a), self.data(b));
        out.par_chunks_mut((m * n).max(1))
            .enumerate()
            .for_each(|(i, c)| {
                gemm(
                    &da[i * m * k..(i + 1) * m * k],
                    MatLayout::row_major(m, k),
                    &db[i * k * n..(i + 1) * k * n],
                    MatLayout::row_major(k, n),
                    c,
                    MatLayout::row_major(m, n),
                    false,
                )
            });
        let out = DenseTensor::new([ba, m, n], out)?;
        Ok(self.push(out, &[a, b], move |tape, g, grads| {
            if grads.wants(a) {
                let db = tape.data(b);
                let mut ga = vec![T::zero(); ba * m * k];
                ga.par_chunks_mut((m * k).max(1))
                    .enumerate()
                    .for_each(|(i, c)| {
                        gemm(
                            &g[i * m * n..(i + 1) * m * n],
                            MatLayout::row_major(m, n),
                            &db[i * k * n..(i + 1) * k * n],
                            MatLayout::transposed(k, n),
                            c,
                            MatLayout::row_major(m, k),
                            false,
                        )
                    });
                grads.accumulate(a, &ga);
            }
            if grads.wants(b) {
                let da = tape.data(a);
                let mut gb = vec![T::zero(); ba * k * n];
                gb.par_chunks_mut((k * n).max(1))
                    .enumerate()
                    .for_each(|(i, c)| {
                        gemm(
                            &da[i * m * k..(i + 1) * m * k],
                            MatLayout::transposed(m, k),
                            &g[i * m * n..(i + 1) * m * n],
                            MatLayout::row_major(m, n),
                            c,
                            MatLayout::row_major(k, n),
                            false,
                        )
                    });
                grads.accumulate(b, &gb);
            }
        }))
    }

    /// Selects rows of a rank-2 tensor; `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, rows: &[Option<usize>]) -> Result<Var> {
        let &[r, c] = self.shape(a) else {
            return Err(shape_err("gather_rows", "expected rank 2"));
        };
        if let Some(bad) = rows.iter().flatten().find(|&&i| i >= r) {
            return Err(Error::Index {
                what: "gather_rows",
                index: *bad,
                limit: r,
            });
        }
        let src = self.data(a);
        let mut data = Vec::with_capacity(rows.len() * c);
        for row in rows {
            match row {
                Some(i) => data.extend_from_slice(&src[i * c..(i + 1) * c]),
                None => data.extend(std::iter::repeat_n(T::zero(), c)),
            }
        }
        let rows = rows.to_vec();
        let out = DenseTensor::new([rows.len(), c], data)?;
        Ok(self.push(out, &[a], move |_, g, grads| {
            if let Some(slot) = grads.slot(a) {
                for (o, row) in rows.iter().enumerate() {
                    if let Some(i) = row {
                        for (d, &s) in slot[i * c..(i + 1) * c].iter_mut().zip(&g[o * c..]) {
                            *d += s;
                        }
                    }
                }
            }
        }))
    }

    /// Reduces rows of `a[R x C]` into `segments` output rows, row `i`
    /// going to `segment_of[i]`. Max ties resolve to the lowest row.
    pub fn segment_reduce(
        &mut self,
        a: Var,
        segment_of: Arc<[u32]>,
        segments: usize,
        mode: Reduce,
    ) -> Result<Var> {
        let &[r, c] = self.shape(a) else {
            return Err(shape_err("segment_reduce", "expected rank 2"));
        };
        if segment_of.len() != r {
            return Err(shape_err(
                "segment_reduce",
                format!("{} segment ids for {} rows", segment_of.len(), r),
            ));
        }
        if let Some(&bad) = segment_of.iter().find(|&&s| s as usize >= segments) {
            return Err(Error::Index {
                what: "segment",
                index: bad as usize,
                limit: segments,
            });
        }
        let src = self.data(a);
        match mode {
            Reduce::Mean => {
                let mut counts = vec![0usize; segments];
                let mut out = vec![T::zero(); segments * c];
                for (i, &s) in segment_of.iter().enumerate() {
                    let s = s as usize;
                    counts[s] += 1;
                    for (d, &v) in out[s * c..(s + 1) * c].iter_mut().zip(&src[i * c..]) {
                        *d += v;
                    }
                }
                for (s, &n) in counts.iter().enumerate() {
                    if n > 1 {
                        let inv = T::one() / T::of(n as f64);
                        out[s * c..(s + 1) * c].iter_mut().for_each(|v| *v *= inv);
                    }
                }
                let out = DenseTensor::new([segments, c], out)?;
                Ok(self.push(out, &[a], move |_, g, grads| {
                    if let Some(slot) = grads.slot(a) {
                        for (i, &s) in segment_of.iter().enumerate() {
                            let s = s as usize;
                            let inv = T::one() / T::of(counts[s] as f64);
                            for (d, &v) in slot[i * c..(i + 1) * c].iter_mut().zip(&g[s * c..]) {
                                *d += v * inv;
                            }
                        }
                    }
                }))
            }
            Reduce::Max => {
                let mut arg = vec![usize::MAX; segments * c];
                let mut out = vec![T::zero(); segments * c];
                for (i, &s) in segment_of.iter().enumerate() {
                    let s = s as usize;
                    for ch in 0..c {
                        let v = src[i * c + ch];
                        let o = s * c + ch;
                        if arg[o] == usize::MAX || v > out[o] {
                            out[o] = v;
                            arg[o] = i;
                        }
                    }
                }
                let out = DenseTensor::new([segments, c], out)?;
                Ok(self.push(out, &[a], move |_, g, grads| {
                    if let Some(slot) = grads.slot(a) {
                        for (o, &i) in arg.iter().enumerate() {
                            if i != usize::MAX {
                                slot[i * c + o % c] += g[o];
                            }
                        }
                    }
                }))
            }
        }
    }
}

fn swap_last2<T: Scalar>(src: &[T], p: usize, q: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    if p * q == 0 {
        return out;
    }
    out.par_chunks_mut(p * q).enumerate().for_each(|(bi, o)| {
        let s = &src[bi * p * q..(bi + 1) * p * q];
        for i in 0..p {
            for j in 0..q {
                o[j * p + i] = s[i * q + j];
            }
        }
    });
    out
}
