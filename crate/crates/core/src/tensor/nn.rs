//! Dense layers, activations, pooling and the loss.

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::scalar::{MatLayout, Scalar};

use super::linalg::{column_sums, matmul_at_b, matmul_rows};
use super::{DenseTensor, Tape, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// `y = x W + b` for `x[B x In]`, `W[In x Out]`, `b[Out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (&[rows, fan_in], &[w_in, fan_out]) = (self.shape(x), self.shape(w)) else {
            return Err(shape_err(
                "affine",
                format!("x {:?}, W {:?} must be rank 2", self.shape(x), self.shape(w)),
            ));
        };
        if fan_in != w_in || self.shape(b) != [fan_out] {
            return Err(shape_err(
                "affine",
                format!(
                    "x {:?}, W {:?}, b {:?}",
                    self.shape(x),
                    self.shape(w),
                    self.shape(b)
                ),
            ));
        }
        let bias = self.data(b);
        let mut out: Vec<T> = (0..rows).flat_map(|_| bias.iter().copied()).collect();
        matmul_rows(
            self.data(x),
            rows,
            fan_in,
            self.data(w),
            MatLayout::row_major(fan_in, fan_out),
            &mut out,
            true,
        );
        let out = DenseTensor::new([rows, fan_out], out)?;
        Ok(self.push(out, &[x, w, b], move |tape, g, grads| {
            if grads.wants(x) {
                let mut gx = vec![T::zero(); rows * fan_in];
                matmul_rows(
                    g,
                    rows,
                    fan_out,
                    tape.data(w),
                    MatLayout::transposed(fan_in, fan_out),
                    &mut gx,
                    false,
                );
                grads.accumulate(x, &gx);
            }
            if grads.wants(w) {
                let gw = matmul_at_b(tape.data(x), g, rows, fan_in, fan_out);
                grads.accumulate(w, &gw);
            }
            if grads.wants(b) {
                grads.accumulate(b, &column_sums(g, fan_out));
            }
        }))
    }

    /// Kernel-size-1 convolution: `y[b] = W x[b] + b` for `x[B x C x N]`,
    /// `W[C' x C]`.
    pub fn pointwise_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (&[batch, cin, n], &[cout, w_in]) = (self.shape(x), self.shape(w)) else {
            return Err(shape_err(
                "pointwise_conv1d",
                format!("x {:?} must be rank 3, W {:?} rank 2", self.shape(x), self.shape(w)),
            ));
        };
        if cin != w_in || self.shape(b) != [cout] {
            return Err(shape_err(
                "pointwise_conv1d",
                format!(
                    "x {:?}, W {:?}, b {:?}",
                    self.shape(x),
                    self.shape(w),
                    self.shape(b)
                ),
            ));
        }
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![T::zero(); batch * cout * n];
        if n > 0 {
            out.par_chunks_mut(cout * n).enumerate().for_each(|(bi, o)| {
                for (c, row) in o.chunks_mut(n).enumerate() {
                    row.fill(bd[c]);
                }
                crate::scalar::gemm(
                    wd,
                    MatLayout::row_major(cout, cin),
                    &xd[bi * cin * n..(bi + 1) * cin * n],
                    MatLayout::row_major(cin, n),
                    o,
                    MatLayout::row_major(cout, n),
                    true,
                );
            });
        }
        let out = DenseTensor::new([batch, cout, n], out)?;
        Ok(self.push(out, &[x, w, b], move |tape, g, grads| {
            if n == 0 {
                return;
            }
            let wd = tape.data(w);
            let xd = tape.data(x);
            if grads.wants(x) {
                let mut gx = vec![T::zero(); batch * cin * n];
                gx.par_chunks_mut(cin * n).enumerate().for_each(|(bi, o)| {
                    crate::scalar::gemm(
                        wd,
                        MatLayout::transposed(cout, cin),
                        &g[bi * cout * n..(bi + 1) * cout * n],
                        MatLayout::row_major(cout, n),
                        o,
                        MatLayout::row_major(cin, n),
                        false,
                    );
                });
                grads.accumulate(x, &gx);
            }
            if grads.wants(w) {
                // Sum over the batch in fixed groups so the result is
                // independent of thread scheduling.
                const GROUP: usize = 16;
                let partials: Vec<Vec<T>> = (0..batch.div_ceil(GROUP))
                    .into_par_iter()
                    .map(|gi| {
                        let mut p = vec![T::zero(); cout * cin];
                        for bi in gi * GROUP..((gi + 1) * GROUP).min(batch) {
                            crate::scalar::gemm(
                                &g[bi * cout * n..(bi + 1) * cout * n],
                                MatLayout::row_major(cout, n),
                                &xd[bi * cin * n..(bi + 1) * cin * n],
                                MatLayout::transposed(cin, n),
                                &mut p,
                                MatLayout::row_major(cout, cin),
                                true,
                            );
                        }
                        p
                    })
                    .collect();
                let mut gw = vec![T::zero(); cout * cin];
                for p in partials {
                    gw.iter_mut().zip(p).for_each(|(a, v)| *a += v);
                }
                grads.accumulate(w, &gw);
            }
            if grads.wants(b) {
                let mut gb = vec![T::zero(); cout];
                for (i, row) in g.chunks(n).enumerate() {
                    gb[i % cout] += row.iter().copied().sum::<T>();
                }
                grads.accumulate(b, &gb);
            }
        }))
    }

    /// Batch normalization over every axis except axis 1 (channels).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats<T>,
        mode: NormMode,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("batch_norm", format!("rank {} < 2", shape.len())));
        }
        let outer = shape[0];
        let ch = shape[1];
        let inner: usize = shape[2..].iter().product();
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(shape_err(
                "batch_norm",
                format!("{ch} channels, gamma {:?}", self.shape(gamma)),
            ));
        }
        if running.mean.len() != ch || running.var.len() != ch {
            return Err(shape_err("batch_norm", "running statistics length"));
        }
        let count = outer * inner;
        if count == 0 {
            return Err(Error::Empty("batch_norm"));
        }
        let xd = self.data(x);
        let eps = T::of(BN_EPS);
        let (mean, var) = match mode {
            NormMode::Train => {
                let stats: Vec<(T, T)> = (0..ch)
                    .into_par_iter()
                    .map(|c| channel_stats(xd, outer, ch, inner, c))
                    .collect();
                let mean: Vec<T> = stats.iter().map(|s| s.0).collect();
                let var: Vec<T> = stats.iter().map(|s| s.1).collect();
                let mom = T::of(BN_MOMENTUM);
                let unbias = if count > 1 {
                    T::of(count as f64 / (count - 1) as f64)
                } else {
                    T::one()
                };
                for c in 0..ch {
                    running.mean[c] = (T::one() - mom) * running.mean[c] + mom * mean[c];
                    running.var[c] = (T::one() - mom) * running.var[c] + mom * var[c] * unbias;
                }
                (mean, var)
            }
            NormMode::Eval => (running.mean.clone(), running.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.data(gamma), self.data(beta));
        // One task per outer index; within it channel c owns
        // elements [c * inner, (c + 1) * inner).
        let chunk = ch * inner;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        xhat.par_chunks_mut(chunk)
            .zip(out.par_chunks_mut(chunk))
            .zip(xd.par_chunks(chunk))
            .for_each(|((h, o), xs)| {
                for (i, ((hv, ov), &xv)) in h.iter_mut().zip(o.iter_mut()).zip(xs).enumerate() {
                    let c = i / inner;
                    *hv = (xv - mean[c]) * inv_std[c];
                    *ov = gd[c] * *hv + bd[c];
                }
            });
        let out = DenseTensor::new(shape, out)?;
        Ok(self.push(out, &[x, gamma, beta], move |tape, g, grads| {
            let gd = tape.data(gamma);
            // Per-channel sums of dy and dy * xhat.
            let sums: Vec<(T, T)> = (0..ch)
                .into_par_iter()
                .map(|c| {
                    let mut s = (T::zero(), T::zero());
                    for a in 0..outer {
                        let base = (a * ch + c) * inner;
                        for r in base..base + inner {
                            s.0 += g[r];
                            s.1 += g[r] * xhat[r];
                        }
                    }
                    s
                })
                .collect();
            if grads.wants(x) {
                let n = T::of(count as f64);
                let mut gx = vec![T::zero(); g.len()];
                gx.par_chunks_mut(chunk)
                    .zip(g.par_chunks(chunk))
                    .zip(xhat.par_chunks(chunk))
                    .for_each(|((o, gs), hs)| {
                        for (i, ((ov, &gv), &hv)) in o.iter_mut().zip(gs).zip(hs).enumerate() {
                            let c = i / inner;
                            let scale = gd[c] * inv_std[c];
                            *ov = match mode {
                                NormMode::Train => {
                                    scale * (gv - sums[c].0 / n - hv * sums[c].1 / n)
                                }
                                NormMode::Eval => scale * gv,
                            };
                        }
                    });
                grads.accumulate(x, &gx);
            }
            if grads.wants(gamma) {
                let gg: Vec<T> = sums.iter().map(|s| s.1).collect();
                grads.accumulate(gamma, &gg);
            }
            if grads.wants(beta) {
                let gb: Vec<T> = sums.iter().map(|s| s.0).collect();
                grads.accumulate(beta, &gb);
            }
        }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<T> = self
            .data(x)
            .par_iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let out = DenseTensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.push(out, &[x], move |tape, g, grads| {
            let xd = tape.data(x);
            if let Some(slot) = grads.slot(x) {
                slot.par_iter_mut()
                    .zip(g.par_iter())
                    .zip(xd.par_iter())
                    .for_each(|((s, &gv), &xv)| {
                        if xv > T::zero() {
                            *s += gv;
                        }
                    });
            }
        })
    }

    /// Per-channel maximum over the point axis of `x[B x C x N]`.
    /// The gradient goes to the lowest-index maximizer.
    pub fn max_over_points(&mut self, x: Var) -> Result<Var> {
        let &[batch, ch, n] = self.shape(x) else {
            return Err(shape_err("max_over_points", "expected rank 3"));
        };
        if n == 0 {
            return Err(Error::Empty("max_over_points"));
        }
        let (vals, arg): (Vec<T>, Vec<usize>) = self
            .data(x)
            .par_chunks(n)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = i;
                    }
                }
                (row[best], best)
            })
            .unzip();
        let out = DenseTensor::new([batch, ch], vals)?;
        Ok(self.push(out, &[x], move |_, g, grads| {
            if let Some(slot) = grads.slot(x) {
                for (r, (&a, &gv)) in arg.iter().zip(g).enumerate() {
                    slot[r * n + a] += gv;
                }
            }
        }))
    }

    /// Mean negative log-softmax of the labelled class.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let &[batch, classes] = self.shape(logits) else {
            return Err(shape_err("cross_entropy", "logits must be rank 2"));
        };
        if labels.len() != batch {
            return Err(shape_err(
                "cross_entropy",
                format!("{} labels for {} rows", labels.len(), batch),
            ));
        }
        if batch == 0 {
            return Err(Error::Empty("cross_entropy"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index {
                what: "class label",
                index: bad,
                limit: classes,
            });
        }
        let ld = self.data(logits);
        let mut probs = vec![T::zero(); batch * classes];
        let mut loss = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &ld[i * classes..(i + 1) * classes];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lz = z.ln();
            loss += lz - (row[label] - mx);
            for (p, &v) in probs[i * classes..].iter_mut().zip(row) {
                *p = (v - mx).exp() / z;
            }
        }
        let n = T::of(batch as f64);
        let labels = labels.to_vec();
        Ok(self.push(
            DenseTensor::scalar(loss / n),
            &[logits],
            move |_, g, grads| {
                if let Some(slot) = grads.slot(logits) {
                    for (i, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let mut d = probs[i * classes + c];
                            if c == label {
                                d -= T::one();
                            }
                            slot[i * classes + c] += g[0] * d / n;
                        }
                    }
                }
            },
        ))
    }

    /// Row lookup into an embedding table `[rows x dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let rows: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
        self.gather_rows(table, &rows)
    }
}

fn channel_stats<T: Scalar>(xd: &[T], outer: usize, ch: usize, inner: usize, c: usize) -> (T, T) {
    let n = T::of((outer * inner) as f64);
    let mut sum = T::zero();
    for a in 0..outer {
        let base = (a * ch + c) * inner;
        sum += xd[base..base + inner].iter().copied().sum::<T>();
    }
    let mean = sum / n;
    let mut sq = T::zero();
    for a in 0..outer {
        let base = (a * ch + c) * inner;
        for &v in &xd[base..base + inner] {
            sq += (v - mean) * (v - mean);
        }
    }
    (mean, sq / n)
}
