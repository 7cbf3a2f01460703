//! Frame-wise T-Net: predicts a per-frame `C x C` transform and returns
//! the per-point embedding `x || (T x)`.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::layers::{BatchNorm, Init, Linear, PointwiseConv, Session};
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor, ParamStore, Var};

/// Layer widths of the T-Net stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TNetWidths {
    pub point: [usize; 3],
    pub global: [usize; 2],
}

impl Default for TNetWidths {
    fn default() -> Self {
        Self {
            point: [64, 128, 1024],
            global: [512, 256],
        }
    }
}

#[derive(Clone, Debug)]
pub struct TNet {
    pub channels: usize,
    point: Vec<(PointwiseConv, BatchNorm)>,
    global: Vec<(Linear, BatchNorm)>,
    /// Produces the flattened transform; zero-initialized so the initial
    /// transform is the identity.
    transform: Linear,
}

/// Output of [`TNet::forward`].
pub struct TNetOutput {
    /// `[B' x C x C]`, the predicted transform plus identity.
    pub transform: Var,
    /// `[B' x N x 2C]`, untransformed channels first.
    pub embedding: Var,
}

impl TNet {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        widths: TNetWidths,
        rng: &mut R,
    ) -> Self {
        let mut point = Vec::new();
        let mut cin = channels;
        for (i, &w) in widths.point.iter().enumerate() {
            point.push((
                PointwiseConv::unbiased(store, &format!("{name}.conv{}", i + 1), cin, w, rng),
                BatchNorm::new(store, &format!("{name}.conv{}.bn", i + 1), w),
            ));
            cin = w;
        }
        let mut global = Vec::new();
        for (i, &w) in widths.global.iter().enumerate() {
            global.push((
                Linear::unbiased(store, &format!("{name}.fc{}", i + 1), cin, w, rng),
                BatchNorm::new(store, &format!("{name}.fc{}.bn", i + 1), w),
            ));
            cin = w;
        }
        let transform = Linear::new(
            store,
            &format!("{name}.fc{}", widths.global.len() + 1),
            cin,
            channels * channels,
            Init::Zero,
            rng,
        );
        Self {
            channels,
            point,
            global,
            transform,
        }
    }

    /// `x` is `[B' x N x C]` with all frames of all sequences flattened
    /// into the leading axis.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<TNetOutput> {
        let &[frames, n, c] = s.tape.shape(x) else {
            return Err(shape_err("tnet", format!("input {:?} must be rank 3", s.tape.shape(x))));
        };
        if c != self.channels {
            return Err(shape_err("tnet", format!("{c} channels, expected {}", self.channels)));
        }
        if n == 0 {
            return Err(Error::Empty("tnet frame"));
        }
        let xt = s.tape.transpose12(x)?;
        let mut h = xt;
        for (conv, bn) in &self.point {
            let y = conv.forward(s, h)?;
            let y = bn.forward(s, y)?;
            h = s.tape.relu(y);
        }
        let mut z = s.tape.max_over_points(h)?;
        for (fc, bn) in &self.global {
            let y = fc.forward(s, z)?;
            let y = bn.forward(s, y)?;
            z = s.tape.relu(y);
        }
        let flat = self.transform.forward(s, z)?;
        let t = s.tape.reshape(flat, &[frames, c, c])?;
        let mut eye = DenseTensor::<T>::zeros([frames, c, c]);
        for f in 0..frames {
            for i in 0..c {
                eye.data_mut()[f * c * c + i * c + i] = T::one();
            }
        }
        let eye = s.tape.constant(eye);
        let transform = s.tape.add(t, eye)?;
        let tx = s.tape.bmm(transform, xt)?;
        let cat = s.tape.concat(&[xt, tx], 1)?;
        let embedding = s.tape.transpose12(cat)?;
        Ok(TNetOutput {
            transform,
            embedding,
        })
    }
}
