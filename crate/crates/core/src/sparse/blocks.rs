//! Composite sparse layers: multi-scale temporal convolution and the
//! residual bottleneck block.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Session};
use crate::scalar::Scalar;
use crate::tensor::ParamStore;

use super::conv::SubmConv;
use super::tensor::SparseVar;

/// Unbiased submanifold convolution followed by batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: SubmConv,
    pub norm: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        extent: [usize; 4],
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: SubmConv::unbiased(store, &format!("{name}.conv"), extent, cin, cout, rng)?,
            norm: BatchNorm::new(store, &format!("{name}.bn"), cout),
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: &SparseVar) -> Result<SparseVar> {
        let y = self.conv.forward(s, x)?;
        let n = self.norm.forward(s, y.feats)?;
        let feats = s.tape.relu(n);
        Ok(SparseVar {
            layout: y.layout,
            feats,
        })
    }
}

/// Parallel purely temporal convolutions `(k, 1, 1, 1)`, each mapping
/// `C -> C / branches`, concatenated back to `C` channels. Branches carry
/// no bias; the block is meant to be followed by batch norm.
#[derive(Clone, Debug)]
pub struct MsTcn {
    pub branches: Vec<SubmConv>,
}

impl MsTcn {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kernel_sizes: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if kernel_sizes.is_empty() || !channels.is_multiple_of(kernel_sizes.len()) {
            return Err(Error::Config(format!(
                "MS-TCN: {channels} channels not divisible into {} branches",
                kernel_sizes.len()
            )));
        }
        let width = channels / kernel_sizes.len();
        let branches = kernel_sizes
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                SubmConv::unbiased(store, &format!("{name}.branch{i}"), [k, 1, 1, 1], channels, width, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self { branches })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: &SparseVar) -> Result<SparseVar> {
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(s, x).map(|y| y.feats))
            .collect::<Result<Vec<_>>>()?;
        let feats = s.tape.concat(&outs, 1)?;
        Ok(SparseVar {
            layout: x.layout.clone(),
            feats,
        })
    }
}

/// Residual bottleneck: `1 (in -> in/2) -> 3^4 (in/2 -> in/2) -> 1 (in/2 -> out)`,
/// each with batch norm and ReLU, plus the block input (through a
/// pointwise channel-matching convolution when `in != out`).
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub reduce: ConvBnRelu,
    pub spatial: ConvBnRelu,
    pub expand: ConvBnRelu,
    pub matching: Option<SubmConv>,
}

impl Bottleneck {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        bottleneck: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if cin == 0 || cout == 0 || bottleneck * 2 != cin {
            return Err(Error::Config(format!(
                "bottleneck {name}: width {bottleneck} must be half of input {cin}"
            )));
        }
        let one = [1; 4];
        Ok(Self {
            reduce: ConvBnRelu::new(store, &format!("{name}.reduce"), one, cin, bottleneck, rng)?,
            spatial: ConvBnRelu::new(store, &format!("{name}.spatial"), [3; 4], bottleneck, bottleneck, rng)?,
            expand: ConvBnRelu::new(store, &format!("{name}.expand"), one, bottleneck, cout, rng)?,
            matching: if cin != cout {
                Some(SubmConv::new(store, &format!("{name}.match"), one, cin, cout, rng)?)
            } else {
                None
            },
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: &SparseVar) -> Result<SparseVar> {
        let h = self.reduce.forward(s, x)?;
        let h = self.spatial.forward(s, &h)?;
        let h = self.expand.forward(s, &h)?;
        let skip = match &self.matching {
            Some(m) => m.forward(s, x)?.feats,
            None => x.feats,
        };
        let feats = s.tape.add(h.feats, skip)?;
        Ok(SparseVar {
            layout: x.layout.clone(),
            feats,
        })
    }
}
