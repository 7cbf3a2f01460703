//! Parameter binding for one forward pass plus the small dense layers
//! built on top of the tape.

use rand::Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor, Gradients, NormMode, ParamId, ParamStore, RunningStats, Tape, Var};

/// One forward (and optionally backward) pass over a [`ParamStore`].
///
/// Parameters are bound to tape leaves on first use. Batch-norm running
/// statistics computed in training mode are collected and only written
/// back by [`apply_stat_updates`], so forward passes borrow the store
/// immutably.
pub struct Session<'s, T: Scalar> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: NormMode,
    grad: bool,
    stat_updates: Vec<(ParamId, Vec<T>)>,
}

impl<'s, T: Scalar> Session<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: NormMode, grad: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            grad,
            stat_updates: Vec::new(),
        }
    }

    pub fn training(store: &'s ParamStore<T>) -> Self {
        Self::new(store, NormMode::Train, true)
    }

    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self::new(store, NormMode::Eval, false)
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let req = self.grad && self.store.is_trainable(id);
        let v = self.tape.leaf(self.store.get(id).clone(), req);
        self.bound[id.index()] = Some(v);
        v
    }

    /// The bias parameter, or a zero constant of width `n` when absent.
    pub fn bias(&mut self, id: Option<ParamId>, n: usize) -> Var {
        match id {
            Some(id) => self.param(id),
            None => self.tape.constant(DenseTensor::zeros([n])),
        }
    }

    /// Gradients of every bound trainable parameter.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Vec<T>)> {
        self.store
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let g = match self.bound[id.index()] {
                    Some(v) => grads.get_or_zeros(v),
                    None => vec![T::zero(); self.store.get(id).numel()],
                };
                (id, g)
            })
            .collect()
    }

    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Vec<T>)> {
        std::mem::take(&mut self.stat_updates)
    }
}

pub fn apply_stat_updates<T: Scalar>(store: &mut ParamStore<T>, updates: Vec<(ParamId, Vec<T>)>) {
    for (id, v) in updates {
        store.get_mut(id).data_mut().copy_from_slice(&v);
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(1 / fan_in)`.
    FanIn,
    Zero,
}

pub(crate) fn init_tensor<T: Scalar, R: Rng>(
    shape: &[usize],
    fan_in: usize,
    init: Init,
    rng: &mut R,
) -> DenseTensor<T> {
    let n: usize = shape.iter().product();
    match init {
        Init::Zero => DenseTensor::zeros(shape.to_vec()),
        Init::FanIn => {
            let bound = (1.0 / fan_in.max(1) as f64).sqrt();
            let data = (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect();
            DenseTensor::new(shape.to_vec(), data).expect("shape product")
        }
    }
}

/// Fully connected layer `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        Self::build(store, name, fan_in, fan_out, init, true, rng)
    }

    /// Without a bias term, for layers followed by batch norm.
    pub fn unbiased<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self::build(store, name, fan_in, fan_out, Init::FanIn, false, rng)
    }

    fn build<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(&[fan_in, fan_out], fan_in, init, rng),
            true,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                init_tensor(&[fan_out], fan_in, init, rng),
                true,
            )
        });
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let out = s.tape.shape(w)[1];
        let b = s.bias(self.bias, out);
        s.tape.affine(x, w, b)
    }
}

/// Kernel-size-1 convolution over `[B x C x N]`.
#[derive(Clone, Debug)]
pub struct PointwiseConv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl PointwiseConv {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        Self::build(store, name, cin, cout, true, rng)
    }

    /// Without a bias term, for layers followed by batch norm.
    pub fn unbiased<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        Self::build(store, name, cin, cout, false, rng)
    }

    fn build<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(&[cout, cin], cin, Init::FanIn, rng),
            true,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                init_tensor(&[cout], cin, Init::FanIn, rng),
                true,
            )
        });
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let out = s.tape.shape(w)[0];
        let b = s.bias(self.bias, out);
        s.tape.pointwise_conv1d(x, w, b)
    }
}

/// Batch normalization with learnable affine and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), DenseTensor::full([channels], T::one()), true),
            beta: store.add(format!("{name}.beta"), DenseTensor::zeros([channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), DenseTensor::zeros([channels]), false),
            running_var: store.add(
                format!("{name}.running_var"),
                DenseTensor::full([channels], T::one()),
                false,
            ),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        let mut stats = RunningStats {
            mean: s.store.get(self.running_mean).data().to_vec(),
            var: s.store.get(self.running_var).data().to_vec(),
        };
        let mode = s.mode;
        let y = s.tape.batch_norm(x, g, b, &mut stats, mode)?;
        if mode == NormMode::Train {
            s.stat_updates.push((self.running_mean, stats.mean));
            s.stat_updates.push((self.running_var, stats.var));
        }
        Ok(y)
    }
}
