//! Reverse-mode differentiation over [`DenseTensor`] values.
//!
//! Nodes are appended in execution order, so replaying them back to front
//! visits every node after all of its consumers.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::DenseTensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&Tape<T>, &[T], &mut Gradients<T>) + Send + Sync>;

pub struct Tape<T: Scalar> {
    values: Vec<DenseTensor<T>>,
    requires: Vec<bool>,
    backward: Vec<Option<BackwardFn<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            requires: Vec::new(),
            backward: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Records an input value.
    pub fn leaf(&mut self, value: DenseTensor<T>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.requires.push(requires_grad);
        self.backward.push(None);
        Var(self.values.len() - 1)
    }

    /// Records a constant (never receives a gradient).
    pub fn constant(&mut self, value: DenseTensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &DenseTensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.values[v.0].data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Appends the result of an operation. The backward closure is kept
    /// only when some input participates in differentiation.
    pub(crate) fn push<F>(&mut self, value: DenseTensor<T>, inputs: &[Var], backward: F) -> Var
    where
        F: Fn(&Tape<T>, &[T], &mut Gradients<T>) + Send + Sync + 'static,
    {
        let req = inputs.iter().any(|v| self.requires[v.0]);
        self.values.push(value);
        self.requires.push(req);
        self.backward
            .push(if req { Some(Box::new(backward)) } else { None });
        Var(self.values.len() - 1)
    }

    /// Back-propagates from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.values[out.0].numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!(
                    "seed must be a single element, got shape {:?}",
                    self.values[out.0].shape()
                ),
            });
        }
        self.backward_with(out, vec![T::one()])
    }

    /// Back-propagates a caller-provided output gradient.
    pub fn backward_with(&self, out: Var, seed: Vec<T>) -> Result<Gradients<T>> {
        if seed.len() != self.values[out.0].numel() {
            return Err(Error::Shape {
                op: "backward",
                detail: "seed length differs from output".into(),
            });
        }
        let mut grads = Gradients {
            slots: vec![None; self.values.len()],
            requires: self.requires.clone(),
            sizes: self.values.iter().map(|v| v.numel()).collect(),
        };
        if !self.requires[out.0] {
            return Ok(grads);
        }
        grads.slots[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(f) = &self.backward[i] else { continue };
            let Some(g) = grads.slots[i].take() else { continue };
            f(self, &g, &mut grads);
            grads.slots[i] = Some(g);
        }
        Ok(grads)
    }
}

/// Gradient buffers produced by [`Tape::backward`], one per recorded value.
pub struct Gradients<T> {
    slots: Vec<Option<Vec<T>>>,
    requires: Vec<bool>,
    sizes: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Whether `v` takes part in differentiation.
    pub fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Mutable zero-initialized buffer for `v`, or `None` if `v` does not
    /// require a gradient.
    pub fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.requires[v.0] {
            return None;
        }
        let n = self.sizes[v.0];
        Some(
            self.slots[v.0]
                .get_or_insert_with(|| vec![T::zero(); n])
                .as_mut_slice(),
        )
    }

    pub fn accumulate(&mut self, v: Var, g: &[T]) {
        if let Some(s) = self.slot(v) {
            for (a, &b) in s.iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    /// The gradient of `v`, `None` if `v` did not require one or was not
    /// reached from the output.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.slots[v.0].as_deref()
    }

    /// Gradient of `v`, zeros when it was not reached.
    pub fn get_or_zeros(&self, v: Var) -> Vec<T> {
        self.get(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); self.sizes[v.0]])
    }
}
