//! Central finite-difference gradient checking at 64-bit precision.

use crate::error::Result;
use crate::layers::Session;
use crate::tensor::{DenseTensor, NormMode, ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Relative error per input, `|g_a - g_n| / max(|g_a|, |g_n|)` in the
    /// Euclidean norm over that input's entries.
    pub per_input: Vec<f64>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// Deterministic projection weights so non-scalar outputs are checked
/// through a generic linear functional rather than a plain sum.
pub fn probe_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 + ((i as f64 * 0.618_033_988_7).fract())).collect()
}

/// Compares reverse-mode gradients of `<probe, f(inputs)>` with central
/// differences of step `h` for every input element.
pub fn check_gradients<F>(inputs: &[DenseTensor<f64>], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[DenseTensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        let w = probe_weights(tape.value(out).numel());
        Ok(tape.data(out).iter().zip(&w).map(|(a, b)| a * b).sum())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let w = probe_weights(tape.value(out).numel());
    let grads = tape.backward_with(out, w)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v);
        let mut num = vec![0.0; analytic.len()];
        for (j, slot) in num.iter_mut().enumerate() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        per_input.push(rel_err(&analytic, &num));
    }
    Ok(GradReport { per_input })
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Like [`check_gradients`], but differentiates with respect to the
/// trainable entries of `store`. At most `per_param` evenly spaced
/// entries of each tensor are perturbed; the report has one entry per
/// trainable tensor, in store order.
pub fn check_param_gradients<F>(
    store: &ParamStore<f64>,
    mode: NormMode,
    h: f64,
    per_param: usize,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Session<'_, f64>) -> Result<Var>,
{
    let eval = |st: &ParamStore<f64>| -> Result<f64> {
        let mut s = Session::new(st, mode, false);
        let out = f(&mut s)?;
        let w = probe_weights(s.tape.value(out).numel());
        Ok(s.tape.data(out).iter().zip(&w).map(|(a, b)| a * b).sum())
    };

    let mut s = Session::new(store, mode, true);
    let out = f(&mut s)?;
    let w = probe_weights(s.tape.value(out).numel());
    let grads = s.tape.backward_with(out, w)?;
    let analytic = s.param_grads(&grads);

    let mut work = store.clone();
    let mut per_input = Vec::with_capacity(analytic.len());
    for (id, g) in analytic {
        let n = g.len();
        let stride = n.div_ceil(per_param.max(1)).max(1);
        let picks: Vec<usize> = (0..n).step_by(stride).collect();
        let mut num = Vec::with_capacity(picks.len());
        for &j in &picks {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            num.push((up - down) / (2.0 * h));
        }
        let ana: Vec<f64> = picks.iter().map(|&j| g[j]).collect();
        per_input.push(rel_err(&ana, &num));
    }
    Ok(GradReport { per_input })
}
