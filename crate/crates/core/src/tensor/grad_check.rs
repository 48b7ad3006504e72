//! Central-finite-difference verification of tape gradients.

use super::{Result, Tape, Tensor, Var};

/// Default perturbation step.
pub const DEFAULT_H: f64 = 1e-5;

fn run_loss<F>(f: &mut F, params: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).data()[0])
}

/// Relative error between an analytic and a numeric derivative. The
/// denominator is floored so that finite-difference noise on near-zero
/// gradients does not register as disagreement.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compare the tape gradient of `f` against central finite differences
/// `(f(w+h) - f(w-h)) / 2h` for every element of every parameter tensor.
/// Returns the maximum relative error. `f` must be a pure function of
/// `params` (re-seed any randomness inside the closure).
pub fn grad_check<F>(mut f: F, params: &mut [Tensor], h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let limits: Vec<usize> = params.iter().map(|p| p.len()).collect();
    grad_check_inner(&mut f, params, h, &limits)
}

/// Like [`grad_check`] but probing at most `max_per_tensor` evenly spaced
/// elements of each parameter tensor, for models too large to probe fully.
pub fn grad_check_sampled<F>(
    mut f: F,
    params: &mut [Tensor],
    h: f64,
    max_per_tensor: usize,
) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let limits: Vec<usize> = params
        .iter()
        .map(|p| p.len().min(max_per_tensor))
        .collect();
    grad_check_inner(&mut f, params, h, &limits)
}

fn grad_check_inner<F>(f: &mut F, params: &mut [Tensor], h: f64, counts: &[usize]) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params.iter())
        .map(|(&v, p)| {
            grads
                .wrt(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect();
    drop(tape);

    let mut max_err = 0.0f64;
    for pi in 0..params.len() {
        let len = params[pi].len();
        let count = counts[pi];
        for j in 0..count {
            let ei = if count == len { j } else { j * len / count };
            let orig = params[pi].data()[ei];
            params[pi].data_mut()[ei] = orig + h;
            let plus = run_loss(f, params)?;
            params[pi].data_mut()[ei] = orig - h;
            let minus = run_loss(f, params)?;
            params[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            max_err = max_err.max(rel_err(analytic[pi].data()[ei], numeric));
        }
    }
    Ok(max_err)
}
