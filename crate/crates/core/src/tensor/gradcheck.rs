//! Central finite-difference checks against tape gradients (64-bit).

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Largest `|g_ad - g_fd| / max(1, |g_fd|)` over every parameter element.
pub fn param_grad_error<F>(store: &ParamStore<f64>, h: f64, loss: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    let grads = tape.backward(l)?;
    let mut analytic = store.clone();
    analytic.zero_grad();
    analytic.accumulate(&grads);

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        for e in 0..store.value(id).numel() {
            let orig = store.value(id).data()[e];
            probe.value_mut(id).data_mut()[e] = orig + h;
            let lp = eval(&probe, &loss)?;
            probe.value_mut(id).data_mut()[e] = orig - h;
            let lm = eval(&probe, &loss)?;
            probe.value_mut(id).data_mut()[e] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let ad = analytic.get(id).grad.data()[e];
            worst = worst.max((ad - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Same check for the gradient with respect to one input tensor.
pub fn input_grad_error<F>(x: &Tensor<f64>, h: f64, loss: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.input_with_grad(x.clone());
    let l = loss(&mut tape, xv)?;
    let grads = tape.backward(l)?;
    let zeros = Tensor::zeros(x.shape().to_vec());
    let ad = grads.wrt(xv).unwrap_or(&zeros).clone();

    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for e in 0..x.numel() {
        let orig = x.data()[e];
        probe.data_mut()[e] = orig + h;
        let lp = eval_input(&probe, &loss)?;
        probe.data_mut()[e] = orig - h;
        let lm = eval_input(&probe, &loss)?;
        probe.data_mut()[e] = orig;
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max((ad.data()[e] - fd).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}

fn eval<F>(store: &ParamStore<f64>, loss: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    Ok(tape.value(l).item())
}

fn eval_input<F>(x: &Tensor<f64>, loss: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let l = loss(&mut tape, xv)?;
    Ok(tape.value(l).item())
}
