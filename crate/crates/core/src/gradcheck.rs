//! Central finite-difference gradient checker (64-bit).

use crate::error::{ensure, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Max over elements of `|analytic - fd| / max(|analytic|, |fd|, 1e-8)` for a
/// scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_inputs(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// As [`grad_check`], over several input tensors at once.
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], track: bool| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| tape.leaf_from(t.shape(), t.data().to_vec(), track))
            .collect::<Result<Vec<_>>>()?;
        let y = f(&mut tape, &vars)?;
        ensure!(
            tape.numel(y) == 1,
            Contract,
            "gradient check needs a scalar function, got shape {:?}",
            tape.shape(y)
        );
        Ok((tape, vars, y))
    };

    let (mut tape, vars, y) = eval(inputs, true)?;
    tape.backward(y)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + eps;
            let (tp, _, yp) = eval(&work, false)?;
            work[which].data_mut()[i] = orig - eps;
            let (tm, _, ym) = eval(&work, false)?;
            work[which].data_mut()[i] = orig;
            let fd = (tp.scalar(yp) - tm.scalar(ym)) / (2.0 * eps);
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
