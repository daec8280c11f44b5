//! Central-difference verification of tape gradients.

use super::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Outcome of one [`grad_check`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all input elements.
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub tape_grad_at_worst: f64,
    pub fd_grad_at_worst: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Relative error with a small-magnitude floor: elements whose gradients are
/// below the floor are effectively compared absolutely at `tol * floor`.
pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
    const FLOOR: f64 = 1e-2;
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences `(f(x+h) - f(x-h)) / 2h`, elementwise over `x`.
///
/// `f` must rebuild its graph from the leaf it is given; kinks (e.g. relu at
/// exactly zero) are the caller's responsibility — sample inputs from a
/// continuous distribution so they are avoided almost surely.
pub fn grad_check<F, Builder>(f: Builder, x: &Tensor<F>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Scalar,
    Builder: Fn(&mut Tape<F>, TensorId) -> Result<TensorId>,
{
    let eval = |t: &Tensor<F>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(t.clone(), false);
        let out = f(&mut tape, leaf)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::contract(format!(
                "grad_check needs a scalar function, got shape {:?}",
                v.shape
            )));
        }
        let y = v.data[0].as_f64();
        if !y.is_finite() {
            return Err(Error::domain("grad_check: non-finite function value"));
        }
        Ok(y)
    };
    eval(x)?; // fail fast on non-finite f(x)

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let out = f(&mut tape, leaf)?;
    tape.backward(out)?;
    let ad: Vec<f64> = tape
        .grad(leaf)
        .expect("leaf requires grad")
        .iter()
        .map(|v| v.as_f64())
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        tape_grad_at_worst: 0.0,
        fd_grad_at_worst: 0.0,
        tol,
    };
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data[i] = plus.data[i] + F::cast(h);
        let mut minus = x.clone();
        minus.data[i] = minus.data[i] - F::cast(h);
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let e = rel_err(ad[i], fd);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_index = i;
            report.tape_grad_at_worst = ad[i];
            report.fd_grad_at_worst = fd;
        }
    }
    Ok(report)
}
