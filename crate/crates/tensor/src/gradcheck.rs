//! Central finite-difference checks against the tape.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute rather than
/// relative terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// `(f(x0 + eps) - f(x0 - eps)) / 2 eps`.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x0: f64, eps: f64) -> Result<f64> {
    Ok((f(x0 + eps)? - f(x0 - eps)?) / (2.0 * eps))
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the tape gradient of the scalar `f(x)` with central differences
/// over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let x0 = x.data()[i];
        let numeric = central_difference(
            |v| {
                probe.data_mut()[i] = v;
                eval(&probe)
            },
            x0,
            eps,
        )?;
        probe.data_mut()[i] = x0;
        let a = analytic.data()[i];
        let e = rel_err(a, numeric);
        if e > report.max_rel_err || i == 0 {
            report = GradCheck {
                max_rel_err: e.max(report.max_rel_err),
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}
