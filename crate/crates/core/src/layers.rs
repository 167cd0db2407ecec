//! Small building blocks shared by the encoder and the relation learner.

use mafea_tensor::{Tape, Var};

use crate::error::Result;
use crate::params::Bound;

pub(crate) const LN_EPS: f64 = 1e-5;

/// `x . prefix.w + prefix.b`
pub(crate) fn linear(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    Ok(tape.add_bias(y, b)?)
}

pub(crate) fn norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let g = p.var(&format!("{prefix}.gamma"))?;
    let b = p.var(&format!("{prefix}.beta"))?;
    Ok(tape.layer_norm(x, g, b, LN_EPS)?)
}

/// Two-layer GELU perceptron, `prefix.fc1` then `prefix.fc2`.
pub(crate) fn ffn(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, p, &format!("{prefix}.fc1"), x)?;
    let h = tape.gelu(h)?;
    linear(tape, p, &format!("{prefix}.fc2"), h)
}
