//! Fully connected subject graph: learned edge affinities, affinity-weighted
//! node update and the residual individual representation.
//!
//! Each operation has a recording variant (`*_var`) used by the model's
//! forward pass, and a plain variant that evaluates the same computation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{MlpParams, MlpVars, Tape, Tensor2, Var};

/// Row-normalized edge affinities together with their raw logits.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    /// `<F1(f_u), F2(f_v)>` before masking.
    pub logits: Tensor2,
    /// Row softmax of `logits + mask`.
    pub e: Tensor2,
}

/// Which operands enter `n^I = f + f̂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualFlags {
    pub use_f: bool,
    pub use_fhat: bool,
}

impl Default for ResidualFlags {
    fn default() -> Self {
        Self {
            use_f: true,
            use_fhat: true,
        }
    }
}

fn check_mask(mask: Option<&Tensor2>, n: usize) -> Result<()> {
    match mask {
        Some(m) if m.shape() != (n, n) => Err(Error::invalid(format!(
            "mask shape {:?} does not match {n} subjects",
            m.shape()
        ))),
        _ => Ok(()),
    }
}

/// Returns `(logits, E)` handles.
pub fn edge_affinity_var(
    tape: &mut Tape,
    f: Var,
    f1: &MlpVars,
    f2: &MlpVars,
    additive_mask: Option<&Tensor2>,
) -> Result<(Var, Var)> {
    check_mask(additive_mask, tape.value(f).rows())?;
    let a = f1.forward(tape, f)?;
    let b = f2.forward(tape, f)?;
    if tape.value(a).cols() != tape.value(b).cols() {
        return Err(Error::invalid("F1 and F2 output dims differ"));
    }
    let logits = tape.matmul_nt(a, b)?;
    let e = tape.masked_softmax(logits, additive_mask)?;
    Ok((logits, e))
}

pub fn node_update_var(tape: &mut Tape, f: Var, e: Var, fn_: &MlpVars) -> Result<Var> {
    let mixed = tape.matmul(e, f)?;
    fn_.forward(tape, mixed)
}

pub fn individual_repr_var(
    tape: &mut Tape,
    f: Var,
    fhat: Var,
    flags: ResidualFlags,
) -> Result<Var> {
    match (flags.use_f, flags.use_fhat) {
        (true, true) => tape.add(f, fhat),
        (true, false) => Ok(f),
        (false, true) => Ok(fhat),
        (false, false) => Err(Error::config("individual representation has no operand")),
    }
}

pub fn edge_affinity(
    f: &Tensor2,
    f1: &MlpParams,
    f2: &MlpParams,
    additive_mask: Option<&Tensor2>,
) -> Result<AffinityMatrix> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let (v1, v2) = (f1.register(&mut tape), f2.register(&mut tape));
    let (logits, e) = edge_affinity_var(&mut tape, fv, &v1, &v2, additive_mask)?;
    Ok(AffinityMatrix {
        logits: tape.value(logits).clone(),
        e: tape.value(e).clone(),
    })
}

/// `f̂_u = Fn(Σ_v e_{u,v} f_v)`.
pub fn node_update(f: &Tensor2, e: &Tensor2, fn_: &MlpParams) -> Result<Tensor2> {
    fn_.forward(&e.matmul(f)?)
}

pub fn individual_repr(f: &Tensor2, fhat: &Tensor2, flags: ResidualFlags) -> Result<Tensor2> {
    if f.shape() != fhat.shape() {
        return Err(Error::invalid("f and f̂ shapes differ"));
    }
    match (flags.use_f, flags.use_fhat) {
        (true, true) => f.add(fhat),
        (true, false) => Ok(f.clone()),
        (false, true) => Ok(fhat.clone()),
        (false, false) => Err(Error::config("individual representation has no operand")),
    }
}
