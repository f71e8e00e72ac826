//! Plain (non-recording) numerical kernels shared by the tape and by
//! inference-only code paths.

use crate::error::{Error, Result};
use crate::nn::Tensor2;

/// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax. Entries equal to `-inf` are treated as masked and map to
/// exactly zero; a fully masked row becomes all zeros.
pub fn row_softmax(m: &Tensor2) -> Result<Tensor2> {
    if m.is_empty() {
        return Err(Error::invalid("row_softmax of an empty matrix"));
    }
    let mut out = Tensor2::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let src = m.row(i);
        if let Some(bad) = src.iter().find(|v| v.is_nan() || **v == f64::INFINITY) {
            return Err(Error::invalid(format!(
                "row_softmax: row {i} contains {bad}"
            )));
        }
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let dst = out.row_mut(i);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = if s == f64::NEG_INFINITY {
                0.0
            } else {
                (s - max).exp()
            };
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    Ok(out)
}

/// Outcome of [`bce_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BceValue {
    pub loss: f64,
    /// Number of entries that entered the mean.
    pub count: usize,
    /// Set when every entry was masked out; `loss` is then 0.
    pub all_masked: bool,
}

/// Mean binary cross-entropy over the entries where `mask` is nonzero
/// (all entries when `mask` is `None`).
pub fn bce_loss(pred: &Tensor2, target: &Tensor2, mask: Option<&Tensor2>) -> Result<BceValue> {
    if pred.shape() != target.shape() {
        return Err(Error::invalid(format!(
            "bce_loss: pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if let Some(m) = mask {
        if m.shape() != pred.shape() {
            return Err(Error::invalid("bce_loss: mask shape mismatch"));
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (k, (&p, &y)) in pred.data().iter().zip(target.data()).enumerate() {
        if mask.is_some_and(|m| m.data()[k] == 0.0) {
            continue;
        }
        total += bce_term(p, y);
        count += 1;
    }
    if count == 0 {
        log::warn!("bce_loss: every entry is masked, loss defined as 0");
        return Ok(BceValue {
            loss: 0.0,
            count: 0,
            all_masked: true,
        });
    }
    Ok(BceValue {
        loss: total / count as f64,
        count,
        all_masked: false,
    })
}

#[inline]
pub(crate) fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// d/dp of [`bce_term`]; zero where the clamp is active.
#[inline]
pub(crate) fn bce_term_grad(p: f64, y: f64) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
        return 0.0;
    }
    (p - y) / (p * (1.0 - p))
}
