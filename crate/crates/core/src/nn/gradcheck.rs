use crate::error::{Error, Result};
use crate::nn::Tensor2;

/// An ordered, named collection of parameter tensors.
pub trait ParamSet {
    fn param_names(&self) -> Vec<String>;
    fn params(&self) -> Vec<&Tensor2>;
    fn params_mut(&mut self) -> Vec<&mut Tensor2>;
}

impl ParamSet for Vec<Tensor2> {
    fn param_names(&self) -> Vec<String> {
        (0..self.len()).map(|i| format!("param{i}")).collect()
    }

    fn params(&self) -> Vec<&Tensor2> {
        self.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        self.iter_mut().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name and flat entry index of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Relative disagreement used by [`finite_diff_check`].
#[inline]
pub fn relative_error(backprop: f64, finite_diff: f64) -> f64 {
    (backprop - finite_diff).abs() / (backprop.abs() + finite_diff.abs()).max(1e-8)
}

/// Compares the backprop gradient returned by `loss_fn` against central
/// differences on every parameter entry.
///
/// `loss_fn` returns the loss and its gradient (one tensor per parameter, in
/// [`ParamSet::params`] order). Parameters are restored before returning.
pub fn finite_diff_check<P, F>(params: &mut P, eps: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    P: ParamSet,
    F: FnMut(&P) -> Result<(f64, Vec<Tensor2>)>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::invalid(format!(
            "finite-difference step {eps} outside [1e-6, 1e-4]"
        )));
    }
    let (_, analytic) = loss_fn(params)?;
    let names = params.param_names();
    let shapes: Vec<(usize, usize)> = params.params().iter().map(|t| t.shape()).collect();
    if analytic.len() != shapes.len() || analytic.iter().zip(&shapes).any(|(g, s)| g.shape() != *s)
    {
        return Err(Error::invalid("gradient list does not match parameters"));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for (ti, (name, g)) in names.iter().zip(&analytic).enumerate() {
        for k in 0..g.data().len() {
            let orig = params.params()[ti].data()[k];
            params.params_mut()[ti].data_mut()[k] = orig + eps;
            let plus = loss_fn(params).map(|r| r.0);
            params.params_mut()[ti].data_mut()[k] = orig - eps;
            let minus = loss_fn(params).map(|r| r.0);
            params.params_mut()[ti].data_mut()[k] = orig;
            let fd = (plus? - minus?) / (2.0 * eps);
            let err = relative_error(g.data()[k], fd);
            if err > report.max_rel_error || report.worst.is_none() {
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                }
                report.worst = Some((name.clone(), k));
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}
