//! Central finite-difference check of tape gradients.

use alloc::vec::Vec;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over all entries of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(alloc::string::String, usize)>,
    pub entries_checked: usize,
}

fn eval<F>(store: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = f(&mut tape, store)?;
    tape.value(root)
        .item()
        .ok_or_else(|| Error::Contract("grad_check needs a scalar-valued function".into()))
}

/// Compares reverse-mode gradients of a scalar function of `store` against
/// central differences with step `h`.
///
/// `f` must be deterministic: any masks or random draws it uses have to be
/// frozen. Parameter values are restored before returning; gradients in the
/// store are overwritten with the analytic ones.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    {
        let mut tape = Tape::new();
        let root = f(&mut tape, store)?;
        tape.backward(root, store)?;
    }
    let analytic: Vec<Tensor> = store.iter().map(|p| p.grad.clone()).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        let id = crate::autodiff::ParamId(pi);
        for j in 0..grad.numel() {
            let original = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = original + h;
            let plus = eval(store, &mut f);
            store.get_mut(id).value.data_mut()[j] = original - h;
            let minus = eval(store, &mut f);
            store.get_mut(id).value.data_mut()[j] = original;
            let numeric = (plus? - minus?) / (2.0 * h);
            let err = (grad.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            report.entries_checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), j));
            }
        }
    }
    Ok(report)
}
