use crate::error::Result;
use crate::model::Model;
use crate::params::ParamSet;

use super::backward::{batch_loss, loss_and_gradients, Batch};

/// Gradient magnitudes below this are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub worst: String,
    pub entries: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares every analytic parameter gradient with central differences of the
/// mean batch loss. Dropout is off.
pub fn gradcheck(model: &Model, batch: &Batch, step: f64) -> Result<GradcheckReport> {
    let (_, grads) = loss_and_gradients(model, batch, 0.0, None)?;
    let analytic = grads.named_tensors();
    let mut work = model.clone();
    let mut tensors = Vec::with_capacity(analytic.len());
    for (k, (name, g)) in analytic.iter().enumerate() {
        let mut check = TensorCheck { name: name.clone(), entries: g.len(), max_rel_error: 0.0, max_abs_error: 0.0 };
        for j in 0..g.len() {
            let orig = work.params_mut().tensors_mut()[k].data()[j];
            work.params_mut().tensors_mut()[k].data_mut()[j] = orig + step;
            let plus = batch_loss(&work, batch)?;
            work.params_mut().tensors_mut()[k].data_mut()[j] = orig - step;
            let minus = batch_loss(&work, batch)?;
            work.params_mut().tensors_mut()[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = g.data()[j];
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric));
        }
        tensors.push(check);
    }
    let worst = tensors
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .cloned()
        .expect("model has parameters");
    Ok(GradcheckReport {
        entries: tensors.iter().map(|t| t.entries).sum(),
        max_rel_error: worst.max_rel_error,
        worst: worst.name,
        tensors,
    })
}
