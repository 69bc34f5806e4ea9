use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{checkpoint, Model};
use crate::params::ParamSet;

/// Elementwise mean of every parameter over `models`.
pub fn average_models(models: &[Model]) -> Result<Model> {
    let first = models.first().ok_or_else(|| Error::InvalidArgument("nothing to average".into()))?;
    if let Some(m) = models.iter().find(|m| m.config() != first.config()) {
        return Err(Error::Config(format!(
            "cannot average checkpoints with different configs ({} vs {})",
            serde_json::to_string(first.config())?,
            serde_json::to_string(m.config())?
        )));
    }
    // Offsets from the first model keep identical inputs bit-exact.
    let k = models.len() as f64;
    let mut mean = first.params().clone();
    let base = first.params().named_tensors();
    let mut offset: Vec<Vec<f64>> = base.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    for m in &models[1..] {
        for ((acc, (_, b)), (_, t)) in offset.iter_mut().zip(&base).zip(m.params().named_tensors()) {
            for ((a, &bv), &tv) in acc.iter_mut().zip(b.data()).zip(t.data()) {
                *a += tv - bv;
            }
        }
    }
    for (t, off) in mean.tensors_mut().into_iter().zip(&offset) {
        for (v, &o) in t.data_mut().iter_mut().zip(off) {
            *v += o / k;
        }
    }
    Model::from_params(first.config().clone(), mean)
}

/// Loads each checkpoint and averages them.
pub fn average_checkpoints<P: AsRef<Path>>(paths: &[P]) -> Result<Model> {
    let models = paths.iter().map(checkpoint::load).collect::<Result<Vec<_>>>()?;
    average_models(&models)
}
