//! Model evaluation on a dataset.

use crate::datagen::Dataset;
use crate::diffcore::ModelState;
use crate::metrics::{argmax_rows, balanced_accuracy, confusion_matrix, GroupSpec, MetricsReport};
use crate::Result;

pub fn evaluate(state: &ModelState, ds: &Dataset, groups: &GroupSpec) -> Result<MetricsReport> {
    let scores = state.predict_proba(&ds.features_f64(), ds.len())?;
    MetricsReport::from_scores(&scores, &ds.labels, ds.num_classes, groups)
}

/// Balanced accuracy of clean-input student predictions.
pub fn bacc(state: &ModelState, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let scores = state.predict_proba(&ds.features_f64(), ds.len())?;
    let pred = argmax_rows(&scores, ds.num_classes);
    Ok(balanced_accuracy(&confusion_matrix(&ds.labels, &pred, ds.num_classes)?))
}
