use std::collections::BTreeMap;

use super::{loss_and_gradients, EvidenceWeights, Parameters, TrainExample};
use crate::error::Result;

/// Below this magnitude gradients are compared absolutely.
pub const TINY: f64 = 1e-5;

/// Largest relative error between analytic and central-difference
/// gradients, overall and per parameter group.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub per_group: BTreeMap<String, f64>,
    pub checked: usize,
}

/// `|a - b| / max(|a|, |b|)`, falling back to the absolute difference when
/// both values are below `tiny`, where the ratio is dominated by rounding.
pub fn relative_error(a: f64, b: f64, tiny: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < tiny {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Compare every `stride`-th coordinate of the gradient with central
/// differences of step `h`. Dropout is off throughout.
pub fn gradient_check(
    params: &Parameters,
    batch: &[(&TrainExample, &EvidenceWeights)],
    h: f64,
    stride: usize,
) -> Result<GradCheckReport> {
    let (_, analytic) = loss_and_gradients(params, batch, 0.0)?;
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        per_group: BTreeMap::new(),
        checked: 0,
    };
    for group in &params.layout.groups {
        let mut worst: f64 = 0.0;
        for i in (group.offset..group.offset + group.len).step_by(stride.max(1)) {
            let orig = work.as_slice()[i];
            work.as_mut_slice()[i] = orig + h;
            let (plus, _) = loss_and_gradients(&work, batch, 0.0)?;
            work.as_mut_slice()[i] = orig - h;
            let (minus, _) = loss_and_gradients(&work, batch, 0.0)?;
            work.as_mut_slice()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[i], numeric, TINY);
            worst = worst.max(err);
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_index = i;
            }
            report.checked += 1;
        }
        report.per_group.insert(group.name.clone(), worst);
    }
    Ok(report)
}
