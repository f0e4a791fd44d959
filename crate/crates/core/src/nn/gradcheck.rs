//! Central finite-difference verification of [`Graph::backward`].

use super::graph::{Graph, NodeId};
use super::params::{ParamSet, PartitionSet};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// Coordinates compared (|g| above the floor).
    pub checked: usize,
    pub max_rel_error: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Compares analytic gradients of the scalar built by `build` against central
/// differences with step `h`, over every coordinate of the trainable
/// parameters. Coordinates where both gradients are below `floor` are skipped.
pub fn check<F>(params: &ParamSet, trainable: &PartitionSet, h: f64, rel_tol: f64, floor: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    let analytic = {
        let mut g = Graph::new(params, trainable);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::inference(p);
        let loss = build(&mut g)?;
        Ok(g.value(loss).item())
    };
    let mut probe = params.clone();
    let mut report = GradCheckReport::default();
    for id in 0..params.len() {
        if !trainable.contains(&params.entry(id).partition) {
            continue;
        }
        let grad = analytic.get(id);
        for k in 0..params.entry(id).value.len() {
            let orig = params.entry(id).value.data()[k];
            probe.value_mut(id).data_mut()[k] = orig + h;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[k] = orig - h;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.map_or(0.0, |g| g.data()[k]);
            if a.abs() <= floor && numeric.abs() <= floor {
                continue;
            }
            report.checked += 1;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > rel_tol {
                report.mismatches.push(GradMismatch {
                    param: params.entry(id).name.clone(),
                    index: k,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
