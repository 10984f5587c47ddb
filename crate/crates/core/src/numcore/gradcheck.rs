//! Finite-difference validation of analytic gradients.

use super::graph::DiffGraph;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Outcome of checking one parameter of one graph.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub param: String,
    /// Max over checked coordinates of |analytic - central difference|,
    /// relative to the largest gradient magnitude seen for this parameter.
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Settings for [`finite_diff_check`].
#[derive(Debug, Clone, Copy)]
pub struct FdSettings {
    /// Central-difference step.
    pub h: f64,
    /// Coordinates checked per parameter; tensors larger than this are
    /// subsampled deterministically.
    pub max_coords: usize,
    /// Seed for the coordinate subsample.
    pub seed: u64,
}

impl Default for FdSettings {
    fn default() -> Self {
        FdSettings {
            h: 1e-5,
            max_coords: 24,
            seed: 0,
        }
    }
}

/// Runs forward+backward, then compares the analytic gradient of `param`
/// against central finite differences of the scalar output.
pub fn finite_diff_check(
    graph: &mut DiffGraph,
    param: &str,
    tolerance: f64,
    settings: FdSettings,
) -> Result<FdReport> {
    graph.forward()?;
    graph.output_value()?; // enforces the scalar-output contract
    graph.backward()?;
    let analytic = graph.grad(param).ok_or_else(|| {
        Error::Config(format!("parameter {param} is unknown or not trainable"))
    })?;
    finite_diff_compare(graph, param, &analytic, tolerance, settings)
}

/// Compares a caller-supplied gradient against central finite differences.
/// Splitting this out lets tests feed in a deliberately corrupted gradient
/// as a negative control.
pub fn finite_diff_compare(
    graph: &mut DiffGraph,
    param: &str,
    candidate: &Tensor,
    tolerance: f64,
    settings: FdSettings,
) -> Result<FdReport> {
    let numel = graph
        .param_value(param)
        .ok_or_else(|| Error::Config(format!("unknown parameter {param}")))?
        .numel();
    if candidate.numel() != numel {
        return Err(Error::Shape {
            op: "finite_diff_compare",
            left: vec![candidate.numel()],
            right: vec![numel],
        });
    }

    let coords: Vec<usize> = if numel <= settings.max_coords {
        (0..numel).collect()
    } else {
        let mut rng = Rng::for_domain("fd-coords", settings.seed);
        rng.sample_indices(numel, settings.max_coords)
    };

    let h = settings.h;
    let mut fd = Vec::with_capacity(coords.len());
    for &i in &coords {
        graph.nudge_param(param, i, h)?;
        graph.forward()?;
        let up = graph.output_value()?;
        graph.nudge_param(param, i, -2.0 * h)?;
        graph.forward()?;
        let down = graph.output_value()?;
        graph.nudge_param(param, i, h)?;
        fd.push((up - down) / (2.0 * h));
    }
    // restore node values for the unperturbed point
    graph.forward()?;

    // scale-relative comparison: errors are measured against the largest
    // gradient magnitude so tiny near-zero components do not dominate
    let mut denom = 1e-6f64;
    for &i in &coords {
        denom = denom.max(candidate.data()[i].abs());
    }
    for &v in &fd {
        denom = denom.max(v.abs());
    }
    let mut max_rel = 0.0f64;
    for (j, &i) in coords.iter().enumerate() {
        let rel = (candidate.data()[i] - fd[j]).abs() / denom;
        max_rel = max_rel.max(rel);
    }

    Ok(FdReport {
        param: param.to_string(),
        max_rel_err: max_rel,
        coords_checked: coords.len(),
        tolerance,
        passed: max_rel < tolerance,
    })
}

/// Checks every trainable parameter of the graph; returns all reports.
pub fn finite_diff_check_all(
    graph: &mut DiffGraph,
    tolerance: f64,
    settings: FdSettings,
) -> Result<Vec<FdReport>> {
    let names = graph.trainable_names();
    let mut reports = Vec::with_capacity(names.len());
    for name in names {
        reports.push(finite_diff_check(graph, &name, tolerance, settings)?);
    }
    Ok(reports)
}
