//! Singular-value test on the bundle-adjustment Hessian.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ba::{linearize, InitGraph, StateLayout};
use crate::error::{Error, Result};

pub const DEFAULT_T_OBS: f64 = 0.1;

/// Gauss-Newton Hessian `Σ Jᵀ Ω J` over the free dofs of a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianMatrix {
    pub matrix: DMatrix<f64>,
    pub layout: StateLayout,
}

impl HessianMatrix {
    pub fn dimension(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Accumulates the per-edge blocks `J_iᵀ Ω J_j` at the current states.
pub fn assemble_hessian(graph: &InitGraph) -> HessianMatrix {
    let layout = graph.layout();
    let n = layout.dimension();
    let mut h = DMatrix::zeros(n, n);
    for l in linearize(graph) {
        for (bi, ji) in &l.jacobians {
            let left = ji.transpose() * &l.information;
            let (oi, di) = layout.range(*bi);
            for (bj, jj) in &l.jacobians {
                let (oj, dj) = layout.range(*bj);
                let mut block = h.view_mut((oi, oj), (di, dj));
                block += &left * jj;
            }
        }
    }
    HessianMatrix { matrix: h, layout }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservabilityResult {
    pub passed: bool,
    pub min_singular_value: f64,
    pub threshold: f64,
    /// Singular values, largest first.
    pub spectrum: Vec<f64>,
}

/// Passes iff the smallest singular value of `h` reaches `t_obs`.
pub fn observability_test(h: &HessianMatrix, t_obs: f64) -> ObservabilityResult {
    let mut spectrum: Vec<f64> = h.matrix.singular_values().iter().copied().collect();
    spectrum.sort_by(|a, b| b.total_cmp(a));
    let min = spectrum.last().copied().unwrap_or(0.0);
    ObservabilityResult {
        passed: min >= t_obs,
        min_singular_value: min,
        threshold: t_obs,
        spectrum,
    }
}

/// `index,singular_value` rows, largest first.
pub fn write_spectrum_csv<W: Write>(out: W, spectrum: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "singular_value"])
        .map_err(csv_error)?;
    for (i, s) in spectrum.iter().enumerate() {
        w.write_record([i.to_string(), format!("{s:e}")])
            .map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Data(e.to_string())
}
