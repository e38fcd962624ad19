use std::ops::Range;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{gravity_vector, GravityParams};
use crate::imu::PreintegratedDelta;

use super::MkProblem;

/// Compressed sparse row matrix, just enough for CG on the normal equations.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    fn with_capacity(ncols: usize, rows: usize, nnz: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(rows + 1);
        row_ptr.push(0);
        CsrMatrix {
            nrows: 0,
            ncols,
            row_ptr,
            col_idx: Vec::with_capacity(nnz),
            values: Vec::with_capacity(nnz),
        }
    }

    fn push_row(&mut self, entries: &[(usize, f64)]) {
        for &(c, v) in entries {
            debug_assert!(c < self.ncols);
            self.col_idx.push(c);
            self.values.push(v);
        }
        self.row_ptr.push(self.col_idx.len());
        self.nrows += 1;
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// `out = A x`
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *o = acc;
        }
    }

    /// `out = Aᵀ y`
    pub fn tr_mul_vec(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &yi) in y.iter().enumerate() {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                out[self.col_idx[k]] += self.values[k] * yi;
            }
        }
    }

    /// Squared norm of every column.
    pub fn column_norms_squared(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols];
        for (c, v) in self.col_idx.iter().zip(&self.values) {
            out[*c] += v * v;
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (c, v) in self.row(i) {
                m[(i, c)] += v;
            }
        }
        m
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut out = CsrMatrix::with_capacity(m.ncols(), m.nrows(), m.len());
        let mut entries = Vec::new();
        for i in 0..m.nrows() {
            entries.clear();
            entries.extend(
                (0..m.ncols())
                    .filter(|&j| m[(i, j)] != 0.0)
                    .map(|j| (j, m[(i, j)])),
            );
            out.push_row(&entries);
        }
        out
    }
}

/// `A(b^g) x = s(b^g, α, β)` with `x = (v1, λ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSystem {
    pub a: CsrMatrix,
    pub s: DVector<f64>,
    /// Column of the first depth of each track; depths follow in keyframe order.
    pub lambda_offsets: Vec<usize>,
}

impl SparseSystem {
    pub fn new(a: CsrMatrix, s: DVector<f64>) -> Self {
        SparseSystem {
            a,
            s,
            lambda_offsets: Vec::new(),
        }
    }

    /// Velocity block followed by one block per track; single columns when
    /// the layout is unknown.
    pub fn blocks(&self) -> Vec<Range<usize>> {
        let n = self.a.ncols();
        if self.lambda_offsets.is_empty() {
            return (0..n).map(|c| c..c + 1).collect();
        }
        let mut out = vec![0..3];
        for (i, &o) in self.lambda_offsets.iter().enumerate() {
            let end = self.lambda_offsets.get(i + 1).copied().unwrap_or(n);
            out.push(o..end);
        }
        out
    }
}

/// Assembles the system from deltas already moved to the candidate gyro bias.
pub(crate) fn assemble(
    p: &MkProblem,
    deltas: &[PreintegratedDelta],
    gp: &GravityParams,
) -> Result<SparseSystem> {
    if p.tracks.is_empty() {
        return Err(Error::InvalidArgument(
            "MK system needs at least one track".into(),
        ));
    }
    let g = gravity_vector(gp);
    let r_bc = *p.extrinsics.body_from_camera.rotation.matrix();
    let t_bc = p.extrinsics.body_from_camera.translation;
    let world_from_cam: Vec<Matrix3<f64>> =
        deltas.iter().map(|d| d.delta_r.matrix() * r_bc).collect();
    let lever: Vec<Vector3<f64>> = deltas.iter().map(|d| d.delta_r.matrix() * t_bc).collect();

    let rows: usize = p
        .tracks
        .iter()
        .map(|t| 3 * (t.keyframe_slots.len() - 1))
        .sum();
    let cols = 3 + p
        .tracks
        .iter()
        .map(|t| t.keyframe_slots.len())
        .sum::<usize>();
    let mut a = CsrMatrix::with_capacity(cols, rows, 3 * rows);
    let mut s = DVector::zeros(rows);
    let mut offsets = Vec::with_capacity(p.tracks.len());

    let mut col = 3;
    let mut row = 0;
    for t in &p.tracks {
        offsets.push(col);
        let anchor = t.anchor();
        let u_a = world_from_cam[anchor] * t.track.observations[0].bearing;
        let dt_a = deltas[anchor].dt;
        for (k, &j) in t.keyframe_slots.iter().enumerate().skip(1) {
            let u_j = world_from_cam[j] * t.track.observations[k].bearing;
            let dt_j = deltas[j].dt;
            let dt_aj = dt_j - dt_a;
            let rhs = g * (0.5 * (dt_j * dt_j - dt_a * dt_a)) + deltas[j].delta_p
                - deltas[anchor].delta_p
                + (lever[j] - lever[anchor]);
            for c in 0..3 {
                a.push_row(&[(c, -dt_aj), (col, u_a[c]), (col + k, -u_j[c])]);
                s[row] = rhs[c];
                row += 1;
            }
        }
        col += t.keyframe_slots.len();
    }
    Ok(SparseSystem {
        a,
        s,
        lambda_offsets: offsets,
    })
}
