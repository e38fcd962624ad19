use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use super::system::{CsrMatrix, SparseSystem};

pub const CG_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearSolution {
    pub x: DVector<f64>,
    pub iterations: usize,
    /// `‖Aᵀ(s − Ax)‖ / ‖Aᵀs‖` at exit.
    pub relative_residual: f64,
    /// Set when CG stopped at the iteration cap without converging.
    pub degenerate: bool,
}

/// Least squares `min ‖Ax − s‖²` by conjugate gradients on the normal equations,
/// preconditioned with the velocity and per-track depth blocks.
pub fn solve_linear(sys: &SparseSystem) -> LinearSolution {
    let blocks = sys.blocks();
    pcgls(&sys.a, &sys.s, &blocks, CG_TOLERANCE, 5 * sys.a.ncols())
}

/// Jacobi-preconditioned CGLS.
pub fn cgls(a: &CsrMatrix, s: &DVector<f64>, tol: f64, max_iters: usize) -> LinearSolution {
    let blocks: Vec<Range<usize>> = (0..a.ncols()).map(|c| c..c + 1).collect();
    pcgls(a, s, &blocks, tol, max_iters)
}

/// Inverse of the block diagonal of `AᵀA` over contiguous column ranges.
struct BlockPreconditioner {
    blocks: Vec<(Range<usize>, DMatrix<f64>)>,
}

impl BlockPreconditioner {
    fn new(a: &CsrMatrix, blocks: &[Range<usize>]) -> Self {
        let mut owner = vec![usize::MAX; a.ncols()];
        for (b, r) in blocks.iter().enumerate() {
            r.clone().for_each(|c| owner[c] = b);
        }
        let mut grams: Vec<DMatrix<f64>> = blocks
            .iter()
            .map(|r| DMatrix::zeros(r.len(), r.len()))
            .collect();
        let mut row: Vec<(usize, f64)> = Vec::new();
        for i in 0..a.nrows() {
            row.clear();
            row.extend(a.row(i));
            for &(c1, v1) in &row {
                for &(c2, v2) in &row {
                    let b = owner[c1];
                    if b != usize::MAX && b == owner[c2] {
                        let o = blocks[b].start;
                        grams[b][(c1 - o, c2 - o)] += v1 * v2;
                    }
                }
            }
        }
        let blocks = blocks
            .iter()
            .cloned()
            .zip(grams)
            .map(|(r, g)| {
                let inv = g
                    .clone()
                    .cholesky()
                    .map(|c| c.inverse())
                    .unwrap_or_else(|| {
                        // Singular block: fall back to its diagonal.
                        DMatrix::from_diagonal(&g.diagonal().map(|d| {
                            if d > 0.0 {
                                1.0 / d
                            } else {
                                0.0
                            }
                        }))
                    });
                (r, inv)
            })
            .collect();
        BlockPreconditioner { blocks }
    }

    fn apply(&self, z: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, inv) in &self.blocks {
            let seg = &z[r.clone()];
            for (i, o) in out[r.clone()].iter_mut().enumerate() {
                *o = (0..seg.len()).map(|j| inv[(i, j)] * seg[j]).sum();
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// CGLS with a block-diagonal preconditioner. The stopping test uses the
/// unpreconditioned normal-equation residual `‖Aᵀ(s − Ax)‖ / ‖Aᵀs‖`.
pub fn pcgls(
    a: &CsrMatrix,
    s: &DVector<f64>,
    blocks: &[Range<usize>],
    tol: f64,
    max_iters: usize,
) -> LinearSolution {
    let (m, n) = (a.nrows(), a.ncols());
    let precond = BlockPreconditioner::new(a, blocks);

    let mut x = vec![0.0; n];
    let mut r: Vec<f64> = s.iter().copied().collect();
    let mut grad = vec![0.0; n];
    a.tr_mul_vec(&r, &mut grad);
    let rhs_norm = dot(&grad, &grad).sqrt();
    if rhs_norm == 0.0 {
        return LinearSolution {
            x: DVector::zeros(n),
            iterations: 0,
            relative_residual: 0.0,
            degenerate: false,
        };
    }
    let mut z = vec![0.0; n];
    precond.apply(&grad, &mut z);
    let mut p = z.clone();
    let mut gamma = dot(&grad, &z);
    let mut q = vec![0.0; m];
    let mut rel = 1.0;
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;
        a.mul_vec(&p, &mut q);
        let qq = dot(&q, &q);
        if qq == 0.0 || gamma <= 0.0 {
            break;
        }
        let alpha = gamma / qq;
        x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        r.iter_mut().zip(&q).for_each(|(ri, qi)| *ri -= alpha * qi);
        a.tr_mul_vec(&r, &mut grad);
        rel = dot(&grad, &grad).sqrt() / rhs_norm;
        if rel < tol {
            break;
        }
        precond.apply(&grad, &mut z);
        let gamma_new = dot(&grad, &z);
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        p.iter_mut()
            .zip(&z)
            .for_each(|(pi, zi)| *pi = zi + beta * *pi);
    }

    LinearSolution {
        x: DVector::from_vec(x),
        iterations,
        relative_residual: rel,
        degenerate: rel >= tol,
    }
}
