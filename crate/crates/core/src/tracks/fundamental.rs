//! Normalized eight-point fundamental matrix estimation inside RANSAC.
//!
//! Convention: `x2ᵀ F x1 = 0` for a correspondence `(x1, x2)`.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const CONFIDENCE: f64 = 0.99;
const MIN_SAMPLES: usize = 8;

/// Hartley normalization: centroid to origin, mean distance √2.
fn normalizer(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mean_dist = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

/// Fits F to `pairs` (at least eight); `None` when the design matrix is
/// rank-deficient.
pub fn estimate_fundamental(pairs: &[(Vector2<f64>, Vector2<f64>)]) -> Option<Matrix3<f64>> {
    if pairs.len() < MIN_SAMPLES {
        return None;
    }
    let p1: Vec<_> = pairs.iter().map(|p| p.0).collect();
    let p2: Vec<_> = pairs.iter().map(|p| p.1).collect();
    let t1 = normalizer(&p1);
    let t2 = normalizer(&p2);

    // Zero-padded to at least 9 rows so the SVD yields the full right basis.
    let rows = pairs.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (x1, x2)) in pairs.iter().enumerate() {
        let u = t1 * Vector3::new(x1.x, x1.y, 1.0);
        let v = t2 * Vector3::new(x2.x, x2.y, 1.0);
        let row = [
            v.x * u.x,
            v.x * u.y,
            v.x * u.z,
            v.y * u.x,
            v.y * u.y,
            v.y * u.z,
            v.z * u.x,
            v.z * u.y,
            v.z * u.z,
        ];
        for (j, val) in row.iter().enumerate() {
            a[(i, j)] = *val;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv = |k: usize| svd.singular_values[order[k]];
    // Need rank 8 for a unique solution.
    if sv(0) <= 0.0 || sv(7) / sv(0) < 1e-8 {
        return None;
    }
    let f = v_t.row(order[8]);
    let fhat = Matrix3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]);

    // Closest rank-2 matrix.
    let svd3 = fhat.svd(true, true);
    let (u, v_t) = (svd3.u?, svd3.v_t?);
    let mut s = svd3.singular_values;
    let imin = s.imin();
    s[imin] = 0.0;
    let f2 = u * Matrix3::from_diagonal(&s) * v_t;
    let f = t2.transpose() * f2 * t1;
    let norm = f.norm();
    (norm > 0.0 && norm.is_finite()).then(|| f / norm)
}

/// First-order geometric (Sampson) distance in pixels.
pub fn sampson_distance(f: &Matrix3<f64>, x1: &Vector2<f64>, x2: &Vector2<f64>) -> f64 {
    let a = Vector3::new(x1.x, x1.y, 1.0);
    let b = Vector3::new(x2.x, x2.y, 1.0);
    let fa = f * a;
    let ftb = f.transpose() * b;
    let num = b.dot(&fa);
    let den = fa.x * fa.x + fa.y * fa.y + ftb.x * ftb.x + ftb.y * ftb.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    (num * num / den).sqrt()
}

fn inliers_of(
    f: &Matrix3<f64>,
    pairs: &[(Vector2<f64>, Vector2<f64>)],
    threshold: f64,
) -> Vec<usize> {
    pairs
        .iter()
        .enumerate()
        .filter(|(_, (a, b))| sampson_distance(f, a, b) < threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Indices of correspondences consistent with a RANSAC fundamental matrix.
///
/// Samples are drawn from a canonical (coordinate-sorted) ordering, so the
/// result does not depend on the input order for a fixed seed. The iteration
/// count adapts to the inlier ratio, capped at `max_iters`.
pub fn ransac_fundamental_filter(
    correspondences: &[(Vector2<f64>, Vector2<f64>)],
    threshold: f64,
    max_iters: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let n = correspondences.len();
    if n < MIN_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "fundamental matrix needs {MIN_SAMPLES} correspondences, got {n}"
        )));
    }
    let mut canonical: Vec<usize> = (0..n).collect();
    canonical.sort_by(|&i, &j| {
        let (a, b) = (&correspondences[i], &correspondences[j]);
        a.0.x
            .total_cmp(&b.0.x)
            .then(a.0.y.total_cmp(&b.0.y))
            .then(a.1.x.total_cmp(&b.1.x))
            .then(a.1.y.total_cmp(&b.1.y))
            .then(i.cmp(&j))
    });
    let pairs: Vec<_> = canonical.iter().map(|&i| correspondences[i]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Vec<usize>> = None;
    let mut budget = max_iters;
    let mut iter = 0;
    let mut minimal = Vec::with_capacity(MIN_SAMPLES);
    while iter < budget {
        iter += 1;
        minimal.clear();
        minimal.extend(
            sample(&mut rng, n, MIN_SAMPLES)
                .into_iter()
                .map(|i| pairs[i]),
        );
        let Some(f) = estimate_fundamental(&minimal) else {
            continue;
        };
        let inl = inliers_of(&f, &pairs, threshold);
        if best.as_ref().is_none_or(|b| inl.len() > b.len()) {
            let w = inl.len() as f64 / n as f64;
            let miss = 1.0 - w.powi(MIN_SAMPLES as i32);
            if miss <= f64::EPSILON {
                budget = iter;
            } else {
                let needed = ((1.0 - CONFIDENCE).ln() / miss.ln()).ceil();
                if needed.is_finite() {
                    budget = budget.min((needed as usize).max(1)).max(iter);
                }
            }
            best = Some(inl);
        }
    }

    let Some(mut inl) = best else {
        return Err(Error::Degenerate(
            "no non-degenerate eight-point sample found".into(),
        ));
    };
    // Refit on the consensus set while it keeps growing.
    loop {
        if inl.len() < MIN_SAMPLES {
            break;
        }
        let subset: Vec<_> = inl.iter().map(|&i| pairs[i]).collect();
        let Some(f) = estimate_fundamental(&subset) else {
            break;
        };
        let refit = inliers_of(&f, &pairs, threshold);
        if refit.len() <= inl.len() {
            if refit.len() == inl.len() {
                inl = refit;
            }
            break;
        }
        inl = refit;
    }
    let mut out: Vec<usize> = inl.into_iter().map(|i| canonical[i]).collect();
    out.sort_unstable();
    Ok(out)
}
