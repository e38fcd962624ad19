use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    Se3,
    Sim3,
}

/// `y ≈ scale · rotation · x + translation`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Similarity {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }
}

/// Closed-form least-squares alignment of `source` onto `target`.
pub fn umeyama(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    with_scale: bool,
) -> Result<Similarity> {
    if source.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "alignment needs matched sequences, got {} and {}",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "alignment needs at least two poses, got {}",
            source.len()
        )));
    }
    let n = source.len() as f64;
    let mu_x = source.iter().sum::<Vector3<f64>>() / n;
    let mu_y = target.iter().sum::<Vector3<f64>>() / n;
    let var_x = source
        .iter()
        .map(|x| (x - mu_x).norm_squared())
        .sum::<f64>()
        / n;
    let mut cov = Matrix3::zeros();
    for (x, y) in source.iter().zip(target) {
        cov += (y - mu_y) * (x - mu_x).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        d.z = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&d) * v_t;
    let scale = if with_scale {
        if var_x <= 0.0 {
            return Err(Error::InsufficientData(
                "source trajectory has zero extent".into(),
            ));
        }
        svd.singular_values.component_mul(&d).sum() / var_x
    } else {
        1.0
    };
    Ok(Similarity {
        rotation,
        translation: mu_y - scale * (rotation * mu_x),
        scale,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AteResult {
    pub rmse: f64,
    /// RMSE as a percentage of the ground-truth path length.
    pub percent: f64,
}

fn positions(poses: &[Pose]) -> Vec<Vector3<f64>> {
    poses.iter().map(|p| p.translation).collect()
}

pub fn path_length(points: &[Vector3<f64>]) -> f64 {
    points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Root-mean-square position error after aligning `estimate` onto `truth`.
pub fn rmse_ate(estimate: &[Pose], truth: &[Pose], align: Alignment) -> Result<AteResult> {
    let est = positions(estimate);
    let gt = positions(truth);
    let sim = umeyama(&est, &gt, align == Alignment::Sim3)?;
    let sq: f64 = est
        .iter()
        .zip(&gt)
        .map(|(e, g)| (g - sim.apply(e)).norm_squared())
        .sum();
    let rmse = (sq / est.len() as f64).sqrt();
    let length = path_length(&gt);
    let percent = if length > 0.0 {
        100.0 * rmse / length
    } else if rmse == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(AteResult { rmse, percent })
}

/// `|s − 1| · 100`, with `s` the size of the estimate relative to the truth.
pub fn scale_error(estimate: &[Pose], truth: &[Pose]) -> Result<f64> {
    let est = positions(estimate);
    let gt = positions(truth);
    let sim = umeyama(&gt, &est, true)?;
    let spread = |p: &[Vector3<f64>]| {
        let mu = p.iter().sum::<Vector3<f64>>() / p.len() as f64;
        p.iter().map(|x| (x - mu).norm_squared()).sum::<f64>()
    };
    if spread(&est) <= 0.0 {
        return Err(Error::InsufficientData(
            "estimated trajectory has zero extent".into(),
        ));
    }
    Ok((sim.scale - 1.0).abs() * 100.0)
}
