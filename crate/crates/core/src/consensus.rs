//! Validation of a refined initialization against the tracks it did not use.
//!
//! Every unused track is triangulated from its two most distant keyframes,
//! gated by parallax, refined against all its observations and χ²-tested
//! on its reprojections. The initialization
//! passes when the inlier percentage exceeds `t_cons`.

use nalgebra::{Matrix3, Matrix4, RowVector4, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::ba::{reprojection_residual, InitGraph};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::tracks::FeatureTrack;

pub const PARALLAX_GATE: f64 = 0.01;
pub const DEFAULT_T_CONS: f64 = 90.0;
pub const CHI2_CONFIDENCE: f64 = 0.95;

/// `p`-quantile of the χ² distribution with `dof` degrees of freedom.
pub fn chi2_quantile(p: f64, dof: usize) -> Result<f64> {
    if dof == 0 || !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "χ² quantile undefined for p={p}, dof={dof}"
        )));
    }
    let d = ChiSquared::new(dof as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(d.inverse_cdf(p))
}

/// Linear two-view triangulation from bearings and world-from-camera poses.
///
/// `None` when the solution lies at infinity.
pub fn triangulate_two_view(
    bearing_a: &Vector3<f64>,
    camera_a: &Pose,
    bearing_b: &Vector3<f64>,
    camera_b: &Pose,
) -> Option<Vector3<f64>> {
    let rows = |b: &Vector3<f64>, c: &Pose| {
        let rt = c.rotation.matrix().transpose();
        let t = -(rt * c.translation);
        let p = |k: usize| RowVector4::new(rt[(k, 0)], rt[(k, 1)], rt[(k, 2)], t[k]);
        let b = b.normalize();
        [b.x * p(2) - b.z * p(0), b.y * p(2) - b.z * p(1)]
    };
    let [a0, a1] = rows(bearing_a, camera_a);
    let [b0, b1] = rows(bearing_b, camera_b);
    let m = Matrix4::from_rows(&[a0, a1, b0, b1]);
    let svd = m.svd(false, true);
    let v_t = svd.v_t?;
    let k = svd.singular_values.imin();
    let x = v_t.row(k);
    if x[3].abs() < 1e-12 * x.norm() {
        return None;
    }
    Some(Vector3::new(x[0], x[1], x[2]) / x[3])
}

/// How the "two most distant" observing keyframes are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistantFrames {
    CameraCenter,
    Time,
}

/// Which tracks make up the inlier ratio's denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioDenominator {
    ParallaxEligible,
    AllTested,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusSettings {
    /// Percent.
    pub t_cons: f64,
    pub parallax_gate: f64,
    pub sigma_px: f64,
    pub distant_frames: DistantFrames,
    pub denominator: RatioDenominator,
    /// Gauss-Newton iterations refining the two-view point against all
    /// observations before the χ² test; 0 tests the linear point as is.
    pub refine_iterations: usize,
}

impl Default for ConsensusSettings {
    fn default() -> Self {
        ConsensusSettings {
            t_cons: DEFAULT_T_CONS,
            parallax_gate: PARALLAX_GATE,
            sigma_px: 1.0,
            distant_frames: DistantFrames::CameraCenter,
            denominator: RatioDenominator::ParallaxEligible,
            refine_iterations: 5,
        }
    }
}

/// Observation of a track at a keyframe, by keyframe index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeyframeObservation {
    pub keyframe: usize,
    pub pixel: Vector2<f64>,
    pub bearing: Vector3<f64>,
}

/// Observations of `track` at the graph's keyframes.
pub fn keyframe_observations(track: &FeatureTrack, graph: &InitGraph) -> Vec<KeyframeObservation> {
    graph
        .keyframe_frames
        .iter()
        .enumerate()
        .filter_map(|(k, &f)| {
            track.observation_at(f).map(|o| KeyframeObservation {
                keyframe: k,
                pixel: o.pixel,
                bearing: o.bearing,
            })
        })
        .collect()
}

fn distant_pair(
    obs: &[KeyframeObservation],
    graph: &InitGraph,
    rule: DistantFrames,
) -> Option<(usize, usize)> {
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..obs.len() {
        for j in i + 1..obs.len() {
            let (ki, kj) = (obs[i].keyframe, obs[j].keyframe);
            let d = match rule {
                DistantFrames::CameraCenter => {
                    let ci = graph
                        .extrinsics
                        .camera_pose(&graph.keyframes[ki].pose())
                        .translation;
                    let cj = graph
                        .extrinsics
                        .camera_pose(&graph.keyframes[kj].pose())
                        .translation;
                    (ci - cj).norm()
                }
                DistantFrames::Time => (graph.keyframe_times[kj] - graph.keyframe_times[ki]).abs(),
            };
            if best.is_none_or(|b| d > b.0) {
                best = Some((d, i, j));
            }
        }
    }
    best.map(|(_, i, j)| (i, j))
}

fn ray_angle(a: &KeyframeObservation, b: &KeyframeObservation, graph: &InitGraph) -> f64 {
    let world_ray = |o: &KeyframeObservation| {
        graph
            .extrinsics
            .camera_pose(&graph.keyframes[o.keyframe].pose())
            .rotation
            * o.bearing
    };
    world_ray(a).angle(&world_ray(b))
}

/// Angle between the world-frame rays of the two most distant keyframes
/// observing `track`; `None` with fewer than two keyframe observations.
pub fn parallax_rad(track: &FeatureTrack, graph: &InitGraph, rule: DistantFrames) -> Option<f64> {
    let obs = keyframe_observations(track, graph);
    let (i, j) = distant_pair(&obs, graph, rule)?;
    Some(ray_angle(&obs[i], &obs[j], graph))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriangulationResult {
    pub point: Vector3<f64>,
    pub parallax: f64,
    pub inlier: bool,
    pub chi2: f64,
    pub dof: usize,
}

/// Reprojects `point` into every observing keyframe and applies the 95% χ²
/// test with `2n − 3` degrees of freedom.
pub fn chi2_inlier_test(
    point: &Vector3<f64>,
    observations: &[KeyframeObservation],
    graph: &InitGraph,
    sigma_px: f64,
) -> Result<TriangulationResult> {
    let n = observations.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "χ² test needs two observations, got {n}"
        )));
    }
    let dof = 2 * n - 3;
    let mut chi2 = 0.0;
    for o in observations {
        match reprojection_residual(
            &graph.keyframes[o.keyframe],
            point,
            &graph.extrinsics,
            &graph.camera,
            &o.pixel,
        ) {
            Some((r, _)) => chi2 += r.norm_squared() / (sigma_px * sigma_px),
            None => {
                chi2 = f64::INFINITY;
                break;
            }
        }
    }
    Ok(TriangulationResult {
        point: *point,
        parallax: 0.0,
        inlier: chi2 <= chi2_quantile(CHI2_CONFIDENCE, dof)?,
        chi2,
        dof,
    })
}

/// Minimizes the reprojection error of a single point over `observations`.
///
/// Stops early once the step is below 1e-10 m or when the update would put
/// the point behind a camera.
pub fn refine_point(
    point: &Vector3<f64>,
    observations: &[KeyframeObservation],
    graph: &InitGraph,
    iterations: usize,
) -> Vector3<f64> {
    let mut x = *point;
    for _ in 0..iterations {
        let mut h = Matrix3::zeros();
        let mut g = Vector3::zeros();
        for o in observations {
            let Some((r, j)) = reprojection_residual(
                &graph.keyframes[o.keyframe],
                &x,
                &graph.extrinsics,
                &graph.camera,
                &o.pixel,
            ) else {
                return x;
            };
            h += j.d_point.transpose() * j.d_point;
            g += j.d_point.transpose() * r;
        }
        let Some(chol) = h.cholesky() else {
            return x;
        };
        let step = -chol.solve(&g);
        x += step;
        if step.norm() < 1e-10 {
            break;
        }
    }
    x
}

/// Outcome for one tested track.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackVerdict {
    pub track_id: u64,
    /// `None` when the track failed the parallax gate or could not be triangulated.
    pub result: Option<TriangulationResult>,
    pub parallax: f64,
}

/// An inlier track ready to enter the second refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusInlier {
    pub track_id: u64,
    pub point: Vector3<f64>,
    pub observations: Vec<(usize, Vector2<f64>)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsensusStatus {
    Passed,
    Failed,
    /// No track cleared the parallax gate.
    NoEvidence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusOutcome {
    pub status: ConsensusStatus,
    /// Percent.
    pub ratio: f64,
    pub tested: usize,
    pub eligible: usize,
    pub inliers: Vec<ConsensusInlier>,
    pub verdicts: Vec<TrackVerdict>,
}

impl ConsensusOutcome {
    pub fn passed(&self) -> bool {
        self.status == ConsensusStatus::Passed
    }
}

fn test_track(
    track: &FeatureTrack,
    graph: &InitGraph,
    s: &ConsensusSettings,
) -> Option<(TrackVerdict, Vec<KeyframeObservation>)> {
    let obs = keyframe_observations(track, graph);
    let (i, j) = distant_pair(&obs, graph, s.distant_frames)?;
    let parallax = ray_angle(&obs[i], &obs[j], graph);
    let mut verdict = TrackVerdict {
        track_id: track.id,
        result: None,
        parallax,
    };
    if parallax <= s.parallax_gate {
        return Some((verdict, obs));
    }
    let cam = |o: &KeyframeObservation| {
        graph
            .extrinsics
            .camera_pose(&graph.keyframes[o.keyframe].pose())
    };
    let point = triangulate_two_view(
        &obs[i].bearing,
        &cam(&obs[i]),
        &obs[j].bearing,
        &cam(&obs[j]),
    );
    verdict.result = Some(match point {
        Some(x) => {
            let x = refine_point(&x, &obs, graph, s.refine_iterations);
            let mut r = chi2_inlier_test(&x, &obs, graph, s.sigma_px).ok()?;
            r.parallax = parallax;
            r
        }
        None => TriangulationResult {
            point: Vector3::zeros(),
            parallax,
            inlier: false,
            chi2: f64::INFINITY,
            dof: 2 * obs.len() - 3,
        },
    });
    Some((verdict, obs))
}

/// Tests `unused` tracks against the graph's keyframes. Tracks seen by fewer
/// than two keyframes are skipped.
pub fn consensus_test(
    unused: &[FeatureTrack],
    graph: &InitGraph,
    settings: &ConsensusSettings,
) -> ConsensusOutcome {
    let tested: Vec<(TrackVerdict, Vec<KeyframeObservation>)> = unused
        .par_iter()
        .filter_map(|t| test_track(t, graph, settings))
        .collect();
    let eligible = tested.iter().filter(|(v, _)| v.result.is_some()).count();
    let mut inliers = Vec::new();
    for (v, obs) in &tested {
        if let Some(r) = v.result.filter(|r| r.inlier) {
            inliers.push(ConsensusInlier {
                track_id: v.track_id,
                point: r.point,
                observations: obs.iter().map(|o| (o.keyframe, o.pixel)).collect(),
            });
        }
    }
    let denominator = match settings.denominator {
        RatioDenominator::ParallaxEligible => eligible,
        RatioDenominator::AllTested => tested.len(),
    };
    let (status, ratio) = if eligible == 0 || denominator == 0 {
        (ConsensusStatus::NoEvidence, 0.0)
    } else {
        let ratio = 100.0 * inliers.len() as f64 / denominator as f64;
        let status = if ratio > settings.t_cons {
            ConsensusStatus::Passed
        } else {
            ConsensusStatus::Failed
        };
        (status, ratio)
    };
    ConsensusOutcome {
        status,
        ratio,
        tested: tested.len(),
        eligible,
        inliers,
        verdicts: tested.into_iter().map(|(v, _)| v).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_so3, Rotation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn tabulated_quantiles() {
        for (dof, q) in [
            (1, 3.841),
            (2, 5.991),
            (3, 7.815),
            (5, 11.070),
            (10, 18.307),
        ] {
            assert!(
                (chi2_quantile(0.95, dof).unwrap() - q).abs() < 1e-3,
                "dof {dof}"
            );
        }
        assert!(chi2_quantile(0.95, 0).is_err());
        assert!(chi2_quantile(1.0, 3).is_err());
    }

    fn look_at_z(center: Vector3<f64>) -> Pose {
        Pose::new(Rotation::identity(), center)
    }

    fn bearing(cam: &Pose, x: &Vector3<f64>) -> Vector3<f64> {
        cam.inverse().transform_point(x).normalize()
    }

    #[test]
    fn noiseless_triangulation() {
        let x = Vector3::new(1.0, 2.0, 5.0);
        let a = look_at_z(Vector3::zeros());
        let b = Pose::new(
            exp_so3(&Vector3::new(0.02, -0.05, 0.01)),
            Vector3::new(0.3, 0.0, 0.0),
        );
        let t = triangulate_two_view(&bearing(&a, &x), &a, &bearing(&b, &x), &b).unwrap();
        assert!((t - x).norm() < 1e-9, "{t}");
    }

    #[test]
    fn symmetric_rig_keeps_bisector_plane() {
        let x = Vector3::new(0.0, 0.7, 4.0);
        let a = look_at_z(Vector3::new(-0.25, 0.0, 0.0));
        let b = look_at_z(Vector3::new(0.25, 0.0, 0.0));
        let t = triangulate_two_view(&bearing(&a, &x), &a, &bearing(&b, &x), &b).unwrap();
        assert!(t.x.abs() < 1e-9);
    }

    #[test]
    fn noisy_depth_is_bounded() {
        let cam = crate::tracks::CameraModel::euroc();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = look_at_z(Vector3::zeros());
        let b = look_at_z(Vector3::new(0.5, 0.0, 0.0));
        for _ in 0..100 {
            let x = Vector3::new(
                rng.random_range(-1.0..1.5),
                rng.random_range(-1.0..1.0),
                5.0,
            );
            let mut noisy = |c: &Pose| {
                let p = cam.project(&c.inverse().transform_point(&x)).unwrap();
                cam.bearing(&(p + Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng))))
            };
            let (ba, bb) = (noisy(&a), noisy(&b));
            let t = triangulate_two_view(&ba, &a, &bb, &b).unwrap();
            assert!((t.z - 5.0).abs() / 5.0 < 0.1, "{t}");
        }
    }

    #[test]
    fn parallel_rays_have_no_finite_point() {
        let a = look_at_z(Vector3::zeros());
        let b = look_at_z(Vector3::new(1.0, 0.0, 0.0));
        let d = Vector3::new(0.0, 0.0, 1.0);
        assert!(triangulate_two_view(&d, &a, &d, &b).is_none());
    }
}
