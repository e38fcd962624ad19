//! Closed-form visual-inertial initialization.
//!
//! For fixed gyroscope bias and gravity direction the unknown velocity and
//! feature depths enter linearly, so the inner problem is a sparse linear
//! least-squares solve. The outer parameters `(b^g, α, β)` are found by
//! Levenberg-Marquardt on the stacked inner residual.

mod cg;
mod system;

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

pub use cg::{cgls, pcgls, solve_linear, LinearSolution, CG_TOLERANCE};
pub use system::{CsrMatrix, SparseSystem};

use crate::error::{Error, Result};
use crate::geometry::{exp_so3, GravityParams, Rotation};
use crate::imu::{
    correct_bias_with, preintegrate_chain, BiasState, BiasUpdate, ImuSample, PreintegratedDelta,
};
use crate::tracks::{Extrinsics, InitTrack};

/// Inputs of the closed-form stage.
#[derive(Clone, Debug)]
pub struct MkProblem {
    /// Frame indices of the keyframes, increasing.
    pub keyframes: Vec<usize>,
    pub tracks: Vec<InitTrack>,
    /// First keyframe to keyframe `j`, one per keyframe; the first is identity.
    pub deltas: Vec<PreintegratedDelta>,
    /// Raw samples, needed when a bias change requires reintegration.
    pub samples: Vec<ImuSample>,
    pub extrinsics: Extrinsics,
    pub gravity_magnitude: f64,
    pub bias_update: BiasUpdate,
}

impl MkProblem {
    pub fn new(
        keyframes: Vec<usize>,
        tracks: Vec<InitTrack>,
        deltas: Vec<PreintegratedDelta>,
        samples: Vec<ImuSample>,
        extrinsics: Extrinsics,
        gravity_magnitude: f64,
    ) -> Result<Self> {
        let p = MkProblem {
            keyframes,
            tracks,
            deltas,
            samples,
            extrinsics,
            gravity_magnitude,
            bias_update: BiasUpdate::FirstOrder,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_bias_update(mut self, policy: BiasUpdate) -> Self {
        self.bias_update = policy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.keyframes.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least two keyframes, got {n}"
            )));
        }
        if self.keyframes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "keyframes must be strictly increasing".into(),
            ));
        }
        if self.deltas.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} deltas for {n} keyframes",
                self.deltas.len()
            )));
        }
        let first = &self.deltas[0];
        if first.dt != 0.0 || first.delta_r.angle() != 0.0 || first.delta_p != Vector3::zeros() {
            return Err(Error::InvalidArgument(
                "delta of the first keyframe must be identity".into(),
            ));
        }
        if !(self.gravity_magnitude.is_finite() && self.gravity_magnitude > 0.0) {
            return Err(Error::InvalidArgument(
                "gravity magnitude must be positive".into(),
            ));
        }
        if self.tracks.is_empty() {
            return Err(Error::InvalidArgument(
                "MK problem needs at least one track".into(),
            ));
        }
        for t in &self.tracks {
            let slots = &t.keyframe_slots;
            if slots.len() < 2 || slots.len() != t.track.observations.len() {
                return Err(Error::InvalidArgument(format!(
                    "track {} must be observed in two or more keyframes",
                    t.track.id
                )));
            }
            if slots.windows(2).any(|w| w[1] <= w[0]) || *slots.last().unwrap() >= n {
                return Err(Error::InvalidArgument(format!(
                    "track {} has invalid keyframe slots",
                    t.track.id
                )));
            }
        }
        Ok(())
    }

    pub fn keyframe_count(&self) -> usize {
        self.keyframes.len()
    }

    pub fn linearization_bias(&self) -> Vector3<f64> {
        self.deltas[0].lin_bias.gyro
    }

    /// The same problem with deltas reintegrated at gyroscope bias `b_g`.
    pub fn relinearized(&self, b_g: &Vector3<f64>) -> Result<MkProblem> {
        let bias = BiasState::new(*b_g, self.deltas[0].lin_bias.accel);
        let times: Vec<f64> = self.deltas.iter().map(|d| d.t_end).collect();
        Ok(MkProblem {
            deltas: preintegrate_chain(&self.samples, &times, bias)?,
            ..self.clone()
        })
    }

    /// Deltas moved to gyroscope bias `b_g`; accelerometer bias stays at the
    /// linearization point.
    pub fn corrected_deltas(&self, b_g: &Vector3<f64>) -> Result<Vec<PreintegratedDelta>> {
        let accel = self.deltas[0].lin_bias.accel;
        let bias = BiasState::new(*b_g, accel);
        match self.bias_update {
            BiasUpdate::Reintegrate => {
                let times: Vec<f64> = self.deltas.iter().map(|d| d.t_end).collect();
                preintegrate_chain(&self.samples, &times, bias)
            }
            BiasUpdate::FirstOrder => self
                .deltas
                .iter()
                .map(|d| correct_bias_with(d, bias, &self.samples, BiasUpdate::FirstOrder))
                .collect(),
        }
    }
}

/// Output of the closed-form stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MkSolution {
    pub v1: Vector3<f64>,
    /// Depth of each track at each of its keyframes, in keyframe order.
    pub lambdas: Vec<Vec<f64>>,
    pub gyro_bias: Vector3<f64>,
    pub gravity: GravityParams,
    pub cost: f64,
    pub iterations: usize,
    /// The final inner solve hit the CG iteration cap.
    pub degenerate: bool,
    /// Gyroscope bias the deltas behind `cost` were integrated at.
    pub linearization_bias: Vector3<f64>,
}

/// Levenberg-Marquardt settings for the outer minimization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MkSettings {
    pub initial_damping: f64,
    pub damping_factor: f64,
    pub max_iterations: usize,
    pub relative_decrease: f64,
    pub bias_step: f64,
    pub angle_step: f64,
    pub max_rejections: usize,
    /// Reintegrate the deltas at the current estimate whenever the gyro
    /// bias has moved more than `relinearize_tolerance` from their
    /// linearization point.
    pub relinearize: bool,
    pub relinearize_tolerance: f64,
}

impl Default for MkSettings {
    fn default() -> Self {
        MkSettings {
            initial_damping: 1e-3,
            damping_factor: 10.0,
            max_iterations: 50,
            relative_decrease: 1e-9,
            bias_step: 1e-6,
            angle_step: 1e-6,
            max_rejections: 10,
            relinearize: true,
            relinearize_tolerance: 1e-6,
        }
    }
}

pub fn build_system(p: &MkProblem, b_g: &Vector3<f64>, gp: &GravityParams) -> Result<SparseSystem> {
    let deltas = p.corrected_deltas(b_g)?;
    system::assemble(p, &deltas, gp)
}

struct Evaluation {
    residual: DVector<f64>,
    cost: f64,
    system: SparseSystem,
    solution: LinearSolution,
}

fn evaluate(p: &MkProblem, b_g: &Vector3<f64>, gp: &GravityParams) -> Result<Evaluation> {
    let system = build_system(p, b_g, gp)?;
    let solution = solve_linear(&system);
    let mut ax = vec![0.0; system.a.nrows()];
    system.a.mul_vec(solution.x.as_slice(), &mut ax);
    let residual = DVector::from_vec(ax) - &system.s;
    let cost = residual.norm_squared();
    Ok(Evaluation {
        residual,
        cost,
        system,
        solution,
    })
}

/// `min_x ‖A(b^g)x − s(b^g, α, β)‖²`
pub fn mk_cost(p: &MkProblem, b_g: &Vector3<f64>, gp: &GravityParams) -> Result<f64> {
    Ok(evaluate(p, b_g, gp)?.cost)
}

/// Gravity guess from the mean specific force over the window, expressed in
/// the first body frame.
pub fn initial_gravity(p: &MkProblem) -> GravityParams {
    let fallback = GravityParams::new(0.0, 0.0, p.gravity_magnitude);
    let t0 = p.deltas[0].t_start;
    let t1 = p.deltas.last().map_or(t0, |d| d.t_end);
    let bias = p.deltas[0].lin_bias;
    let mut r = Rotation::identity();
    let mut sum = Vector3::zeros();
    for w in p.samples.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if b.timestamp <= t0 || a.timestamp >= t1 {
            continue;
        }
        let dt = b.timestamp.min(t1) - a.timestamp.max(t0);
        sum += r * ((a.accel - bias.accel) * dt);
        r = (r * exp_so3(&((a.gyro - bias.gyro) * dt))).renormalized();
    }
    GravityParams::from_direction(&-sum, p.gravity_magnitude).unwrap_or(fallback)
}

pub fn solve_mk(
    p: &MkProblem,
    initial_b_g: &Vector3<f64>,
    initial_gp: &GravityParams,
) -> Result<MkSolution> {
    solve_mk_with(p, initial_b_g, initial_gp, &MkSettings::default())
}

fn unpack(theta: &DVector<f64>, magnitude: f64) -> (Vector3<f64>, GravityParams) {
    (
        Vector3::new(theta[0], theta[1], theta[2]),
        GravityParams::new(theta[3], theta[4], magnitude),
    )
}

fn solution_from(
    p: &MkProblem,
    theta: &DVector<f64>,
    eval: &Evaluation,
    iterations: usize,
) -> MkSolution {
    let (gyro_bias, gravity) = unpack(theta, p.gravity_magnitude);
    let x = &eval.solution.x;
    let lambdas = p
        .tracks
        .iter()
        .zip(&eval.system.lambda_offsets)
        .map(|(t, &off)| (0..t.keyframe_slots.len()).map(|k| x[off + k]).collect())
        .collect();
    MkSolution {
        v1: Vector3::new(x[0], x[1], x[2]),
        lambdas,
        gyro_bias,
        gravity,
        cost: eval.cost,
        iterations,
        degenerate: eval.solution.degenerate,
        linearization_bias: p.linearization_bias(),
    }
}

pub fn solve_mk_with(
    p: &MkProblem,
    initial_b_g: &Vector3<f64>,
    initial_gp: &GravityParams,
    settings: &MkSettings,
) -> Result<MkSolution> {
    p.validate()?;
    let g = p.gravity_magnitude;
    let relinearize = settings.relinearize && p.bias_update == BiasUpdate::FirstOrder;
    let mut problem = Cow::Borrowed(p);
    let mut theta = DVector::from_column_slice(&[
        initial_b_g.x,
        initial_b_g.y,
        initial_b_g.z,
        initial_gp.alpha,
        initial_gp.beta,
    ]);
    let steps = [
        settings.bias_step,
        settings.bias_step,
        settings.bias_step,
        settings.angle_step,
        settings.angle_step,
    ];
    let eval_at = |p: &MkProblem, theta: &DVector<f64>| {
        let (b, gp) = unpack(theta, g);
        evaluate(p, &b, &gp)
    };
    let drifted = |p: &MkProblem, theta: &DVector<f64>| {
        relinearize
            && (theta.fixed_rows::<3>(0) - p.linearization_bias()).amax()
                > settings.relinearize_tolerance
    };

    let mut current = eval_at(&problem, &theta)?;
    let mut mu = settings.initial_damping;
    let mut iterations = 0;
    let mut rejections = 0;

    'outer: while iterations < settings.max_iterations {
        if drifted(&problem, &theta) {
            let (b, _) = unpack(&theta, g);
            problem = Cow::Owned(problem.relinearized(&b)?);
            current = eval_at(&problem, &theta)?;
        }
        if current.cost == 0.0 {
            break;
        }
        iterations += 1;
        let rows = current.residual.len();
        let mut jac = DMatrix::zeros(rows, 5);
        for k in 0..5 {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[k] += steps[k];
            minus[k] -= steps[k];
            let col = (eval_at(&problem, &plus)?.residual - eval_at(&problem, &minus)?.residual)
                / (2.0 * steps[k]);
            jac.set_column(k, &col);
        }
        let grad = jac.tr_mul(&current.residual);
        let hess = jac.tr_mul(&jac);
        if grad.amax() == 0.0 {
            break;
        }

        loop {
            let mut damped = hess.clone();
            for k in 0..5 {
                damped[(k, k)] += mu * hess[(k, k)].max(f64::MIN_POSITIVE);
            }
            let step = match damped.cholesky() {
                Some(ch) => ch.solve(&-&grad),
                None => {
                    mu *= settings.damping_factor;
                    rejections += 1;
                    if rejections >= settings.max_rejections {
                        break 'outer;
                    }
                    continue;
                }
            };
            let candidate = &theta + &step;
            let trial = eval_at(&problem, &candidate)?;
            if trial.cost.is_finite() && trial.cost < current.cost {
                let decrease = (current.cost - trial.cost) / current.cost;
                theta = candidate;
                current = trial;
                mu = (mu / settings.damping_factor).max(1e-12);
                rejections = 0;
                if decrease < settings.relative_decrease && !drifted(&problem, &theta) {
                    break 'outer;
                }
                break;
            }
            mu *= settings.damping_factor;
            rejections += 1;
            if step.norm() <= 1e-10 * (theta.norm() + 1e-10) {
                // No representable improvement left.
                break 'outer;
            }
            if rejections >= settings.max_rejections {
                return Err(Error::MkDiverged {
                    last: Box::new(solution_from(&problem, &theta, &current, iterations)),
                });
            }
        }
    }
    Ok(solution_from(&problem, &theta, &current, iterations))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use crate::tracks::FeatureTrack;
    use nalgebra::Vector2;

    fn stationary_samples(secs: f64, g: f64) -> Vec<ImuSample> {
        (0..=(200.0 * secs) as usize)
            .map(|k| ImuSample {
                timestamp: k as f64 / 200.0,
                gyro: Vector3::zeros(),
                accel: Vector3::new(0.0, 0.0, g),
            })
            .collect()
    }

    fn grid_tracks(m: usize, n: usize) -> Vec<InitTrack> {
        let cam = crate::tracks::CameraModel::euroc();
        (0..m)
            .map(|i| {
                let px = Vector2::new(100.0 + 20.0 * i as f64, 120.0 + 7.0 * i as f64);
                let track =
                    FeatureTrack::from_pixels(i as u64, (0..n).map(|f| (f, px)), &cam).unwrap();
                InitTrack::restrict(&track, &(0..n).collect::<Vec<_>>()).unwrap()
            })
            .collect()
    }

    fn problem(tracks: Vec<InitTrack>, n: usize, extrinsics: Extrinsics) -> MkProblem {
        let g = crate::geometry::DEFAULT_GRAVITY;
        let samples = stationary_samples(1.0, g);
        let times: Vec<f64> = (0..n).map(|j| j as f64 * 0.2).collect();
        let deltas = preintegrate_chain(&samples, &times, BiasState::zero()).unwrap();
        MkProblem::new((0..n).collect(), tracks, deltas, samples, extrinsics, g).unwrap()
    }

    #[test]
    fn full_visibility_dimensions() {
        let p = problem(grid_tracks(20, 5), 5, Extrinsics::identity());
        let sys = build_system(&p, &Vector3::zeros(), &GravityParams::default()).unwrap();
        assert_eq!((sys.a.nrows(), sys.a.ncols()), (240, 103));
        assert_eq!(sys.s.len(), 240);
        assert!((0..sys.a.nrows()).all(|i| sys.a.row(i).count() == 3));
    }

    #[test]
    fn dropped_observation_dimensions() {
        let mut tracks = grid_tracks(20, 5);
        let t = &mut tracks[7];
        t.track.observations.remove(2);
        t.keyframe_slots.remove(2);
        let p = problem(tracks, 5, Extrinsics::identity());
        let sys = build_system(&p, &Vector3::zeros(), &GravityParams::default()).unwrap();
        assert_eq!((sys.a.nrows(), sys.a.ncols()), (237, 102));
    }

    #[test]
    fn stationary_body_has_zero_rhs() {
        let p = problem(grid_tracks(6, 4), 4, Extrinsics::identity());
        let sys = build_system(&p, &Vector3::zeros(), &GravityParams::default()).unwrap();
        assert!(sys.s.amax() < 1e-12, "max |s| = {}", sys.s.amax());
        let x = solve_linear(&sys).x;
        assert!(x.amax() < 1e-9);
    }

    #[test]
    fn empty_tracks_rejected() {
        let mut p = problem(grid_tracks(2, 3), 3, Extrinsics::identity());
        p.tracks.clear();
        assert!(matches!(
            build_system(&p, &Vector3::zeros(), &GravityParams::default()),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            solve_mk(&p, &Vector3::zeros(), &GravityParams::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn single_view_track_rejected() {
        let mut tracks = grid_tracks(3, 3);
        tracks[1].track.observations.truncate(1);
        tracks[1].keyframe_slots.truncate(1);
        let g = crate::geometry::DEFAULT_GRAVITY;
        let samples = stationary_samples(1.0, g);
        let deltas = preintegrate_chain(&samples, &[0.0, 0.2, 0.4], BiasState::zero()).unwrap();
        let r = MkProblem::new(
            vec![0, 1, 2],
            tracks,
            deltas,
            samples,
            Extrinsics::identity(),
            g,
        );
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn extrinsic_lever_arm_enters_rhs() {
        let ext = Extrinsics::new(Pose::new(
            Rotation::identity(),
            Vector3::new(0.1, -0.05, 0.02),
        ));
        // Rotating body: ΔR differs between keyframes, so the lever-arm term is non-zero.
        let g = crate::geometry::DEFAULT_GRAVITY;
        let samples: Vec<ImuSample> = (0..=200)
            .map(|k| ImuSample {
                timestamp: k as f64 / 200.0,
                gyro: Vector3::new(0.0, 0.0, 0.5),
                accel: Vector3::new(0.0, 0.0, g),
            })
            .collect();
        let deltas = preintegrate_chain(&samples, &[0.0, 0.3, 0.6], BiasState::zero()).unwrap();
        let p = MkProblem::new(
            vec![0, 1, 2],
            grid_tracks(2, 3),
            deltas.clone(),
            samples,
            ext,
            g,
        )
        .unwrap();
        let sys = build_system(&p, &Vector3::zeros(), &GravityParams::default()).unwrap();
        let t_bc = ext.body_from_camera.translation;
        let expected = (deltas[1].delta_r.matrix() - nalgebra::Matrix3::identity()) * t_bc;
        for c in 0..3 {
            assert!((sys.s[c] - expected[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn cost_invariant_to_track_order() {
        let mut p = problem(grid_tracks(8, 4), 4, Extrinsics::identity());
        // Non-trivial right-hand side via a gravity mismatch.
        let gp = GravityParams::new(0.1, -0.2, p.gravity_magnitude);
        let b = Vector3::new(0.01, 0.0, -0.02);
        let c0 = mk_cost(&p, &b, &gp).unwrap();
        p.tracks.reverse();
        let c1 = mk_cost(&p, &b, &gp).unwrap();
        assert!((c0 - c1).abs() <= 1e-10 * c0.max(1e-300), "{c0} vs {c1}");
    }

    #[test]
    fn initial_gravity_of_level_stationary_body_points_down() {
        let p = problem(grid_tracks(2, 3), 3, Extrinsics::identity());
        let gp = initial_gravity(&p);
        assert!(gp.alpha.abs() < 1e-12 && gp.beta.abs() < 1e-12);
    }
}
