//! Visual-inertial bundle adjustment over the keyframe window.
//!
//! The graph lives in a world frame whose z axis is aligned with gravity.
//! The first keyframe's translation and yaw are held fixed, which removes
//! the four unobservable directions of the visual-inertial problem.

mod optimize;
mod residuals;

use nalgebra::{DMatrix, Matrix2, Matrix6, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

pub use optimize::{
    graph_cost, linearize, optimize, optimize_with, BaOutcome, BaSettings, LinearizedEdge,
};
pub use residuals::{
    inertial_information, inertial_residual, reprojection_residual, InertialJacobians,
    ReprojectionJacobians, Vector9, MIN_CAMERA_DEPTH,
};

use crate::error::{Error, Result};
use crate::geometry::{exp_so3, gravity_vector, Pose, Rotation};
use crate::imu::{
    predict_state, preintegrate_chain, preintegrate_span, BiasState, PreintegratedDelta,
};
use crate::mk::{MkProblem, MkSolution};
use crate::tracks::{CameraModel, Extrinsics};

/// Pose, velocity and gauge mask of one keyframe. `rotation` is world from body.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyframeState {
    pub rotation: Rotation,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    /// Frozen pose dofs: rotation about world x, y, z, then translation along
    /// world x, y, z.
    pub fixed_dofs: [bool; 6],
}

impl KeyframeState {
    pub fn free(rotation: Rotation, position: Vector3<f64>, velocity: Vector3<f64>) -> Self {
        KeyframeState {
            rotation,
            position,
            velocity,
            fixed_dofs: [false; 6],
        }
    }

    /// Yaw and translation frozen.
    pub fn gauge_anchor(
        rotation: Rotation,
        position: Vector3<f64>,
        velocity: Vector3<f64>,
    ) -> Self {
        KeyframeState {
            fixed_dofs: [false, false, true, true, true, true],
            ..Self::free(rotation, position, velocity)
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.position)
    }

    /// Tangent directions of the free rotation dofs, in the body frame.
    ///
    /// With nothing fixed this is the identity (right perturbation);
    /// otherwise the free world axes are mapped into the body.
    pub fn rotation_basis(&self) -> DMatrix<f64> {
        if !self.fixed_dofs[..3].iter().any(|&f| f) {
            return DMatrix::identity(3, 3);
        }
        let rt = self.rotation.matrix().transpose();
        let cols: Vec<_> = (0..3)
            .filter(|&k| !self.fixed_dofs[k])
            .map(|k| rt.column(k).into_owned())
            .collect();
        DMatrix::from_fn(3, cols.len(), |r, c| cols[c][r])
    }

    pub fn position_basis(&self) -> DMatrix<f64> {
        let cols: Vec<usize> = (0..3).filter(|&k| !self.fixed_dofs[3 + k]).collect();
        DMatrix::from_fn(3, cols.len(), |r, c| if r == cols[c] { 1.0 } else { 0.0 })
    }

    pub fn rotation_dofs(&self) -> usize {
        self.fixed_dofs[..3].iter().filter(|&&f| !f).count()
    }

    pub fn position_dofs(&self) -> usize {
        self.fixed_dofs[3..].iter().filter(|&&f| !f).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    /// Id of the feature track the point was built from.
    pub id: u64,
    pub position: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReprojectionEdge {
    pub keyframe: usize,
    pub point: usize,
    pub pixel: Vector2<f64>,
    pub information: Matrix2<f64>,
}

/// Links consecutive keyframes `from` and `to`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InertialEdge {
    pub from: usize,
    pub to: usize,
    pub delta: PreintegratedDelta,
    pub information: SMatrix<f64, 9, 9>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiasPriorEdge {
    pub mean: BiasState,
    pub information: Matrix6<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MeasurementEdge {
    Reprojection(ReprojectionEdge),
    Inertial(InertialEdge),
    BiasPrior(BiasPriorEdge),
}

impl MeasurementEdge {
    pub fn dimension(&self) -> usize {
        match self {
            MeasurementEdge::Reprojection(_) => 2,
            MeasurementEdge::Inertial(_) => 9,
            MeasurementEdge::BiasPrior(_) => 6,
        }
    }

    pub fn information(&self) -> DMatrix<f64> {
        match self {
            MeasurementEdge::Reprojection(e) => {
                DMatrix::from_column_slice(2, 2, e.information.as_slice())
            }
            MeasurementEdge::Inertial(e) => {
                DMatrix::from_column_slice(9, 9, e.information.as_slice())
            }
            MeasurementEdge::BiasPrior(e) => {
                DMatrix::from_column_slice(6, 6, e.information.as_slice())
            }
        }
    }
}

/// Noise parameters that set the edge information matrices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSettings {
    pub pixel_sigma: f64,
    /// rad/s/√Hz
    pub gyro_noise_density: f64,
    /// m/s²/√Hz
    pub accel_noise_density: f64,
    pub gyro_bias_prior_sigma: f64,
    pub accel_bias_prior_sigma: f64,
}

impl Default for GraphSettings {
    fn default() -> Self {
        GraphSettings {
            pixel_sigma: 1.0,
            gyro_noise_density: 1.7e-4,
            accel_noise_density: 2.0e-3,
            gyro_bias_prior_sigma: 0.01,
            accel_bias_prior_sigma: 0.1,
        }
    }
}

impl GraphSettings {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.pixel_sigma,
            self.gyro_noise_density,
            self.accel_noise_density,
            self.gyro_bias_prior_sigma,
            self.accel_bias_prior_sigma,
        ];
        if all.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Config(
                "noise parameters must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    fn pixel_information(&self) -> Matrix2<f64> {
        Matrix2::identity() / (self.pixel_sigma * self.pixel_sigma)
    }
}

/// Keyframe states, a shared IMU bias, map points and the edges tying them.
#[derive(Clone, Debug, PartialEq)]
pub struct InitGraph {
    pub keyframes: Vec<KeyframeState>,
    /// Frame index of each keyframe.
    pub keyframe_frames: Vec<usize>,
    pub keyframe_times: Vec<f64>,
    pub bias: BiasState,
    pub points: Vec<MapPoint>,
    pub edges: Vec<MeasurementEdge>,
    pub extrinsics: Extrinsics,
    pub camera: CameraModel,
    /// Gravity in the world frame, `(0, 0, −g)`.
    pub gravity: Vector3<f64>,
    pub settings: GraphSettings,
}

impl InitGraph {
    pub fn body_poses(&self) -> Vec<Pose> {
        self.keyframes.iter().map(KeyframeState::pose).collect()
    }

    pub fn reprojection_edges(&self) -> impl Iterator<Item = &ReprojectionEdge> {
        self.edges.iter().filter_map(|e| match e {
            MeasurementEdge::Reprojection(r) => Some(r),
            _ => None,
        })
    }

    /// Adds a point with one reprojection edge per `(keyframe, pixel)`.
    pub fn add_point(
        &mut self,
        id: u64,
        position: Vector3<f64>,
        observations: &[(usize, Vector2<f64>)],
    ) -> Result<usize> {
        if observations.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "point {id} needs two observations, got {}",
                observations.len()
            )));
        }
        if let Some(&(k, _)) = observations
            .iter()
            .find(|(k, _)| *k >= self.keyframes.len())
        {
            return Err(Error::InvalidArgument(format!(
                "point {id} observed by missing keyframe {k}"
            )));
        }
        let index = self.points.len();
        self.points.push(MapPoint { id, position });
        let information = self.settings.pixel_information();
        for &(keyframe, pixel) in observations {
            self.edges
                .push(MeasurementEdge::Reprojection(ReprojectionEdge {
                    keyframe,
                    point: index,
                    pixel,
                    information,
                }));
        }
        Ok(index)
    }

    /// The same graph with every gauge dof released.
    pub fn without_gauge(&self) -> InitGraph {
        let mut g = self.clone();
        for kf in &mut g.keyframes {
            kf.fixed_dofs = [false; 6];
        }
        g
    }

    /// Rigidly moves every state by `transform`, a rotation about world z
    /// plus a translation; gravity is left untouched.
    pub fn transformed(&self, yaw: f64, translation: &Vector3<f64>) -> InitGraph {
        let r = exp_so3(&Vector3::new(0.0, 0.0, yaw));
        let mut g = self.clone();
        for kf in &mut g.keyframes {
            kf.rotation = r * kf.rotation;
            kf.position = r * kf.position + translation;
            kf.velocity = r * kf.velocity;
        }
        for p in &mut g.points {
            p.position = r * p.position + translation;
        }
        g
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::new(self)
    }
}

/// Placement of each state block in the stacked tangent vector:
/// keyframes (rotation, position, velocity) first, then the bias, then points.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateLayout {
    /// Offset and dimension of each keyframe's rotation, position and velocity.
    pub keyframes: Vec<[(usize, usize); 3]>,
    pub bias: usize,
    pub points: usize,
    pub point_count: usize,
}

/// Identifies one state block of the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StateBlock {
    Rotation(usize),
    Position(usize),
    Velocity(usize),
    Bias,
    Point(usize),
}

impl StateLayout {
    pub fn new(graph: &InitGraph) -> Self {
        let mut offset = 0;
        let mut keyframes = Vec::with_capacity(graph.keyframes.len());
        for kf in &graph.keyframes {
            let r = (offset, kf.rotation_dofs());
            offset += r.1;
            let p = (offset, kf.position_dofs());
            offset += p.1;
            let v = (offset, 3);
            offset += 3;
            keyframes.push([r, p, v]);
        }
        let bias = offset;
        StateLayout {
            keyframes,
            bias,
            points: bias + 6,
            point_count: graph.points.len(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.points + 3 * self.point_count
    }

    /// Dimension of the non-point part.
    pub fn camera_dimension(&self) -> usize {
        self.points
    }

    pub fn range(&self, block: StateBlock) -> (usize, usize) {
        match block {
            StateBlock::Rotation(k) => self.keyframes[k][0],
            StateBlock::Position(k) => self.keyframes[k][1],
            StateBlock::Velocity(k) => self.keyframes[k][2],
            StateBlock::Bias => (self.bias, 6),
            StateBlock::Point(i) => (self.points + 3 * i, 3),
        }
    }
}

/// Builds the initialization graph from a closed-form solution.
///
/// The world frame is the first body frame rotated so that the estimated
/// gravity points along −z. Keyframe states are propagated from the first
/// through the deltas integrated at the estimated gyroscope bias, points are
/// back-projected from their anchor keyframe and the accelerometer bias
/// starts at zero.
pub fn graph_from_mk(
    sol: &MkSolution,
    problem: &MkProblem,
    camera: &CameraModel,
    settings: &GraphSettings,
) -> Result<InitGraph> {
    settings.validate()?;
    problem.validate()?;
    if sol.lambdas.len() != problem.tracks.len() {
        return Err(Error::InvalidArgument(format!(
            "solution has {} tracks, problem {}",
            sol.lambdas.len(),
            problem.tracks.len()
        )));
    }
    let g = problem.gravity_magnitude;
    let world_gravity = Vector3::new(0.0, 0.0, -g);
    let r1 = sol.gravity.rotation().inverse();
    debug_assert!((r1 * gravity_vector(&sol.gravity) - world_gravity).norm() < 1e-9 * g.max(1.0));

    let bias = BiasState::new(sol.gyro_bias, Vector3::zeros());
    let times: Vec<f64> = problem.deltas.iter().map(|d| d.t_end).collect();
    let chain = preintegrate_chain(&problem.samples, &times, bias)?;
    let v1 = r1 * sol.v1;
    let p1 = Vector3::zeros();
    let mut keyframes = Vec::with_capacity(times.len());
    keyframes.push(KeyframeState::gauge_anchor(r1, p1, v1));
    for d in &chain[1..] {
        let (r, v, p) = predict_state(d, &r1, &v1, &p1, &world_gravity);
        keyframes.push(KeyframeState::free(r.renormalized(), p, v));
    }

    let mut graph = InitGraph {
        keyframes,
        keyframe_frames: problem.keyframes.clone(),
        keyframe_times: times.clone(),
        bias,
        points: Vec::new(),
        edges: Vec::new(),
        extrinsics: problem.extrinsics,
        camera: *camera,
        gravity: world_gravity,
        settings: *settings,
    };

    for w in times.windows(2).enumerate() {
        let (k, t) = w;
        let delta = preintegrate_span(&problem.samples, t[0], t[1], bias)?;
        graph.edges.push(MeasurementEdge::Inertial(InertialEdge {
            from: k,
            to: k + 1,
            information: inertial_information(
                delta.dt,
                settings.gyro_noise_density,
                settings.accel_noise_density,
            ),
            delta,
        }));
    }
    let prior = Matrix6::from_diagonal(&nalgebra::Vector6::new(
        settings.gyro_bias_prior_sigma.powi(-2),
        settings.gyro_bias_prior_sigma.powi(-2),
        settings.gyro_bias_prior_sigma.powi(-2),
        settings.accel_bias_prior_sigma.powi(-2),
        settings.accel_bias_prior_sigma.powi(-2),
        settings.accel_bias_prior_sigma.powi(-2),
    ));
    graph.edges.push(MeasurementEdge::BiasPrior(BiasPriorEdge {
        mean: bias,
        information: prior,
    }));

    for (track, lambdas) in problem.tracks.iter().zip(&sol.lambdas) {
        let anchor = track.anchor();
        let cam = problem
            .extrinsics
            .camera_pose(&graph.keyframes[anchor].pose());
        let x = cam.transform_point(&(track.track.observations[0].bearing * lambdas[0]));
        let obs: Vec<(usize, Vector2<f64>)> = track
            .keyframe_slots
            .iter()
            .zip(&track.track.observations)
            .map(|(&s, o)| (s, o.pixel))
            .collect();
        graph.add_point(track.track.id, x, &obs)?;
    }
    Ok(graph)
}
