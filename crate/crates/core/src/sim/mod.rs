//! Synthetic trajectories, IMU streams and feature tracks with ground truth.
//!
//! IMU samples are synthesized per hold interval so that zero-order-hold
//! preintegration of noiseless samples reproduces the ground-truth states
//! exactly: the gyro sample of interval `k` is `Log(R_kᵀ R_{k+1}) / dt` and
//! the accelerometer sample matches the velocity change. Ground-truth
//! positions follow the matching trapezoid recursion on the analytic
//! velocity, which stays within a few micrometers of the analytic position.

mod metrics;
mod trajectory;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use metrics::{path_length, rmse_ate, scale_error, umeyama, Alignment, AteResult, Similarity};
pub use trajectory::{nominal_orientation, ProfileKind, Trajectory, TrajectoryProfile};

use crate::error::{Error, Result};
use crate::geometry::{log_so3, Pose, DEFAULT_GRAVITY};
use crate::imu::{ns_to_seconds, ImuSample};
use crate::tracks::{CameraModel, Extrinsics, FeatureTrack, Observation};

/// EuRoC cam0 body-from-camera transform, row-major.
pub const EUROC_BODY_FROM_CAMERA: [f64; 16] = [
    0.0148655429818,
    -0.999880929698,
    0.00414029679422,
    -0.0216401454975,
    0.999557249008,
    0.0149672133247,
    0.025715529948,
    -0.064676986768,
    -0.0257744366974,
    0.00375618835797,
    0.999660727178,
    0.00981073058949,
    0.0,
    0.0,
    0.0,
    1.0,
];

/// Continuous-time noise densities of the EuRoC IMU.
pub const EUROC_GYRO_DENSITY: f64 = 1.7e-4;
pub const EUROC_ACCEL_DENSITY: f64 = 2.0e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Per-sample standard deviations.
    pub gyro_noise_sigma: f64,
    pub accel_noise_sigma: f64,
    pub pixel_sigma: f64,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
    /// Fraction of tracks replaced by a pixel random walk.
    pub corrupted_fraction: f64,
    /// Per-frame step of the corruption walk, px.
    pub corruption_step: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::euroc(0)
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        NoiseModel {
            gyro_noise_sigma: 0.0,
            accel_noise_sigma: 0.0,
            pixel_sigma: 0.0,
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
            corrupted_fraction: 0.0,
            corruption_step: 2.0,
            seed: 0,
        }
    }

    /// EuRoC-like sensor noise at 200 Hz and one-pixel feature noise.
    pub fn euroc(seed: u64) -> Self {
        let rate_sqrt = 200f64.sqrt();
        NoiseModel {
            gyro_noise_sigma: EUROC_GYRO_DENSITY * rate_sqrt,
            accel_noise_sigma: EUROC_ACCEL_DENSITY * rate_sqrt,
            pixel_sigma: 1.0,
            seed,
            ..NoiseModel::noiseless()
        }
    }

    pub fn with_biases(mut self, gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        self.gyro_bias = gyro;
        self.accel_bias = accel;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            self.gyro_noise_sigma,
            self.accel_noise_sigma,
            self.pixel_sigma,
            self.corruption_step,
        ];
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config(
                "noise sigmas must be finite and non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.corrupted_fraction) {
            return Err(Error::Config(
                "corrupted fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Landmarks, sensor rates and rig.
#[derive(Clone, Debug, PartialEq)]
pub struct SimScene {
    pub landmarks: Vec<Vector3<f64>>,
    pub camera_rate: u32,
    pub imu_rate: u32,
    pub extrinsics: Extrinsics,
    pub camera: CameraModel,
    /// Tracks kept alive at once; lost tracks are replaced.
    pub max_tracks: usize,
    pub gravity_magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub seed: u64,
    pub landmark_count: usize,
    pub box_min: Vector3<f64>,
    pub box_max: Vector3<f64>,
    pub camera_rate: u32,
    pub imu_rate: u32,
    pub max_tracks: usize,
    pub camera: CameraModel,
    pub body_from_camera: [f64; 16],
    pub gravity_magnitude: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 0,
            landmark_count: 800,
            box_min: Vector3::new(3.0, -5.0, -3.5),
            box_max: Vector3::new(8.0, 5.0, 3.5),
            camera_rate: 20,
            imu_rate: 200,
            max_tracks: 200,
            camera: CameraModel::euroc(),
            body_from_camera: EUROC_BODY_FROM_CAMERA,
            gravity_magnitude: DEFAULT_GRAVITY,
        }
    }
}

impl SceneConfig {
    pub fn build(&self) -> Result<SimScene> {
        if (0..3).any(|i| self.box_min[i] >= self.box_max[i]) {
            return Err(Error::Config(
                "landmark box must have positive extent".into(),
            ));
        }
        self.camera
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let body_from_camera = Pose::from_row_major(&self.body_from_camera)
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let landmarks = (0..self.landmark_count)
            .map(|_| Vector3::from_fn(|i, _| rng.random_range(self.box_min[i]..self.box_max[i])))
            .collect();
        let scene = SimScene {
            landmarks,
            camera_rate: self.camera_rate,
            imu_rate: self.imu_rate,
            extrinsics: Extrinsics::new(body_from_camera),
            camera: self.camera,
            max_tracks: self.max_tracks,
            gravity_magnitude: self.gravity_magnitude,
        };
        scene.validate()?;
        Ok(scene)
    }
}

impl SimScene {
    pub fn euroc_like(seed: u64) -> Self {
        SceneConfig {
            seed,
            ..SceneConfig::default()
        }
        .build()
        .expect("default scene is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.camera_rate == 0 || self.imu_rate < self.camera_rate {
            return Err(Error::Config(format!(
                "IMU rate {} must be at least the camera rate {}",
                self.imu_rate, self.camera_rate
            )));
        }
        if !self.imu_rate.is_multiple_of(self.camera_rate) || 1_000_000_000 % self.imu_rate != 0 {
            return Err(Error::Config(format!(
                "IMU rate {} must be a multiple of the camera rate {} and divide 1 GHz",
                self.imu_rate, self.camera_rate
            )));
        }
        if self.max_tracks == 0 {
            return Err(Error::Config("max_tracks must be positive".into()));
        }
        if !(self.gravity_magnitude.is_finite() && self.gravity_magnitude > 0.0) {
            return Err(Error::Config("gravity magnitude must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthState {
    pub timestamp: f64,
    /// World-from-body.
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimOutput {
    pub imu: Vec<ImuSample>,
    /// Nanosecond timestamps of the IMU samples.
    pub imu_ns: Vec<i64>,
    pub tracks: Vec<FeatureTrack>,
    /// One state per IMU sample.
    pub truth: Vec<GroundTruthState>,
    pub frame_times: Vec<f64>,
    /// IMU sample index of every camera frame.
    pub frame_samples: Vec<usize>,
    pub corrupted: Vec<u64>,
    /// Landmark index behind each track.
    pub track_landmarks: Vec<usize>,
    pub extrinsics: Extrinsics,
    pub camera: CameraModel,
    pub gravity_magnitude: f64,
}

impl SimOutput {
    pub fn frame_truth(&self, frame: usize) -> &GroundTruthState {
        &self.truth[self.frame_samples[frame]]
    }

    pub fn frame_count(&self) -> usize {
        self.frame_times.len()
    }
}

/// Everything needed to reproduce one simulated run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub profile: TrajectoryProfile,
    pub noise: NoiseModel,
    pub scene: SceneConfig,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn simulate(&self) -> Result<SimOutput> {
        simulate(&self.profile, &self.noise, &self.scene.build()?)
    }
}

const VISIBILITY_MARGIN: f64 = 4.0;
const MIN_DEPTH: f64 = 0.3;

fn gaussian(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated")
}

pub fn simulate(
    profile: &TrajectoryProfile,
    noise: &NoiseModel,
    scene: &SimScene,
) -> Result<SimOutput> {
    noise.validate()?;
    scene.validate()?;
    if !(profile.duration.is_finite() && profile.duration > 0.0) {
        return Err(Error::Config("trajectory duration must be positive".into()));
    }
    let traj = profile.trajectory();
    let period_ns = 1_000_000_000 / scene.imu_rate as i64;
    let ratio = (scene.imu_rate / scene.camera_rate) as usize;
    let samples = (profile.duration * scene.imu_rate as f64).round() as usize;
    let imu_ns: Vec<i64> = (0..=samples as i64).map(|k| k * period_ns).collect();
    let times: Vec<f64> = imu_ns.iter().map(|&ns| ns_to_seconds(ns)).collect();
    let g = Vector3::new(0.0, 0.0, -scene.gravity_magnitude);

    let rotations: Vec<_> = times.iter().map(|&t| traj.orientation(t)).collect();
    let velocities: Vec<_> = times.iter().map(|&t| traj.velocity(t)).collect();
    let mut positions = Vec::with_capacity(times.len());
    positions.push(traj.position(times[0]));
    for k in 1..times.len() {
        let dt = times[k] - times[k - 1];
        positions.push(positions[k - 1] + (velocities[k - 1] + velocities[k]) * (0.5 * dt));
    }

    let mut imu_rng = ChaCha8Rng::seed_from_u64(noise.seed);
    imu_rng.set_stream(1);
    let gyro_n = gaussian(noise.gyro_noise_sigma);
    let accel_n = gaussian(noise.accel_noise_sigma);
    let mut noise3 = |d: &Normal<f64>| Vector3::from_fn(|_, _| d.sample(&mut imu_rng));
    let imu: Vec<ImuSample> = (0..times.len())
        .map(|k| {
            // The last sample only opens an interval nobody integrates.
            let j = if k + 1 < times.len() {
                k
            } else {
                k.saturating_sub(1)
            };
            let dt = times[j + 1] - times[j];
            let rk = &rotations[j];
            let omega = log_so3(&(rk.inverse() * rotations[j + 1])) / dt;
            let force = rk.inverse() * ((velocities[j + 1] - velocities[j]) / dt - g);
            ImuSample {
                timestamp: times[k],
                gyro: omega + noise.gyro_bias + noise3(&gyro_n),
                accel: force + noise.accel_bias + noise3(&accel_n),
            }
        })
        .collect();

    let truth: Vec<GroundTruthState> = (0..times.len())
        .map(|k| GroundTruthState {
            timestamp: times[k],
            pose: Pose::new(rotations[k], positions[k]),
            velocity: velocities[k],
            gyro_bias: noise.gyro_bias,
            accel_bias: noise.accel_bias,
        })
        .collect();

    let frame_samples: Vec<usize> = (0..times.len()).step_by(ratio).collect();
    let frame_times: Vec<f64> = frame_samples.iter().map(|&k| times[k]).collect();
    let (tracks, corrupted, track_landmarks) =
        synthesize_tracks(&truth, &frame_samples, noise, scene)?;

    Ok(SimOutput {
        imu,
        imu_ns,
        tracks,
        truth,
        frame_times,
        frame_samples,
        corrupted,
        track_landmarks,
        extrinsics: scene.extrinsics,
        camera: scene.camera,
        gravity_magnitude: scene.gravity_magnitude,
    })
}

struct ActiveTrack {
    landmark: usize,
    corrupted: bool,
    walk: Vector2<f64>,
    pixels: Vec<(usize, Vector2<f64>)>,
    id: u64,
}

fn synthesize_tracks(
    truth: &[GroundTruthState],
    frame_samples: &[usize],
    noise: &NoiseModel,
    scene: &SimScene,
) -> Result<(Vec<FeatureTrack>, Vec<u64>, Vec<usize>)> {
    let cam = &scene.camera;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    rng.set_stream(2);
    let pixel_n = gaussian(noise.pixel_sigma);
    let walk_n = gaussian(noise.corruption_step);
    let inside = |px: &Vector2<f64>| {
        px.x >= VISIBILITY_MARGIN
            && px.y >= VISIBILITY_MARGIN
            && px.x < cam.width as f64 - VISIBILITY_MARGIN
            && px.y < cam.height as f64 - VISIBILITY_MARGIN
    };
    let clamp = |px: Vector2<f64>| {
        Vector2::new(
            px.x.clamp(0.0, cam.width as f64 - 1e-6),
            px.y.clamp(0.0, cam.height as f64 - 1e-6),
        )
    };

    let mut active: Vec<ActiveTrack> = Vec::new();
    let mut finished: Vec<ActiveTrack> = Vec::new();
    let mut next_id = 0u64;
    for (frame, &k) in frame_samples.iter().enumerate() {
        let cam_from_world = scene.extrinsics.camera_pose(&truth[k].pose).inverse();
        let visible: Vec<Option<Vector2<f64>>> = scene
            .landmarks
            .iter()
            .map(|x| {
                let xc = cam_from_world.transform_point(x);
                if xc.z < MIN_DEPTH {
                    return None;
                }
                cam.project(&xc).filter(inside)
            })
            .collect();
        if frame == 0 && visible.iter().all(Option::is_none) {
            return Err(Error::Config(
                "no landmark is visible from the first frame".into(),
            ));
        }

        let (keep, lost): (Vec<_>, Vec<_>) = active
            .drain(..)
            .partition(|t| visible[t.landmark].is_some());
        active = keep;
        finished.extend(lost);

        let mut tracked = vec![false; scene.landmarks.len()];
        active.iter().for_each(|t| tracked[t.landmark] = true);
        let mut candidates: Vec<usize> = (0..scene.landmarks.len())
            .filter(|&i| visible[i].is_some() && !tracked[i])
            .collect();
        while active.len() < scene.max_tracks && !candidates.is_empty() {
            let pick = rng.random_range(0..candidates.len());
            let landmark = candidates.swap_remove(pick);
            let corrupted =
                noise.corrupted_fraction > 0.0 && rng.random_bool(noise.corrupted_fraction);
            active.push(ActiveTrack {
                landmark,
                corrupted,
                walk: visible[landmark].unwrap(),
                pixels: Vec::new(),
                id: next_id,
            });
            next_id += 1;
        }

        for t in &mut active {
            let px = if t.corrupted {
                if !t.pixels.is_empty() {
                    t.walk += Vector2::new(walk_n.sample(&mut rng), walk_n.sample(&mut rng));
                }
                t.walk
            } else {
                let truth_px = visible[t.landmark].unwrap();
                truth_px + Vector2::new(pixel_n.sample(&mut rng), pixel_n.sample(&mut rng))
            };
            t.pixels.push((frame, clamp(px)));
        }
    }
    finished.extend(active);
    finished.sort_by_key(|t| t.id);

    let mut corrupted = Vec::new();
    let landmarks = finished.iter().map(|t| t.landmark).collect();
    let tracks = finished
        .into_iter()
        .map(|t| {
            if t.corrupted {
                corrupted.push(t.id);
            }
            let observations = t
                .pixels
                .into_iter()
                .map(|(frame, pixel)| Observation {
                    frame,
                    pixel,
                    bearing: cam.bearing(&pixel),
                })
                .collect();
            FeatureTrack {
                id: t.id,
                observations,
            }
        })
        .collect();
    Ok((tracks, corrupted, landmarks))
}

impl SimOutput {
    /// Distance from the camera center at `frame` to the landmark behind track `index`.
    pub fn true_depth(&self, index: usize, frame: usize, scene: &SimScene) -> f64 {
        let x = scene.landmarks[self.track_landmarks[index]];
        let cam = self.extrinsics.camera_pose(&self.frame_truth(frame).pose);
        (x - cam.translation).norm()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::gravity_vector;
    use crate::geometry::GravityParams;
    use crate::imu::{predict_state, preintegrate_span, BiasState};

    fn run(kind: ProfileKind, noise: NoiseModel) -> SimOutput {
        simulate(
            &TrajectoryProfile::preset(kind, 5),
            &noise,
            &SimScene::euroc_like(5),
        )
        .unwrap()
    }

    #[test]
    fn stationary_measures_gravity_only() {
        let out = run(ProfileKind::Stationary, NoiseModel::noiseless());
        for s in &out.imu {
            assert!(s.gyro.norm() < 1e-12);
            assert!((s.accel.norm() - 9.81).abs() < 1e-12);
        }
        let r = out.truth[0].pose.rotation;
        let expected = r.inverse() * Vector3::new(0.0, 0.0, 9.81);
        assert!((out.imu[0].accel - expected).norm() < 1e-12);
    }

    #[test]
    fn constant_velocity_force_is_gravity_only() {
        let out = run(ProfileKind::ConstantVelocity, NoiseModel::noiseless());
        // the final sample repeats the last interval
        for (s, gt) in out.imu.iter().zip(&out.truth).take(out.imu.len() - 1) {
            let expected = gt.pose.rotation.inverse() * Vector3::new(0.0, 0.0, 9.81);
            assert!((s.accel - expected).norm() < 1e-9);
        }
    }

    #[test]
    fn preintegration_reproduces_analytic_state() {
        let out = run(ProfileKind::Sinusoid3d, NoiseModel::noiseless());
        let traj = TrajectoryProfile::preset(ProfileKind::Sinusoid3d, 5).trajectory();
        let (t0, t1) = (out.imu[0].timestamp, out.imu.last().unwrap().timestamp);
        let d = preintegrate_span(&out.imu, t0, t1, BiasState::zero()).unwrap();
        let g = gravity_vector(&GravityParams::default());
        let s0 = &out.truth[0];
        let (_, vj, pj) = predict_state(
            &d,
            &s0.pose.rotation,
            &s0.velocity,
            &s0.pose.translation,
            &g,
        );
        assert!((pj - traj.position(t1)).norm() < 1e-3);
        // Against the discrete ground truth the fit is exact up to rounding.
        let last = out.truth.last().unwrap();
        assert!((pj - last.pose.translation).norm() < 1e-9);
        assert!((vj - last.velocity).norm() < 1e-9);
    }

    #[test]
    fn visible_track_count_is_maintained() {
        let out = run(ProfileKind::Sinusoid3d, NoiseModel::euroc(1));
        for f in 0..out.frame_count() {
            let n = out
                .tracks
                .iter()
                .filter(|t| t.observation_at(f).is_some())
                .count();
            assert_eq!(n, 200, "frame {f}");
        }
        for t in &out.tracks {
            t.validate().unwrap();
            assert!(t.observations.iter().all(|o| out.camera.contains(&o.pixel)));
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let noise = NoiseModel {
            corrupted_fraction: 0.2,
            ..NoiseModel::euroc(3)
        };
        let a = run(ProfileKind::Helix, noise);
        let b = run(ProfileKind::Helix, noise);
        assert_eq!(a, b);
        assert!(!a.corrupted.is_empty());
    }

    #[test]
    fn no_visible_landmarks_is_config_error() {
        let scene = SceneConfig {
            box_min: Vector3::new(-8.0, -1.0, -1.0),
            box_max: Vector3::new(-3.0, 1.0, 1.0),
            ..SceneConfig::default()
        }
        .build()
        .unwrap();
        let r = simulate(
            &TrajectoryProfile::default(),
            &NoiseModel::noiseless(),
            &scene,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn incompatible_rates_rejected() {
        let cfg = SceneConfig {
            camera_rate: 30,
            ..SceneConfig::default()
        };
        assert!(matches!(cfg.build(), Err(Error::Config(_))));
    }

    #[test]
    fn scenario_config_from_toml() {
        let cfg = ScenarioConfig::from_toml(
            r#"
            [profile]
            kind = "circle"
            duration = 1.5
            [noise]
            pixel_sigma = 0.5
            [scene]
            seed = 4
            "#,
        )
        .unwrap();
        assert_eq!(cfg.profile.kind, ProfileKind::Circle);
        assert_eq!(cfg.profile.duration, 1.5);
        assert_eq!(cfg.noise.pixel_sigma, 0.5);
        assert_eq!(cfg.scene.seed, 4);
        assert_eq!(cfg.scene.imu_rate, 200);
    }
}
