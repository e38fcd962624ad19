use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geometry::{exp_so3, Pose, Rotation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileKind {
    #[serde(rename = "sinusoid-3d")]
    Sinusoid3d,
    Circle,
    Helix,
    PureRotation,
    ConstantVelocity,
    Stationary,
}

impl ProfileKind {
    pub const ALL: [ProfileKind; 6] = [
        ProfileKind::Sinusoid3d,
        ProfileKind::Circle,
        ProfileKind::Helix,
        ProfileKind::PureRotation,
        ProfileKind::ConstantVelocity,
        ProfileKind::Stationary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProfileKind::Sinusoid3d => "sinusoid-3d",
            ProfileKind::Circle => "circle",
            ProfileKind::Helix => "helix",
            ProfileKind::PureRotation => "pure-rotation",
            ProfileKind::ConstantVelocity => "constant-velocity",
            ProfileKind::Stationary => "stationary",
        }
    }

    /// Whether the body accelerates, which is what makes scale observable.
    pub fn is_accelerated(self) -> bool {
        matches!(
            self,
            ProfileKind::Sinusoid3d | ProfileKind::Circle | ProfileKind::Helix
        )
    }
}

impl fmt::Display for ProfileKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProfileKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        ProfileKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown trajectory profile '{s}'")))
    }
}

/// Parametric body motion. Position amplitudes in meters, frequencies in Hz,
/// rotation amplitudes in radians about the world axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "ProfileFile")]
pub struct TrajectoryProfile {
    pub kind: ProfileKind,
    pub duration: f64,
    pub amplitude: Vector3<f64>,
    pub frequency: f64,
    pub rotation_amplitude: Vector3<f64>,
    pub rotation_frequency: f64,
    /// Drift for constant-velocity and helix motion, m/s.
    pub velocity: Vector3<f64>,
    /// Randomizes phases and the drift direction.
    pub seed: u64,
}

/// On-disk form: unspecified fields take the preset of `kind`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    #[serde(default = "default_kind")]
    kind: ProfileKind,
    #[serde(default)]
    seed: u64,
    duration: Option<f64>,
    amplitude: Option<Vector3<f64>>,
    frequency: Option<f64>,
    rotation_amplitude: Option<Vector3<f64>>,
    rotation_frequency: Option<f64>,
    velocity: Option<Vector3<f64>>,
}

fn default_kind() -> ProfileKind {
    ProfileKind::Sinusoid3d
}

impl From<ProfileFile> for TrajectoryProfile {
    fn from(f: ProfileFile) -> Self {
        let p = TrajectoryProfile::preset(f.kind, f.seed);
        TrajectoryProfile {
            duration: f.duration.unwrap_or(p.duration),
            amplitude: f.amplitude.unwrap_or(p.amplitude),
            frequency: f.frequency.unwrap_or(p.frequency),
            rotation_amplitude: f.rotation_amplitude.unwrap_or(p.rotation_amplitude),
            rotation_frequency: f.rotation_frequency.unwrap_or(p.rotation_frequency),
            velocity: f.velocity.unwrap_or(p.velocity),
            ..p
        }
    }
}

impl Default for TrajectoryProfile {
    fn default() -> Self {
        TrajectoryProfile::preset(ProfileKind::Sinusoid3d, 0)
    }
}

impl TrajectoryProfile {
    pub fn preset(kind: ProfileKind, seed: u64) -> Self {
        let base = TrajectoryProfile {
            kind,
            duration: 2.0,
            amplitude: Vector3::new(0.4, 0.35, 0.25),
            frequency: 0.45,
            rotation_amplitude: Vector3::new(0.12, 0.15, 0.1),
            rotation_frequency: 0.5,
            velocity: Vector3::zeros(),
            seed,
        };
        match kind {
            ProfileKind::Sinusoid3d => base,
            ProfileKind::Circle => TrajectoryProfile {
                amplitude: Vector3::new(0.0, 0.5, 0.5),
                frequency: 0.35,
                ..base
            },
            ProfileKind::Helix => TrajectoryProfile {
                amplitude: Vector3::new(0.0, 0.45, 0.45),
                frequency: 0.35,
                velocity: Vector3::new(0.3, 0.0, 0.0),
                ..base
            },
            ProfileKind::PureRotation => TrajectoryProfile {
                amplitude: Vector3::zeros(),
                rotation_amplitude: Vector3::new(0.25, 0.3, 0.2),
                ..base
            },
            ProfileKind::ConstantVelocity => TrajectoryProfile {
                amplitude: Vector3::zeros(),
                velocity: Vector3::new(0.2, 0.5, 0.15),
                ..base
            },
            ProfileKind::Stationary => TrajectoryProfile {
                amplitude: Vector3::zeros(),
                rotation_amplitude: Vector3::zeros(),
                ..base
            },
        }
    }

    pub fn trajectory(&self) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut phases = || Vector3::from_fn(|_, _| rng.random_range(0.0..TAU));
        let phase = phases();
        let rotation_phase = phases();
        let velocity = if self.kind == ProfileKind::ConstantVelocity {
            // Random direction at the configured speed.
            let speed = self.velocity.norm();
            let d = Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.5..0.5),
            );
            if d.norm() > 1e-3 {
                d.normalize() * speed
            } else {
                self.velocity
            }
        } else {
            self.velocity
        };
        Trajectory {
            profile: *self,
            phase,
            rotation_phase,
            velocity,
        }
    }
}

/// Body orientation at zero rotation offset: camera looking along world +x.
pub fn nominal_orientation() -> Matrix3<f64> {
    Matrix3::new(0.0, 0.0, 1.0, 0.0, -1.0, 0.0, 1.0, 0.0, 0.0)
}

const AXIS_RATES: [f64; 3] = [1.0, 1.17, 0.83];

/// A profile with its random phases resolved.
#[derive(Clone, Copy, Debug)]
pub struct Trajectory {
    pub profile: TrajectoryProfile,
    phase: Vector3<f64>,
    rotation_phase: Vector3<f64>,
    velocity: Vector3<f64>,
}

impl Trajectory {
    fn omega(&self) -> f64 {
        TAU * self.profile.frequency
    }

    /// `(position, velocity, acceleration)` in the world frame.
    pub fn kinematics(&self, t: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let pr = &self.profile;
        let w = self.omega();
        let drift = self.velocity;
        match pr.kind {
            ProfileKind::Sinusoid3d => {
                let mut p = Vector3::zeros();
                let mut v = Vector3::zeros();
                let mut a = Vector3::zeros();
                for i in 0..3 {
                    let wi = w * AXIS_RATES[i];
                    let arg = wi * t + self.phase[i];
                    p[i] = pr.amplitude[i] * arg.sin();
                    v[i] = pr.amplitude[i] * wi * arg.cos();
                    a[i] = -pr.amplitude[i] * wi * wi * arg.sin();
                }
                (p, v, a)
            }
            ProfileKind::Circle | ProfileKind::Helix => {
                let arg = w * t + self.phase[0];
                let (s, c) = arg.sin_cos();
                let (ry, rz) = (pr.amplitude.y, pr.amplitude.z);
                let p = Vector3::new(0.0, ry * c, rz * s) + drift * t;
                let v = Vector3::new(0.0, -ry * w * s, rz * w * c) + drift;
                let a = Vector3::new(0.0, -ry * w * w * c, -rz * w * w * s);
                (p, v, a)
            }
            ProfileKind::ConstantVelocity => (drift * t, drift, Vector3::zeros()),
            ProfileKind::PureRotation | ProfileKind::Stationary => {
                (Vector3::zeros(), Vector3::zeros(), Vector3::zeros())
            }
        }
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        self.kinematics(t).0
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        self.kinematics(t).1
    }

    /// World-from-body rotation.
    pub fn orientation(&self, t: f64) -> Rotation {
        let pr = &self.profile;
        let wr = TAU * pr.rotation_frequency;
        let theta = Vector3::from_fn(|i, _| {
            pr.rotation_amplitude[i] * (wr * AXIS_RATES[i] * t + self.rotation_phase[i]).sin()
        });
        exp_so3(&theta) * Rotation::from_matrix_unchecked(nominal_orientation())
    }

    pub fn pose(&self, t: f64) -> Pose {
        Pose::new(self.orientation(t), self.position(t))
    }
}
