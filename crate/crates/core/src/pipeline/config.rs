use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ba::{BaSettings, GraphSettings};
use crate::consensus::ConsensusSettings;
use crate::error::{Error, Result};
use crate::geometry::DEFAULT_GRAVITY;
use crate::imu::BiasUpdate;
use crate::mk::MkSettings;
use crate::sim::{NoiseModel, ProfileKind, ScenarioConfig, SceneConfig, TrajectoryProfile};

/// Pipeline parameters. Key names follow the usual symbols: `M` tracks kept
/// alive, `l` px track-length threshold, `m` tracks in the closed form, `n`
/// keyframes, and the two rejection thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(rename = "M")]
    pub total_tracks: usize,
    pub l: f64,
    pub m: usize,
    pub n: usize,
    pub t_obs: f64,
    /// Percent.
    pub t_cons: f64,
    pub gravity: f64,
    /// Attempt window length, seconds.
    pub window: f64,
    pub seed: u64,
    pub bias_update: BiasUpdate,
    pub ransac: RansacConfig,
    pub noise: GraphSettings,
    pub lm: LmConfig,
    #[serde(rename = "scenario", skip_serializing_if = "Vec::is_empty")]
    pub scenarios: Vec<ScenarioSet>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            total_tracks: 200,
            l: 200.0,
            m: 20,
            n: 5,
            t_obs: 0.1,
            t_cons: 90.0,
            gravity: DEFAULT_GRAVITY,
            window: 2.0,
            seed: 0,
            bias_update: BiasUpdate::FirstOrder,
            ransac: RansacConfig::default(),
            noise: GraphSettings::default(),
            lm: LmConfig::default(),
            scenarios: Vec::new(),
        }
    }
}

/// Fundamental-matrix filtering of the window's tracks between the first
/// keyframe and each later one. Off by default: track files are expected to come from a
/// front end that already applied it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub enabled: bool,
    /// Sampson distance, px.
    pub threshold: f64,
    pub max_iterations: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            enabled: false,
            threshold: 1.0,
            max_iterations: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub mk_max_iterations: usize,
    pub ba1_iterations: usize,
    pub ba2_iterations: usize,
    /// Robust kernel threshold on reprojection edges; `0` disables it.
    pub huber: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            mk_max_iterations: 50,
            ba1_iterations: 100,
            ba2_iterations: 30,
            huber: 2.45,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseLevel {
    #[default]
    Euroc,
    Noiseless,
}

/// `count` simulated runs with consecutive seeds, cycling through `profiles`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSet {
    pub name: String,
    pub profiles: Vec<ProfileKind>,
    pub count: usize,
    pub first_seed: u64,
    pub noise: NoiseLevel,
    /// Bound on the norm of the per-run random gyro bias, rad/s.
    pub gyro_bias_max: f64,
    /// Bound on the norm of the per-run random accelerometer bias, m/s².
    pub accel_bias_max: f64,
    pub corrupted_fraction: f64,
    pub duration: f64,
}

impl Default for ScenarioSet {
    fn default() -> Self {
        ScenarioSet {
            name: "sim".into(),
            profiles: vec![
                ProfileKind::Sinusoid3d,
                ProfileKind::Circle,
                ProfileKind::Helix,
            ],
            count: 1,
            first_seed: 0,
            noise: NoiseLevel::Euroc,
            gyro_bias_max: 0.0,
            accel_bias_max: 0.0,
            corrupted_fraction: 0.0,
            duration: 2.0,
        }
    }
}

fn random_bias(rng: &mut ChaCha8Rng, max_norm: f64) -> Vector3<f64> {
    let half = max_norm / 3f64.sqrt();
    if half <= 0.0 {
        return Vector3::zeros();
    }
    Vector3::from_fn(|_, _| rng.random_range(-half..=half))
}

impl ScenarioSet {
    /// Named scenario configurations, in seed order.
    pub fn expand(&self, config: &PipelineConfig) -> Vec<(String, ScenarioConfig)> {
        (0..self.count)
            .map(|i| {
                let seed = self.first_seed + i as u64;
                let kind = self.profiles[i % self.profiles.len()];
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(3);
                let gyro_bias = random_bias(&mut rng, self.gyro_bias_max);
                let accel_bias = random_bias(&mut rng, self.accel_bias_max);
                let base = match self.noise {
                    NoiseLevel::Euroc => NoiseModel::euroc(seed),
                    NoiseLevel::Noiseless => NoiseModel {
                        seed,
                        ..NoiseModel::noiseless()
                    },
                };
                let noise = NoiseModel {
                    corrupted_fraction: self.corrupted_fraction,
                    ..base.with_biases(gyro_bias, accel_bias)
                };
                let scenario = ScenarioConfig {
                    profile: TrajectoryProfile {
                        duration: self.duration,
                        ..TrajectoryProfile::preset(kind, seed)
                    },
                    noise,
                    scene: SceneConfig {
                        seed,
                        max_tracks: config.total_tracks,
                        gravity_magnitude: config.gravity,
                        ..SceneConfig::default()
                    },
                };
                (format!("{}-{}-{seed}", self.name, kind.name()), scenario)
            })
            .collect()
    }
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: PipelineConfig = toml::from_str(text).map_err(|e| config_error(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_error(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.m > self.total_tracks {
            return Err(config_error(format!(
                "m = {} exceeds M = {}",
                self.m, self.total_tracks
            )));
        }
        if self.n < 2 {
            return Err(config_error(format!("n = {} must be at least 2", self.n)));
        }
        if !(self.t_cons > 0.0 && self.t_cons <= 100.0) {
            return Err(config_error(format!(
                "t_cons = {} must lie in (0, 100]",
                self.t_cons
            )));
        }
        let non_negative = [
            ("l", self.l),
            ("t_obs", self.t_obs),
            ("lm.huber", self.lm.huber),
        ];
        if let Some((name, v)) = non_negative
            .iter()
            .find(|(_, v)| !(v.is_finite() && *v >= 0.0))
        {
            return Err(config_error(format!(
                "{name} = {v} must be finite and non-negative"
            )));
        }
        let positive = [
            ("gravity", self.gravity),
            ("window", self.window),
            ("ransac.threshold", self.ransac.threshold),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(config_error(format!("{name} = {v} must be positive")));
        }
        if self.lm.mk_max_iterations == 0
            || self.lm.ba1_iterations == 0
            || self.lm.ba2_iterations == 0
        {
            return Err(config_error("iteration limits must be positive"));
        }
        self.noise
            .validate()
            .map_err(|e| config_error(e.to_string()))?;
        for s in &self.scenarios {
            if s.profiles.is_empty() {
                return Err(config_error(format!(
                    "scenario '{}' lists no profiles",
                    s.name
                )));
            }
            if !(s.duration.is_finite() && s.duration > 0.0) {
                return Err(config_error(format!(
                    "scenario '{}' needs a positive duration",
                    s.name
                )));
            }
            if !(0.0..=1.0).contains(&s.corrupted_fraction) {
                return Err(config_error(format!(
                    "scenario '{}': corrupted_fraction must lie in [0, 1]",
                    s.name
                )));
            }
            if !(s.gyro_bias_max >= 0.0 && s.accel_bias_max >= 0.0) {
                return Err(config_error(format!(
                    "scenario '{}': bias bounds must be non-negative",
                    s.name
                )));
            }
        }
        Ok(())
    }

    pub fn mk_settings(&self) -> MkSettings {
        MkSettings {
            max_iterations: self.lm.mk_max_iterations,
            ..MkSettings::default()
        }
    }

    fn ba_settings(&self, max_iterations: usize) -> BaSettings {
        BaSettings {
            max_iterations,
            huber: (self.lm.huber > 0.0).then_some(self.lm.huber),
            ..BaSettings::default()
        }
    }

    pub fn ba1_settings(&self) -> BaSettings {
        self.ba_settings(self.lm.ba1_iterations)
    }

    pub fn ba2_settings(&self) -> BaSettings {
        self.ba_settings(self.lm.ba2_iterations)
    }

    pub fn consensus_settings(&self) -> ConsensusSettings {
        ConsensusSettings {
            t_cons: self.t_cons,
            sigma_px: self.noise.pixel_sigma,
            ..ConsensusSettings::default()
        }
    }

    /// All scenarios of all sets, in declaration order.
    pub fn expand_scenarios(&self) -> Vec<(String, ScenarioConfig)> {
        self.scenarios.iter().flat_map(|s| s.expand(self)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = PipelineConfig::from_toml("").unwrap();
        assert_eq!(c, PipelineConfig::default());
        assert_eq!(
            (c.total_tracks, c.l, c.m, c.n, c.t_obs, c.t_cons),
            (200, 200.0, 20, 5, 0.1, 90.0)
        );
    }

    #[test]
    fn symbol_names_and_sections() {
        let c = PipelineConfig::from_toml(
            "M = 150\nl = 120.0\nm = 15\nn = 4\nt_cons = 85.0\nbias_update = \"reintegrate\"\n\
             [noise]\npixel_sigma = 0.5\n[lm]\nba2_iterations = 10\n\
             [[scenario]]\nname = \"rot\"\nprofiles = [\"pure-rotation\"]\ncount = 3\nfirst_seed = 7\n",
        )
        .unwrap();
        assert_eq!((c.total_tracks, c.m, c.n), (150, 15, 4));
        assert_eq!(c.bias_update, BiasUpdate::Reintegrate);
        assert_eq!(c.noise.pixel_sigma, 0.5);
        assert_eq!(
            c.noise.gyro_bias_prior_sigma,
            GraphSettings::default().gyro_bias_prior_sigma
        );
        assert_eq!(c.lm.ba2_iterations, 10);
        let s = c.expand_scenarios();
        assert_eq!(s.len(), 3);
        assert_eq!(s[2].0, "rot-pure-rotation-9");
        assert_eq!(s[0].1.scene.max_tracks, 150);
    }

    #[test]
    fn rejects_invalid_values() {
        for bad in [
            "m = 300",
            "n = 1",
            "t_cons = 0.0",
            "t_cons = 101.0",
            "window = 0.0",
            "unknown = 1",
            "[noise]\npixel_sigma = -1.0",
            "[[scenario]]\nprofiles = []",
        ] {
            assert!(
                matches!(PipelineConfig::from_toml(bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn toml_round_trip() {
        let mut c = PipelineConfig::default();
        c.scenarios.push(ScenarioSet::default());
        assert_eq!(PipelineConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn scenario_biases_respect_bound() {
        let set = ScenarioSet {
            count: 50,
            gyro_bias_max: 0.05,
            ..ScenarioSet::default()
        };
        let runs = set.expand(&PipelineConfig::default());
        assert!(runs
            .iter()
            .all(|(_, s)| s.noise.gyro_bias.norm() <= 0.05 + 1e-15));
        assert!(runs.iter().all(|(_, s)| s.noise.gyro_bias.norm() > 0.0));
        assert_eq!(runs, set.expand(&PipelineConfig::default()));
    }
}
