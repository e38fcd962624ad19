//! Windowed initialization attempts over a recorded or simulated sequence.
//!
//! Each attempt runs the track-length gate, the closed-form solver, BA1, the
//! observability test, the consensus test, BA2 and the map export, stopping
//! at the first failed gate.

mod config;
mod report;

use std::collections::HashSet;
use std::time::Instant;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{LmConfig, NoiseLevel, PipelineConfig, RansacConfig, ScenarioSet};
pub use report::{
    read_attempts, summarize, timing_summary, write_attempts, write_outputs, write_summary_csv,
    write_timings_csv, Accuracy, BaStage, ConsensusGate, Gates, InitReport, KeyframeEstimate,
    MkStage, ObservabilityGate, Outcome, StageError, StageTimings, Summary, SummaryRow, TimingRow,
    TrackLengthGate,
};

use crate::ba::{graph_from_mk, optimize_with, InitGraph};
use crate::consensus::consensus_test;
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::imu::{preintegrate_chain, BiasState, ImuSample};
use crate::io::{load_camera, load_euroc_imu, load_groundtruth, load_tracks, DatasetPaths};
use crate::map::{build_initial_map, InitialMap};
use crate::mk::{initial_gravity, solve_mk_with, MkProblem};
use crate::observability::{assemble_hessian, observability_test};
use crate::sim::{path_length, rmse_ate, scale_error, Alignment, SimOutput};
use crate::tracks::{
    count_long_tracks, ransac_fundamental_filter, select_init_features, select_keyframes,
    CameraModel, Extrinsics, FeatureTrack,
};

/// Ground-truth poses are matched to frames within this many seconds.
const TRUTH_TOLERANCE: f64 = 2.5e-3;

/// One sequence of IMU samples and feature tracks with optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub imu: Vec<ImuSample>,
    pub frame_times: Vec<f64>,
    pub tracks: Vec<FeatureTrack>,
    pub camera: CameraModel,
    pub extrinsics: Extrinsics,
    /// World-from-body pose per frame; empty without ground truth.
    pub truth: Vec<Option<Pose>>,
}

impl Sequence {
    pub fn from_sim(name: impl Into<String>, out: &SimOutput) -> Self {
        Sequence {
            name: name.into(),
            imu: out.imu.clone(),
            frame_times: out.frame_times.clone(),
            tracks: out.tracks.clone(),
            camera: out.camera,
            extrinsics: out.extrinsics,
            truth: (0..out.frame_count())
                .map(|f| Some(out.frame_truth(f).pose))
                .collect(),
        }
    }

    pub fn load(name: impl Into<String>, paths: &DatasetPaths) -> Result<Self> {
        let (camera, extrinsics) = load_camera(&paths.camera)?;
        let imu = load_euroc_imu(&paths.imu)?;
        let set = load_tracks(&paths.tracks, &camera)?;
        let truth = match &paths.groundtruth {
            Some(p) => {
                let gt = load_groundtruth(p)?;
                set.frame_times
                    .iter()
                    .map(|&t| gt.pose_at(t, TRUTH_TOLERANCE))
                    .collect()
            }
            None => Vec::new(),
        };
        Ok(Sequence {
            name: name.into(),
            imu,
            frame_times: set.frame_times,
            tracks: set.tracks,
            camera,
            extrinsics,
            truth,
        })
    }

    fn truth_at(&self, frame: usize) -> Option<Pose> {
        self.truth.get(frame).copied().flatten()
    }
}

/// Frames `first_frame..=last_frame` of a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub first_frame: usize,
    pub last_frame: usize,
    pub t_start: f64,
    pub t_end: f64,
}

/// Consecutive windows of `duration` seconds sharing their boundary frames.
/// A trailing partial window, or one with fewer than `n` frames, is dropped.
pub fn windows(frame_times: &[f64], duration: f64, n: usize) -> Vec<Window> {
    let eps = 1e-6;
    let mut out = Vec::new();
    let mut s = 0;
    while s < frame_times.len() {
        let target = frame_times[s] + duration;
        let e = frame_times.partition_point(|&t| t <= target + eps) - 1;
        if e == s || frame_times[e] < target - eps || e - s + 1 < n {
            break;
        }
        out.push(Window {
            first_frame: s,
            last_frame: e,
            t_start: frame_times[s],
            t_end: frame_times[e],
        });
        s = e;
    }
    out
}

/// A report plus the exported map of a successful attempt.
#[derive(Clone, Debug, PartialEq)]
pub struct Attempt {
    pub report: InitReport,
    pub map: Option<InitialMap>,
}

type StageResult<T> = std::result::Result<T, (&'static str, Error)>;

fn at<T>(stage: &'static str, r: Result<T>) -> StageResult<T> {
    r.map_err(|e| (stage, e))
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Samples from the last one at or before `t0` to the first at or after `t1`.
fn imu_span(imu: &[ImuSample], t0: f64, t1: f64) -> Vec<ImuSample> {
    let a = imu.partition_point(|s| s.timestamp <= t0).saturating_sub(1);
    let b = (imu.partition_point(|s| s.timestamp < t1) + 1).min(imu.len());
    imu[a..b.max(a)].to_vec()
}

/// Drops tracks that violate the epipolar geometry between the first
/// keyframe and any later one; returns the survivors and the number removed.
fn ransac_filter(
    tracks: Vec<FeatureTrack>,
    keyframes: &[usize],
    config: &RansacConfig,
    seed: u64,
) -> (Vec<FeatureTrack>, usize) {
    let mut rejected = vec![false; tracks.len()];
    for (k, &later) in keyframes.iter().enumerate().skip(1) {
        let (idx, corr): (Vec<usize>, Vec<_>) = tracks
            .iter()
            .enumerate()
            .filter_map(|(i, t)| {
                let a = t.observation_at(keyframes[0])?;
                let b = t.observation_at(later)?;
                Some((i, (a.pixel, b.pixel)))
            })
            .unzip();
        let Ok(inliers) = ransac_fundamental_filter(
            &corr,
            config.threshold,
            config.max_iterations,
            seed + k as u64,
        ) else {
            continue;
        };
        let keep: HashSet<usize> = inliers.into_iter().collect();
        for (j, &i) in idx.iter().enumerate() {
            if !keep.contains(&j) {
                rejected[i] = true;
            }
        }
    }
    let removed = rejected.iter().filter(|&&r| r).count();
    let kept = tracks
        .into_iter()
        .zip(rejected)
        .filter(|(_, r)| !r)
        .map(|(t, _)| t)
        .collect();
    (kept, removed)
}

fn accuracy(graph: &InitGraph, seq: &Sequence, window: &Window) -> Option<Accuracy> {
    let truth: Vec<Pose> = graph
        .keyframe_frames
        .iter()
        .map(|&f| seq.truth_at(f))
        .collect::<Option<_>>()?;
    let estimate = graph.body_poses();
    let path: Vec<Vector3<f64>> = (window.first_frame..=window.last_frame)
        .filter_map(|f| seq.truth_at(f))
        .map(|p| p.translation)
        .collect();
    let length = path_length(&path);
    let ate = rmse_ate(&estimate, &truth, Alignment::Sim3)
        .ok()
        .map(|a| a.rmse);
    let finite = |v: f64| v.is_finite().then_some(v);
    Some(Accuracy {
        ate_m: ate.and_then(finite),
        ate_percent: ate.filter(|_| length > 1e-9).map(|a| 100.0 * a / length),
        scale_error_percent: scale_error(&estimate, &truth).ok().and_then(finite),
        trajectory_length_m: length,
    })
}

/// Runs one attempt on `window`. Stage errors are recorded in the report.
pub fn run_attempt(
    seq: &Sequence,
    window: &Window,
    index: usize,
    config: &PipelineConfig,
) -> Attempt {
    let mut report = InitReport::new(format!("{}-w{index:03}", seq.name), &seq.name, *window);
    let map = match attempt(seq, window, index, config, &mut report) {
        Ok(map) => map,
        Err((stage, e)) => {
            report.outcome = Outcome::Error;
            report.error = Some(StageError {
                stage: stage.into(),
                message: e.to_string(),
            });
            None
        }
    };
    Attempt { report, map }
}

fn attempt(
    seq: &Sequence,
    window: &Window,
    index: usize,
    config: &PipelineConfig,
    report: &mut InitReport,
) -> StageResult<Option<InitialMap>> {
    let (s, e) = (window.first_frame, window.last_frame);
    let local = at("keyframes", select_keyframes(e - s + 1, config.n))?;
    let keyframes: Vec<usize> = local.iter().map(|k| k + s).collect();
    let mut tracks: Vec<FeatureTrack> = seq
        .tracks
        .iter()
        .map(|t| t.within(s, e))
        .filter(|t| !t.observations.is_empty())
        .collect();
    if config.ransac.enabled {
        let seed = config.seed.wrapping_add((index as u64) << 16);
        let (kept, removed) = ransac_filter(tracks, &keyframes, &config.ransac, seed);
        tracks = kept;
        report.gates.ransac_rejected = Some(removed);
    }

    let long = count_long_tracks(&tracks, config.l);
    let passed = long >= config.m;
    report.gates.track_length = TrackLengthGate {
        passed,
        long_tracks: long,
        required: config.m,
        min_length_px: config.l,
    };
    if !passed {
        report.outcome = Outcome::TrackLengthRejected;
        return Ok(None);
    }

    let clock = Instant::now();
    let features = at(
        "features",
        select_init_features(&tracks, &keyframes, config.m),
    )?;
    let times: Vec<f64> = keyframes.iter().map(|&f| seq.frame_times[f]).collect();
    let imu = imu_span(&seq.imu, times[0], *times.last().unwrap());
    let deltas = at("mk", preintegrate_chain(&imu, &times, BiasState::zero()))?;
    let problem = at(
        "mk",
        MkProblem::new(
            keyframes.clone(),
            features,
            deltas,
            imu,
            seq.extrinsics,
            config.gravity,
        ),
    )?
    .with_bias_update(config.bias_update);
    let sol = at(
        "mk",
        solve_mk_with(
            &problem,
            &Vector3::zeros(),
            &initial_gravity(&problem),
            &config.mk_settings(),
        ),
    )?;
    report.timings.mk_ms = Some(ms(clock));
    let graph = at(
        "mk",
        graph_from_mk(&sol, &problem, &seq.camera, &config.noise),
    )?;
    report.mk = Some(MkStage::new(&sol, &graph, accuracy(&graph, seq, window)));

    let clock = Instant::now();
    let ba1 = at("ba1", optimize_with(&graph, &config.ba1_settings()))?;
    report.timings.ba1_ms = Some(ms(clock));
    report.ba1 = Some(BaStage::new(&ba1, accuracy(&ba1.graph, seq, window)));

    let obs = observability_test(&assemble_hessian(&ba1.graph), config.t_obs);
    report.gates.observability = Some(ObservabilityGate {
        passed: obs.passed,
        min_singular_value: obs.min_singular_value,
        threshold: obs.threshold,
    });
    report.spectrum = obs.spectrum;
    if !obs.passed {
        report.outcome = Outcome::ObservabilityRejected;
        return Ok(None);
    }

    let used: HashSet<u64> = problem.tracks.iter().map(|t| t.track.id).collect();
    let unused: Vec<FeatureTrack> = tracks
        .into_iter()
        .filter(|t| !used.contains(&t.id))
        .collect();
    let cons = consensus_test(&unused, &ba1.graph, &config.consensus_settings());
    report.gates.consensus = Some(ConsensusGate {
        status: cons.status,
        ratio: cons.ratio,
        threshold: config.t_cons,
        tested: cons.tested,
        eligible: cons.eligible,
        inliers: cons.inliers.len(),
    });
    if !cons.passed() {
        report.outcome = Outcome::ConsensusRejected;
        return Ok(None);
    }

    let clock = Instant::now();
    let mut graph2 = ba1.graph.clone();
    for p in &cons.inliers {
        at(
            "ba2",
            graph2.add_point(p.track_id, p.point, &p.observations),
        )?;
    }
    let ba2 = at("ba2", optimize_with(&graph2, &config.ba2_settings()))?;
    report.timings.ba2_ms = Some(ms(clock));
    report.ba2 = Some(BaStage::new(&ba2, accuracy(&ba2.graph, seq, window)));

    let map = at("map", build_initial_map(&ba2.graph))?;
    report.outcome = Outcome::Success;
    Ok(Some(map))
}

/// Every window of every sequence, attempted in parallel; results keep
/// sequence order and, within a sequence, window order.
pub fn run_batch(sequences: &[Sequence], config: &PipelineConfig) -> Vec<Attempt> {
    let jobs: Vec<(&Sequence, usize, Window)> = sequences
        .iter()
        .flat_map(|seq| {
            windows(&seq.frame_times, config.window, config.n)
                .into_iter()
                .enumerate()
                .map(move |(i, w)| (seq, i, w))
        })
        .collect();
    jobs.par_iter()
        .map(|(seq, i, w)| run_attempt(seq, w, *i, config))
        .collect()
}

/// Simulates every scenario of `config`, in parallel and in declaration order.
pub fn simulate_scenarios(config: &PipelineConfig) -> Result<Vec<Sequence>> {
    config
        .expand_scenarios()
        .par_iter()
        .map(|(name, s)| Ok(Sequence::from_sim(name.clone(), &s.simulate()?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn times(n: usize, dt: f64) -> Vec<f64> {
        (0..n).map(|k| k as f64 * dt).collect()
    }

    #[test]
    fn single_window_for_two_second_run() {
        let w = windows(&times(41, 0.05), 2.0, 5);
        assert_eq!(w.len(), 1);
        assert_eq!((w[0].first_frame, w[0].last_frame), (0, 40));
    }

    #[test]
    fn windows_tile_the_sequence() {
        let w = windows(&times(101, 0.05), 2.0, 5);
        assert_eq!(w.len(), 2);
        assert_eq!((w[1].first_frame, w[1].last_frame), (40, 80));
        assert!(windows(&times(30, 0.05), 2.0, 5).is_empty());
        assert!(windows(&times(41, 0.05), 2.0, 50).is_empty());
        assert!(windows(&times(41, 0.05), 0.01, 1).is_empty());
    }

    #[test]
    fn imu_span_covers_both_ends() {
        let imu: Vec<ImuSample> = (0..20)
            .map(|k| ImuSample {
                timestamp: k as f64 * 0.1,
                gyro: Vector3::zeros(),
                accel: Vector3::zeros(),
            })
            .collect();
        let s = imu_span(&imu, 0.45, 1.2);
        assert_eq!(s.first().unwrap().timestamp, 0.4);
        assert!((s.last().unwrap().timestamp - 1.2).abs() < 1e-12);
        let s = imu_span(&imu, 0.0, 1.9);
        assert_eq!(s.len(), 20);
    }
}
