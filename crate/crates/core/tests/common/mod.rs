#![allow(dead_code)]

use nalgebra::Vector3;
use vinit::geometry::GravityParams;
use vinit::imu::{preintegrate_chain, BiasState};
use vinit::mk::MkProblem;
use vinit::sim::{simulate, NoiseModel, ProfileKind, SimOutput, SimScene, TrajectoryProfile};
use vinit::tracks::{select_init_features, select_keyframes};

pub struct Case {
    pub out: SimOutput,
    pub scene: SimScene,
    pub problem: MkProblem,
    pub bias: Vector3<f64>,
    pub gravity: GravityParams,
}

pub fn case(kind: ProfileKind, seed: u64, noise: NoiseModel) -> Case {
    case_with(&TrajectoryProfile::preset(kind, seed), seed, noise)
}

pub fn case_with(profile: &TrajectoryProfile, seed: u64, noise: NoiseModel) -> Case {
    let scene = SimScene::euroc_like(seed);
    let out = simulate(profile, &noise, &scene).unwrap();
    let kf = select_keyframes(out.frame_count(), 5).unwrap();
    let tracks = select_init_features(&out.tracks, &kf, 20).unwrap();
    let times: Vec<f64> = kf.iter().map(|&f| out.frame_times[f]).collect();
    let deltas = preintegrate_chain(&out.imu, &times, BiasState::zero()).unwrap();
    let problem = MkProblem::new(
        kf,
        tracks,
        deltas,
        out.imu.clone(),
        out.extrinsics,
        out.gravity_magnitude,
    )
    .unwrap();
    let r1 = out.frame_truth(problem.keyframes[0]).pose.rotation;
    let g_body = r1.inverse() * Vector3::new(0.0, 0.0, -out.gravity_magnitude);
    let gravity = GravityParams::from_direction(&g_body, out.gravity_magnitude).unwrap();
    Case {
        out,
        scene,
        problem,
        bias: noise.gyro_bias,
        gravity,
    }
}

pub fn noiseless(bias: Vector3<f64>) -> NoiseModel {
    NoiseModel::noiseless().with_biases(bias, Vector3::zeros())
}

/// Graph holding the true keyframe states and no points.
pub fn truth_graph(c: &Case) -> vinit::ba::InitGraph {
    use vinit::ba::{GraphSettings, InitGraph, KeyframeState};
    let keyframes = c
        .problem
        .keyframes
        .iter()
        .enumerate()
        .map(|(k, &f)| {
            let s = c.out.frame_truth(f);
            if k == 0 {
                KeyframeState::gauge_anchor(s.pose.rotation, s.pose.translation, s.velocity)
            } else {
                KeyframeState::free(s.pose.rotation, s.pose.translation, s.velocity)
            }
        })
        .collect();
    InitGraph {
        keyframes,
        keyframe_frames: c.problem.keyframes.clone(),
        keyframe_times: c
            .problem
            .keyframes
            .iter()
            .map(|&f| c.out.frame_times[f])
            .collect(),
        bias: BiasState::new(c.bias, Vector3::zeros()),
        points: Vec::new(),
        edges: Vec::new(),
        extrinsics: c.out.extrinsics,
        camera: c.out.camera,
        gravity: Vector3::new(0.0, 0.0, -c.out.gravity_magnitude),
        settings: GraphSettings::default(),
    }
}

/// Tracks not picked for the closed-form stage.
pub fn unused_tracks(c: &Case) -> Vec<vinit::tracks::FeatureTrack> {
    let used: std::collections::HashSet<u64> =
        c.problem.tracks.iter().map(|t| t.track.id).collect();
    c.out
        .tracks
        .iter()
        .filter(|t| !used.contains(&t.id))
        .cloned()
        .collect()
}
