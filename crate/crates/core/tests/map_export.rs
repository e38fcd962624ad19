use std::path::PathBuf;

use nalgebra::{Vector2, Vector3};
use vinit::ba::{graph_from_mk, optimize, GraphSettings, InitGraph, KeyframeState};
use vinit::geometry::exp_so3;
use vinit::imu::BiasState;
use vinit::map::{build_initial_map, deserialize_map, serialize_map, InitialMap, MAP_FRAME};
use vinit::mk::{initial_gravity, solve_mk};
use vinit::sim::ProfileKind;
use vinit::tracks::{CameraModel, Extrinsics};

mod common;

fn reference_graph() -> InitGraph {
    let keyframes = (0..3)
        .map(|k| {
            let t = k as f64;
            let s = KeyframeState::free(
                exp_so3(&Vector3::new(0.1 * t, -0.05 * t, 0.02)),
                Vector3::new(0.25 * t, -0.5 * t, 0.125),
                Vector3::new(0.5, -1.0, 0.0),
            );
            if k == 0 {
                KeyframeState::gauge_anchor(s.rotation, s.position, s.velocity)
            } else {
                s
            }
        })
        .collect();
    let mut g = InitGraph {
        keyframes,
        keyframe_frames: vec![0, 10, 20],
        keyframe_times: vec![0.0, 0.5, 1.0],
        bias: BiasState::new(
            Vector3::new(0.01, -0.02, 0.03),
            Vector3::new(0.1, 0.0, -0.1),
        ),
        points: Vec::new(),
        edges: Vec::new(),
        extrinsics: Extrinsics::identity(),
        camera: CameraModel::euroc(),
        gravity: Vector3::new(0.0, 0.0, -9.81),
        settings: GraphSettings::default(),
    };
    g.add_point(
        3,
        Vector3::new(1.0, 2.0, 5.0),
        &[
            (0, Vector2::new(100.5, 200.25)),
            (1, Vector2::new(110.0, 190.0)),
        ],
    )
    .unwrap();
    g.add_point(
        8,
        Vector3::new(-1.5, 0.75, 4.0),
        &[
            (0, Vector2::new(300.0, 20.0)),
            (1, Vector2::new(310.0, 25.0)),
            (2, Vector2::new(320.125, 31.0)),
        ],
    )
    .unwrap();
    g
}

#[test]
fn reference_map_matches_golden_file() {
    let map = build_initial_map(&reference_graph()).unwrap();
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/reference_map.json");
    let text = map.to_json().unwrap();
    if std::env::var_os("VINIT_BLESS").is_some() {
        std::fs::write(&path, &text).unwrap();
    }
    let golden = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, golden);
    assert_eq!(map.covisibility_weight(0, 1), 2);
    assert_eq!(map.covisibility_weight(2, 1), 1);
    assert_eq!(map.covisibility_weight(0, 2), 1);
    assert_eq!(map.header.frame, MAP_FRAME);
}

#[test]
fn round_trip_is_byte_identical() {
    let c = common::case(
        ProfileKind::Sinusoid3d,
        61,
        vinit::sim::NoiseModel::euroc(61),
    );
    let sol = solve_mk(&c.problem, &Vector3::zeros(), &initial_gravity(&c.problem)).unwrap();
    let g = graph_from_mk(&sol, &c.problem, &c.out.camera, &GraphSettings::default()).unwrap();
    let map = build_initial_map(&optimize(&g, 20).unwrap().graph).unwrap();
    assert_eq!(map.points.len(), 20);
    assert!(map.points.iter().all(|p| p.observations.len() >= 2));

    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    serialize_map(&map, &a).unwrap();
    let back = deserialize_map(&a).unwrap();
    assert_eq!(back, map);
    serialize_map(&back, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn empty_map_round_trips() {
    let mut g = reference_graph();
    g.points.clear();
    g.edges.clear();
    let map = build_initial_map(&g).unwrap();
    assert!(map.points.is_empty() && map.covisibility.is_empty());
    let back = InitialMap::from_json(&map.to_json().unwrap()).unwrap();
    assert_eq!(back, map);
}

#[test]
fn missing_file_reports_path() {
    let err = deserialize_map(std::path::Path::new("/nonexistent/initial_map.json")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/initial_map.json"));
}
