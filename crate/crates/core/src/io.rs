//! Dataset files: EuRoC IMU and ground-truth CSV, JSON-lines feature tracks
//! and a JSON camera description.
//!
//! Track files start with a header line followed by one track per line:
//!
//! ```text
//! {"format":"vinit-tracks","version":1}
//! {"id":0,"obs":[{"frame":0,"t":0.0,"u":312.5,"v":201.25},{"frame":1,"t":0.05,"u":313.0,"v":201.5}]}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Rotation};
use crate::imu::{ns_to_seconds, ImuSample};
use crate::sim::{GroundTruthState, SimOutput};
use crate::tracks::{CameraModel, Extrinsics, FeatureTrack, Observation};

pub const TRACK_FORMAT: &str = "vinit-tracks";
pub const TRACK_FORMAT_VERSION: u32 = 1;

pub const IMU_FILE: &str = "imu0.csv";
pub const TRACKS_FILE: &str = "tracks.jsonl";
pub const CAMERA_FILE: &str = "camera.json";
pub const GROUNDTRUTH_FILE: &str = "groundtruth.csv";

const IMU_HEADER: [&str; 7] = [
    "#timestamp [ns]",
    "w_RS_S_x [rad s^-1]",
    "w_RS_S_y [rad s^-1]",
    "w_RS_S_z [rad s^-1]",
    "a_RS_S_x [m s^-2]",
    "a_RS_S_y [m s^-2]",
    "a_RS_S_z [m s^-2]",
];

const GROUNDTRUTH_HEADER: [&str; 17] = [
    "#timestamp",
    "p_RS_R_x [m]",
    "p_RS_R_y [m]",
    "p_RS_R_z [m]",
    "q_RS_w []",
    "q_RS_x []",
    "q_RS_y []",
    "q_RS_z []",
    "v_RS_R_x [m s^-1]",
    "v_RS_R_y [m s^-1]",
    "v_RS_R_z [m s^-1]",
    "b_w_RS_S_x [rad s^-1]",
    "b_w_RS_S_y [rad s^-1]",
    "b_w_RS_S_z [rad s^-1]",
    "b_a_RS_S_x [m s^-2]",
    "b_a_RS_S_y [m s^-2]",
    "b_a_RS_S_z [m s^-2]",
];

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn parse_error(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(open(path)?))
}

fn csv_line(e: &csv::Error) -> usize {
    e.position().map_or(0, |p| p.line() as usize)
}

/// Numeric CSV rows as `(line, timestamp ns, values)`.
fn numeric_rows(path: &Path, columns: usize) -> Result<Vec<(usize, i64, Vec<f64>)>> {
    let mut reader = csv_reader(path)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| parse_error(path, csv_line(&e), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != columns {
            return Err(parse_error(
                path,
                line,
                format!("expected {columns} columns, found {}", record.len()),
            ));
        }
        let ns: i64 = record[0]
            .parse()
            .map_err(|_| parse_error(path, line, format!("bad timestamp '{}'", &record[0])))?;
        let values = (1..columns)
            .map(|i| {
                record[i]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        parse_error(
                            path,
                            line,
                            format!("bad value '{}' in column {}", &record[i], i + 1),
                        )
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((line, ns, values));
    }
    Ok(rows)
}

fn strictly_increasing(path: &Path, rows: &[(usize, i64, Vec<f64>)]) -> Result<()> {
    for w in rows.windows(2) {
        if w[1].1 <= w[0].1 {
            return Err(Error::Data(format!(
                "{}:{}: timestamp {} does not increase",
                path.display(),
                w[1].0,
                w[1].1
            )));
        }
    }
    Ok(())
}

/// Reads an EuRoC `imu0/data.csv`: `timestamp [ns], w_x, w_y, w_z, a_x, a_y, a_z`.
pub fn load_euroc_imu(path: &Path) -> Result<Vec<ImuSample>> {
    let rows = numeric_rows(path, 7)?;
    strictly_increasing(path, &rows)?;
    Ok(rows
        .into_iter()
        .map(|(_, ns, v)| ImuSample {
            timestamp: ns_to_seconds(ns),
            gyro: Vector3::new(v[0], v[1], v[2]),
            accel: Vector3::new(v[3], v[4], v[5]),
        })
        .collect())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn write_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

/// Writes samples in the EuRoC layout; values use shortest round-trip
/// formatting so that [`load_euroc_imu`] reproduces them bit for bit.
pub fn write_euroc_imu(path: &Path, timestamps_ns: &[i64], samples: &[ImuSample]) -> Result<()> {
    if timestamps_ns.len() != samples.len() {
        return Err(Error::InvalidArgument(
            "one timestamp per sample required".into(),
        ));
    }
    let mut w = csv_writer(path)?;
    let err = write_error(path);
    w.write_record(IMU_HEADER).map_err(&err)?;
    for (ns, s) in timestamps_ns.iter().zip(samples) {
        let mut row = vec![ns.to_string()];
        row.extend(s.gyro.iter().chain(s.accel.iter()).map(|v| v.to_string()));
        w.write_record(&row).map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Ground-truth samples with nanosecond timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub timestamps_ns: Vec<i64>,
    pub states: Vec<GroundTruthState>,
}

impl GroundTruth {
    /// Pose of the sample nearest to `t`, if one lies within `tolerance` seconds.
    pub fn pose_at(&self, t: f64, tolerance: f64) -> Option<Pose> {
        let i = self.states.partition_point(|s| s.timestamp < t);
        [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter_map(|k| self.states.get(k))
            .map(|s| ((s.timestamp - t).abs(), s.pose))
            .filter(|(d, _)| *d <= tolerance)
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, p)| p)
    }
}

/// Reads an EuRoC `state_groundtruth_estimate0/data.csv`.
pub fn load_groundtruth(path: &Path) -> Result<GroundTruth> {
    let rows = numeric_rows(path, 17)?;
    strictly_increasing(path, &rows)?;
    let mut out = GroundTruth {
        timestamps_ns: Vec::with_capacity(rows.len()),
        states: Vec::with_capacity(rows.len()),
    };
    for (line, ns, v) in rows {
        let q = nalgebra::Quaternion::new(v[3], v[4], v[5], v[6]);
        if !(q.norm() > 0.5 && q.norm() < 1.5) {
            return Err(parse_error(path, line, "quaternion is far from unit norm"));
        }
        let r = UnitQuaternion::from_quaternion(q).to_rotation_matrix();
        out.timestamps_ns.push(ns);
        out.states.push(GroundTruthState {
            timestamp: ns_to_seconds(ns),
            pose: Pose::new(
                Rotation::from_matrix_unchecked(*r.matrix()),
                Vector3::new(v[0], v[1], v[2]),
            ),
            velocity: Vector3::new(v[7], v[8], v[9]),
            gyro_bias: Vector3::new(v[10], v[11], v[12]),
            accel_bias: Vector3::new(v[13], v[14], v[15]),
        });
    }
    Ok(out)
}

pub fn write_groundtruth(path: &Path, truth: &GroundTruth) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = write_error(path);
    w.write_record(GROUNDTRUTH_HEADER).map_err(&err)?;
    for (ns, s) in truth.timestamps_ns.iter().zip(&truth.states) {
        let m: Matrix3<f64> = *s.pose.rotation.matrix();
        let q = UnitQuaternion::from_matrix(&m);
        let mut row = vec![ns.to_string()];
        row.extend(
            s.pose
                .translation
                .iter()
                .copied()
                .chain([q.w, q.i, q.j, q.k])
                .chain(s.velocity.iter().copied())
                .chain(s.gyro_bias.iter().copied())
                .chain(s.accel_bias.iter().copied())
                .map(|v| v.to_string()),
        );
        w.write_record(&row).map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Intrinsics plus the body-from-camera transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// 4×4 row-major.
    pub body_from_camera: [f64; 16],
}

impl CameraFile {
    pub fn new(camera: &CameraModel, extrinsics: &Extrinsics) -> Self {
        CameraFile {
            fx: camera.fx,
            fy: camera.fy,
            cx: camera.cx,
            cy: camera.cy,
            width: camera.width,
            height: camera.height,
            body_from_camera: extrinsics.body_from_camera.to_row_major(),
        }
    }

    pub fn camera(&self) -> Result<CameraModel> {
        CameraModel::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }

    pub fn extrinsics(&self) -> Result<Extrinsics> {
        Ok(Extrinsics::new(Pose::from_row_major(
            &self.body_from_camera,
        )?))
    }
}

pub fn load_camera(path: &Path) -> Result<(CameraModel, Extrinsics)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CameraFile =
        serde_json::from_str(&text).map_err(|e| parse_error(path, e.line(), e.to_string()))?;
    let data = |e: Error| Error::Data(format!("{}: {e}", path.display()));
    Ok((
        file.camera().map_err(data)?,
        file.extrinsics().map_err(data)?,
    ))
}

pub fn write_camera(path: &Path, camera: &CameraModel, extrinsics: &Extrinsics) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&CameraFile::new(camera, extrinsics))
        .map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackHeader {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackObservation {
    frame: usize,
    t: f64,
    u: f64,
    v: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackLine {
    id: u64,
    obs: Vec<TrackObservation>,
}

/// Tracks with the timestamp of every frame they mention.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackSet {
    pub tracks: Vec<FeatureTrack>,
    pub frame_times: Vec<f64>,
}

/// Reads a track file; bearings are lifted through `camera`.
///
/// Every frame index from 0 to the largest one referenced must be observed
/// at least once, with a consistent timestamp.
pub fn load_tracks(path: &Path, camera: &CameraModel) -> Result<TrackSet> {
    let reader = BufReader::new(open(path)?);
    let mut lines = reader.lines().enumerate();
    let header = loop {
        match lines.next() {
            None => return Err(parse_error(path, 1, "missing track file header")),
            Some((i, line)) => {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str::<TrackHeader>(&line)
                    .map_err(|e| parse_error(path, i + 1, format!("header: {e}")))?;
            }
        }
    };
    if header.format != TRACK_FORMAT || header.version != TRACK_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported track format {} v{}",
            path.display(),
            header.format,
            header.version
        )));
    }

    let mut tracks = Vec::new();
    let mut times: Vec<Option<f64>> = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: TrackLine =
            serde_json::from_str(&line).map_err(|e| parse_error(path, line_no, e.to_string()))?;
        let mut observations = Vec::with_capacity(raw.obs.len());
        for o in raw.obs {
            let pixel = Vector2::new(o.u, o.v);
            if !camera.contains(&pixel) {
                return Err(Error::Data(format!(
                    "{}:{line_no}: track {} pixel ({}, {}) lies outside the image",
                    path.display(),
                    raw.id,
                    o.u,
                    o.v
                )));
            }
            if times.len() <= o.frame {
                times.resize(o.frame + 1, None);
            }
            match times[o.frame] {
                None => times[o.frame] = Some(o.t),
                Some(t) if (t - o.t).abs() > 1e-9 => {
                    return Err(Error::Data(format!(
                        "{}:{line_no}: frame {} has timestamps {} and {}",
                        path.display(),
                        o.frame,
                        t,
                        o.t
                    )))
                }
                Some(_) => {}
            }
            observations.push(Observation {
                frame: o.frame,
                pixel,
                bearing: camera.bearing(&pixel),
            });
        }
        let track = FeatureTrack {
            id: raw.id,
            observations,
        };
        track
            .validate()
            .map_err(|e| Error::Data(format!("{}:{line_no}: {e}", path.display())))?;
        tracks.push(track);
    }
    let frame_times = times
        .into_iter()
        .enumerate()
        .map(|(f, t)| {
            t.ok_or_else(|| {
                Error::Data(format!("{}: frame {f} has no observation", path.display()))
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    if let Some(w) = frame_times.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::Data(format!(
            "{}: frame timestamps must increase ({} then {})",
            path.display(),
            w[0],
            w[1]
        )));
    }
    Ok(TrackSet {
        tracks,
        frame_times,
    })
}

pub fn write_tracks(path: &Path, tracks: &[FeatureTrack], frame_times: &[f64]) -> Result<()> {
    let mut w = create(path)?;
    let header = TrackHeader {
        format: TRACK_FORMAT.into(),
        version: TRACK_FORMAT_VERSION,
    };
    let mut out = json_line(&header)?;
    for t in tracks {
        let line = TrackLine {
            id: t.id,
            obs: t
                .observations
                .iter()
                .map(|o| {
                    frame_times
                        .get(o.frame)
                        .map(|&t| TrackObservation {
                            frame: o.frame,
                            t,
                            u: o.pixel.x,
                            v: o.pixel.y,
                        })
                        .ok_or_else(|| {
                            Error::InvalidArgument(format!("frame {} has no timestamp", o.frame))
                        })
                })
                .collect::<Result<_>>()?,
        };
        out.push_str(&json_line(&line)?);
    }
    w.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn json_line<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string(value).map_err(|e| Error::Data(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// File locations of one recorded sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetPaths {
    pub imu: PathBuf,
    pub tracks: PathBuf,
    pub camera: PathBuf,
    pub groundtruth: Option<PathBuf>,
}

impl DatasetPaths {
    /// Standard file names in `dir`; ground truth only if present.
    pub fn in_dir(dir: &Path) -> Self {
        let gt = dir.join(GROUNDTRUTH_FILE);
        DatasetPaths {
            imu: dir.join(IMU_FILE),
            tracks: dir.join(TRACKS_FILE),
            camera: dir.join(CAMERA_FILE),
            groundtruth: gt.exists().then_some(gt),
        }
    }
}

/// Writes a simulation in the dataset layout read by [`DatasetPaths::in_dir`].
pub fn dump_simulation(dir: &Path, out: &SimOutput) -> Result<DatasetPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = DatasetPaths {
        imu: dir.join(IMU_FILE),
        tracks: dir.join(TRACKS_FILE),
        camera: dir.join(CAMERA_FILE),
        groundtruth: Some(dir.join(GROUNDTRUTH_FILE)),
    };
    write_euroc_imu(&paths.imu, &out.imu_ns, &out.imu)?;
    write_tracks(&paths.tracks, &out.tracks, &out.frame_times)?;
    write_camera(&paths.camera, &out.camera, &out.extrinsics)?;
    let truth = GroundTruth {
        timestamps_ns: out.imu_ns.clone(),
        states: out.truth.clone(),
    };
    write_groundtruth(paths.groundtruth.as_ref().unwrap(), &truth)?;
    Ok(paths)
}
