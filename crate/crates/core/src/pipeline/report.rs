use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Attempt, Window};
use crate::ba::{BaOutcome, InitGraph};
use crate::consensus::ConsensusStatus;
use crate::error::{Error, Result};
use crate::geometry::log_so3;
use crate::mk::MkSolution;
use crate::observability::write_spectrum_csv;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Success,
    TrackLengthRejected,
    ObservabilityRejected,
    ConsensusRejected,
    Error,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackLengthGate {
    pub passed: bool,
    pub long_tracks: usize,
    pub required: usize,
    pub min_length_px: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservabilityGate {
    pub passed: bool,
    pub min_singular_value: f64,
    pub threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusGate {
    pub status: ConsensusStatus,
    /// Percent of parallax-eligible tracks that are inliers.
    pub ratio: f64,
    pub threshold: f64,
    pub tested: usize,
    pub eligible: usize,
    pub inliers: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Gates {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ransac_rejected: Option<usize>,
    pub track_length: TrackLengthGate,
    pub observability: Option<ObservabilityGate>,
    pub consensus: Option<ConsensusGate>,
}

/// Error against ground truth; ATE after similarity alignment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub ate_m: Option<f64>,
    pub ate_percent: Option<f64>,
    pub scale_error_percent: Option<f64>,
    pub trajectory_length_m: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyframeEstimate {
    pub frame: usize,
    pub timestamp: f64,
    pub position: [f64; 3],
    pub velocity: [f64; 3],
    /// Rotation vector of world-from-body.
    pub rotation: [f64; 3],
}

fn keyframes_of(graph: &InitGraph) -> Vec<KeyframeEstimate> {
    graph
        .keyframes
        .iter()
        .enumerate()
        .map(|(k, kf)| KeyframeEstimate {
            frame: graph.keyframe_frames[k],
            timestamp: graph.keyframe_times[k],
            position: kf.position.into(),
            velocity: kf.velocity.into(),
            rotation: log_so3(&kf.rotation).into(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MkStage {
    pub cost: f64,
    pub iterations: usize,
    pub degenerate: bool,
    pub gyro_bias: [f64; 3],
    pub gravity_alpha: f64,
    pub gravity_beta: f64,
    /// First-keyframe velocity in its body frame.
    pub v1: [f64; 3],
    pub keyframes: Vec<KeyframeEstimate>,
    pub accuracy: Option<Accuracy>,
}

impl MkStage {
    pub fn new(sol: &MkSolution, graph: &InitGraph, accuracy: Option<Accuracy>) -> Self {
        MkStage {
            cost: sol.cost,
            iterations: sol.iterations,
            degenerate: sol.degenerate,
            gyro_bias: sol.gyro_bias.into(),
            gravity_alpha: sol.gravity.alpha,
            gravity_beta: sol.gravity.beta,
            v1: sol.v1.into(),
            keyframes: keyframes_of(graph),
            accuracy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaStage {
    pub cost: f64,
    pub iterations: usize,
    pub points: usize,
    pub gyro_bias: [f64; 3],
    pub accel_bias: [f64; 3],
    pub keyframes: Vec<KeyframeEstimate>,
    pub accuracy: Option<Accuracy>,
}

impl BaStage {
    pub fn new(out: &BaOutcome, accuracy: Option<Accuracy>) -> Self {
        BaStage {
            cost: out.cost,
            iterations: out.iterations,
            points: out.graph.points.len(),
            gyro_bias: out.graph.bias.gyro.into(),
            accel_bias: out.graph.bias.accel.into(),
            keyframes: keyframes_of(&out.graph),
            accuracy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    pub message: String,
}

/// Wall-clock milliseconds per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub mk_ms: Option<f64>,
    pub ba1_ms: Option<f64>,
    pub ba2_ms: Option<f64>,
}

/// Record of one attempt. Timings are kept out of the serialized form so
/// that reports are reproducible; they are written separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub id: String,
    pub sequence: String,
    pub window: Window,
    pub outcome: Outcome,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<StageError>,
    pub gates: Gates,
    pub mk: Option<MkStage>,
    pub ba1: Option<BaStage>,
    pub ba2: Option<BaStage>,
    /// Singular values of the BA1 Hessian, largest first.
    pub spectrum: Vec<f64>,
    #[serde(skip)]
    pub timings: StageTimings,
}

impl InitReport {
    pub fn new(id: String, sequence: &str, window: Window) -> Self {
        InitReport {
            id,
            sequence: sequence.into(),
            window,
            outcome: Outcome::Error,
            error: None,
            gates: Gates::default(),
            mk: None,
            ba1: None,
            ba2: None,
            spectrum: Vec::new(),
            timings: StageTimings::default(),
        }
    }

    pub fn passed_track_length(&self) -> bool {
        self.gates.track_length.passed
    }

    pub fn passed_observability(&self) -> bool {
        self.gates.observability.is_some_and(|g| g.passed)
    }

    pub fn passed_consensus(&self) -> bool {
        self.gates
            .consensus
            .is_some_and(|g| g.status == ConsensusStatus::Passed)
    }

    pub fn succeeded(&self) -> bool {
        self.outcome == Outcome::Success
    }

    pub fn stage_accuracy(&self, stage: &str) -> Option<Accuracy> {
        match stage {
            "mk" => self.mk.as_ref().and_then(|s| s.accuracy),
            "ba1" => self.ba1.as_ref().and_then(|s| s.accuracy),
            "ba2" => self.ba2.as_ref().and_then(|s| s.accuracy),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub section: String,
    pub name: String,
    pub value: String,
}

/// Aggregate table in `section,name,value` form.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    fn push(&mut self, section: &str, name: String, value: String) {
        self.rows.push(SummaryRow {
            section: section.into(),
            name,
            value,
        });
    }

    pub fn get(&self, section: &str, name: &str) -> Option<&str> {
        self.rows
            .iter()
            .find(|r| r.section == section && r.name == name)
            .map(|r| r.value.as_str())
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len() / 2;
    Some(if s.len() % 2 == 1 {
        s[k]
    } else {
        0.5 * (s[k - 1] + s[k])
    })
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |x| x.to_string())
}

fn stage_rows(summary: &mut Summary, section: &str, reports: &[&InitReport], stages: &[&str]) {
    for &stage in stages {
        let acc: Vec<Accuracy> = reports
            .iter()
            .filter_map(|r| r.stage_accuracy(stage))
            .collect();
        let scale: Vec<f64> = acc.iter().filter_map(|a| a.scale_error_percent).collect();
        let ate_pct: Vec<f64> = acc.iter().filter_map(|a| a.ate_percent).collect();
        let ate_m: Vec<f64> = acc.iter().filter_map(|a| a.ate_m).collect();
        summary.push(section, format!("{stage}.count"), scale.len().to_string());
        summary.push(
            section,
            format!("{stage}.mean_scale_error_percent"),
            fmt(mean(&scale)),
        );
        summary.push(
            section,
            format!("{stage}.median_scale_error_percent"),
            fmt(median(&scale)),
        );
        summary.push(
            section,
            format!("{stage}.mean_ate_percent"),
            fmt(mean(&ate_pct)),
        );
        summary.push(
            section,
            format!("{stage}.median_ate_percent"),
            fmt(median(&ate_pct)),
        );
        summary.push(section, format!("{stage}.mean_ate_m"), fmt(mean(&ate_m)));
    }
}

/// Gate pass counts and accuracy per stage, after the track-length test
/// and after both rejection tests.
pub fn summarize(reports: &[InitReport]) -> Summary {
    let mut s = Summary::default();
    let count =
        |f: &dyn Fn(&InitReport) -> bool| reports.iter().filter(|r| f(r)).count().to_string();
    s.push("counts", "attempts".into(), reports.len().to_string());
    s.push(
        "counts",
        "track_length_passed".into(),
        count(&|r| r.passed_track_length()),
    );
    s.push(
        "counts",
        "observability_passed".into(),
        count(&|r| r.passed_observability()),
    );
    s.push(
        "counts",
        "consensus_passed".into(),
        count(&|r| r.passed_consensus()),
    );
    s.push("counts", "successes".into(), count(&|r| r.succeeded()));
    s.push(
        "counts",
        "errors".into(),
        count(&|r| r.outcome == Outcome::Error),
    );
    let after_length: Vec<&InitReport> =
        reports.iter().filter(|r| r.passed_track_length()).collect();
    stage_rows(&mut s, "after_track_length", &after_length, &["mk", "ba1"]);
    let after_tests: Vec<&InitReport> = reports.iter().filter(|r| r.succeeded()).collect();
    stage_rows(&mut s, "after_tests", &after_tests, &["mk", "ba1", "ba2"]);
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub stage: String,
    pub count: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub max_ms: f64,
}

/// Mean, sample standard deviation and maximum per stage.
pub fn timing_summary(reports: &[InitReport]) -> Vec<TimingRow> {
    let stages: [(&str, fn(&StageTimings) -> Option<f64>); 3] = [
        ("mk", |t| t.mk_ms),
        ("ba1", |t| t.ba1_ms),
        ("ba2", |t| t.ba2_ms),
    ];
    stages
        .iter()
        .map(|(name, get)| {
            let v: Vec<f64> = reports.iter().filter_map(|r| get(&r.timings)).collect();
            let m = mean(&v).unwrap_or(0.0);
            let std = if v.len() > 1 {
                (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            TimingRow {
                stage: (*name).into(),
                count: v.len(),
                mean_ms: m,
                std_ms: std,
                max_ms: v.iter().copied().fold(0.0, f64::max),
            }
        })
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

/// One JSON report per line.
pub fn write_attempts(path: &Path, reports: &[InitReport]) -> Result<()> {
    let mut w = create(path)?;
    for r in reports {
        let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_attempts(path: &Path) -> Result<Vec<InitReport>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_summary_csv(path: &Path, summary: &Summary) -> Result<()> {
    let err = csv_error(path);
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["section", "name", "value"]).map_err(&err)?;
    for r in &summary.rows {
        w.write_record([&r.section, &r.name, &r.value])
            .map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_timings_csv(path: &Path, reports: &[InitReport]) -> Result<()> {
    let err = csv_error(path);
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["id", "mk_ms", "ba1_ms", "ba2_ms"])
        .map_err(&err)?;
    let cell = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.4}"));
    for r in reports {
        let t = &r.timings;
        w.write_record([r.id.clone(), cell(t.mk_ms), cell(t.ba1_ms), cell(t.ba2_ms)])
            .map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_timing_summary(path: &Path, rows: &[TimingRow]) -> Result<()> {
    let err = csv_error(path);
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `attempts.jsonl`, `summary.csv`, `timings.csv`,
/// `timing_summary.csv`, `spectra/<id>.csv` and `maps/<id>.json`.
pub fn write_outputs(dir: &Path, attempts: &[Attempt]) -> Result<()> {
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(dir)?;
    let reports: Vec<InitReport> = attempts.iter().map(|a| a.report.clone()).collect();
    write_attempts(&dir.join("attempts.jsonl"), &reports)?;
    write_summary_csv(&dir.join("summary.csv"), &summarize(&reports))?;
    write_timings_csv(&dir.join("timings.csv"), &reports)?;
    write_timing_summary(&dir.join("timing_summary.csv"), &timing_summary(&reports))?;
    let spectra = dir.join("spectra");
    mkdir(&spectra)?;
    for r in reports.iter().filter(|r| !r.spectrum.is_empty()) {
        let path = spectra.join(format!("{}.csv", r.id));
        write_spectrum_csv(create(&path)?, &r.spectrum)?;
    }
    let maps = dir.join("maps");
    for a in attempts {
        if let Some(map) = &a.map {
            mkdir(&maps)?;
            crate::map::serialize_map(map, &maps.join(format!("{}.json", a.report.id)))?;
        }
    }
    Ok(())
}
