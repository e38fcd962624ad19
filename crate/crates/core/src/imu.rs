//! IMU preintegration with first-order bias correction.
//!
//! Each sample is held constant over the interval to the next sample
//! (zero-order hold). Deltas are expressed in the body frame at the start of
//! the span and carry their Jacobians with respect to both biases, so a bias
//! change can be folded in without touching the raw samples again.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{exp_so3, hat, right_jacobian, Rotation};

/// Gyro-bias change (per component, rad/s) beyond which deltas are reintegrated.
pub const REINTEGRATION_THRESHOLD: f64 = 0.2;

/// Nanosecond timestamps to seconds; every reader and writer goes through here.
pub fn ns_to_seconds(ns: i64) -> f64 {
    let (secs, frac) = (ns.div_euclid(1_000_000_000), ns.rem_euclid(1_000_000_000));
    secs as f64 + frac as f64 * 1e-9
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub timestamp: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BiasState {
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl BiasState {
    pub fn new(gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        BiasState { gyro, accel }
    }

    pub fn zero() -> Self {
        BiasState::default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasJacobians {
    pub dr_dbg: Matrix3<f64>,
    pub dv_dbg: Matrix3<f64>,
    pub dv_dba: Matrix3<f64>,
    pub dp_dbg: Matrix3<f64>,
    pub dp_dba: Matrix3<f64>,
}

impl BiasJacobians {
    fn zeros() -> Self {
        BiasJacobians {
            dr_dbg: Matrix3::zeros(),
            dv_dbg: Matrix3::zeros(),
            dv_dba: Matrix3::zeros(),
            dp_dbg: Matrix3::zeros(),
            dp_dba: Matrix3::zeros(),
        }
    }
}

/// How a delta follows a bias change.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasUpdate {
    /// Jacobian update, reintegrating past [`REINTEGRATION_THRESHOLD`].
    #[default]
    FirstOrder,
    /// Reintegrate from raw samples on every change.
    Reintegrate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Nominal {
    delta_r: Rotation,
    delta_v: Vector3<f64>,
    delta_p: Vector3<f64>,
}

/// Relative motion between two body times.
///
/// `delta_r`, `delta_v`, `delta_p` are evaluated at `bias`; the Jacobians are
/// taken at `lin_bias`, where the samples were last integrated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreintegratedDelta {
    pub delta_r: Rotation,
    pub delta_v: Vector3<f64>,
    pub delta_p: Vector3<f64>,
    pub dt: f64,
    pub jacobians: BiasJacobians,
    pub lin_bias: BiasState,
    pub bias: BiasState,
    pub t_start: f64,
    pub t_end: f64,
    nominal: Nominal,
}

impl PreintegratedDelta {
    pub fn identity_at(t: f64, bias: BiasState) -> Self {
        let nominal = Nominal {
            delta_r: Rotation::identity(),
            delta_v: Vector3::zeros(),
            delta_p: Vector3::zeros(),
        };
        PreintegratedDelta {
            delta_r: nominal.delta_r,
            delta_v: nominal.delta_v,
            delta_p: nominal.delta_p,
            dt: 0.0,
            jacobians: BiasJacobians::zeros(),
            lin_bias: bias,
            bias,
            t_start: t,
            t_end: t,
            nominal,
        }
    }

    /// A delta with no measured motion over `dt` (free fall in the start frame).
    pub fn from_dt(dt: f64) -> Self {
        let mut d = Self::identity_at(0.0, BiasState::zero());
        d.dt = dt;
        d.t_end = dt;
        d
    }

    /// First-order evaluation of the delta at `bias` from the linearization point.
    pub fn evaluate(&self, bias: &BiasState) -> (Rotation, Vector3<f64>, Vector3<f64>) {
        let dbg = bias.gyro - self.lin_bias.gyro;
        let dba = bias.accel - self.lin_bias.accel;
        let j = &self.jacobians;
        let r = self.nominal.delta_r * exp_so3(&(j.dr_dbg * dbg));
        let v = self.nominal.delta_v + j.dv_dbg * dbg + j.dv_dba * dba;
        let p = self.nominal.delta_p + j.dp_dbg * dbg + j.dp_dba * dba;
        (r, v, p)
    }

    fn step(&mut self, gyro: &Vector3<f64>, accel: &Vector3<f64>, dt: f64) {
        let w = gyro - self.lin_bias.gyro;
        let a = accel - self.lin_bias.accel;
        let n = &mut self.nominal;
        let j = &mut self.jacobians;
        let r = *n.delta_r.matrix();
        let dt2 = dt * dt;
        let ra = r * a;
        let ra_hat_dr = r * hat(&a) * j.dr_dbg;

        // Position first, then velocity, then rotation: each uses the old values.
        j.dp_dba += j.dv_dba * dt - 0.5 * r * dt2;
        j.dp_dbg += j.dv_dbg * dt - 0.5 * ra_hat_dr * dt2;
        j.dv_dba -= r * dt;
        j.dv_dbg -= ra_hat_dr * dt;

        n.delta_p += n.delta_v * dt + 0.5 * ra * dt2;
        n.delta_v += ra * dt;

        let inc_phi = w * dt;
        let inc = exp_so3(&inc_phi);
        j.dr_dbg = inc.matrix().transpose() * j.dr_dbg - right_jacobian(&inc_phi) * dt;
        n.delta_r = n.delta_r * inc;
        self.dt += dt;
    }

    /// Integrates the clipped hold intervals covering `[self.t_end, to]`.
    fn advance(&mut self, samples: &[ImuSample], to: f64) {
        let from = self.t_end;
        let first = samples.partition_point(|s| s.timestamp <= from);
        for k in first.saturating_sub(1)..samples.len() {
            let s = &samples[k];
            if s.timestamp >= to {
                break;
            }
            let a = s.timestamp.max(from);
            let b = samples.get(k + 1).map_or(to, |n| n.timestamp.min(to));
            if b > a {
                self.step(&s.gyro, &s.accel, b - a);
            }
        }
        self.t_end = to;
    }

    fn sync_values(&mut self) {
        self.delta_r = self.nominal.delta_r;
        self.delta_v = self.nominal.delta_v;
        self.delta_p = self.nominal.delta_p;
        self.bias = self.lin_bias;
    }
}

fn validate(samples: &[ImuSample]) -> Result<()> {
    for (k, s) in samples.iter().enumerate() {
        let finite = s.timestamp.is_finite()
            && s.gyro.iter().all(|x| x.is_finite())
            && s.accel.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidArgument(format!(
                "IMU sample {k} has non-finite values"
            )));
        }
    }
    if let Some(k) = samples
        .windows(2)
        .position(|w| w[1].timestamp <= w[0].timestamp)
    {
        return Err(Error::InvalidArgument(format!(
            "IMU timestamps not strictly increasing at sample {}",
            k + 1
        )));
    }
    Ok(())
}

/// Integrates every interval between consecutive samples.
///
/// Fewer than two samples cover no time and yield the identity delta.
pub fn preintegrate(samples: &[ImuSample], bias: BiasState) -> Result<PreintegratedDelta> {
    validate(samples)?;
    let t0 = samples.first().map_or(0.0, |s| s.timestamp);
    let mut delta = PreintegratedDelta::identity_at(t0, bias);
    for w in samples.windows(2) {
        delta.step(&w[0].gyro, &w[0].accel, w[1].timestamp - w[0].timestamp);
    }
    delta.t_end = samples.last().map_or(t0, |s| s.timestamp);
    delta.sync_values();
    Ok(delta)
}

fn check_coverage(samples: &[ImuSample], t_start: f64, t_end: f64) -> Result<()> {
    if t_end < t_start {
        return Err(Error::InvalidArgument(format!(
            "span end {t_end} precedes start {t_start}"
        )));
    }
    if t_end == t_start {
        return Ok(());
    }
    if samples.first().is_none_or(|s| s.timestamp > t_start) {
        return Err(Error::InsufficientData(format!(
            "no IMU sample at or before t = {t_start}"
        )));
    }
    let last_ts = samples.last().map_or(f64::NEG_INFINITY, |s| s.timestamp);
    if last_ts < t_end {
        return Err(Error::InsufficientData(format!(
            "IMU data ends at {last_ts}, before span end {t_end}"
        )));
    }
    Ok(())
}

/// Integrates over `[t_start, t_end]`, clipping the hold intervals at both ends.
///
/// The sample at or before `t_start` provides the measurement for the
/// leading partial interval.
pub fn preintegrate_span(
    samples: &[ImuSample],
    t_start: f64,
    t_end: f64,
    bias: BiasState,
) -> Result<PreintegratedDelta> {
    validate(samples)?;
    check_coverage(samples, t_start, t_end)?;
    let mut delta = PreintegratedDelta::identity_at(t_start, bias);
    delta.advance(samples, t_end);
    delta.sync_values();
    Ok(delta)
}

/// Deltas from `times[0]` to every entry of `times`, in a single pass.
///
/// `times` must be non-decreasing; the first delta is the identity.
pub fn preintegrate_chain(
    samples: &[ImuSample],
    times: &[f64],
    bias: BiasState,
) -> Result<Vec<PreintegratedDelta>> {
    validate(samples)?;
    let Some(&t0) = times.first() else {
        return Ok(Vec::new());
    };
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument(
            "chain times must be non-decreasing".into(),
        ));
    }
    check_coverage(samples, t0, *times.last().unwrap())?;
    let mut delta = PreintegratedDelta::identity_at(t0, bias);
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        delta.advance(samples, t);
        let mut snap = delta;
        snap.sync_values();
        out.push(snap);
    }
    Ok(out)
}

/// Moves `delta` to `new_bias` with the default [`BiasUpdate::FirstOrder`] policy.
pub fn correct_bias(
    delta: &PreintegratedDelta,
    new_bias: BiasState,
    samples: &[ImuSample],
) -> Result<PreintegratedDelta> {
    correct_bias_with(delta, new_bias, samples, BiasUpdate::FirstOrder)
}

pub fn correct_bias_with(
    delta: &PreintegratedDelta,
    new_bias: BiasState,
    samples: &[ImuSample],
    policy: BiasUpdate,
) -> Result<PreintegratedDelta> {
    if new_bias == delta.lin_bias {
        let mut out = *delta;
        out.sync_values();
        return Ok(out);
    }
    let drift = (new_bias.gyro - delta.lin_bias.gyro).amax();
    if policy == BiasUpdate::Reintegrate || drift > REINTEGRATION_THRESHOLD {
        return preintegrate_span(samples, delta.t_start, delta.t_end, new_bias);
    }
    let (r, v, p) = delta.evaluate(&new_bias);
    let mut out = *delta;
    out.delta_r = r;
    out.delta_v = v;
    out.delta_p = p;
    out.bias = new_bias;
    Ok(out)
}

/// Propagates a body state through a delta.
pub fn predict_state(
    delta: &PreintegratedDelta,
    r1: &Rotation,
    v1: &Vector3<f64>,
    p1: &Vector3<f64>,
    g: &Vector3<f64>,
) -> (Rotation, Vector3<f64>, Vector3<f64>) {
    let dt = delta.dt;
    let rj = r1 * &delta.delta_r;
    let vj = v1 + g * dt + r1 * delta.delta_v;
    let pj = p1 + v1 * dt + 0.5 * g * dt * dt + r1 * delta.delta_p;
    (rj, vj, pj)
}
