use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::exp_so3;

use super::residuals::{inertial_residual, reprojection_residual};
use super::{InitGraph, MeasurementEdge, StateBlock, StateLayout};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaSettings {
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub relative_decrease: f64,
    /// Huber threshold on the whitened reprojection error; `None` is plain
    /// least squares.
    pub huber: Option<f64>,
    pub initial_damping: f64,
    pub damping_factor: f64,
    /// Consecutive rejected or failed steps before giving up.
    pub max_rejections: usize,
    /// Stop once an accepted step is smaller than this in every component.
    pub step_tolerance: f64,
}

impl Default for BaSettings {
    fn default() -> Self {
        BaSettings {
            max_iterations: 20,
            relative_decrease: 1e-8,
            huber: Some(2.45),
            initial_damping: 1e-4,
            damping_factor: 10.0,
            max_rejections: 10,
            step_tolerance: 1e-10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BaOutcome {
    pub graph: InitGraph,
    pub cost: f64,
    /// Cost before the first iteration, then after each accepted step.
    pub costs: Vec<f64>,
    pub iterations: usize,
}

/// Residual, information and tangent-space Jacobians of one edge.
#[derive(Clone, Debug)]
pub struct LinearizedEdge {
    pub edge: usize,
    pub residual: DVector<f64>,
    pub information: DMatrix<f64>,
    /// Jacobian of the residual with respect to each touched block, already
    /// restricted to the free dofs; blocks with no free dofs are omitted.
    pub jacobians: Vec<(StateBlock, DMatrix<f64>)>,
}

fn to_dmatrix<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

fn evaluate(graph: &InitGraph, index: usize, with_jacobians: bool) -> Option<LinearizedEdge> {
    let edge = &graph.edges[index];
    let mut jacobians = Vec::new();
    let residual = match edge {
        MeasurementEdge::Reprojection(e) => {
            let kf = &graph.keyframes[e.keyframe];
            let x = &graph.points[e.point].position;
            let (r, j) = reprojection_residual(kf, x, &graph.extrinsics, &graph.camera, &e.pixel)?;
            if with_jacobians {
                let rb = kf.rotation_basis();
                if rb.ncols() > 0 {
                    jacobians.push((
                        StateBlock::Rotation(e.keyframe),
                        to_dmatrix(&j.d_rotation) * rb,
                    ));
                }
                let pb = kf.position_basis();
                if pb.ncols() > 0 {
                    jacobians.push((
                        StateBlock::Position(e.keyframe),
                        to_dmatrix(&j.d_position) * pb,
                    ));
                }
                jacobians.push((StateBlock::Point(e.point), to_dmatrix(&j.d_point)));
            }
            DVector::from_column_slice(r.as_slice())
        }
        MeasurementEdge::Inertial(e) => {
            let (ki, kj) = (&graph.keyframes[e.from], &graph.keyframes[e.to]);
            let (r, j) = inertial_residual(ki, kj, &graph.bias, &e.delta, &graph.gravity);
            if with_jacobians {
                for (k, kf, dr, dp, dv) in [
                    (
                        e.from,
                        ki,
                        &j.d_rotation_i,
                        &j.d_position_i,
                        &j.d_velocity_i,
                    ),
                    (e.to, kj, &j.d_rotation_j, &j.d_position_j, &j.d_velocity_j),
                ] {
                    let rb = kf.rotation_basis();
                    if rb.ncols() > 0 {
                        jacobians.push((StateBlock::Rotation(k), to_dmatrix(dr) * rb));
                    }
                    let pb = kf.position_basis();
                    if pb.ncols() > 0 {
                        jacobians.push((StateBlock::Position(k), to_dmatrix(dp) * pb));
                    }
                    jacobians.push((StateBlock::Velocity(k), to_dmatrix(dv)));
                }
                jacobians.push((StateBlock::Bias, to_dmatrix(&j.d_bias)));
            }
            DVector::from_column_slice(r.as_slice())
        }
        MeasurementEdge::BiasPrior(e) => {
            if with_jacobians {
                jacobians.push((StateBlock::Bias, DMatrix::identity(6, 6)));
            }
            let mut r = DVector::zeros(6);
            r.rows_mut(0, 3).copy_from(&(graph.bias.gyro - e.mean.gyro));
            r.rows_mut(3, 3)
                .copy_from(&(graph.bias.accel - e.mean.accel));
            r
        }
    };
    Some(LinearizedEdge {
        edge: index,
        residual,
        information: edge.information(),
        jacobians,
    })
}

/// Linearizes every edge at the current states. Reprojection edges whose
/// point falls behind the camera are left out.
pub fn linearize(graph: &InitGraph) -> Vec<LinearizedEdge> {
    (0..graph.edges.len())
        .filter_map(|i| evaluate(graph, i, true))
        .collect()
}

fn robust(huber: Option<f64>, edge: &MeasurementEdge, s: f64) -> (f64, f64) {
    match (huber, edge) {
        (Some(k), MeasurementEdge::Reprojection(_)) if s > k * k => {
            let n = s.sqrt();
            (2.0 * k * n - k * k, k / n)
        }
        _ => (s, 1.0),
    }
}

/// Robust cost and the number of edges that could not be evaluated.
fn total_cost(graph: &InitGraph, huber: Option<f64>) -> (f64, usize) {
    let mut cost = 0.0;
    let mut invalid = 0;
    for (i, e) in graph.edges.iter().enumerate() {
        match evaluate(graph, i, false) {
            Some(l) => {
                let s = l.residual.dot(&(&l.information * &l.residual));
                cost += robust(huber, e, s).0;
            }
            None => invalid += 1,
        }
    }
    (cost, invalid)
}

/// Robust cost of the graph at its current states.
pub fn graph_cost(graph: &InitGraph, huber: Option<f64>) -> f64 {
    total_cost(graph, huber).0
}

/// Normal equations with the points kept as 3×3 diagonal blocks.
struct Normal {
    hcc: DMatrix<f64>,
    gc: DVector<f64>,
    hcp: Vec<DMatrix<f64>>,
    hpp: Vec<Matrix3<f64>>,
    gp: Vec<Vector3<f64>>,
}

impl Normal {
    fn build(graph: &InitGraph, layout: &StateLayout, huber: Option<f64>) -> Normal {
        let nc = layout.camera_dimension();
        let np = layout.point_count;
        let mut n = Normal {
            hcc: DMatrix::zeros(nc, nc),
            gc: DVector::zeros(nc),
            hcp: vec![DMatrix::zeros(nc, 3); np],
            hpp: vec![Matrix3::zeros(); np],
            gp: vec![Vector3::zeros(); np],
        };
        for l in linearize(graph) {
            let s = l.residual.dot(&(&l.information * &l.residual));
            let w = robust(huber, &graph.edges[l.edge], s).1;
            let wr = &l.information * &l.residual * w;
            let weighted: Vec<DMatrix<f64>> = l
                .jacobians
                .iter()
                .map(|(_, j)| &l.information * j * w)
                .collect();
            for (ba, ja) in &l.jacobians {
                let g = ja.transpose() * &wr;
                match *ba {
                    StateBlock::Point(i) => n.gp[i] += Vector3::from_column_slice(g.as_slice()),
                    b => {
                        let (o, _) = layout.range(b);
                        let mut v = n.gc.rows_mut(o, g.len());
                        v += &g;
                    }
                }
                for (bb, jb_w) in l.jacobians.iter().map(|(b, _)| b).zip(&weighted) {
                    let h = ja.transpose() * jb_w;
                    match (*ba, *bb) {
                        (StateBlock::Point(i), StateBlock::Point(_)) => {
                            n.hpp[i] += Matrix3::from_column_slice(h.as_slice())
                        }
                        (StateBlock::Point(_), _) => {}
                        (x, StateBlock::Point(i)) => {
                            let (o, d) = layout.range(x);
                            let mut v = n.hcp[i].view_mut((o, 0), (d, 3));
                            v += &h;
                        }
                        (x, y) => {
                            let (oa, da) = layout.range(x);
                            let (ob, db) = layout.range(y);
                            let mut v = n.hcc.view_mut((oa, ob), (da, db));
                            v += &h;
                        }
                    }
                }
            }
        }
        n
    }

    /// Solves `(H + μ diag H) δ = −g` through the point Schur complement.
    fn solve(&self, mu: f64) -> Option<DVector<f64>> {
        let nc = self.hcc.nrows();
        let np = self.hpp.len();
        let mut s = self.hcc.clone();
        for k in 0..nc {
            s[(k, k)] += mu * self.hcc[(k, k)].max(1e-9);
        }
        let mut rhs = -&self.gc;
        let mut inv = Vec::with_capacity(np);
        for i in 0..np {
            let mut c = self.hpp[i];
            for k in 0..3 {
                c[(k, k)] += mu * self.hpp[i][(k, k)].max(1e-9);
            }
            let ci = c.cholesky()?.inverse();
            let bci = &self.hcp[i] * ci;
            s -= &bci * self.hcp[i].transpose();
            rhs += &bci * self.gp[i];
            inv.push(ci);
        }
        let s = (&s + s.transpose()) * 0.5;
        let dc = s.cholesky()?.solve(&rhs);
        let mut out = DVector::zeros(nc + 3 * np);
        out.rows_mut(0, nc).copy_from(&dc);
        for i in 0..np {
            let bp = -self.gp[i] - self.hcp[i].transpose() * &dc;
            let dp = inv[i] * Vector3::from_column_slice(bp.as_slice());
            out.fixed_rows_mut::<3>(nc + 3 * i).copy_from(&dp);
        }
        out.iter().all(|v| v.is_finite()).then_some(out)
    }
}

impl InitGraph {
    /// Applies a tangent-space step laid out by `layout`.
    pub fn retract(&self, layout: &StateLayout, delta: &DVector<f64>) -> InitGraph {
        let mut g = self.clone();
        for (k, kf) in g.keyframes.iter_mut().enumerate() {
            let [(ro, rd), (po, pd), (vo, _)] = layout.keyframes[k];
            if rd > 0 {
                let phi = kf.rotation_basis() * delta.rows(ro, rd);
                let phi = Vector3::new(phi[0], phi[1], phi[2]);
                kf.rotation = (kf.rotation * exp_so3(&phi)).renormalized();
            }
            if pd > 0 {
                let dp = kf.position_basis() * delta.rows(po, pd);
                kf.position += Vector3::new(dp[0], dp[1], dp[2]);
            }
            kf.velocity += delta.fixed_rows::<3>(vo);
        }
        g.bias.gyro += delta.fixed_rows::<3>(layout.bias);
        g.bias.accel += delta.fixed_rows::<3>(layout.bias + 3);
        for (i, p) in g.points.iter_mut().enumerate() {
            p.position += delta.fixed_rows::<3>(layout.points + 3 * i);
        }
        g
    }
}

pub fn optimize(graph: &InitGraph, max_iterations: usize) -> Result<BaOutcome> {
    optimize_with(
        graph,
        &BaSettings {
            max_iterations,
            ..BaSettings::default()
        },
    )
}

/// Levenberg-Marquardt over all free states.
pub fn optimize_with(graph: &InitGraph, settings: &BaSettings) -> Result<BaOutcome> {
    let layout = graph.layout();
    let (mut cost, mut invalid) = total_cost(graph, settings.huber);
    if !cost.is_finite() {
        return Err(Error::OptimizationFailed {
            stage: "bundle adjustment",
            reason: "initial cost is not finite".into(),
        });
    }
    let mut current = graph.clone();
    let mut costs = vec![cost];
    let mut mu = settings.initial_damping;
    let mut iterations = 0;
    while iterations < settings.max_iterations && cost > 0.0 {
        iterations += 1;
        let normal = Normal::build(&current, &layout, settings.huber);
        let mut rejections = 0;
        let mut failures = 0;
        let mut accepted = None;
        while rejections < settings.max_rejections {
            let Some(step) = normal.solve(mu) else {
                failures += 1;
                mu *= settings.damping_factor;
                if failures >= settings.max_rejections {
                    return Err(Error::OptimizationFailed {
                        stage: "bundle adjustment",
                        reason: format!(
                            "damped normal matrix not positive definite (damping {mu:.1e})"
                        ),
                    });
                }
                continue;
            };
            let candidate = current.retract(&layout, &step);
            let (c, inv) = total_cost(&candidate, settings.huber);
            if c.is_finite() && c < cost && inv <= invalid {
                accepted = Some((candidate, c, inv, step.amax()));
                mu = (mu / settings.damping_factor).max(1e-12);
                break;
            }
            rejections += 1;
            mu *= settings.damping_factor;
        }
        let Some((next, c, inv, step)) = accepted else {
            break;
        };
        let decrease = (cost - c) / cost;
        current = next;
        cost = c;
        invalid = inv;
        costs.push(cost);
        if decrease < settings.relative_decrease || step < settings.step_tolerance {
            break;
        }
    }
    Ok(BaOutcome {
        graph: current,
        cost,
        costs,
        iterations,
    })
}
