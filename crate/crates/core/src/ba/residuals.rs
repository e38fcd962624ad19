use nalgebra::{Matrix2x3, SMatrix, SVector, Vector2, Vector3};

use crate::geometry::{exp_so3, hat, log_so3, right_jacobian, right_jacobian_inv};
use crate::imu::{BiasState, PreintegratedDelta};
use crate::tracks::{CameraModel, Extrinsics};

use super::KeyframeState;

pub type Vector9 = SVector<f64, 9>;
pub type Matrix9x3 = SMatrix<f64, 9, 3>;
pub type Matrix9x6 = SMatrix<f64, 9, 6>;

/// Near plane in meters: points closer than this to the camera plane are
/// treated as behind it.
pub const MIN_CAMERA_DEPTH: f64 = 0.1;

/// Jacobians of the reprojection residual. Rotation is the right
/// perturbation `R Exp(δφ)`, position is additive in the world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReprojectionJacobians {
    pub d_rotation: Matrix2x3<f64>,
    pub d_position: Matrix2x3<f64>,
    pub d_point: Matrix2x3<f64>,
}

/// `pixel − π(R_BCᵀ (R_jᵀ (x − p_j) − t_BC))`; `None` when the point is
/// behind the camera.
pub fn reprojection_residual(
    kf: &KeyframeState,
    point: &Vector3<f64>,
    ex: &Extrinsics,
    cam: &CameraModel,
    pixel: &Vector2<f64>,
) -> Option<(Vector2<f64>, ReprojectionJacobians)> {
    let rt = kf.rotation.matrix().transpose();
    let r_bc = ex.body_from_camera.rotation.matrix();
    let x_b = rt * (point - kf.position);
    let x_c = r_bc.transpose() * (x_b - ex.body_from_camera.translation);
    if x_c.z < MIN_CAMERA_DEPTH {
        return None;
    }
    let iz = 1.0 / x_c.z;
    let proj = Vector2::new(cam.fx * x_c.x * iz + cam.cx, cam.fy * x_c.y * iz + cam.cy);
    let d_proj = Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * x_c.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * x_c.y * iz * iz,
    );
    // residual = pixel − π, so every Jacobian carries a minus sign
    let d_body = -d_proj * r_bc.transpose();
    Some((
        pixel - proj,
        ReprojectionJacobians {
            d_rotation: d_body * hat(&x_b),
            d_position: -d_body * rt,
            d_point: d_body * rt,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InertialJacobians {
    pub d_rotation_i: Matrix9x3,
    pub d_position_i: Matrix9x3,
    pub d_velocity_i: Matrix9x3,
    pub d_rotation_j: Matrix9x3,
    pub d_position_j: Matrix9x3,
    pub d_velocity_j: Matrix9x3,
    /// With respect to `(b^g, b^a)`.
    pub d_bias: Matrix9x6,
}

/// Rotation, velocity and position discrepancy of keyframe `j` against
/// keyframe `i` propagated through `delta` at `bias`.
pub fn inertial_residual(
    kf_i: &KeyframeState,
    kf_j: &KeyframeState,
    bias: &BiasState,
    delta: &PreintegratedDelta,
    g: &Vector3<f64>,
) -> (Vector9, InertialJacobians) {
    let dt = delta.dt;
    let (dr, dv, dp) = delta.evaluate(bias);
    let ri = kf_i.rotation.matrix();
    let rj = kf_j.rotation.matrix();
    let rit = ri.transpose();

    let e = dr.matrix().transpose() * rit * rj;
    let r_rot = log_so3(&crate::geometry::Rotation::from_matrix_unchecked(e));
    let vel_world = kf_j.velocity - kf_i.velocity - g * dt;
    let pos_world = kf_j.position - kf_i.position - kf_i.velocity * dt - 0.5 * g * dt * dt;
    let r_vel = rit * vel_world - dv;
    let r_pos = rit * pos_world - dp;

    let jr_inv = right_jacobian_inv(&r_rot);
    let j = &delta.jacobians;
    let dbg = bias.gyro - delta.lin_bias.gyro;
    let d_rot_bg = -jr_inv
        * exp_so3(&r_rot).matrix().transpose()
        * right_jacobian(&(j.dr_dbg * dbg))
        * j.dr_dbg;

    let mut jac = InertialJacobians {
        d_rotation_i: Matrix9x3::zeros(),
        d_position_i: Matrix9x3::zeros(),
        d_velocity_i: Matrix9x3::zeros(),
        d_rotation_j: Matrix9x3::zeros(),
        d_position_j: Matrix9x3::zeros(),
        d_velocity_j: Matrix9x3::zeros(),
        d_bias: Matrix9x6::zeros(),
    };
    jac.d_rotation_i
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-jr_inv * rj.transpose() * ri));
    jac.d_rotation_i
        .fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&hat(&(rit * vel_world)));
    jac.d_rotation_i
        .fixed_view_mut::<3, 3>(6, 0)
        .copy_from(&hat(&(rit * pos_world)));
    jac.d_rotation_j
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&jr_inv);

    jac.d_velocity_i
        .fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&-rit);
    jac.d_velocity_i
        .fixed_view_mut::<3, 3>(6, 0)
        .copy_from(&(-rit * dt));
    jac.d_velocity_j
        .fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&rit);

    jac.d_position_i
        .fixed_view_mut::<3, 3>(6, 0)
        .copy_from(&-rit);
    jac.d_position_j
        .fixed_view_mut::<3, 3>(6, 0)
        .copy_from(&rit);

    jac.d_bias.fixed_view_mut::<3, 3>(0, 0).copy_from(&d_rot_bg);
    jac.d_bias
        .fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&-j.dv_dbg);
    jac.d_bias
        .fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&-j.dv_dba);
    jac.d_bias
        .fixed_view_mut::<3, 3>(6, 0)
        .copy_from(&-j.dp_dbg);
    jac.d_bias
        .fixed_view_mut::<3, 3>(6, 3)
        .copy_from(&-j.dp_dba);

    let mut r = Vector9::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&r_rot);
    r.fixed_rows_mut::<3>(3).copy_from(&r_vel);
    r.fixed_rows_mut::<3>(6).copy_from(&r_pos);
    (r, jac)
}

/// Diagonal information for an inertial edge of length `dt` from
/// continuous-time noise densities.
pub fn inertial_information(dt: f64, gyro_density: f64, accel_density: f64) -> SMatrix<f64, 9, 9> {
    let dt = dt.max(1e-9);
    let rot = 1.0 / (gyro_density * gyro_density * dt);
    let vel = 1.0 / (accel_density * accel_density * dt);
    let pos = 1.0 / (accel_density * accel_density * dt * dt * dt / 3.0);
    let mut d = SVector::<f64, 9>::zeros();
    for k in 0..3 {
        d[k] = rot;
        d[3 + k] = vel;
        d[6 + k] = pos;
    }
    SMatrix::from_diagonal(&d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, Rotation};
    use crate::imu::{predict_state, preintegrate, ImuSample};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
        Vector3::from_fn(|_, _| rng.random_range(-s..s))
    }

    fn random_kf(rng: &mut ChaCha8Rng) -> KeyframeState {
        KeyframeState::free(
            exp_so3(&rand_vec(rng, 1.5)),
            rand_vec(rng, 1.0),
            rand_vec(rng, 1.0),
        )
    }

    fn rig(rng: &mut ChaCha8Rng) -> Extrinsics {
        Extrinsics::new(Pose::new(exp_so3(&rand_vec(rng, 0.3)), rand_vec(rng, 0.1)))
    }

    fn perturbed(kf: &KeyframeState, block: usize, k: usize, h: f64) -> KeyframeState {
        let mut out = *kf;
        let mut d = Vector3::zeros();
        d[k] = h;
        match block {
            0 => out.rotation = kf.rotation * exp_so3(&d),
            1 => out.position += d,
            _ => out.velocity += d,
        }
        out
    }

    /// max |A − B| / max(|A|, 1e-6)
    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax() / a.amax().max(1e-6)
    }

    #[test]
    fn back_projected_point_has_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cam = CameraModel::euroc();
        for _ in 0..20 {
            let kf = random_kf(&mut rng);
            let ex = rig(&mut rng);
            let pixel = Vector2::new(rng.random_range(0.0..752.0), rng.random_range(0.0..480.0));
            let c = ex.camera_pose(&kf.pose());
            let x = c.transform_point(&(cam.bearing(&pixel) * 2.0));
            let (r, _) = reprojection_residual(&kf, &x, &ex, &cam, &pixel).unwrap();
            assert!(r.norm() < 1e-9, "{r:?}");
        }
    }

    #[test]
    fn point_behind_camera_is_invalid() {
        let cam = CameraModel::euroc();
        let kf = KeyframeState::free(Rotation::identity(), Vector3::zeros(), Vector3::zeros());
        let x = Vector3::new(0.0, 0.0, -3.0);
        assert!(reprojection_residual(
            &kf,
            &x,
            &Extrinsics::identity(),
            &cam,
            &Vector2::new(1.0, 1.0)
        )
        .is_none());
    }

    #[test]
    fn reprojection_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cam = CameraModel::euroc();
        let mut checked = 0;
        while checked < 100 {
            let kf = random_kf(&mut rng);
            let ex = rig(&mut rng);
            let c = ex.camera_pose(&kf.pose());
            let x = c.transform_point(&Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(2.0..6.0),
            ));
            let pixel = Vector2::new(300.0, 200.0);
            let (_, jac) = reprojection_residual(&kf, &x, &ex, &cam, &pixel).unwrap();
            let h = 1e-6;
            let res = |kf: &KeyframeState, x: &Vector3<f64>| {
                reprojection_residual(kf, x, &ex, &cam, &pixel).unwrap().0
            };
            for (block, analytic) in [(0, jac.d_rotation), (1, jac.d_position)] {
                let mut fd = DMatrix::zeros(2, 3);
                for k in 0..3 {
                    let col = (res(&perturbed(&kf, block, k, h), &x)
                        - res(&perturbed(&kf, block, k, -h), &x))
                        / (2.0 * h);
                    fd.set_column(k, &col);
                }
                let a = DMatrix::from_column_slice(2, 3, analytic.as_slice());
                assert!(rel_err(&a, &fd) < 1e-5, "block {block}: {a} vs {fd}");
            }
            let mut fd = DMatrix::zeros(2, 3);
            for k in 0..3 {
                let mut d = Vector3::zeros();
                d[k] = h;
                fd.set_column(k, &((res(&kf, &(x + d)) - res(&kf, &(x - d))) / (2.0 * h)));
            }
            let a = DMatrix::from_column_slice(2, 3, jac.d_point.as_slice());
            assert!(rel_err(&a, &fd) < 1e-5);
            checked += 1;
        }
    }

    #[test]
    fn forward_translation_matches_parallax_prediction() {
        // Camera = body, looking along +z; move the body by ε along z.
        let cam = CameraModel::euroc();
        let ex = Extrinsics::identity();
        let x = Vector3::new(0.4, -0.3, 4.0);
        let kf = KeyframeState::free(Rotation::identity(), Vector3::zeros(), Vector3::zeros());
        let pixel = cam.project(&x).unwrap();
        let eps = 1e-4;
        let mut moved = kf;
        moved.position.z += eps;
        let (r, _) = reprojection_residual(&moved, &x, &ex, &cam, &pixel).unwrap();
        // π(x − ε e_z) − π(x) ≈ ε (fx x / z², fy y / z²)
        let predicted = Vector2::new(cam.fx * x.x / (x.z * x.z), cam.fy * x.y / (x.z * x.z)) * eps;
        assert!((-r - predicted).norm() < 1e-3 * predicted.norm());
    }

    fn random_delta(rng: &mut ChaCha8Rng) -> PreintegratedDelta {
        let lin = BiasState::new(rand_vec(rng, 0.02), rand_vec(rng, 0.05));
        let gyro = rand_vec(rng, 1.0);
        let accel = rand_vec(rng, 3.0) + Vector3::new(0.0, 0.0, 9.81);
        let samples: Vec<ImuSample> = (0..=80)
            .map(|k| ImuSample {
                timestamp: k as f64 * 0.005,
                gyro: gyro + rand_vec(rng, 0.3),
                accel: accel + rand_vec(rng, 0.5),
            })
            .collect();
        preintegrate(&samples, lin).unwrap()
    }

    #[test]
    fn predicted_states_have_zero_inertial_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Vector3::new(0.0, 0.0, -9.81);
        for _ in 0..20 {
            let d = random_delta(&mut rng);
            let kf_i = random_kf(&mut rng);
            let (r, v, p) = predict_state(&d, &kf_i.rotation, &kf_i.velocity, &kf_i.position, &g);
            let kf_j = KeyframeState::free(r, p, v);
            let (res, _) = inertial_residual(&kf_i, &kf_j, &d.lin_bias, &d, &g);
            assert!(res.amax() < 1e-10, "{res}");
        }
    }

    #[test]
    fn velocity_perturbation_moves_only_velocity_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Vector3::new(0.0, 0.0, -9.81);
        let d = random_delta(&mut rng);
        let kf_i = random_kf(&mut rng);
        let (r, v, p) = predict_state(&d, &kf_i.rotation, &kf_i.velocity, &kf_i.position, &g);
        let mut kf_j = KeyframeState::free(r, p, v);
        kf_j.velocity += Vector3::new(0.1, 0.0, 0.0);
        let (res, _) = inertial_residual(&kf_i, &kf_j, &d.lin_bias, &d, &g);
        let expected = kf_i.rotation.matrix().transpose() * Vector3::new(0.1, 0.0, 0.0);
        assert!(res.fixed_rows::<3>(0).amax() < 1e-10);
        assert!(res.fixed_rows::<3>(6).amax() < 1e-10);
        assert!((res.fixed_rows::<3>(3) - expected).amax() < 1e-10);
    }

    #[test]
    fn inertial_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Vector3::new(0.0, 0.0, -9.81);
        for _ in 0..30 {
            let d = random_delta(&mut rng);
            let kf_i = random_kf(&mut rng);
            let kf_j = random_kf(&mut rng);
            let bias = BiasState::new(
                d.lin_bias.gyro + rand_vec(&mut rng, 0.05),
                d.lin_bias.accel + rand_vec(&mut rng, 0.1),
            );
            let (_, jac) = inertial_residual(&kf_i, &kf_j, &bias, &d, &g);
            let h = 1e-6;
            let to_dm = |m: &Matrix9x3| DMatrix::from_column_slice(9, 3, m.as_slice());
            let checks = [
                (0, true, jac.d_rotation_i),
                (1, true, jac.d_position_i),
                (2, true, jac.d_velocity_i),
                (0, false, jac.d_rotation_j),
                (1, false, jac.d_position_j),
                (2, false, jac.d_velocity_j),
            ];
            for (block, first, analytic) in checks {
                let mut fd = DMatrix::zeros(9, 3);
                for k in 0..3 {
                    let eval = |s: f64| {
                        let (a, b) = if first {
                            (perturbed(&kf_i, block, k, s * h), kf_j)
                        } else {
                            (kf_i, perturbed(&kf_j, block, k, s * h))
                        };
                        inertial_residual(&a, &b, &bias, &d, &g).0
                    };
                    fd.set_column(k, &((eval(1.0) - eval(-1.0)) / (2.0 * h)));
                }
                let a = to_dm(&analytic);
                assert!(
                    rel_err(&a, &fd) < 1e-4,
                    "block {block} first {first}:\n{a}\n{fd}"
                );
            }
            let mut fd = DMatrix::zeros(9, 6);
            for k in 0..6 {
                let eval = |s: f64| {
                    let mut b = bias;
                    if k < 3 {
                        b.gyro[k] += s * h;
                    } else {
                        b.accel[k - 3] += s * h;
                    }
                    inertial_residual(&kf_i, &kf_j, &b, &d, &g).0
                };
                fd.set_column(k, &((eval(1.0) - eval(-1.0)) / (2.0 * h)));
            }
            let a = DMatrix::from_column_slice(9, 6, jac.d_bias.as_slice());
            assert!(rel_err(&a, &fd) < 1e-4, "bias:\n{a}\n{fd}");
        }
    }

    #[test]
    fn inertial_information_is_positive_definite() {
        let omega = inertial_information(0.5, 1.7e-4, 2e-3);
        assert!(omega.cholesky().is_some());
        assert!((omega[(0, 0)] - 1.0 / (1.7e-4f64.powi(2) * 0.5)).abs() < 1e-3);
    }
}
