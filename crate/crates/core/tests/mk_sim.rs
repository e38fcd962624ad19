use nalgebra::Vector3;
use vinit::geometry::{gravity_vector, GravityParams, Pose};
use vinit::imu::BiasUpdate;
use vinit::mk::{
    build_system, initial_gravity, mk_cost, solve_linear, solve_mk, solve_mk_with, MkSettings,
};
use vinit::sim::{NoiseModel, ProfileKind};
use vinit::tracks::Extrinsics;

mod common;

use common::{case, noiseless, Case};

fn worst_depth_error(c: &Case, lambdas: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (t, l) in c.problem.tracks.iter().zip(lambdas) {
        let idx = c
            .out
            .tracks
            .iter()
            .position(|x| x.id == t.track.id)
            .unwrap();
        for (&slot, &est) in t.keyframe_slots.iter().zip(l) {
            let d = c.out.true_depth(idx, c.problem.keyframes[slot], &c.scene);
            worst = worst.max((est - d).abs() / d);
        }
    }
    worst
}

#[test]
fn inner_solve_recovers_true_depths() {
    let bias = Vector3::new(0.02, -0.01, 0.03);
    let c = case(ProfileKind::Sinusoid3d, 1, noiseless(bias));
    let exact = c.problem.relinearized(&bias).unwrap();
    let sys = build_system(&exact, &bias, &c.gravity).unwrap();
    let x = solve_linear(&sys);
    assert!(!x.degenerate);
    let lambdas: Vec<Vec<f64>> = exact
        .tracks
        .iter()
        .zip(&sys.lambda_offsets)
        .map(|(t, &o)| (0..t.keyframe_slots.len()).map(|k| x.x[o + k]).collect())
        .collect();
    assert!(worst_depth_error(&c, &lambdas) < 1e-6);
    let v1 = c.out.frame_truth(exact.keyframes[0]);
    let v1_body = v1.pose.rotation.inverse() * v1.velocity;
    assert!((x.x.fixed_rows::<3>(0) - v1_body).norm() < 1e-6);
}

#[test]
fn cost_vanishes_at_truth_and_grows_off_it() {
    let bias = Vector3::new(0.02, -0.01, 0.03);
    let c = case(ProfileKind::Helix, 2, noiseless(bias));
    let exact = c.problem.relinearized(&bias).unwrap();
    let s_norm = build_system(&exact, &bias, &c.gravity)
        .unwrap()
        .s
        .norm_squared();
    let at_truth = mk_cost(&exact, &bias, &c.gravity).unwrap();
    assert!(at_truth <= 1e-12 * s_norm, "{at_truth} vs {s_norm}");
    let off = mk_cost(&exact, &(bias + Vector3::new(0.05, 0.0, 0.0)), &c.gravity).unwrap();
    assert!(off > at_truth);
}

#[test]
fn noiseless_solve_recovers_bias_and_gravity() {
    let bias = Vector3::new(0.02, -0.01, 0.03);
    for (seed, kind) in [
        (3, ProfileKind::Sinusoid3d),
        (4, ProfileKind::Circle),
        (5, ProfileKind::Helix),
    ] {
        let c = case(kind, seed, noiseless(bias));
        let sol = solve_mk(&c.problem, &Vector3::zeros(), &GravityParams::default()).unwrap();
        let g_err = gravity_vector(&sol.gravity).angle(&gravity_vector(&c.gravity));
        assert!(
            (sol.gyro_bias - bias).amax() < 1e-5,
            "{kind}: bias {:?}",
            sol.gyro_bias
        );
        assert!(g_err < 1e-5, "{kind}: gravity error {g_err}");
        assert!(worst_depth_error(&c, &sol.lambdas) < 1e-5);
        assert!(!sol.degenerate);
    }
}

#[test]
fn returned_cost_is_reproducible() {
    let bias = Vector3::new(-0.015, 0.02, 0.01);
    let c = case(
        ProfileKind::Sinusoid3d,
        6,
        NoiseModel::euroc(6).with_biases(bias, Vector3::zeros()),
    );
    let sol = solve_mk(&c.problem, &Vector3::zeros(), &initial_gravity(&c.problem)).unwrap();
    let lin = c.problem.relinearized(&sol.linearization_bias).unwrap();
    let again = mk_cost(&lin, &sol.gyro_bias, &sol.gravity).unwrap();
    assert!(
        (again - sol.cost).abs() <= 1e-12 * sol.cost,
        "{again} vs {}",
        sol.cost
    );

    // Without relinearization the cost refers to the problem as given.
    let fixed = MkSettings {
        relinearize: false,
        ..MkSettings::default()
    };
    let sol = solve_mk_with(
        &c.problem,
        &Vector3::zeros(),
        &initial_gravity(&c.problem),
        &fixed,
    )
    .unwrap();
    assert_eq!(sol.linearization_bias, Vector3::zeros());
    let again = mk_cost(&c.problem, &sol.gyro_bias, &sol.gravity).unwrap();
    assert!((again - sol.cost).abs() <= 1e-12 * sol.cost);
}

#[test]
fn cost_is_continuous() {
    let c = case(ProfileKind::Circle, 7, NoiseModel::euroc(7));
    let gp = initial_gravity(&c.problem);
    let b = Vector3::new(0.01, 0.0, -0.01);
    let base = mk_cost(&c.problem, &b, &gp).unwrap();
    for axis in 0..3 {
        let mut d = Vector3::zeros();
        d[axis] = 1e-6;
        let moved = mk_cost(&c.problem, &(b + d), &gp).unwrap();
        // bounded slope
        assert!(
            (moved - base).abs() < 1e-6 * (1.0 + base) * 1e3,
            "axis {axis}"
        );
    }
}

#[test]
fn lever_arm_matters() {
    let bias = Vector3::new(0.01, 0.02, -0.01);
    let c = case(ProfileKind::Sinusoid3d, 8, noiseless(bias));
    assert!(c.out.extrinsics.body_from_camera.translation.norm() > 0.05);
    let sol = solve_mk(&c.problem, &Vector3::zeros(), &initial_gravity(&c.problem)).unwrap();
    assert!(sol.cost < 1e-16);

    let mut no_lever = c.problem.clone();
    no_lever.extrinsics = Extrinsics::new(Pose::new(
        c.problem.extrinsics.body_from_camera.rotation,
        Vector3::zeros(),
    ));
    let wrong = solve_mk(&no_lever, &Vector3::zeros(), &initial_gravity(&no_lever)).unwrap();
    assert!(
        wrong.cost > 1e3 * sol.cost.max(1e-20),
        "{} vs {}",
        wrong.cost,
        sol.cost
    );
}

#[test]
fn noisy_solve_is_close() {
    let mut scale_errors = Vec::new();
    for seed in 0..20u64 {
        let bias = Vector3::new(0.02, -0.01, 0.03);
        let kind = [
            ProfileKind::Sinusoid3d,
            ProfileKind::Circle,
            ProfileKind::Helix,
        ][seed as usize % 3];
        let c = case(
            kind,
            100 + seed,
            NoiseModel::euroc(100 + seed).with_biases(bias, Vector3::zeros()),
        );
        let sol = solve_mk(&c.problem, &Vector3::zeros(), &initial_gravity(&c.problem)).unwrap();
        let g_err = gravity_vector(&sol.gravity).angle(&gravity_vector(&c.gravity));
        assert!(
            g_err.to_degrees() < 2.0,
            "seed {seed}: gravity error {} deg",
            g_err.to_degrees()
        );

        let (mut est, mut tru) = (0.0, 0.0);
        for (t, l) in c.problem.tracks.iter().zip(&sol.lambdas) {
            let idx = c
                .out
                .tracks
                .iter()
                .position(|x| x.id == t.track.id)
                .unwrap();
            for (&slot, &e) in t.keyframe_slots.iter().zip(l) {
                est += e;
                tru += c.out.true_depth(idx, c.problem.keyframes[slot], &c.scene);
            }
        }
        scale_errors.push((est / tru - 1.0).abs() * 100.0);
    }
    assert!(scale_errors.iter().all(|&e| e < 15.0), "{scale_errors:?}");
}

#[test]
fn constant_velocity_is_flagged_or_flat() {
    let c = case(
        ProfileKind::ConstantVelocity,
        9,
        noiseless(Vector3::zeros()),
    );
    let sol = solve_mk(&c.problem, &Vector3::zeros(), &initial_gravity(&c.problem)).unwrap();
    // Without acceleration the depths can shrink to zero at no cost.
    let scale: f64 = sol.lambdas.iter().flatten().map(|l| l.abs()).sum::<f64>();
    assert!(
        sol.degenerate || sol.cost < 1e-12 || scale < 1e-3,
        "cost {} scale {scale}",
        sol.cost
    );
}

#[test]
fn reintegration_policy_agrees() {
    let bias = Vector3::new(0.02, -0.01, 0.03);
    let c = case(
        ProfileKind::Sinusoid3d,
        10,
        NoiseModel::euroc(10).with_biases(bias, Vector3::zeros()),
    );
    let a = solve_mk(&c.problem, &Vector3::zeros(), &initial_gravity(&c.problem)).unwrap();
    let p = c.problem.clone().with_bias_update(BiasUpdate::Reintegrate);
    let b = solve_mk(&p, &Vector3::zeros(), &initial_gravity(&p)).unwrap();
    assert!((a.gyro_bias - b.gyro_bias).amax() < 1e-6);
    assert!((a.cost - b.cost).abs() < 1e-6 * b.cost);
}
