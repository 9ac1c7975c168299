mod common;

use std::sync::Arc;

use common::*;
use hmp_core::hybrid::{AffineJump, JumpMap};
use hmp_core::manifold::{ChartPoint, Constraint};
use hmp_core::solver::{
    costate_gradient, fd_gradient, geodesic_step, hold_grid, lq_steer, lq_steer_on_grid, solve,
    steer_cost, SolverError, SolverOptions, SolverStatus, SteeringProblem, SwitchDecision,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn near_identity_jump(rng: &mut impl Rng, n: usize) -> Arc<dyn JumpMap> {
    Arc::new(AffineJump {
        matrix: DMatrix::identity(n, n) + random_matrix(rng, n, n, 0.3),
        offset: random_vector(rng, n, 0.3),
    })
}

/// Three planar modes, a coordinate surface and a tilted affine surface.
fn two_switch_problem(rng: &mut impl Rng) -> SteeringProblem {
    let modes = (0..3).map(|_| random_controllable_pair(rng, 2, 1, 0.8)).collect();
    let tilt = random_vector(rng, 2, 1.0) + DVector::from_vec(vec![2.0, 0.0]);
    let surfaces = vec![
        Constraint::Coordinate { index: 0, level: 0.0 },
        Constraint::Affine { normal: tilt, offset: 0.5 },
    ];
    let jumps = vec![near_identity_jump(rng, 2), near_identity_jump(rng, 2)];
    let sys = linear_chain(modes, surfaces, jumps);
    let x0 = ChartPoint::new(random_vector(rng, 2, 1.0));
    let xf = ChartPoint::new(random_vector(rng, 2, 1.0));
    SteeringProblem::new(sys, x0, xf, 0, 0.0, 3.0).unwrap()
}

fn one_switch_problem() -> SteeringProblem {
    let a0 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -0.5, -0.2]);
    let a1 = DMatrix::from_row_slice(2, 2, &[0.3, 0.4, -1.0, 0.0]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let sys = linear_chain(
        vec![(a0, b.clone()), (a1, b)],
        vec![Constraint::Coordinate { index: 0, level: 0.0 }],
        vec![identity_jump()],
    );
    SteeringProblem::new(
        sys,
        ChartPoint::from_slice(&[-1.0, 0.5]),
        ChartPoint::from_slice(&[1.0, -0.3]),
        0,
        0.0,
        2.0,
    )
    .unwrap()
}

fn quick_options() -> SolverOptions {
    SolverOptions {
        cells: 256,
        realize_steps: 8192,
        pmp_samples: 20,
        ..SolverOptions::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn decision_vector_round_trip(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let problem = two_switch_problem(&mut rng);
        let d = problem.initial_decision();
        let z = random_vector(&mut rng, d.to_vector().len(), 2.0);
        let back = d.with_vector(&z);
        prop_assert_eq!(back.to_vector(), z);
        prop_assert_eq!(back.surfaces, d.surfaces);
    }

    #[test]
    fn steer_cost_matches_gramian_quadrature(seed in 0u64..10_000, t1 in 0.3..2.5f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=3);
        let (a, b) = random_controllable_pair(&mut rng, n, 1, 1.0);
        let x0 = random_vector(&mut rng, n, 1.0);
        let x1 = random_vector(&mut rng, n, 1.0);
        let oracle = SteerOracle::new(&a, &b, &x0, &x1, 0.0, t1);
        let sc = steer_cost(&a, &b, &x0, &x1, 0.0, t1).unwrap();
        prop_assert!(rel(sc.cost, oracle.cost) < 1e-8, "{} vs {}", sc.cost, oracle.cost);
        let lq = lq_steer(&a, &b, &x0, &x1, 0.0, t1).unwrap();
        for s in [0.0, 0.3, 0.7, 1.0] {
            let t = s * t1;
            let u = lq.control_at(&a, &b, t);
            prop_assert!((&u - oracle.control(t)).norm() < 1e-6 * (1.0 + u.norm()));
            let p = lq.costate_at(&a, t);
            prop_assert!((&p - oracle.costate(t)).norm() < 1e-6 * (1.0 + p.norm()));
        }
    }
}

#[test]
fn costate_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..10 {
        let problem = two_switch_problem(&mut rng);
        let base = problem.initial_decision();
        let z = base.to_vector() + {
            let mut v = random_vector(&mut rng, 4, 0.3);
            v[2] *= 0.5;
            v[3] *= 0.5;
            v
        };
        let d = base.with_vector(&z);
        let g = costate_gradient(&problem, &d).unwrap();
        let fd = fd_gradient(&problem, &d, 1e-6).unwrap();
        assert!((&g - &fd).norm() < 1e-5 * (1.0 + fd.norm()), "costate {g} vs fd {fd}");
    }
}

/// Weighted projection onto the reachability null space: cell perturbations
/// that leave the endpoint fixed.
fn null_space_projection(m: &DMatrix<f64>, widths: &[f64], delta: &DVector<f64>) -> DVector<f64> {
    let hinv = DMatrix::from_diagonal(&DVector::from_iterator(widths.len(), widths.iter().map(|h| 1.0 / h)));
    let mh = m * &hinv;
    let s = &mh * m.transpose();
    let corr = s.lu().solve(&(m * delta)).unwrap();
    delta - hinv * m.transpose() * corr
}

#[test]
fn held_control_is_discrete_minimum_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..10 {
        let (a, b) = random_controllable_pair(&mut rng, 2, 1, 1.0);
        let x0 = random_vector(&mut rng, 2, 1.0);
        let x1 = random_vector(&mut rng, 2, 1.0);
        let t1 = rng.random_range(0.5..2.0);
        let knots = hold_grid(0.0, t1, 48);
        let lq = lq_steer_on_grid(&a, &b, &x0, &x1, &knots).unwrap();
        let widths: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
        // M_k = e^{A(t1 − t_{k+1})} ∫_0^{h_k} e^{As} ds B
        let cols: Vec<DVector<f64>> = knots
            .windows(2)
            .map(|w| expm_taylor(&(&a * (t1 - w[1]))) * expm_integral(&a, w[1] - w[0]) * &b)
            .map(|c| c.column(0).into_owned())
            .collect();
        let m = DMatrix::from_columns(&cols);
        let u = DVector::from_iterator(widths.len(), lq.control.values().iter().map(|v| v[0]));

        let reached = expm_taylor(&(&a * t1)) * &x0 + &m * &u;
        assert!((reached - &x1).norm() < 1e-9, "held control misses the target");
        let energy: f64 = 0.5 * widths.iter().zip(u.iter()).map(|(h, v)| h * v * v).sum::<f64>();
        assert!(rel(energy, lq.discrete_cost) < 1e-9);
        assert!(lq.discrete_cost >= lq.cost * (1.0 - 1e-12));

        for _ in 0..20 {
            let delta = null_space_projection(&m, &widths, &random_vector(&mut rng, widths.len(), 1.0));
            assert!((&m * &delta).norm() < 1e-9 * (1.0 + delta.norm()));
            let first_order: f64 = widths.iter().zip(u.iter().zip(delta.iter())).map(|(h, (v, d))| h * v * d).sum();
            let scale: f64 = widths.iter().zip(u.iter()).map(|(h, v)| h * v.abs()).sum::<f64>() * delta.amax();
            assert!(first_order.abs() < 1e-8 * scale.max(1e-12), "first-order term {first_order}");
        }
    }
}

#[test]
fn solve_one_switch_reaches_a_local_minimum() {
    let problem = one_switch_problem();
    let sol = solve(&problem, &quick_options()).unwrap();
    assert_eq!(sol.status, SolverStatus::Converged);
    for w in sol.iterations.windows(2) {
        assert!(w[1].cost <= w[0].cost * (1.0 + 1e-12), "log increases: {} -> {}", w[0].cost, w[1].cost);
    }
    let held: f64 = sol.segments.iter().map(|s| s.discrete_cost).sum();
    assert!(rel(sol.cost, held) < 1e-8, "realized {} vs held {held}", sol.cost);
    assert!(sol.terminal_error < 1e-6, "terminal error {}", sol.terminal_error);
    assert!((sol.objective - problem.cost(&sol.decision).unwrap()).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let z = sol.decision.to_vector();
    for _ in 0..50 {
        let probe = sol.decision.with_vector(&(&z + random_vector(&mut rng, z.len(), 1e-3)));
        let c = problem.cost(&probe).unwrap();
        assert!(c >= sol.objective * (1.0 - 1e-10), "probe {c} below {}", sol.objective);
    }
}

#[test]
fn no_surface_problem_is_plain_steering() {
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -0.3]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let sys = linear_chain(vec![(a.clone(), b.clone())], vec![], vec![]);
    let x0 = DVector::from_vec(vec![1.0, 0.0]);
    let xf = DVector::from_vec(vec![-0.5, 0.4]);
    let problem =
        SteeringProblem::new(sys, ChartPoint::new(x0.clone()), ChartPoint::new(xf.clone()), 0, 0.0, 1.5)
            .unwrap();
    let sol = solve(&problem, &quick_options()).unwrap();
    let lq = lq_steer(&a, &b, &x0, &xf, 0.0, 1.5).unwrap();
    // weight ½ doubles back to ½∫‖u‖²
    assert!(rel(sol.objective, lq.cost) < 1e-12);
    assert!(sol.decision.is_empty());
}

#[test]
fn uncontrollable_segment_is_reported() {
    // the second coordinate never moves
    let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, -1.0]);
    let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
    let sys = linear_chain(vec![(a, b)], vec![], vec![]);
    let problem = SteeringProblem::new(
        sys,
        ChartPoint::from_slice(&[0.0, 1.0]),
        ChartPoint::from_slice(&[1.0, 1.0]),
        0,
        0.0,
        1.0,
    )
    .unwrap();
    match solve(&problem, &quick_options()) {
        Err(SolverError::Uncontrollable { segment, .. }) => assert_eq!(segment, 0),
        other => panic!("expected uncontrollable, got {:?}", other.map(|s| s.status)),
    }
}

#[test]
fn torus_steps_do_not_wrap_surface_coordinates() {
    let (_, problem) = torus_problem();
    let mut d: SwitchDecision = problem.initial_decision();
    d.coords[0] = DVector::from_vec(vec![6.0]);
    let mut dir = DVector::zeros(d.to_vector().len());
    dir[0] = -1.0;
    // the meridian metric is the constant r², so the geodesic is a straight line
    let moved = geodesic_step(&problem, &d, &dir, 1.0, 1e-3).unwrap();
    assert!((moved.coords[0][0] - 7.0).abs() < 1e-9, "got {}", moved.coords[0][0]);
    assert_eq!(moved.times, d.times);
    for k in 1..moved.coords.len() {
        assert_eq!(moved.coords[k], d.coords[k]);
    }
}

#[test]
fn times_stay_ordered_after_large_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let problem = two_switch_problem(&mut rng);
    let d = problem.initial_decision();
    let dir = DVector::from_vec(vec![0.0, 0.0, 5.0, -5.0]);
    let moved = geodesic_step(&problem, &d, &dir, 1.0, 1e-3).unwrap();
    let (t1, t2) = (moved.times[0], moved.times[1]);
    assert!(problem.t0 + 1e-3 <= t1 + 1e-12 && t1 + 1e-3 <= t2 + 1e-12 && t2 + 1e-3 <= problem.tf + 1e-12);
}
