use hmp_core::flow::{pullback, simulate_hybrid};
use hmp_core::hmp::backward_adjoint;
use hmp_core::manifold::Cotangent;
use hmp_core::needle::{
    cone_inequality_check, fit_order, needle_formulas, perturb_control, random_instance,
    verify_instance, NeedleSpec, SwitchBranch,
};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fit_recovers_power_law(c in 0.01..100.0f64, k in 0.5..3.0f64) {
        let eps = [1e-2f64, 3e-3, 1e-3, 3e-4, 1e-4];
        let errs: Vec<f64> = eps.iter().map(|e| c * e.powf(k)).collect();
        prop_assert!((fit_order(&eps, &errs, 0.0) - k).abs() < 1e-9);
    }

    #[test]
    fn perturbed_control_is_local(seed in 0u64..10_000, eps in 1e-4..0.2f64, s in 0.0..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng);
        let spec = &inst.spec;
        let u = perturb_control(&inst.control, spec, eps, (inst.t0, inst.tf), None).unwrap();
        let t = inst.t0 + (inst.tf - inst.t0) * s;
        if t >= spec.t1 - eps && t < spec.t1 {
            prop_assert_eq!(u.at(t), &spec.u1);
        } else if (t - (spec.t1 - eps)).abs() > 1e-12 {
            prop_assert_eq!(u.at(t), inst.control.at(t));
        }
    }
}

/// `⟨dh, v(t_f)⟩ = ⟨p(t1), w⟩`: the terminal cost rate read off the forward
/// variation equals the pairing of the costate with the elementary vector.
#[test]
fn cost_rate_equals_costate_pairing() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let inst = random_instance(&mut rng);
        let traj = simulate_hybrid(&inst.sys, &inst.control, &inst.x0, 0, inst.t0, inst.tf, inst.opts).unwrap();
        let f = needle_formulas(&inst.sys, &traj, &inst.spec, &inst.control).unwrap();
        let adj = backward_adjoint(&inst.sys, &traj).unwrap();
        let seg = &traj.segments[0];
        let field = inst.sys.fields[seg.state_id].as_ref();
        let p_end = Cotangent::new(seg.end().clone(), adj.segments[0].covectors.last().unwrap().clone());
        let p_t1 = pullback(seg, field, &p_end, seg.t_end(), inst.spec.t1);
        let pairing = p_t1.components.dot(&f.elementary.components);
        assert!(
            (pairing - f.cost_rate).abs() < 1e-6 * (1.0 + f.cost_rate.abs()),
            "{pairing} vs {}",
            f.cost_rate
        );
    }
}

/// Reflecting `u1` through the nominal value negates every first-order
/// quantity and swaps the delayed and advanced branches.
#[test]
fn mirrored_needle_flips_branch() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut checked = 0;
    while checked < 5 {
        let inst = random_instance(&mut rng);
        let u_nom = inst.control.left_limit(inst.spec.t1)[0];
        let mirrored = 2.0 * u_nom - inst.spec.u1[0];
        if !(-2.0..=2.0).contains(&mirrored) {
            continue;
        }
        let traj = simulate_hybrid(&inst.sys, &inst.control, &inst.x0, 0, inst.t0, inst.tf, inst.opts).unwrap();
        let a = needle_formulas(&inst.sys, &traj, &inst.spec, &inst.control).unwrap();
        let spec_b = NeedleSpec::new(inst.spec.t1, DVector::from_element(1, mirrored));
        let b = needle_formulas(&inst.sys, &traj, &spec_b, &inst.control).unwrap();
        // tiny reference values make the relative FD criterion meaningless
        if a.rate.rate.abs() < 1e-3 || a.cost_rate.abs() < 0.05 {
            continue;
        }
        assert_ne!(a.rate.branch, b.rate.branch);
        assert!((a.rate.rate + b.rate.rate).abs() < 1e-12 * (1.0 + a.rate.rate.abs()));
        assert!((&a.post_switch.components + &b.post_switch.components).norm() < 1e-10);
        assert!((a.cost_rate + b.cost_rate).abs() < 1e-10 * (1.0 + a.cost_rate.abs()));

        let mut flipped = inst.clone();
        flipped.spec = spec_b;
        for (name, report) in [("original", verify_instance(&inst)), ("mirrored", verify_instance(&flipped))] {
            let report = report.unwrap();
            assert!(report.passed(), "{name}: {report:?}");
        }
        let branches = [a.rate.branch, b.rate.branch];
        assert!(branches.contains(&SwitchBranch::Delayed) && branches.contains(&SwitchBranch::Advanced));
        checked += 1;
    }
}

#[test]
fn arbitrary_controls_violate_the_cone() {
    // piecewise-constant random controls are not optimal for the terminal
    // cost, so some needle decreases it
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..5 {
        let inst = random_instance(&mut rng);
        let traj = simulate_hybrid(&inst.sys, &inst.control, &inst.x0, 0, inst.t0, inst.tf, inst.opts).unwrap();
        let report = cone_inequality_check(&inst.sys, &traj, &mut rng, 500).unwrap();
        assert!(!report.satisfied(1e-4), "min pairing {}", report.min_pairing);
        assert_eq!(report.pre_switch_samples + report.post_switch_samples, 500);
    }
}

#[test]
fn needle_after_switch_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut inst = random_instance(&mut rng);
    inst.spec = NeedleSpec::new(1.6, DVector::from_element(1, 1.0));
    assert!(verify_instance(&inst).is_err());
}
