//! Needle variations: perturbed controls, the first-order sensitivity
//! formulas for states, switching times and post-switch states, and
//! finite-difference oracles that check them.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use std::sync::Arc;
use thiserror::Error;

use crate::flow::{
    pushforward, simulate_hybrid, FlowError, IntegratorOptions, TransportOperator,
    TRANSVERSALITY_THRESHOLD,
};
use crate::hybrid::{
    ControlSignal, ControlledField, FnJump, HybridSystem, HybridTrajectory, JumpMap, LinearField,
    TerminalCost,
};
use crate::manifold::{
    surface_oneform_with_tolerance, ChartPoint, Constraint, Cotangent, ManifoldError,
    RiemannianManifold, SwitchingSurface, Tangent,
};

pub const DEFAULT_EPSILONS: [f64; 7] = [1e-2, 3e-3, 1e-3, 3e-4, 1e-4, 3e-5, 1e-5];
/// Minimum fitted log-log slope for a sensitivity record to pass.
pub const MIN_ORDER: f64 = 0.9;
/// Maximum relative error at `ε = 1e-4`.
pub const MAX_RELATIVE_ERROR: f64 = 1e-2;
const REFERENCE_EPSILON: f64 = 1e-4;
/// Largest `ε` entering the order fit; larger rungs can be pre-asymptotic.
pub const FIT_MAX_EPSILON: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum NeedleError {
    #[error("needle interval [{start}, {end}] escapes the horizon [{t0}, {tf}]")]
    Range { start: f64, end: f64, t0: f64, tf: f64 },
    #[error("invalid needle spec: {0}")]
    Spec(String),
    #[error("⟨dN, f⟩ = {0:e} is below the transversality threshold")]
    Transversality(f64),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
}

pub type Result<T> = std::result::Result<T, NeedleError>;

#[derive(Clone, Debug, PartialEq)]
pub struct NeedleSpec {
    pub t1: f64,
    pub u1: DVector<f64>,
    pub epsilons: Vec<f64>,
}

impl NeedleSpec {
    pub fn new(t1: f64, u1: DVector<f64>) -> Self {
        Self {
            t1,
            u1,
            epsilons: DEFAULT_EPSILONS.to_vec(),
        }
    }

    pub fn with_epsilons(mut self, epsilons: Vec<f64>) -> Self {
        self.epsilons = epsilons;
        self
    }

    pub fn validate(&self, t0: f64, tf: f64, bounds: &[(f64, f64)]) -> Result<()> {
        if !(self.t1 > t0 && self.t1 < tf) {
            return Err(NeedleError::Spec(format!(
                "t1 = {} not inside ({t0}, {tf})",
                self.t1
            )));
        }
        if self.u1.len() != bounds.len()
            || self
                .u1
                .iter()
                .zip(bounds)
                .any(|(u, (lo, hi))| u < lo || u > hi)
        {
            return Err(NeedleError::Spec("u1 outside the control bounds".into()));
        }
        if self.epsilons.windows(2).any(|w| w[1] >= w[0]) || self.epsilons.iter().any(|e| *e <= 0.0)
        {
            return Err(NeedleError::Spec("epsilons must be positive and decreasing".into()));
        }
        if self.epsilons.first().is_some_and(|e| *e >= self.t1 - t0) {
            return Err(NeedleError::Spec("largest epsilon exceeds t1 - t0".into()));
        }
        Ok(())
    }
}

/// Which side of the nominal switching time the perturbed switch lands on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum SwitchBranch {
    /// `t_s ≤ t_s(ε)`.
    Delayed,
    /// `t_s(ε) < t_s`.
    Advanced,
}

/// Hold of `u°(t_s)` between the nominal and perturbed switching times.
#[derive(Clone, Debug, PartialEq)]
pub struct SwitchExtension {
    pub t_s: f64,
    pub t_s_eps: f64,
    pub hold: DVector<f64>,
}

impl SwitchExtension {
    pub fn branch(&self) -> SwitchBranch {
        if self.t_s <= self.t_s_eps {
            SwitchBranch::Delayed
        } else {
            SwitchBranch::Advanced
        }
    }
}

/// `u1` on `[t1 − ε, t1)`, and the optional hold on the interval between
/// `t_s` and `t_s(ε)`.
pub fn perturb_control(
    u: &ControlSignal,
    spec: &NeedleSpec,
    eps: f64,
    horizon: (f64, f64),
    extension: Option<&SwitchExtension>,
) -> Result<ControlSignal> {
    let (t0, tf) = horizon;
    let start = spec.t1 - eps;
    if start < t0 || spec.t1 > tf || eps < 0.0 {
        return Err(NeedleError::Range {
            start,
            end: spec.t1,
            t0,
            tf,
        });
    }
    if eps == 0.0 {
        return Ok(u.clone());
    }
    let mut out = u.with_override(start, spec.t1, &spec.u1);
    if let Some(ext) = extension {
        let (a, b) = match ext.branch() {
            SwitchBranch::Delayed => (ext.t_s, ext.t_s_eps),
            SwitchBranch::Advanced => (ext.t_s_eps, ext.t_s),
        };
        if a < t0 || b > tf {
            return Err(NeedleError::Range {
                start: a,
                end: b,
                t0,
                tf,
            });
        }
        out = out.with_override(a, b, &ext.hold);
    }
    Ok(out)
}

/// `f(x(t1), u1) − f(x(t1), u°(t1))`.
pub fn elementary_perturbation(
    field: &dyn ControlledField,
    x_t1: &ChartPoint,
    u1: &DVector<f64>,
    u_nominal: &DVector<f64>,
) -> Tangent {
    Tangent::new(
        x_t1.clone(),
        field.eval(&x_t1.coords, u1) - field.eval(&x_t1.coords, u_nominal),
    )
}

/// Right derivative of the switching time under a needle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwitchTimeRate {
    /// `d t_s(ε) / dε` at `0⁺`.
    pub rate: f64,
    pub branch: SwitchBranch,
}

impl SwitchTimeRate {
    /// The rate as written for each branch: `d(t_s(ε) − t_s)/dε` in the
    /// delayed case and `d(t_s − t_s(ε))/dε` in the advanced case.
    pub fn branch_rate(&self) -> f64 {
        match self.branch {
            SwitchBranch::Delayed => self.rate,
            SwitchBranch::Advanced => -self.rate,
        }
    }
}

/// `−⟨dN, f₀⟩⁻¹ ⟨dN, w⟩`, with `w` the elementary vector transported to
/// `t_s⁻`.
pub fn switching_time_derivative(
    dn: &Cotangent,
    f0_minus: &Tangent,
    w: &Tangent,
) -> Result<SwitchTimeRate> {
    let dn_f = dn.components.dot(&f0_minus.components);
    let scale = dn.components.norm() * f0_minus.components.norm();
    if !(dn_f.abs() >= TRANSVERSALITY_THRESHOLD * scale) || scale == 0.0 {
        return Err(NeedleError::Transversality(dn_f));
    }
    let rate = -dn.components.dot(&w.components) / dn_f;
    let branch = if rate >= 0.0 {
        SwitchBranch::Delayed
    } else {
        SwitchBranch::Advanced
    };
    Ok(SwitchTimeRate { rate, branch })
}

/// State variation just after the switch:
/// `Tζ v⁻ + (dt_s/dε)(Tζ f₀⁻ − f₁⁺)`.
///
/// `rate` is the signed `d t_s(ε)/dε`; the advanced branch uses the same
/// expression because its branch rate carries the opposite sign.
pub fn propagate_through_switch(
    v_minus: &Tangent,
    rate: f64,
    jump: &dyn JumpMap,
    f0_minus: &Tangent,
    f1_plus: &Tangent,
) -> Tangent {
    let tz = jump.jac(&v_minus.base.coords);
    let base = ChartPoint::new(jump.eval(&v_minus.base.coords));
    let comps = &tz * &v_minus.components
        + (&tz * &f0_minus.components - &f1_plus.components) * rate;
    Tangent::new(base, comps)
}

/// One formula checked against a finite-difference ladder.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct SensitivityRecord {
    pub formula: String,
    pub formula_value: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub fd_values: Vec<Vec<f64>>,
    pub errors: Vec<f64>,
    pub convergence_order: f64,
    pub reference_relative_error: f64,
}

impl SensitivityRecord {
    pub fn new(
        formula: &str,
        value: &DVector<f64>,
        epsilons: &[f64],
        fd: &[DVector<f64>],
    ) -> Self {
        let errors: Vec<f64> = fd.iter().map(|d| (d - value).norm()).collect();
        let denom = value.norm().max(1e-12);
        let reference = epsilons
            .iter()
            .position(|e| (e / REFERENCE_EPSILON - 1.0).abs() < 1e-9)
            .unwrap_or(epsilons.len() / 2);
        Self {
            formula: formula.to_string(),
            formula_value: value.iter().copied().collect(),
            epsilons: epsilons.to_vec(),
            fd_values: fd.iter().map(|d| d.iter().copied().collect()).collect(),
            convergence_order: fit_tail(epsilons, &errors, 1e-12 * (1.0 + value.norm())),
            reference_relative_error: errors[reference] / denom,
            errors,
        }
    }

    pub fn passed(&self) -> bool {
        self.convergence_order >= MIN_ORDER && self.reference_relative_error < MAX_RELATIVE_ERROR
    }
}

/// [`fit_order`] over the rungs with `ε ≤ FIT_MAX_EPSILON`, or the whole
/// ladder if fewer than three qualify.
fn fit_tail(epsilons: &[f64], errors: &[f64], floor: f64) -> f64 {
    let (e, r): (Vec<f64>, Vec<f64>) = epsilons
        .iter()
        .zip(errors)
        .filter(|(e, _)| **e <= FIT_MAX_EPSILON * (1.0 + 1e-9))
        .unzip();
    if e.len() >= 3 {
        fit_order(&e, &r, floor)
    } else {
        fit_order(epsilons, errors, floor)
    }
}

/// Least-squares slope of `log error` against `log ε`. Errors at or below
/// `floor` are exact to rounding and drop out of the fit; if fewer than two
/// points remain the ladder is treated as converged (`+∞`).
pub fn fit_order(epsilons: &[f64], errors: &[f64], floor: f64) -> f64 {
    let pts: Vec<(f64, f64)> = epsilons
        .iter()
        .zip(errors)
        .filter(|(_, e)| **e > floor)
        .map(|(x, e)| (x.ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::INFINITY;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// A single-switch problem with a needle anchor, for FD oracle checks.
#[derive(Clone, Debug)]
pub struct OracleInstance {
    pub sys: HybridSystem,
    pub x0: ChartPoint,
    pub control: ControlSignal,
    pub t0: f64,
    pub tf: f64,
    pub spec: NeedleSpec,
    pub opts: IntegratorOptions,
}

/// Draws a planar one-switch instance: two linear modes, an affine surface
/// crossed near `t = 1.1`, and a smooth sinusoidal jump.
pub fn random_instance(rng: &mut impl Rng) -> OracleInstance {
    let (t0, tf) = (0.0, 2.0);
    let pieces = 8;
    loop {
        let mat = |rng: &mut dyn rand::RngCore| {
            DMatrix::from_fn(2, 2, |_, _| rng.random_range(-0.8..0.8))
        };
        let a0 = mat(rng);
        let a1 = mat(rng);
        let b0 = DMatrix::from_fn(2, 1, |_, _| rng.random_range(-1.0..1.0));
        let b1 = DMatrix::from_fn(2, 1, |_, _| rng.random_range(-1.0..1.0));
        let x0 = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let grid: Vec<f64> = (0..pieces)
            .map(|k| t0 + (tf - t0) * k as f64 / pieces as f64)
            .collect();
        let values: Vec<DVector<f64>> = (0..pieces)
            .map(|_| DVector::from_element(1, rng.random_range(-1.0..1.0)))
            .collect();
        let control = ControlSignal::new(grid, values);
        let f0: Arc<dyn ControlledField> = Arc::new(LinearField::new(a0, b0));
        let f1: Arc<dyn ControlledField> = Arc::new(LinearField::new(a1, b1));

        // place the surface through the mode-0 state at the target crossing time
        let target_time = 1.1;
        let opts = IntegratorOptions { steps: 2048 };
        let Ok(seg) = crate::flow::integrate_segment(
            f0.as_ref(),
            0,
            &ChartPoint::new(x0.clone()),
            &control,
            t0,
            target_time,
            opts,
        ) else {
            continue;
        };
        let xs = seg.end().coords.clone();
        let fs = f0.eval(&xs, control.at(target_time));
        if fs.norm() < 0.3 {
            continue;
        }
        let angle: f64 = rng.random_range(-1.0..1.0);
        let dir = &fs / fs.norm();
        let normal = DVector::from_vec(vec![
            angle.cos() * dir[0] - angle.sin() * dir[1],
            angle.sin() * dir[0] + angle.cos() * dir[1],
        ]);
        let offset = normal.dot(&xs);

        let amp: Vec<f64> = (0..2).map(|_| rng.random_range(-0.3..0.3)).collect();
        let freq: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
        let phase: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..6.0)).collect();
        let jump = sinusoidal_jump(amp, freq, phase);

        let target = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let sys = HybridSystem {
            manifold: RiemannianManifold::euclidean(2),
            states: vec!["q0".into(), "q1".into()],
            fields: vec![f0, f1],
            surfaces: vec![SwitchingSurface::new(
                "S",
                Constraint::Affine { normal, offset },
                0,
                1,
            )],
            jumps: vec![Arc::new(jump)],
            control_bounds: vec![(-2.0, 2.0)],
            losses: vec![None, None],
            terminal_cost: TerminalCost::Quadratic {
                target,
                weight: 1.0,
            },
        };
        let Ok(traj) = simulate_hybrid(&sys, &control, &ChartPoint::new(x0.clone()), 0, t0, tf, opts)
        else {
            continue;
        };
        let ts = traj.switch_times[0];
        if (ts - target_time).abs() > 1e-6 {
            continue;
        }
        // needle inside a control piece well before the switch
        let piece = rng.random_range(1..4);
        let t1 = t0 + (tf - t0) * (piece as f64 + 0.5) / pieces as f64;
        let mut u1 = rng.random_range(-2.0..2.0);
        if (u1 - control.at(t1)[0]).abs() < 0.3 {
            u1 = -u1.signum() * 1.5;
        }
        return OracleInstance {
            sys,
            x0: ChartPoint::new(x0),
            control,
            t0,
            tf,
            spec: NeedleSpec::new(t1, DVector::from_element(1, u1)),
            opts,
        };
    }
}

/// `ζ(x)_i = x_i + a_i sin(Σ_j c_ij x_j + φ_i)` with `freq` the row-major
/// `n × n` matrix `c`.
pub fn sinusoidal_jump(amp: Vec<f64>, freq: Vec<f64>, phase: Vec<f64>) -> FnJump {
    let n = amp.len();
    assert!(freq.len() == n * n && phase.len() == n, "sinusoidal jump parameters");
    let arg = move |c: &[f64], p: &[f64], x: &DVector<f64>, i: usize| {
        (0..n).map(|j| c[n * i + j] * x[j]).sum::<f64>() + p[i]
    };
    let (a1, c1, p1) = (amp.clone(), freq.clone(), phase.clone());
    FnJump::new(move |x: &DVector<f64>| {
        DVector::from_fn(n, |i, _| x[i] + a1[i] * arg(&c1, &p1, x, i).sin())
    })
    .with_jacobian(move |x: &DVector<f64>| {
        DMatrix::from_fn(n, n, |i, j| {
            let d = if i == j { 1.0 } else { 0.0 };
            d + amp[i] * arg(&freq, &phase, x, i).cos() * freq[n * i + j]
        })
    })
}

/// FD verification of one instance.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct InstanceReport {
    pub branch: SwitchBranch,
    pub records: Vec<SensitivityRecord>,
}

impl InstanceReport {
    pub fn passed(&self) -> bool {
        self.records.iter().all(SensitivityRecord::passed)
    }
}

/// Closed-form sensitivities of one needle on a single-switch trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct NeedleFormulas {
    pub elementary: Tangent,
    pub rate: SwitchTimeRate,
    pub post_switch: Tangent,
    pub terminal: Tangent,
    pub cost_rate: f64,
}

/// Evaluates every closed form for a needle in the first segment of `traj`.
pub fn needle_formulas(
    sys: &HybridSystem,
    traj: &HybridTrajectory,
    spec: &NeedleSpec,
    u: &ControlSignal,
) -> Result<NeedleFormulas> {
    let seg0 = &traj.segments[0];
    let f0 = sys.fields[seg0.state_id].as_ref();
    let x_t1 = ChartPoint::new(seg0.interpolate(f0, spec.t1));
    let elementary = elementary_perturbation(f0, &x_t1, &spec.u1, u.left_limit(spec.t1));
    let ev = &traj.events[0];
    let v_minus = pushforward(seg0, f0, &elementary, spec.t1, ev.time);
    let v_minus = Tangent::new(ev.x_minus.clone(), v_minus.components);
    let seg1 = &traj.segments[1];
    let f1 = sys.fields[seg1.state_id].as_ref();
    let f0_minus = Tangent::new(
        ev.x_minus.clone(),
        f0.eval(&ev.x_minus.coords, seg0.controls.last().unwrap()),
    );
    let f1_plus = Tangent::new(ev.x_plus.clone(), f1.eval(&ev.x_plus.coords, &seg1.controls[0]));
    let dn = surface_oneform_with_tolerance(&sys.surfaces[ev.surface], &ev.x_minus, 1e-8)?;
    let rate = switching_time_derivative(&dn, &f0_minus, &v_minus)?;
    let post_switch = propagate_through_switch(
        &v_minus,
        rate.rate,
        sys.jumps[ev.surface].as_ref(),
        &f0_minus,
        &f1_plus,
    );
    let mut terminal = post_switch.clone();
    for seg in &traj.segments[1..] {
        let field = sys.fields[seg.state_id].as_ref();
        terminal = pushforward(seg, field, &terminal, seg.t_start(), seg.t_end());
    }
    let dh = sys.terminal_cost.differential(&traj.terminal().coords);
    let cost_rate = dh.dot(&terminal.components);
    Ok(NeedleFormulas {
        elementary,
        rate,
        post_switch,
        terminal,
        cost_rate,
    })
}

/// Runs the FD ladders for the elementary vector, the switching-time rate,
/// the post-switch state variation and the terminal cost rate.
pub fn verify_instance(inst: &OracleInstance) -> Result<InstanceReport> {
    let sys = &inst.sys;
    let spec = &inst.spec;
    let horizon = (inst.t0, inst.tf);
    let nominal = simulate_hybrid(sys, &inst.control, &inst.x0, 0, inst.t0, inst.tf, inst.opts)?;
    let Some(&t_s) = nominal.switch_times.first() else {
        return Err(NeedleError::Spec("the nominal trajectory does not switch".into()));
    };
    if spec.t1 >= t_s {
        return Err(NeedleError::Spec(format!(
            "needle at t1 = {} must precede the switch at {t_s}",
            spec.t1
        )));
    }
    let formulas = needle_formulas(sys, &nominal, spec, &inst.control)?;
    let hold = inst.control.at(t_s).clone();
    let u_nom_left = inst.control.left_limit(spec.t1).clone();

    let mut fd_elem = Vec::new();
    let mut fd_rate = Vec::new();
    let mut fd_post = Vec::new();
    let mut fd_cost = Vec::new();
    for &eps in &spec.epsilons {
        // same breakpoints in both runs so the RK4 node grids coincide
        let same = NeedleSpec::new(spec.t1, u_nom_left.clone());
        let u_ref = perturb_control(&inst.control, &same, eps, horizon, None)?;
        let reference = simulate_hybrid(sys, &u_ref, &inst.x0, 0, inst.t0, inst.tf, inst.opts)?;
        let mut u_eps = perturb_control(&inst.control, spec, eps, horizon, None)?;
        let mut perturbed = simulate_hybrid(sys, &u_eps, &inst.x0, 0, inst.t0, inst.tf, inst.opts)?;
        let ext = SwitchExtension {
            t_s,
            t_s_eps: perturbed.switch_times[0],
            hold: hold.clone(),
        };
        let with_hold = perturb_control(&inst.control, spec, eps, horizon, Some(&ext))?;
        if with_hold != u_eps {
            u_eps = with_hold;
            perturbed = simulate_hybrid(sys, &u_eps, &inst.x0, 0, inst.t0, inst.tf, inst.opts)?;
        }
        let ts_ref = reference.switch_times[0];
        let ts_eps = perturbed.switch_times[0];
        let x_at = |traj: &HybridTrajectory, t: f64| traj.state_at(sys, t);
        fd_elem.push((x_at(&perturbed, spec.t1) - x_at(&reference, spec.t1)) / eps);
        fd_rate.push(DVector::from_element(1, (ts_eps - ts_ref) / eps));
        let t_c = ts_ref.max(ts_eps);
        fd_post.push((post_state(sys, &perturbed, t_c) - post_state(sys, &reference, t_c)) / eps);
        let h = |traj: &HybridTrajectory| sys.terminal_cost.eval(&traj.terminal().coords);
        fd_cost.push(DVector::from_element(1, (h(&perturbed) - h(&reference)) / eps));
    }
    let eps = &spec.epsilons;
    Ok(InstanceReport {
        branch: formulas.rate.branch,
        records: vec![
            SensitivityRecord::new("elementary_perturbation", &formulas.elementary.components, eps, &fd_elem),
            SensitivityRecord::new(
                "switching_time_derivative",
                &DVector::from_element(1, formulas.rate.rate),
                eps,
                &fd_rate,
            ),
            SensitivityRecord::new("propagate_through_switch", &formulas.post_switch.components, eps, &fd_post),
            SensitivityRecord::new(
                "terminal_cost_rate",
                &DVector::from_element(1, formulas.cost_rate),
                eps,
                &fd_cost,
            ),
        ],
    })
}

/// State at `t` on the post-switch segment (the right limit if `t` is the
/// switching time).
fn post_state(sys: &HybridSystem, traj: &HybridTrajectory, t: f64) -> DVector<f64> {
    let seg = &traj.segments[1];
    seg.interpolate(sys.fields[seg.state_id].as_ref(), t.max(seg.t_start()))
}

/// Linear map sending a variation at `t_s⁻` to the variation at `t_s`,
/// assembled column by column from the switch formulas.
pub fn switch_variation_matrix(
    sys: &HybridSystem,
    traj: &HybridTrajectory,
    index: usize,
) -> Result<DMatrix<f64>> {
    let ev = &traj.events[index];
    let before = &traj.segments[index];
    let after = &traj.segments[index + 1];
    let f0 = Tangent::new(
        ev.x_minus.clone(),
        sys.fields[before.state_id].eval(&ev.x_minus.coords, before.controls.last().unwrap()),
    );
    let f1 = Tangent::new(
        ev.x_plus.clone(),
        sys.fields[after.state_id].eval(&ev.x_plus.coords, &after.controls[0]),
    );
    let dn = surface_oneform_with_tolerance(&sys.surfaces[ev.surface], &ev.x_minus, 1e-8)?;
    let n = ev.x_minus.dim();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        let e = Tangent::new(ev.x_minus.clone(), DVector::from_fn(n, |j, _| if i == j { 1.0 } else { 0.0 }));
        let rate = switching_time_derivative(&dn, &f0, &e)?;
        let col = propagate_through_switch(&e, rate.rate, sys.jumps[ev.surface].as_ref(), &f0, &f1);
        m.set_column(i, &col.components);
    }
    Ok(m)
}

/// Outcome of sampling needle vectors in the terminal cone.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ConeReport {
    pub samples: usize,
    pub min_pairing: f64,
    pub argmin_time: f64,
    pub argmin_control: Vec<f64>,
    pub scale: f64,
    pub post_switch_samples: usize,
    pub pre_switch_samples: usize,
}

impl ConeReport {
    pub fn satisfied(&self, tol: f64) -> bool {
        self.min_pairing >= -tol * self.scale
    }
}

/// Samples `⟨dh(x(t_f)), v(t_f)⟩` over needle vectors anchored at random
/// times with random control values in the box. Needles after the last
/// switch are pushed forward directly; earlier needles pass through every
/// later switch via [`switch_variation_matrix`].
pub fn cone_inequality_check(
    sys: &HybridSystem,
    traj: &HybridTrajectory,
    rng: &mut impl Rng,
    samples: usize,
) -> Result<ConeReport> {
    let n_seg = traj.segments.len();
    let dim = sys.dim();
    // transfer[s][k]: variation at node k of segment s to the final time
    let mut switch_mats = Vec::with_capacity(n_seg.saturating_sub(1));
    for j in 0..n_seg - 1 {
        switch_mats.push(switch_variation_matrix(sys, traj, j)?);
    }
    let mut transfer: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); n_seg];
    let mut downstream = DMatrix::<f64>::identity(dim, dim);
    for s in (0..n_seg).rev() {
        let seg = &traj.segments[s];
        let op = TransportOperator::new(seg, sys.fields[seg.state_id].as_ref());
        let nodes = seg.times.len();
        let mut mats = vec![DMatrix::zeros(dim, dim); nodes];
        mats[nodes - 1] = downstream.clone();
        for k in (0..nodes - 1).rev() {
            mats[k] = &mats[k + 1] * op.matrix(seg.times[k + 1], seg.times[k]);
        }
        if s > 0 {
            downstream = &mats[0] * &switch_mats[s - 1];
        }
        transfer[s] = mats;
    }
    let dh = sys.terminal_cost.differential(&traj.terminal().coords);
    let scale = dh.norm().max(1.0);
    let (t0, tf) = (traj.t_start(), traj.t_end());
    let mut report = ConeReport {
        samples,
        min_pairing: f64::INFINITY,
        argmin_time: f64::NAN,
        argmin_control: Vec::new(),
        scale,
        post_switch_samples: 0,
        pre_switch_samples: 0,
    };
    for _ in 0..samples {
        let t = rng.random_range(t0..tf);
        let s = traj.segment_at(t).min(n_seg - 1);
        let seg = &traj.segments[s];
        let field = sys.fields[seg.state_id].as_ref();
        let k = seg.step_index(t);
        let u_nom = &seg.controls[k];
        let u1 = DVector::from_fn(sys.control_dim(), |i, _| {
            let (lo, hi) = sys.control_bounds[i];
            rng.random_range(lo..=hi)
        });
        let x = ChartPoint::new(seg.interpolate(field, t));
        let w = elementary_perturbation(field, &x, &u1, u_nom);
        let op = TransportOperator::new(seg, field);
        let v_tf = &transfer[s][k + 1] * op.matrix(seg.times[k + 1], t) * &w.components;
        let pairing = dh.dot(&v_tf);
        if s + 1 == n_seg {
            report.post_switch_samples += 1;
        } else {
            report.pre_switch_samples += 1;
        }
        if pairing < report.min_pairing {
            report.min_pairing = pairing;
            report.argmin_time = t;
            report.argmin_control = u1.iter().copied().collect();
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hybrid::IdentityJump;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(c: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(c)
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let u = ControlSignal::new(vec![0.0, 1.0], vec![v(&[0.2]), v(&[-0.4])]);
        let spec = NeedleSpec::new(0.5, v(&[1.0]));
        assert_eq!(perturb_control(&u, &spec, 0.0, (0.0, 2.0), None).unwrap(), u);
    }

    #[test]
    fn nominal_value_needle_changes_nothing() {
        let u = ControlSignal::new(vec![0.0, 1.0], vec![v(&[0.2]), v(&[-0.4])]);
        let spec = NeedleSpec::new(0.5, v(&[0.2]));
        let p = perturb_control(&u, &spec, 0.1, (0.0, 2.0), None).unwrap();
        for t in [0.0, 0.39, 0.4, 0.45, 0.5, 0.99, 1.0, 1.7] {
            assert_eq!(p.at(t), u.at(t));
        }
    }

    #[test]
    fn needle_outside_horizon_is_rejected() {
        let u = ControlSignal::constant(0.0, v(&[0.0]));
        let spec = NeedleSpec::new(0.05, v(&[1.0]));
        assert!(matches!(
            perturb_control(&u, &spec, 0.1, (0.0, 1.0), None),
            Err(NeedleError::Range { .. })
        ));
    }

    #[test]
    fn hold_extension_branches() {
        let u = ControlSignal::new(vec![0.0, 1.0], vec![v(&[0.0]), v(&[5.0])]);
        let spec = NeedleSpec::new(0.5, v(&[1.0]));
        let ext = SwitchExtension { t_s: 1.0, t_s_eps: 1.1, hold: v(&[7.0]) };
        let p = perturb_control(&u, &spec, 0.1, (0.0, 2.0), Some(&ext)).unwrap();
        assert_eq!(p.at(1.05)[0], 7.0);
        assert_eq!(p.at(1.1)[0], 5.0);
        let ext = SwitchExtension { t_s: 1.0, t_s_eps: 0.9, hold: v(&[7.0]) };
        let p = perturb_control(&u, &spec, 0.1, (0.0, 2.0), Some(&ext)).unwrap();
        assert_eq!(p.at(0.95)[0], 7.0);
        assert_eq!(p.at(1.0)[0], 5.0);
    }

    #[test]
    fn elementary_vector_of_linear_field() {
        let f = LinearField::new(DMatrix::from_element(2, 2, 0.3), DMatrix::from_column_slice(2, 1, &[1.0, -2.0]));
        let x = ChartPoint::from_slice(&[0.4, 0.1]);
        let w = elementary_perturbation(&f, &x, &v(&[1.5]), &v(&[0.5]));
        assert!((w.components - v(&[1.0, -2.0])).norm() < 1e-15);
        let zero = elementary_perturbation(&f, &x, &v(&[0.5]), &v(&[0.5]));
        assert_eq!(zero.components.norm(), 0.0);
    }

    #[test]
    fn tangent_variation_does_not_move_switch() {
        let x = ChartPoint::from_slice(&[0.0, 0.0]);
        let dn = Cotangent::new(x.clone(), v(&[1.0, 0.0]));
        let f0 = Tangent::new(x.clone(), v(&[2.0, 1.0]));
        let w = Tangent::new(x, v(&[0.0, 3.0]));
        assert_eq!(switching_time_derivative(&dn, &f0, &w).unwrap().rate, 0.0);
    }

    #[test]
    fn branch_sign_flips_with_variation() {
        let x = ChartPoint::from_slice(&[0.0, 0.0]);
        let dn = Cotangent::new(x.clone(), v(&[1.0, 0.5]));
        let f0 = Tangent::new(x.clone(), v(&[2.0, 1.0]));
        let w = Tangent::new(x.clone(), v(&[-0.3, 0.8]));
        let a = switching_time_derivative(&dn, &f0, &w).unwrap();
        let b = switching_time_derivative(&dn, &f0, &Tangent::new(x, -w.components.clone())).unwrap();
        assert_eq!(a.rate, -b.rate);
        assert_ne!(a.branch, b.branch);
        assert_eq!(a.branch_rate(), b.branch_rate());
    }

    #[test]
    fn continuous_field_identity_jump_passes_variation() {
        let x = ChartPoint::from_slice(&[0.0, 0.0]);
        let f = Tangent::new(x.clone(), v(&[1.0, 2.0]));
        let vm = Tangent::new(x, v(&[0.3, -0.7]));
        let out = propagate_through_switch(&vm, 4.2, &IdentityJump, &f, &f);
        assert_eq!(out.components, vm.components);
    }

    #[test]
    fn order_fit_of_exact_linear_error() {
        let eps = DEFAULT_EPSILONS.to_vec();
        let errs: Vec<f64> = eps.iter().map(|e| 3.0 * e).collect();
        assert!((fit_order(&eps, &errs, 0.0) - 1.0).abs() < 1e-12);
        assert_eq!(fit_order(&eps, &vec![0.0; eps.len()], 1e-14), f64::INFINITY);
    }

    #[test]
    fn one_random_instance_verifies() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inst = random_instance(&mut rng);
        let report = verify_instance(&inst).unwrap();
        for r in &report.records {
            assert!(r.passed(), "{}: order {} err {}", r.formula, r.convergence_order, r.reference_relative_error);
        }
    }
}
