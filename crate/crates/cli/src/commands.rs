use std::fmt::Write as _;
use std::path::PathBuf;

use hmp_core::config::{self, ControlSource, LoadedConfig, Setup};
use hmp_core::flow::{simulate_hybrid_per_segment, FlowError};
use hmp_core::hmp::{backward_adjoint, check_pmp, ControlGrid, HmpError};
use hmp_core::hybrid::{lift_point, mayer_lift, ControlSignal, HybridSystem, HybridTrajectory};
use hmp_core::needle::{
    cone_inequality_check, random_instance, verify_instance, ConeReport, NeedleError,
    OracleInstance, SensitivityRecord, SwitchBranch,
};
use hmp_core::solver::{self, SolverError, SolverSolution, SolverStatus};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::export::{self, Header, PmpSummary, Writer};
use crate::{exit, Common, Tolerances};

/// A failed step: exit code and message.
struct Failure {
    code: u8,
    message: String,
}

type Step<T> = Result<T, Failure>;

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

fn io(e: String) -> Failure {
    fail(exit::CHECK_FAILED, e)
}

struct Context {
    loaded: LoadedConfig,
    setup: Setup,
    writer: Writer,
    seed: u64,
}

fn prepare(c: &Common) -> Step<Context> {
    let loaded = config::load(&c.config).map_err(|e| fail(exit::CONFIG, e.to_string()))?;
    let setup = loaded
        .run
        .system()
        .map_err(|e| fail(exit::CONFIG, e.to_string()))?;
    let seed = c.seed.or(loaded.run.seed).unwrap_or(0);
    let out = c
        .out
        .clone()
        .or_else(|| loaded.run.output.as_ref().map(|p| loaded.dir.join(p)))
        .unwrap_or_else(|| PathBuf::from("out"));
    let writer = Writer::new(&out, Header::new(&loaded.source, seed)).map_err(io)?;
    Ok(Context {
        loaded,
        setup,
        writer,
        seed,
    })
}

fn run(step: impl FnOnce() -> Step<u8>) -> u8 {
    match step() {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn flow_code(e: &FlowError) -> u8 {
    match e {
        FlowError::NonTransversal { .. } => exit::TRANSVERSALITY,
        FlowError::IncompleteSchedule { .. } => exit::INCOMPLETE_SCHEDULE,
        _ => exit::CHECK_FAILED,
    }
}

fn solver_failure(e: SolverError) -> Failure {
    let code = match &e {
        SolverError::Uncontrollable { .. } => exit::UNCONTROLLABLE,
        SolverError::Stalled { .. } => exit::STALL,
        SolverError::Flow(f) => flow_code(f),
        SolverError::Hmp(HmpError::Transversality { .. }) => exit::TRANSVERSALITY,
        SolverError::InvalidDecision(_)
        | SolverError::NotLinear(_)
        | SolverError::UnsupportedLoss(_)
        | SolverError::UnsupportedSurface(_) => exit::CONFIG,
        _ => exit::CHECK_FAILED,
    };
    fail(code, e.to_string())
}

/// Runs the solver. A stall still yields the best iterate.
fn run_solver(ctx: &Context) -> Step<SolverSolution> {
    let problem = ctx
        .setup
        .steering_problem()
        .map_err(|e| fail(exit::CONFIG, e.to_string()))?;
    let options = ctx
        .loaded
        .run
        .solver_options(&problem)
        .map_err(|e| fail(exit::CONFIG, e.to_string()))?;
    match solver::solve(&problem, &options) {
        Ok(sol) => Ok(sol),
        Err(SolverError::Stalled {
            best,
            iteration,
            halvings,
        }) => {
            eprintln!("warning: no descent after {halvings} halvings at iteration {iteration}");
            Ok(*best)
        }
        Err(e) => Err(solver_failure(e)),
    }
}

fn source(ctx: &Context) -> Step<ControlSource> {
    ctx.loaded
        .control_source()
        .map_err(|e| fail(exit::CONFIG, e.to_string()))?
        .ok_or_else(|| fail(exit::CONFIG, "no control source: set control.constant, control.file or control.from_solver"))
}

fn file_controls(ctx: &Context, src: &ControlSource) -> Step<Option<Vec<ControlSignal>>> {
    let m = ctx.setup.sys.control_dim();
    let controls = match src {
        ControlSource::Constant(v) => vec![ControlSignal::constant(ctx.setup.t0, v.clone())],
        ControlSource::File(p) => export::read_control_csv(p).map_err(|e| fail(exit::CONFIG, e))?,
        ControlSource::Solver => return Ok(None),
    };
    if controls.iter().any(|c| c.control_dim() != m) {
        return Err(fail(exit::CONFIG, format!("control must have {m} components")));
    }
    Ok(Some(controls))
}

/// Trajectory under the configured control, on `sys` or its Mayer lift.
fn simulate_on(
    ctx: &Context,
    sys: &HybridSystem,
    controls: &[ControlSignal],
) -> Result<HybridTrajectory, FlowError> {
    let s = &ctx.setup;
    let x0 = if sys.dim() > s.sys.dim() {
        lift_point(&s.x0_point())
    } else {
        s.x0_point()
    };
    simulate_hybrid_per_segment(sys, controls, &x0, s.q0, s.t0, s.tf, ctx.loaded.run.integrator())
}

#[derive(Serialize)]
struct SimulateSummary<'a> {
    status: String,
    segments: usize,
    events: usize,
    switch_times: Vec<f64>,
    terminal: Vec<f64>,
    boundary: Boundary<'a>,
}

#[derive(Serialize)]
struct Boundary<'a> {
    x0: &'a config::BoundaryPoint,
    xf: Option<&'a config::BoundaryPoint>,
}

fn boundary(setup: &Setup) -> Boundary<'_> {
    Boundary {
        x0: &setup.x0,
        xf: setup.xf.as_ref(),
    }
}

pub fn simulate(c: &Common, _tol: &Tolerances) -> u8 {
    run(|| {
        let ctx = prepare(c)?;
        let src = source(&ctx)?;
        let sys = &ctx.setup.sys;
        let controls = match file_controls(&ctx, &src)? {
            Some(cs) => cs,
            None => run_solver(&ctx)?
                .segments
                .iter()
                .map(|s| s.control.clone())
                .collect(),
        };
        let (traj, status, code) = match simulate_on(&ctx, sys, &controls) {
            Ok(t) => (t, "complete".to_string(), exit::OK),
            Err(e) => {
                let code = flow_code(&e);
                eprintln!("error: {e}");
                match e.partial() {
                    Some(p) => (p.clone(), e.to_string(), code),
                    None => return Err(fail(code, e.to_string())),
                }
            }
        };
        export::trajectory_csv(&ctx.writer, "trajectory.csv", sys, &traj).map_err(io)?;
        export::events_csv(&ctx.writer, sys, &traj).map_err(io)?;
        let summary = SimulateSummary {
            status,
            segments: traj.segments.len(),
            events: traj.events.len(),
            switch_times: traj.switch_times.clone(),
            terminal: traj.terminal().coords.iter().copied().collect(),
            boundary: boundary(&ctx.setup),
        };
        ctx.writer.json("simulate.json", &summary).map_err(io)?;
        Ok(code)
    })
}

#[derive(Serialize)]
struct AdjointReport {
    tolerances: Tolerances,
    max_jump_residual: f64,
    max_hamiltonian_gap: f64,
    continuity_pass: bool,
    mus: Vec<f64>,
    pmp_pass: bool,
    pmp: PmpSummary,
}

pub fn adjoint(c: &Common, tol: &Tolerances) -> u8 {
    run(|| {
        let ctx = prepare(c)?;
        let src = source(&ctx)?;
        let (lifted, traj, adj, pmp) = match file_controls(&ctx, &src)? {
            None => {
                let sol = run_solver(&ctx)?;
                (sol.lifted, sol.trajectory, sol.adjoint, sol.pmp)
            }
            Some(controls) => {
                let sys = &ctx.setup.sys;
                let lifted = if sys.is_mayer() { sys.clone() } else { mayer_lift(sys) };
                let traj = simulate_on(&ctx, &lifted, &controls)
                    .map_err(|e| fail(flow_code(&e), e.to_string()))?;
                let adj = backward_adjoint(&lifted, &traj).map_err(|e| match e {
                    HmpError::Transversality { .. } => fail(exit::TRANSVERSALITY, e.to_string()),
                    _ => fail(exit::CHECK_FAILED, e.to_string()),
                })?;
                let problem_opts = solver::SolverOptions::default();
                let grid_points = ctx.loaded.run.solver.pmp_grid.unwrap_or(problem_opts.pmp_grid);
                let samples = ctx
                    .loaded
                    .run
                    .solver
                    .pmp_samples
                    .unwrap_or(problem_opts.pmp_samples);
                let grid = ControlGrid::new(lifted.control_bounds.clone(), grid_points);
                let pmp = check_pmp(&lifted, &traj, &adj, &grid, samples);
                (lifted, traj, adj, pmp)
            }
        };
        export::trajectory_csv(&ctx.writer, "trajectory.csv", &lifted, &traj).map_err(io)?;
        export::adjoint_csv(&ctx.writer, &adj).map_err(io)?;
        export::switches_csv(&ctx.writer, &adj, &pmp).map_err(io)?;
        let max_jump = pmp.max_jump_residual();
        let max_gap = pmp.max_switch_gap();
        let continuity_pass = max_jump < tol.jump_residual && max_gap < tol.hamiltonian_gap;
        let report = AdjointReport {
            tolerances: *tol,
            max_jump_residual: max_jump,
            max_hamiltonian_gap: max_gap,
            continuity_pass,
            mus: adj.mus(),
            pmp_pass: pmp.max_min_violation < tol.pmp_gap,
            pmp: PmpSummary::new(&pmp),
        };
        ctx.writer.json("pmp.json", &report).map_err(io)?;
        Ok(if continuity_pass {
            exit::OK
        } else {
            exit::CHECK_FAILED
        })
    })
}

#[derive(Serialize)]
struct CheckRecord {
    check: String,
    branch: SwitchBranch,
    #[serde(flatten)]
    record: SensitivityRecord,
    passed: bool,
}

#[derive(Serialize)]
struct ConeCheck {
    passed: bool,
    #[serde(flatten)]
    report: ConeReport,
}

#[derive(Serialize)]
struct VerifyReport {
    tolerances: Tolerances,
    passed: bool,
    records: Vec<CheckRecord>,
    cone: Option<ConeCheck>,
}

fn needle_failure(e: NeedleError) -> Failure {
    let code = match &e {
        NeedleError::Flow(f) => flow_code(f),
        NeedleError::Transversality(_) => exit::TRANSVERSALITY,
        NeedleError::Range { .. } | NeedleError::Spec(_) => exit::CONFIG,
        _ => exit::CHECK_FAILED,
    };
    fail(code, e.to_string())
}

pub fn verify(c: &Common, tol: &Tolerances) -> u8 {
    run(|| {
        let ctx = prepare(c)?;
        let run_cfg = &ctx.loaded.run;
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
        let passes = |r: &SensitivityRecord| {
            r.convergence_order >= tol.min_order && r.reference_relative_error < tol.max_relative_error
        };
        let mut records = Vec::new();
        let mut push = |check: String, branch: SwitchBranch, rs: Vec<SensitivityRecord>| {
            for record in rs {
                records.push(CheckRecord {
                    check: check.clone(),
                    branch,
                    passed: passes(&record),
                    record,
                });
            }
        };
        for i in 0..run_cfg.verify.instances {
            let mut inst = random_instance(&mut rng);
            inst.spec.epsilons = run_cfg.epsilons();
            let rep = verify_instance(&inst).map_err(needle_failure)?;
            push(format!("random_instance_{i}"), rep.branch, rep.records);
        }
        let needles = run_cfg.needles();
        let mut cone = None;
        let src = ctx
            .loaded
            .control_source()
            .map_err(|e| fail(exit::CONFIG, e.to_string()))?;
        if !needles.is_empty() {
            let sys = &ctx.setup.sys;
            if sys.surfaces.len() != 1 {
                return Err(fail(exit::CONFIG, "verify.needles needs a system with exactly one surface"));
            }
            let controls = match &src {
                Some(s) => file_controls(&ctx, s)?,
                None => None,
            };
            let control = match controls.as_deref() {
                Some([one]) => one.clone(),
                _ => {
                    return Err(fail(
                        exit::CONFIG,
                        "verify.needles needs a single control signal (control.constant or a one-segment file)",
                    ))
                }
            };
            let lifted = if sys.is_mayer() { sys.clone() } else { mayer_lift(sys) };
            let x0 = if lifted.dim() > sys.dim() {
                lift_point(&ctx.setup.x0_point())
            } else {
                ctx.setup.x0_point()
            };
            for (j, spec) in needles.into_iter().enumerate() {
                spec.validate(ctx.setup.t0, ctx.setup.tf, &sys.control_bounds)
                    .map_err(|e| fail(exit::CONFIG, e.to_string()))?;
                let inst = OracleInstance {
                    sys: lifted.clone(),
                    x0: x0.clone(),
                    control: control.clone(),
                    t0: ctx.setup.t0,
                    tf: ctx.setup.tf,
                    spec,
                    opts: run_cfg.integrator(),
                };
                let rep = verify_instance(&inst).map_err(needle_failure)?;
                push(format!("config_needle_{j}"), rep.branch, rep.records);
            }
        }
        if src == Some(ControlSource::Solver) {
            let sol = run_solver(&ctx)?;
            let report =
                cone_inequality_check(&sol.lifted, &sol.trajectory, &mut rng, run_cfg.verify.cone_samples)
                    .map_err(needle_failure)?;
            cone = Some(ConeCheck {
                passed: report.satisfied(tol.cone),
                report,
            });
        }
        let passed = records.iter().all(|r| r.passed) && cone.as_ref().is_none_or(|c| c.passed);
        let mut table = String::new();
        let _ = writeln!(
            table,
            "{:<22} {:<8} {:<28} {:>9} {:>11} {:>6}",
            "check", "branch", "formula", "order", "rel_err", "pass"
        );
        for r in &records {
            let _ = writeln!(
                table,
                "{:<22} {:<8} {:<28} {:>9.3} {:>11.3e} {:>6}",
                r.check,
                format!("{:?}", r.branch),
                r.record.formula,
                r.record.convergence_order,
                r.record.reference_relative_error,
                r.passed
            );
        }
        if let Some(cone) = &cone {
            let _ = writeln!(
                table,
                "cone: min pairing {:.3e} over {} samples (scale {:.3e}) pass {}",
                cone.report.min_pairing, cone.report.samples, cone.report.scale, cone.passed
            );
        }
        let _ = writeln!(table, "overall: {}", if passed { "PASS" } else { "FAIL" });
        let report = VerifyReport {
            tolerances: *tol,
            passed,
            records,
            cone,
        };
        ctx.writer.json("verify.json", &report).map_err(io)?;
        ctx.writer.text("verify.txt", &table).map_err(io)?;
        Ok(if passed { exit::OK } else { exit::CHECK_FAILED })
    })
}

#[derive(Serialize)]
struct Sweep {
    terminal_error: Option<f64>,
    switch_time_error: Option<f64>,
    error: Option<String>,
}

#[derive(Serialize)]
struct SolveReport<'a> {
    status: SolverStatus,
    iterations: usize,
    objective: f64,
    cost: f64,
    switch_times: Vec<f64>,
    surfaces: Vec<String>,
    coords: Vec<Vec<f64>>,
    switch_states: Vec<Vec<f64>>,
    boundary: Boundary<'a>,
    terminal_multiplier: Vec<f64>,
    terminal_error: f64,
    shooting_defect: f64,
    sweep: Sweep,
    tolerances: Tolerances,
    max_pmp_gap: f64,
    max_hamiltonian_gap: f64,
    max_jump_residual: f64,
    stationarity_pass: bool,
}

pub fn solve(c: &Common, tol: &Tolerances) -> u8 {
    run(|| {
        let ctx = prepare(c)?;
        let sol = run_solver(&ctx)?;
        let w = &ctx.writer;
        let sys = &ctx.setup.sys;
        let names: Vec<String> = sol
            .decision
            .surfaces
            .iter()
            .map(|&k| sys.surfaces[k].name.clone())
            .collect();
        let switch_states: Vec<Vec<f64>> = sol
            .trajectory
            .events
            .iter()
            .map(|e| e.x_minus.coords.rows(0, sys.dim()).iter().copied().collect())
            .collect();
        let sweep = match &sol.sweep {
            Ok(s) => Sweep {
                terminal_error: Some(s.terminal_error),
                switch_time_error: Some(s.switch_time_error),
                error: None,
            },
            Err(e) => Sweep {
                terminal_error: None,
                switch_time_error: None,
                error: Some(e.clone()),
            },
        };
        let (gap, dh, jr) = (
            sol.pmp.max_min_violation,
            sol.pmp.max_switch_gap(),
            sol.pmp.max_jump_residual(),
        );
        let report = SolveReport {
            status: sol.status,
            iterations: sol.iterations.len(),
            objective: sol.objective,
            cost: sol.cost,
            switch_times: sol.decision.times.clone(),
            surfaces: names.clone(),
            coords: sol.decision.coords.iter().map(|v| v.iter().copied().collect()).collect(),
            switch_states,
            boundary: boundary(&ctx.setup),
            terminal_multiplier: sol.terminal_multiplier.iter().copied().collect(),
            terminal_error: sol.terminal_error,
            shooting_defect: sol.shooting_defect,
            sweep,
            tolerances: *tol,
            max_pmp_gap: gap,
            max_hamiltonian_gap: dh,
            max_jump_residual: jr,
            stationarity_pass: gap < tol.pmp_gap && dh < tol.hamiltonian_gap && jr < tol.jump_residual,
        };
        w.json("decision.json", &report).map_err(io)?;

        let dim_s = sol.decision.coords.first().map_or(0, |v| v.len());
        let mut cols: Vec<String> = vec!["k".into(), "surface".into(), "t_s".into()];
        cols.extend((0..dim_s).map(|i| format!("s{i}")));
        let rows: Vec<Vec<String>> = (0..sol.decision.len())
            .map(|k| {
                let mut r = vec![k.to_string(), names[k].clone(), export::num(sol.decision.times[k])];
                r.extend(sol.decision.coords[k].iter().map(|x| export::num(*x)));
                r
            })
            .collect();
        w.csv("decision.csv", &cols, &rows).map_err(io)?;

        let controls: Vec<ControlSignal> = sol.segments.iter().map(|s| s.control.clone()).collect();
        export::control_csv(w, &controls).map_err(io)?;
        export::trajectory_csv(w, "trajectory.csv", &sol.lifted, &sol.trajectory).map_err(io)?;
        export::events_csv(w, &sol.lifted, &sol.trajectory).map_err(io)?;
        export::adjoint_csv(w, &sol.adjoint).map_err(io)?;
        export::switches_csv(w, &sol.adjoint, &sol.pmp).map_err(io)?;
        w.json("pmp.json", &PmpSummary::new(&sol.pmp)).map_err(io)?;

        let n = sol.iterations.first().map_or(0, |r| r.decision.len());
        let mut cols: Vec<String> = ["iteration", "gradient", "cost", "grad_norm", "step"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        cols.extend((0..n).map(|i| format!("d{i}")));
        let rows: Vec<Vec<String>> = sol
            .iterations
            .iter()
            .map(|it| {
                let mut r = vec![
                    it.iteration.to_string(),
                    serde_json::to_value(it.gradient)
                        .ok()
                        .and_then(|v| v.as_str().map(str::to_string))
                        .unwrap_or_default(),
                    export::num(it.cost),
                    export::num(it.grad_norm),
                    export::num(it.step),
                ];
                r.extend(it.decision.iter().map(|x| export::num(*x)));
                r
            })
            .collect();
        w.csv("iterations.csv", &cols, &rows).map_err(io)?;
        Ok(match sol.status {
            SolverStatus::Converged => exit::OK,
            SolverStatus::MaxIterations | SolverStatus::Stalled => exit::STALL,
        })
    })
}
