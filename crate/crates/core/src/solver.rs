//! Fixed-endpoint switching optimization for linear modes with control-energy
//! cost: closed-form minimum-energy steering inside each mode, and a descent
//! over switching states (by geodesic steps on each surface) and switching
//! times.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::flow::{integrate_segment, simulate_hybrid_per_segment, FlowError, IntegratorOptions};
use crate::hmp::{backward_adjoint, check_pmp, AdjointTrajectory, ControlGrid, HmpError, PmpReport};
use crate::hybrid::{
    lift_point, mayer_lift, ControlSignal, HybridSystem, HybridTrajectory, Loss, SwitchEvent,
    TerminalCost,
};
use crate::manifold::{ChartPoint, ManifoldError, RiemannianManifold, SurfaceChart, Tangent};

/// Largest accepted condition number of a controllability Gramian.
pub const GRAMIAN_CONDITION_LIMIT: f64 = 1e12;
/// Zero-order-hold cells per segment in realized controls.
pub const DEFAULT_CELLS: usize = 1024;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("segment {segment} is not controllable: Gramian condition number {condition:e}")]
    Uncontrollable { segment: usize, condition: f64 },
    #[error("state '{0}' is not linear in the chart")]
    NotLinear(String),
    #[error("state '{0}' needs a control-energy running cost")]
    UnsupportedLoss(String),
    #[error("surface '{0}' has no global parametrization")]
    UnsupportedSurface(String),
    #[error("step rejected: switching times cannot keep their ordering")]
    StepRejected,
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
    #[error("no descent after {halvings} step halvings at iteration {iteration}")]
    Stalled {
        iteration: usize,
        halvings: usize,
        best: Box<SolverSolution>,
    },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Hmp(#[from] HmpError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
}

pub type Result<T> = std::result::Result<T, SolverError>;

/// `∫_0^Δ e^{Ar} B Bᵀ e^{Aᵀr} dr` and `e^{AΔ}` from one block exponential.
fn gramian(a: &DMatrix<f64>, b: &DMatrix<f64>, delta: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(&(-a * delta));
    m.view_mut((0, n), (n, n)).copy_from(&(b * b.transpose() * delta));
    m.view_mut((n, n), (n, n)).copy_from(&(a.transpose() * delta));
    let e = m.exp();
    let f12 = e.view((0, n), (n, n)).into_owned();
    let f22t = e.view((n, n), (n, n)).transpose();
    let g = &f22t * f12;
    ((&g + g.transpose()) * 0.5, f22t)
}

fn condition(g: &DMatrix<f64>) -> f64 {
    let eig = g.clone().symmetric_eigen().eigenvalues;
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Continuous minimum-energy steering in the form referenced to time `τ`
/// (either endpoint): `u(t) = Bᵀ e^{Aᵀ(τ−t)} λ`, `λ = G_τ⁻¹ d_τ`,
/// `d_τ = e^{A(τ−t1)} b − e^{A(τ−t0)} a`.
#[derive(Clone, Debug, PartialEq)]
pub struct SteerCost {
    /// `½ ∫ ‖u‖²`.
    pub cost: f64,
    pub reference_time: f64,
    pub multiplier: DVector<f64>,
    pub condition: f64,
}

/// Minimum-energy cost from `a` to `b` over `[t0, t1]`.
///
/// Controllability is judged on the reachability Gramian
/// `G = ∫_{t0}^{t1} e^{A(t1−s)} B Bᵀ e^{Aᵀ(t1−s)} ds`; the arithmetic then uses
/// whichever of the two equivalent Gramians (referenced at `t1` or at `t0`)
/// is better conditioned.
pub fn steer_cost(
    a_mat: &DMatrix<f64>,
    b_mat: &DMatrix<f64>,
    a: &DVector<f64>,
    b: &DVector<f64>,
    t0: f64,
    t1: f64,
) -> Result<SteerCost> {
    let delta = t1 - t0;
    if !(delta > 0.0) {
        return Err(SolverError::InvalidDecision(format!("empty segment [{t0}, {t1}]")));
    }
    let (g_fwd, e_fwd) = gramian(a_mat, b_mat, delta);
    let c_fwd = condition(&g_fwd);
    if !(c_fwd < GRAMIAN_CONDITION_LIMIT) {
        return Err(SolverError::Uncontrollable {
            segment: 0,
            condition: c_fwd,
        });
    }
    let (g_bwd, e_bwd) = gramian(&(-a_mat), b_mat, delta);
    let c_bwd = condition(&g_bwd);
    let (g, d, tau) = if c_fwd <= c_bwd {
        (g_fwd, b - e_fwd * a, t1)
    } else {
        (g_bwd, e_bwd * b - a, t0)
    };
    let cond = c_fwd;
    let chol = g.clone().cholesky().ok_or(SolverError::Uncontrollable {
        segment: 0,
        condition: cond,
    })?;
    let lambda = chol.solve(&d);
    Ok(SteerCost {
        cost: 0.5 * d.dot(&lambda),
        reference_time: tau,
        multiplier: lambda,
        condition: cond,
    })
}

/// Minimum-energy steering with a zero-order-hold realization.
#[derive(Clone, Debug, PartialEq)]
pub struct LqSteer {
    pub control: ControlSignal,
    /// Continuous optimum `½ ∫ ‖u‖²`.
    pub cost: f64,
    /// `½ ∫ ‖u‖²` of the piecewise-constant `control`.
    pub discrete_cost: f64,
    pub steer: SteerCost,
}

impl LqSteer {
    /// Closed-form optimal control at `t`.
    pub fn control_at(&self, a_mat: &DMatrix<f64>, b_mat: &DMatrix<f64>, t: f64) -> DVector<f64> {
        let e = (a_mat.transpose() * (self.steer.reference_time - t)).exp();
        b_mat.transpose() * e * &self.steer.multiplier
    }

    /// Closed-form costate of `½ ∫ ‖u‖²` at `t`: `p(t) = −e^{Aᵀ(τ−t)} λ`.
    pub fn costate_at(&self, a_mat: &DMatrix<f64>, t: f64) -> DVector<f64> {
        -(a_mat.transpose() * (self.steer.reference_time - t)).exp() * &self.steer.multiplier
    }
}

pub fn lq_steer(
    a_mat: &DMatrix<f64>,
    b_mat: &DMatrix<f64>,
    a: &DVector<f64>,
    b: &DVector<f64>,
    t0: f64,
    t1: f64,
) -> Result<LqSteer> {
    lq_steer_cells(a_mat, b_mat, a, b, t0, t1, DEFAULT_CELLS)
}

/// Geometric refinement levels of the first and last hold cell.
pub const END_REFINEMENT: usize = 16;

/// Hold grid over `[t0, t1]`: `cells` uniform cells with the first and last
/// split geometrically toward the ends, so the held values there track the
/// continuous control at the segment ends.
pub fn hold_grid(t0: f64, t1: f64, cells: usize) -> Vec<f64> {
    let cells = cells.max(1);
    let h = (t1 - t0) / cells as f64;
    let mut grid: Vec<f64> = (0..=cells).map(|k| t0 + k as f64 * h).collect();
    grid[cells] = t1;
    if cells >= 2 {
        let mut head = Vec::with_capacity(END_REFINEMENT);
        let mut tail = Vec::with_capacity(END_REFINEMENT);
        let mut w = h;
        for _ in 0..END_REFINEMENT {
            w *= 0.5;
            head.push(t0 + w);
            tail.push(t1 - w);
        }
        grid.extend(head);
        grid.extend(tail);
        grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    grid
}

/// [`lq_steer`] on [`hold_grid`]`(t0, t1, cells)`.
pub fn lq_steer_cells(
    a_mat: &DMatrix<f64>,
    b_mat: &DMatrix<f64>,
    a: &DVector<f64>,
    b: &DVector<f64>,
    t0: f64,
    t1: f64,
    cells: usize,
) -> Result<LqSteer> {
    lq_steer_on_grid(a_mat, b_mat, a, b, &hold_grid(t0, t1, cells))
}

/// Minimum-energy steering over piecewise-constant controls on `knots`
/// (`t0 = knots[0] < … < knots[N] = t1`). The cell values are the exact
/// discrete minimum-energy controls, so the held control reaches `b` exactly
/// (up to rounding).
pub fn lq_steer_on_grid(
    a_mat: &DMatrix<f64>,
    b_mat: &DMatrix<f64>,
    a: &DVector<f64>,
    b: &DVector<f64>,
    knots: &[f64],
) -> Result<LqSteer> {
    assert!(knots.len() >= 2, "hold grid needs two knots");
    let t0 = knots[0];
    let t1 = knots[knots.len() - 1];
    let steer = steer_cost(a_mat, b_mat, a, b, t0, t1)?;
    let n = a_mat.nrows();
    let m = b_mat.ncols();
    let tau = steer.reference_time;
    let cells = knots.len() - 1;
    // Γ_k = e^{A(τ − t_{k+1})} ∫_0^{h_k} e^{Ar} B dr
    let widths: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    let mut gammas = Vec::with_capacity(cells);
    for k in 0..cells {
        let h = widths[k];
        let mut blk = DMatrix::zeros(n + m, n + m);
        blk.view_mut((0, 0), (n, n)).copy_from(&(a_mat * h));
        blk.view_mut((0, n), (n, m)).copy_from(&(b_mat * h));
        let gamma_h = blk.exp().view((0, n), (n, m)).into_owned();
        gammas.push((a_mat * (tau - knots[k + 1])).exp() * gamma_h);
    }
    let d = if tau == t1 {
        b - (a_mat * (t1 - t0)).exp() * a
    } else {
        (a_mat * (t0 - t1)).exp() * b - a
    };
    let mut w = DMatrix::zeros(n, n);
    for (g, h) in gammas.iter().zip(&widths) {
        w += g * g.transpose() / *h;
    }
    let lam = w
        .clone()
        .cholesky()
        .ok_or(SolverError::Uncontrollable {
            segment: 0,
            condition: condition(&w),
        })?
        .solve(&d);
    let grid = knots[..cells].to_vec();
    let values: Vec<DVector<f64>> = gammas
        .iter()
        .zip(&widths)
        .map(|(g, h)| g.transpose() * &lam / *h)
        .collect();
    let discrete_cost = 0.5 * d.dot(&lam);
    Ok(LqSteer {
        control: ControlSignal::new(grid, values),
        cost: steer.cost,
        discrete_cost,
        steer,
    })
}

/// One decision per scheduled switch: the pre-jump switching state in
/// surface coordinates and the switching time.
#[derive(Clone, Debug, PartialEq)]
pub struct SwitchDecision {
    pub surfaces: Vec<usize>,
    pub coords: Vec<DVector<f64>>,
    pub times: Vec<f64>,
}

impl SwitchDecision {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `(s_1, …, s_L, t_1, …, t_L)`.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v: Vec<f64> = self.coords.iter().flat_map(|c| c.iter().copied()).collect();
        v.extend(&self.times);
        DVector::from_vec(v)
    }

    pub fn with_vector(&self, v: &DVector<f64>) -> Self {
        let mut out = self.clone();
        let mut i = 0;
        for c in out.coords.iter_mut() {
            for x in c.iter_mut() {
                *x = v[i];
                i += 1;
            }
        }
        for t in out.times.iter_mut() {
            *t = v[i];
            i += 1;
        }
        out
    }
}

/// Boundary-value problem over a fixed schedule.
#[derive(Clone, Debug)]
pub struct SteeringProblem {
    pub sys: HybridSystem,
    pub x0: ChartPoint,
    pub xf: ChartPoint,
    pub q0: usize,
    pub t0: f64,
    pub tf: f64,
    sequence: Vec<usize>,
    modes: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    weights: Vec<f64>,
    charts: Vec<SurfaceChart>,
    surface_manifolds: Vec<RiemannianManifold>,
}

impl SteeringProblem {
    pub fn new(
        sys: HybridSystem,
        x0: ChartPoint,
        xf: ChartPoint,
        q0: usize,
        t0: f64,
        tf: f64,
    ) -> Result<Self> {
        let sequence = sys.state_sequence(q0);
        let mut modes = Vec::new();
        let mut weights = Vec::new();
        for &q in &sequence {
            let (a, b) = sys.fields[q]
                .as_linear()
                .ok_or_else(|| SolverError::NotLinear(sys.states[q].clone()))?;
            modes.push((a.clone(), b.clone()));
            match &sys.losses[q] {
                Some(Loss::ControlEnergy { weight }) if *weight > 0.0 => weights.push(*weight),
                _ => return Err(SolverError::UnsupportedLoss(sys.states[q].clone())),
            }
        }
        let mut charts = Vec::new();
        let mut surface_manifolds = Vec::new();
        for s in &sys.surfaces {
            let chart = SurfaceChart::for_surface(s, &sys.manifold)
                .ok_or_else(|| SolverError::UnsupportedSurface(s.name.clone()))?;
            surface_manifolds.push(chart.manifold(&sys.manifold, &s.name));
            charts.push(chart);
        }
        if !(tf > t0) {
            return Err(SolverError::InvalidDecision(format!("empty horizon [{t0}, {tf}]")));
        }
        Ok(Self {
            sys,
            x0,
            xf,
            q0,
            t0,
            tf,
            sequence,
            modes,
            weights,
            charts,
            surface_manifolds,
        })
    }

    pub fn switch_count(&self) -> usize {
        self.sys.surfaces.len()
    }

    pub fn sequence(&self) -> &[usize] {
        &self.sequence
    }

    pub fn mode(&self, segment: usize) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.modes[segment].0, &self.modes[segment].1)
    }

    pub fn chart(&self, k: usize) -> &SurfaceChart {
        &self.charts[k]
    }

    pub fn surface_manifold(&self, k: usize) -> &RiemannianManifold {
        &self.surface_manifolds[k]
    }

    /// Uniform times over `(t0, tf)` and all surface coordinates zero.
    pub fn initial_decision(&self) -> SwitchDecision {
        let l = self.switch_count();
        SwitchDecision {
            surfaces: (0..l).collect(),
            coords: self.charts.iter().map(|c| DVector::zeros(c.dim())).collect(),
            times: (1..=l)
                .map(|k| self.t0 + (self.tf - self.t0) * k as f64 / (l + 1) as f64)
                .collect(),
        }
    }

    /// Segment endpoints `(a_k, b_k, τ_k, τ_{k+1})`.
    fn endpoints(
        &self,
        decision: &SwitchDecision,
    ) -> Result<Vec<(DVector<f64>, DVector<f64>, f64, f64)>> {
        let l = self.switch_count();
        if decision.len() != l || decision.coords.len() != l {
            return Err(SolverError::InvalidDecision(format!(
                "expected {l} switches, got {}",
                decision.len()
            )));
        }
        let mut knots = vec![self.t0];
        knots.extend(&decision.times);
        knots.push(self.tf);
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SolverError::InvalidDecision("switching times out of order".into()));
        }
        let mut out = Vec::with_capacity(l + 1);
        let mut start = self.x0.coords.clone();
        for k in 0..=l {
            let end = if k < l {
                self.charts[k].embed(&decision.coords[k]).coords
            } else {
                self.xf.coords.clone()
            };
            let next = if k < l {
                self.sys.jumps[k].eval(&end)
            } else {
                end.clone()
            };
            out.push((start, end, knots[k], knots[k + 1]));
            start = next;
        }
        Ok(out)
    }

    /// Total cost of a decision without building controls.
    pub fn cost(&self, decision: &SwitchDecision) -> Result<f64> {
        let mut total = 0.0;
        for (k, (a, b, t0, t1)) in self.endpoints(decision)?.into_iter().enumerate() {
            let (am, bm) = self.mode(k);
            let s = steer_cost(am, bm, &a, &b, t0, t1).map_err(|e| with_segment(e, k))?;
            total += 2.0 * self.weights[k] * s.cost;
        }
        Ok(total)
    }
}

fn with_segment(e: SolverError, segment: usize) -> SolverError {
    match e {
        SolverError::Uncontrollable { condition, .. } => {
            SolverError::Uncontrollable { segment, condition }
        }
        other => other,
    }
}

/// Cost and per-segment minimum-energy controls of a decision.
pub fn evaluate_decision(
    problem: &SteeringProblem,
    decision: &SwitchDecision,
    cells: usize,
) -> Result<(f64, Vec<LqSteer>)> {
    let mut total = 0.0;
    let mut segs = Vec::new();
    for (k, (a, b, t0, t1)) in problem.endpoints(decision)?.into_iter().enumerate() {
        let (am, bm) = problem.mode(k);
        let s = lq_steer_cells(am, bm, &a, &b, t0, t1, cells).map_err(|e| with_segment(e, k))?;
        total += 2.0 * problem.weights[k] * s.cost;
        segs.push(s);
    }
    Ok((total, segs))
}

/// Moves the decision against `direction` by `step`: surface coordinates
/// along the geodesic of each surface's induced metric, times by plain
/// subtraction, then clamps times to keep them ordered with `margin`.
pub fn geodesic_step(
    problem: &SteeringProblem,
    decision: &SwitchDecision,
    direction: &DVector<f64>,
    step: f64,
    margin: f64,
) -> Result<SwitchDecision> {
    let mut out = decision.clone();
    let mut i = 0;
    for (k, c) in out.coords.iter_mut().enumerate() {
        let d = c.len();
        let v = -direction.rows(i, d).into_owned();
        i += d;
        if v.iter().all(|x| *x == 0.0) || step == 0.0 {
            continue;
        }
        let p = ChartPoint::new(c.clone());
        let moved = problem.surface_manifolds[k]
            .geodesic_exp_unwrapped(&p, &Tangent::new(p.clone(), v), step)?;
        *c = moved.coords;
    }
    for t in out.times.iter_mut() {
        *t -= step * direction[i];
        i += 1;
    }
    clamp_times(&mut out.times, problem.t0, problem.tf, margin)?;
    Ok(out)
}

fn clamp_times(times: &mut [f64], t0: f64, tf: f64, margin: f64) -> Result<()> {
    let l = times.len();
    if l == 0 {
        return Ok(());
    }
    if tf - t0 <= (l as f64 + 1.0) * margin {
        return Err(SolverError::StepRejected);
    }
    let mut lo = t0;
    for t in times.iter_mut() {
        *t = t.max(lo + margin);
        lo = *t;
    }
    let mut hi = tf;
    for t in times.iter_mut().rev() {
        *t = t.min(hi - margin);
        hi = *t;
    }
    let mut prev = t0;
    for t in times.iter() {
        if !(*t - prev >= margin * (1.0 - 1e-9)) {
            return Err(SolverError::StepRejected);
        }
        prev = *t;
    }
    if !(tf - prev >= margin * (1.0 - 1e-9)) {
        return Err(SolverError::StepRejected);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Quasi-Newton directions, steepest descent on failure.
    Bfgs,
    Gradient,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub fd_step: f64,
    pub armijo_c: f64,
    pub max_halvings: usize,
    pub time_margin: f64,
    pub method: Method,
    pub initial: Option<SwitchDecision>,
    /// Hold cells per segment of the realized control.
    pub cells: usize,
    /// RK4 steps over the horizon when re-simulating, on top of the cell
    /// breakpoints.
    pub realize_steps: usize,
    /// Steepest-descent iterations before quasi-Newton updates take over.
    pub descent_iter: usize,
    /// Costate-gradient refinement after convergence (0 disables).
    pub polish_iter: usize,
    pub polish_tol: f64,
    /// Points per control axis of the PMP check.
    pub pmp_grid: usize,
    pub pmp_samples: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-6,
            fd_step: 1e-5,
            armijo_c: 1e-4,
            max_halvings: 60,
            time_margin: 1e-3,
            method: Method::Bfgs,
            initial: None,
            cells: DEFAULT_CELLS,
            realize_steps: 65536,
            descent_iter: 50,
            polish_iter: 100,
            polish_tol: 1e-13,
            pmp_grid: 201,
            pmp_samples: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub gradient: GradientSource,
    pub cost: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub decision: Vec<f64>,
}

/// Which gradient drove an iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientSource {
    FiniteDifference,
    Costate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Converged,
    MaxIterations,
    Stalled,
}

#[derive(Clone, Debug)]
pub struct SolverSolution {
    pub status: SolverStatus,
    pub decision: SwitchDecision,
    /// Continuous optimum of the decision.
    pub objective: f64,
    /// Running cost of the realized control, read from the simulated
    /// auxiliary state.
    pub cost: f64,
    pub segments: Vec<LqSteer>,
    pub control: ControlSignal,
    pub iterations: Vec<IterationRecord>,
    /// Mayer-lifted system with terminal cost `x_aux + ⟨ν, x⟩`, where `ν` is
    /// the endpoint multiplier.
    pub lifted: HybridSystem,
    pub terminal_multiplier: DVector<f64>,
    pub trajectory: HybridTrajectory,
    pub adjoint: AdjointTrajectory,
    pub pmp: PmpReport,
    /// Distance from the realized terminal state to the target.
    pub terminal_error: f64,
    pub shooting_defect: f64,
    /// Autonomous forward sweep, or the message of the error that stopped it.
    pub sweep: std::result::Result<SweepCheck, String>,
}

/// Central-difference gradient of the cost in decision coordinates.
pub fn fd_gradient(
    problem: &SteeringProblem,
    decision: &SwitchDecision,
    h: f64,
) -> Result<DVector<f64>> {
    let z = decision.to_vector();
    let mut g = DVector::zeros(z.len());
    for i in 0..z.len() {
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[i] += h;
        zm[i] -= h;
        let fp = problem.cost(&decision.with_vector(&zp));
        let fm = problem.cost(&decision.with_vector(&zm));
        g[i] = match (fp, fm) {
            (Ok(fp), Ok(fm)) => (fp - fm) / (2.0 * h),
            // One-sided at the edge of the controllable region.
            (Ok(fp), Err(SolverError::Uncontrollable { .. })) => {
                (fp - problem.cost(decision)?) / h
            }
            (Err(SolverError::Uncontrollable { .. }), Ok(fm)) => {
                (problem.cost(decision)? - fm) / h
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
    }
    Ok(g)
}

/// Gradient of the cost from the closed-form segment costates.
///
/// With `p` the costate of segment `k` and `H_k` its (constant) Hamiltonian,
/// `∂J/∂s_k = Eᵀ(Tζᵀ p_{k+1}(t_k⁺) − p_k(t_k⁻))` for the chart basis `E`,
/// and `∂J/∂t_k = H_k − H_{k+1}`.
pub fn costate_gradient(problem: &SteeringProblem, decision: &SwitchDecision) -> Result<DVector<f64>> {
    let ends = problem.endpoints(decision)?;
    let mut p_start = Vec::with_capacity(ends.len());
    let mut p_end = Vec::with_capacity(ends.len());
    let mut h = Vec::with_capacity(ends.len());
    for (k, (a, b, t0, t1)) in ends.iter().enumerate() {
        let (a_mat, b_mat) = problem.mode(k);
        let sc = steer_cost(a_mat, b_mat, a, b, *t0, *t1)?;
        let c = problem.weights[k];
        let costate = |t: f64| -(a_mat.transpose() * (sc.reference_time - t)).exp() * &sc.multiplier * (2.0 * c);
        let ps = costate(*t0);
        let u = b_mat.transpose() * &ps * (-0.5 / c);
        h.push(ps.dot(&(a_mat * a + b_mat * &u)) + c * u.norm_squared());
        p_start.push(ps);
        p_end.push(costate(*t1));
    }
    let l = problem.switch_count();
    let mut g = Vec::with_capacity(decision.to_vector().len());
    for k in 0..l {
        let x = problem.charts[k].embed(&decision.coords[k]).coords;
        let t_jac = problem.sys.jumps[k].jac(&x);
        let dj = t_jac.transpose() * &p_start[k + 1] - &p_end[k];
        g.extend((problem.charts[k].basis.transpose() * dj).iter().copied());
    }
    for k in 0..l {
        g.push(h[k] - h[k + 1]);
    }
    Ok(DVector::from_vec(g))
}

/// Block-diagonal inverse metric: induced surface metrics for the switching
/// states and the identity for the times.
fn inverse_metric(problem: &SteeringProblem, decision: &SwitchDecision) -> Result<DMatrix<f64>> {
    let n = decision.to_vector().len();
    let mut h = DMatrix::identity(n, n);
    let mut i = 0;
    for (k, c) in decision.coords.iter().enumerate() {
        let d = c.len();
        let g = problem.surface_manifolds[k].metric_at(&ChartPoint::new(c.clone()))?;
        let inv = g.try_inverse().ok_or_else(|| ManifoldError::SingularMetric {
            coords: c.as_slice().to_vec(),
        })?;
        h.view_mut((i, i), (d, d)).copy_from(&inv);
        i += d;
    }
    Ok(h)
}

/// Displacement `new − old` in decision coordinates (surface coordinates are
/// unwrapped, so this is an ordinary difference).
fn displacement(old: &SwitchDecision, new: &SwitchDecision) -> DVector<f64> {
    new.to_vector() - old.to_vector()
}

pub fn solve(problem: &SteeringProblem, options: &SolverOptions) -> Result<SolverSolution> {
    let mut x = options
        .initial
        .clone()
        .unwrap_or_else(|| problem.initial_decision());
    let mut f = problem.cost(&x)?;
    let mut log = Vec::new();
    if x.is_empty() {
        log.push(IterationRecord {
            iteration: 0,
            gradient: GradientSource::FiniteDifference,
            cost: f,
            grad_norm: 0.0,
            step: 0.0,
            decision: Vec::new(),
        });
        return realize(problem, &x, log, SolverStatus::Converged, options);
    }
    let h0 = inverse_metric(problem, &x)?;
    let mut hinv = h0.clone();
    let mut g = fd_gradient(problem, &x, options.fd_step)?;
    let mut step_hint = 1.0;
    for iteration in 0..options.max_iter {
        let gnorm = g.norm();
        log.push(IterationRecord {
            iteration,
            gradient: GradientSource::FiniteDifference,
            cost: f,
            grad_norm: gnorm,
            step: 0.0,
            decision: x.to_vector().iter().copied().collect(),
        });
        if gnorm < options.grad_tol {
            let x = polish(problem, x, f, &mut log, options)?;
            return realize(problem, &x, log, SolverStatus::Converged, options);
        }
        let mut attempt = 0;
        let accepted = loop {
            let quasi_newton = options.method == Method::Bfgs && iteration >= options.descent_iter;
            let (dir, start) = match (quasi_newton, attempt) {
                (true, 0) => {
                    let d = &hinv * &g;
                    if d.dot(&g) > 0.0 {
                        (d, 1.0)
                    } else {
                        attempt = 1;
                        continue;
                    }
                }
                _ => (inverse_metric(problem, &x)? * &g, step_hint),
            };
            match line_search(problem, &x, f, &g, &dir, start, options) {
                Some(found) => break Some(found),
                None if quasi_newton && attempt == 0 => {
                    hinv = h0.clone();
                    attempt = 1;
                }
                None => break None,
            }
        };
        let Some((x_new, f_new, step)) = accepted else {
            let best = realize(problem, &x, log, SolverStatus::Stalled, options)?;
            return Err(SolverError::Stalled {
                iteration,
                halvings: options.max_halvings,
                best: Box::new(best),
            });
        };
        log.last_mut().unwrap().step = step;
        step_hint = (step * 2.0).min(1e6);
        let g_new = fd_gradient(problem, &x_new, options.fd_step)?;
        if options.method == Method::Bfgs {
            let s = displacement(&x, &x_new);
            let y = &g_new - &g;
            let sy = s.dot(&y);
            if sy > 1e-12 * s.norm() * y.norm() {
                let rho = 1.0 / sy;
                let n = s.len();
                let i = DMatrix::<f64>::identity(n, n);
                let left = &i - &s * y.transpose() * rho;
                let right = &i - &y * s.transpose() * rho;
                hinv = &left * &hinv * &right + &s * s.transpose() * rho;
            }
        }
        x = x_new;
        f = f_new;
        g = g_new;
    }
    let gnorm = g.norm();
    log.push(IterationRecord {
        iteration: options.max_iter,
        gradient: GradientSource::FiniteDifference,
        cost: f,
        grad_norm: gnorm,
        step: 0.0,
        decision: x.to_vector().iter().copied().collect(),
    });
    let status = if gnorm < options.grad_tol {
        x = polish(problem, x, f, &mut log, options)?;
        SolverStatus::Converged
    } else {
        SolverStatus::MaxIterations
    };
    realize(problem, &x, log, status, options)
}

/// Newton refinement of a converged iterate on the costate gradient, which
/// stays accurate where central differences reach their truncation floor.
/// The Hessian is the symmetrized central-difference Jacobian of that
/// gradient. Once cost differences are at rounding level, a step is accepted
/// if it does not raise the cost beyond rounding and reduces the gradient
/// norm.
fn polish(
    problem: &SteeringProblem,
    mut x: SwitchDecision,
    mut f: f64,
    log: &mut Vec<IterationRecord>,
    options: &SolverOptions,
) -> Result<SwitchDecision> {
    if options.polish_iter == 0 {
        return Ok(x);
    }
    let mut g = costate_gradient(problem, &x)?;
    let first = log.len();
    for iteration in 0..options.polish_iter {
        log.push(IterationRecord {
            iteration: first + iteration,
            gradient: GradientSource::Costate,
            cost: f,
            grad_norm: g.norm(),
            step: 0.0,
            decision: x.to_vector().iter().copied().collect(),
        });
        if g.norm() < options.polish_tol {
            break;
        }
        let dir = match costate_hessian(problem, &x, options.fd_step)
            .ok()
            .and_then(|h| h.cholesky())
        {
            Some(chol) => chol.solve(&g),
            None => inverse_metric(problem, &x)? * &g,
        };
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=options.max_halvings {
            if let Ok(trial) = geodesic_step(problem, &x, &dir, step, options.time_margin) {
                let predicted = g.dot(&displacement(&x, &trial));
                if let (Ok(ft), Ok(gt)) = (problem.cost(&trial), costate_gradient(problem, &trial)) {
                    let armijo = predicted < 0.0 && ft <= f + options.armijo_c * predicted;
                    let flat = ft <= f && gt.norm() < g.norm();
                    if armijo || flat {
                        accepted = Some((trial, ft, gt));
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            break;
        };
        log.last_mut().unwrap().step = step;
        x = x_new;
        f = f_new;
        g = g_new;
    }
    Ok(x)
}

fn costate_hessian(problem: &SteeringProblem, decision: &SwitchDecision, h: f64) -> Result<DMatrix<f64>> {
    let z = decision.to_vector();
    let n = z.len();
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[i] += h;
        zm[i] -= h;
        let gp = costate_gradient(problem, &decision.with_vector(&zp))?;
        let gm = costate_gradient(problem, &decision.with_vector(&zm))?;
        hess.set_column(i, &((gp - gm) / (2.0 * h)));
    }
    Ok((&hess + hess.transpose()) * 0.5)
}

/// Armijo backtracking along `−dir`, with the sufficient-decrease test
/// written on the actual (possibly clamped) displacement. Trial points that
/// are uncontrollable or out of order count as failures.
fn line_search(
    problem: &SteeringProblem,
    x: &SwitchDecision,
    f: f64,
    g: &DVector<f64>,
    dir: &DVector<f64>,
    start: f64,
    options: &SolverOptions,
) -> Option<(SwitchDecision, f64, f64)> {
    let mut step = start;
    for _ in 0..=options.max_halvings {
        if let Ok(trial) = geodesic_step(problem, x, dir, step, options.time_margin) {
            let predicted = g.dot(&displacement(x, &trial));
            if predicted < 0.0 {
                if let Ok(ft) = problem.cost(&trial) {
                    if ft <= f + options.armijo_c * predicted {
                        return Some((trial, ft, step));
                    }
                }
            }
        }
        step *= 0.5;
    }
    None
}

/// Concatenates per-segment signals, cutting at the realized switch times.
fn stitch(controls: &[ControlSignal], switch_times: &[f64]) -> ControlSignal {
    let mut grid = Vec::new();
    let mut values = Vec::new();
    for (k, c) in controls.iter().enumerate() {
        let start = if k == 0 { c.grid()[0] } else { switch_times[k - 1] };
        let end = switch_times.get(k).copied().unwrap_or(f64::INFINITY);
        grid.push(start);
        values.push(c.at(start).clone());
        for (g, v) in c.grid().iter().zip(c.values()) {
            if *g > start && *g < end {
                grid.push(*g);
                values.push(v.clone());
            }
        }
    }
    ControlSignal::new(grid, values)
}

/// Lifted trajectory integrated segment by segment, each segment restarting
/// from the decision's switching state.
struct Shot {
    trajectory: HybridTrajectory,
    /// Largest gap between a segment end and the planned switching state.
    defect: f64,
}

fn shoot(
    problem: &SteeringProblem,
    lifted: &HybridSystem,
    controls: &[ControlSignal],
    decision: &SwitchDecision,
    steps: usize,
) -> Result<Shot> {
    let n = problem.sys.dim();
    let l = problem.switch_count();
    let mut knots = vec![problem.t0];
    knots.extend(&decision.times);
    knots.push(problem.tf);
    let span = problem.tf - problem.t0;
    let seq = problem.sequence();
    let mut traj = HybridTrajectory {
        switch_times: decision.times.clone(),
        state_seq: seq.to_vec(),
        segments: Vec::with_capacity(l + 1),
        events: Vec::with_capacity(l),
    };
    let mut x = lift_point(&problem.x0);
    let mut defect: f64 = 0.0;
    for k in 0..=l {
        let field = lifted.fields[seq[k]].as_ref();
        let local = ((steps as f64) * (knots[k + 1] - knots[k]) / span).ceil() as usize;
        let seg = integrate_segment(
            field,
            seq[k],
            &x,
            &controls[k],
            knots[k],
            knots[k + 1],
            IntegratorOptions { steps: local.max(1) },
        )?;
        if k < l {
            let x_minus = seg.end().clone();
            let planned = problem.charts[k].embed(&decision.coords[k]).coords;
            defect = defect.max((x_minus.coords.rows(0, n) - &planned).norm());
            let mut plus = lifted.jumps[k].eval(&x_minus.coords);
            plus.rows_mut(0, n).copy_from(&problem.sys.jumps[k].eval(&planned));
            let u_minus = seg.controls.last().unwrap();
            let dn = lifted.surfaces[k].oriented_differential(&x_minus.coords)?;
            let dn_f = dn.dot(&field.eval(&x_minus.coords, u_minus));
            x = ChartPoint::new(plus);
            traj.events.push(SwitchEvent {
                surface: k,
                time: knots[k + 1],
                x_minus,
                x_plus: x.clone(),
                dn_f,
            });
        }
        traj.segments.push(seg);
    }
    Ok(Shot {
        trajectory: traj,
        defect,
    })
}

/// Single forward sweep of the hybrid system under the realized controls,
/// with autonomous switching.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCheck {
    pub terminal_error: f64,
    pub switch_time_error: f64,
}

fn sweep(
    problem: &SteeringProblem,
    lifted: &HybridSystem,
    controls: &[ControlSignal],
    decision: &SwitchDecision,
    steps: usize,
) -> std::result::Result<SweepCheck, FlowError> {
    let n = problem.sys.dim();
    let traj = simulate_hybrid_per_segment(
        lifted,
        controls,
        &lift_point(&problem.x0),
        problem.q0,
        problem.t0,
        problem.tf,
        IntegratorOptions { steps },
    )?;
    Ok(SweepCheck {
        terminal_error: (traj.terminal().coords.rows(0, n) - &problem.xf.coords).norm(),
        switch_time_error: traj
            .switch_times
            .iter()
            .zip(&decision.times)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max),
    })
}

/// Re-simulates the decision's controls on the lifted system and attaches
/// the adjoint and PMP report.
///
/// The trajectory restarts each segment from the decision's switching state,
/// so rounding does not compound across segments; `shooting_defect` records
/// the largest restart gap. A single autonomous forward sweep is run as well
/// and reported in `sweep`.
pub fn realize(
    problem: &SteeringProblem,
    decision: &SwitchDecision,
    iterations: Vec<IterationRecord>,
    status: SolverStatus,
    options: &SolverOptions,
) -> Result<SolverSolution> {
    let (objective, segments) = evaluate_decision(problem, decision, options.cells)?;
    let last = segments.len() - 1;
    let p_tf = segments[last].costate_at(problem.mode(last).0, problem.tf)
        * (2.0 * problem.weights[last]);
    let mut lifted = mayer_lift(&problem.sys);
    let n = problem.sys.dim();
    lifted.terminal_cost = TerminalCost::Lifted {
        inner: Box::new(TerminalCost::Linear {
            covector: p_tf.clone(),
        }),
        base_dim: n,
    };
    let terminal_multiplier = p_tf;
    let controls: Vec<ControlSignal> = segments.iter().map(|s| s.control.clone()).collect();
    let steps = options.realize_steps.max(1);
    let Shot { trajectory, defect } = shoot(problem, &lifted, &controls, decision, steps)?;
    let sweep = sweep(problem, &lifted, &controls, decision, steps).map_err(|e| e.to_string());
    let control = stitch(&controls, &trajectory.switch_times);
    let adjoint = backward_adjoint(&lifted, &trajectory)?;
    let pmp = check_pmp(
        &lifted,
        &trajectory,
        &adjoint,
        &ControlGrid::new(lifted.control_bounds.clone(), options.pmp_grid),
        options.pmp_samples,
    );
    let terminal = trajectory.terminal();
    let cost = terminal.coords[n];
    let terminal_error = (terminal.coords.rows(0, n) - &problem.xf.coords).norm();
    Ok(SolverSolution {
        status,
        decision: decision.clone(),
        objective,
        cost,
        segments,
        control,
        iterations,
        lifted,
        terminal_multiplier,
        trajectory,
        adjoint,
        pmp,
        terminal_error,
        shooting_defect: defect,
        sweep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hybrid::{IdentityJump, LinearField};
    use crate::manifold::{Constraint, SwitchingSurface};
    use std::sync::Arc;

    fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }
    fn v(c: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(c)
    }

    #[test]
    fn zero_drift_rest_to_rest_costs_nothing() {
        let s = lq_steer(&m(1, 1, &[0.0]), &m(1, 1, &[1.0]), &v(&[0.3]), &v(&[0.3]), 0.0, 1.0).unwrap();
        assert_eq!(s.cost, 0.0);
        assert!(s.control.values().iter().all(|u| u[0] == 0.0));
    }

    #[test]
    fn integrator_unit_steer() {
        let s = lq_steer(&m(1, 1, &[0.0]), &m(1, 1, &[1.0]), &v(&[0.0]), &v(&[1.0]), 0.0, 1.0).unwrap();
        assert!((s.cost - 0.5).abs() < 1e-14);
        assert!((s.discrete_cost - 0.5).abs() < 1e-12);
        assert!(s.control.values().iter().all(|u| (u[0] - 1.0).abs() < 1e-12));
    }

    #[test]
    fn uncontrollable_pair_is_rejected() {
        let a = m(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = m(2, 1, &[1.0, 1.0]);
        let r = lq_steer(&a, &b, &v(&[0.0, 0.0]), &v(&[1.0, 0.0]), 0.0, 1.0);
        assert!(matches!(r, Err(SolverError::Uncontrollable { .. })));
    }

    #[test]
    fn held_control_hits_target() {
        let a = m(2, 2, &[1.5, 0.0, 0.0, 1.0]);
        let b = m(2, 1, &[1.0, 1.0]);
        let (x0, x1) = (v(&[-0.3, 0.2]), v(&[0.0, 0.7]));
        let s = lq_steer_cells(&a, &b, &x0, &x1, 0.0, 1.3, 64).unwrap();
        // exact propagation of the held control
        let knots = hold_grid(0.0, 1.3, 64);
        assert_eq!(knots.len(), 65 + 2 * END_REFINEMENT);
        let mut x = x0.clone();
        for (w, u) in knots.windows(2).zip(s.control.values()) {
            let h = w[1] - w[0];
            let mut blk = DMatrix::zeros(3, 3);
            blk.view_mut((0, 0), (2, 2)).copy_from(&(&a * h));
            blk.view_mut((0, 2), (2, 1)).copy_from(&(&b * h));
            let e = blk.exp();
            x = e.view((0, 0), (2, 2)) * &x + e.view((0, 2), (2, 1)) * u;
        }
        assert!((x - x1).norm() < 1e-12);
        assert!((s.discrete_cost - s.cost).abs() < 1e-3 * s.cost);
    }

    fn toy() -> SteeringProblem {
        let f0 = Arc::new(LinearField::new(m(2, 2, &[0.2, 0.0, 0.0, -0.1]), m(2, 1, &[1.0, 0.5])));
        let f1 = Arc::new(LinearField::new(m(2, 2, &[-0.3, 0.1, 0.0, 0.2]), m(2, 1, &[0.4, 1.0])));
        let sys = HybridSystem {
            manifold: RiemannianManifold::euclidean(2),
            states: vec!["q0".into(), "q1".into()],
            fields: vec![f0, f1],
            surfaces: vec![SwitchingSurface::new("S", Constraint::Coordinate { index: 0, level: 0.0 }, 0, 1)],
            jumps: vec![Arc::new(IdentityJump)],
            control_bounds: vec![(-10.0, 10.0)],
            losses: vec![Some(Loss::ControlEnergy { weight: 0.5 }); 2],
            terminal_cost: TerminalCost::Zero,
        };
        SteeringProblem::new(sys, ChartPoint::from_slice(&[-1.0, 0.0]), ChartPoint::from_slice(&[1.0, 0.5]), 0, 0.0, 2.0).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_decision() {
        let p = toy();
        let d = p.initial_decision();
        let out = geodesic_step(&p, &d, &DVector::zeros(2), 0.3, 1e-3).unwrap();
        assert_eq!(out, d);
    }

    #[test]
    fn clamp_engages_on_crossing_times() {
        let mut t = vec![1.0, 0.5, 3.0];
        clamp_times(&mut t, 0.0, 2.0, 1e-3).unwrap();
        assert!(t.windows(2).all(|w| w[1] - w[0] >= 1e-3 * (1.0 - 1e-9)));
        assert!(t[2] <= 2.0 - 1e-3 + 1e-12);
        let mut crowded = vec![0.5; 5];
        assert!(matches!(clamp_times(&mut crowded, 0.0, 0.004, 1e-3), Err(SolverError::StepRejected)));
    }

    #[test]
    fn toy_solve_converges() {
        let p = toy();
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolverStatus::Converged);
        assert!(sol.iterations.windows(2).all(|w| w[1].cost <= w[0].cost));
        assert!(sol.terminal_error < 1e-8);
        assert!(sol.pmp.max_switch_gap() < 1e-6);
    }
}
