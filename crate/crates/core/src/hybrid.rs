//! Hybrid system data model: controlled fields, jumps, controls, costs,
//! trajectories and the Bolza to Mayer lift.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::manifold::{ChartPoint, Constraint, RiemannianManifold, SwitchingSurface};

/// Step used wherever a Jacobian falls back to central differences.
pub const JACOBIAN_FD_STEP: f64 = 1e-6;

fn fd_jacobian(
    n_out: usize,
    x: &DVector<f64>,
    f: impl Fn(&DVector<f64>) -> DVector<f64>,
) -> DMatrix<f64> {
    let n = x.len();
    let mut jac = DMatrix::zeros(n_out, n);
    let mut xp = x.clone();
    for j in 0..n {
        let x0 = xp[j];
        xp[j] = x0 + JACOBIAN_FD_STEP;
        let fp = f(&xp);
        xp[j] = x0 - JACOBIAN_FD_STEP;
        let fm = f(&xp);
        xp[j] = x0;
        jac.set_column(j, &((fp - fm) / (2.0 * JACOBIAN_FD_STEP)));
    }
    jac
}

/// A controlled vector field `f(x, u)` in chart coordinates.
pub trait ControlledField: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// `∂f/∂x`; central differences unless overridden.
    fn jac_x(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        fd_jacobian(self.dim(), x, |y| self.eval(y, u))
    }

    /// `(A, B)` when the field is `Ax + Bu`.
    fn as_linear(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        None
    }
}

/// `ẋ = Ax + Bu`.
#[derive(Clone, Debug)]
pub struct LinearField {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearField {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        assert!(a.is_square() && a.nrows() == b.nrows());
        Self { a, b }
    }
}

impl ControlledField for LinearField {
    fn dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
    fn jac_x(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }
    fn as_linear(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        Some((&self.a, &self.b))
    }
}

type FieldFn = dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;
type JacFn = dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// Closure-backed field, optionally with an analytic state Jacobian.
#[derive(Clone)]
pub struct FnField {
    pub name: String,
    dim: usize,
    control_dim: usize,
    eval: Arc<FieldFn>,
    jac: Option<Arc<JacFn>>,
}

impl fmt::Debug for FnField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnField")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("control_dim", &self.control_dim)
            .field("analytic_jacobian", &self.jac.is_some())
            .finish()
    }
}

impl FnField {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        control_dim: usize,
        eval: impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            dim,
            control_dim,
            eval: Arc::new(eval),
            jac: None,
        }
    }

    pub fn with_jacobian(
        mut self,
        jac: impl Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.jac = Some(Arc::new(jac));
        self
    }
}

impl ControlledField for FnField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn control_dim(&self) -> usize {
        self.control_dim
    }
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.eval)(x, u)
    }
    fn jac_x(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        match &self.jac {
            Some(j) => j(x, u),
            None => fd_jacobian(self.dim, x, |y| (self.eval)(y, u)),
        }
    }
}

/// Nonlinear fields addressable by name from configuration files.
pub fn registered_field(name: &str) -> Option<Arc<dyn ControlledField>> {
    match name {
        // θ̈ = −sin θ + u
        "pendulum" => Some(Arc::new(
            FnField::new("pendulum", 2, 1, |x, u| {
                DVector::from_vec(vec![x[1], -x[0].sin() + u[0]])
            })
            .with_jacobian(|x, _u| {
                DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -x[0].cos(), 0.0])
            }),
        )),
        // ẍ = (1 − x²)ẋ − x + u
        "van_der_pol" => Some(Arc::new(
            FnField::new("van_der_pol", 2, 1, |x, u| {
                DVector::from_vec(vec![x[1], (1.0 - x[0] * x[0]) * x[1] - x[0] + u[0]])
            })
            .with_jacobian(|x, _u| {
                DMatrix::from_row_slice(
                    2,
                    2,
                    &[0.0, 1.0, -2.0 * x[0] * x[1] - 1.0, 1.0 - x[0] * x[0]],
                )
            }),
        )),
        _ => None,
    }
}

/// Running cost `l(x, u) ≥ 0`.
#[derive(Clone)]
pub enum Loss {
    /// `weight · ‖u‖²`.
    ControlEnergy { weight: f64 },
    Custom(Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>),
}

impl fmt::Debug for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Loss::ControlEnergy { weight } => write!(f, "ControlEnergy({weight})"),
            Loss::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl Loss {
    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        match self {
            Loss::ControlEnergy { weight } => weight * u.norm_squared(),
            Loss::Custom(f) => f(x, u),
        }
    }
}

pub fn registered_loss(name: &str) -> Option<Option<Loss>> {
    match name {
        "zero" | "none" => Some(None),
        "half_control_energy" => Some(Some(Loss::ControlEnergy { weight: 0.5 })),
        "control_energy" => Some(Some(Loss::ControlEnergy { weight: 1.0 })),
        _ => None,
    }
}

/// Terminal cost `h(x) ≥ 0` with its differential.
#[derive(Clone)]
pub enum TerminalCost {
    Zero,
    /// `½ weight · ‖x − target‖²`.
    Quadratic { target: DVector<f64>, weight: f64 },
    /// `⟨covector, x⟩`; the terminal multiplier of a fixed-endpoint problem.
    Linear { covector: DVector<f64> },
    /// `x_{n+1} + inner(x_1..x_n)` on a Mayer-lifted chart.
    Lifted { inner: Box<TerminalCost>, base_dim: usize },
    Custom(Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>),
}

impl fmt::Debug for TerminalCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TerminalCost::Zero => f.write_str("Zero"),
            TerminalCost::Quadratic { target, weight } => f
                .debug_struct("Quadratic")
                .field("target", &target.as_slice())
                .field("weight", weight)
                .finish(),
            TerminalCost::Linear { covector } => f
                .debug_struct("Linear")
                .field("covector", &covector.as_slice())
                .finish(),
            TerminalCost::Lifted { inner, base_dim } => f
                .debug_struct("Lifted")
                .field("inner", inner)
                .field("base_dim", base_dim)
                .finish(),
            TerminalCost::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl TerminalCost {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match self {
            TerminalCost::Zero => 0.0,
            TerminalCost::Quadratic { target, weight } => {
                0.5 * weight * (x.rows(0, target.len()) - target).norm_squared()
            }
            TerminalCost::Linear { covector } => covector.dot(&x.rows(0, covector.len())),
            TerminalCost::Lifted { inner, base_dim } => {
                x[*base_dim] + inner.eval(&x.rows(0, *base_dim).into_owned())
            }
            TerminalCost::Custom(f) => f(x),
        }
    }

    /// Coordinate differential `dh(x)`.
    pub fn differential(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = x.len();
        match self {
            TerminalCost::Zero => DVector::zeros(n),
            TerminalCost::Quadratic { target, weight } => {
                let mut d = DVector::zeros(n);
                let k = target.len();
                d.rows_mut(0, k)
                    .copy_from(&((x.rows(0, k) - target) * *weight));
                d
            }
            TerminalCost::Linear { covector } => {
                let mut d = DVector::zeros(n);
                d.rows_mut(0, covector.len()).copy_from(covector);
                d
            }
            TerminalCost::Lifted { inner, base_dim } => {
                let mut d = DVector::zeros(n);
                let head = x.rows(0, *base_dim).into_owned();
                d.rows_mut(0, *base_dim).copy_from(&inner.differential(&head));
                d[*base_dim] = 1.0;
                d
            }
            TerminalCost::Custom(f) => {
                let h = JACOBIAN_FD_STEP;
                DVector::from_fn(n, |i, _| {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    (f(&xp) - f(&xm)) / (2.0 * h)
                })
            }
        }
    }
}

/// State reset `ζ` applied at a switching instant.
pub trait JumpMap: Send + Sync + fmt::Debug {
    fn eval(&self, x: &DVector<f64>) -> DVector<f64>;

    /// `Tζ` in coordinates; central differences unless overridden.
    fn jac(&self, x: &DVector<f64>) -> DMatrix<f64> {
        fd_jacobian(x.len(), x, |y| self.eval(y))
    }

    fn is_identity(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, Default)]
pub struct IdentityJump;

impl JumpMap for IdentityJump {
    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
    fn jac(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(x.len(), x.len())
    }
    fn is_identity(&self) -> bool {
        true
    }
}

/// `x ↦ Mx + c`.
#[derive(Clone, Debug)]
pub struct AffineJump {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl JumpMap for AffineJump {
    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x + &self.offset
    }
    fn jac(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.matrix.clone()
    }
}

type JumpFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
type JumpJacFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// Closure-backed jump with optional analytic Jacobian.
#[derive(Clone)]
pub struct FnJump {
    eval: Arc<JumpFn>,
    jac: Option<Arc<JumpJacFn>>,
}

impl fmt::Debug for FnJump {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnJump")
            .field("analytic_jacobian", &self.jac.is_some())
            .finish()
    }
}

impl FnJump {
    pub fn new(eval: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static) -> Self {
        Self {
            eval: Arc::new(eval),
            jac: None,
        }
    }

    pub fn with_jacobian(
        mut self,
        jac: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.jac = Some(Arc::new(jac));
        self
    }
}

impl JumpMap for FnJump {
    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.eval)(x)
    }
    fn jac(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.jac {
            Some(j) => j(x),
            None => fd_jacobian(x.len(), x, |y| (self.eval)(y)),
        }
    }
}

/// Jump acting on the leading `base_dim` coordinates, identity on the rest.
#[derive(Clone, Debug)]
pub struct LiftedJump {
    pub inner: Arc<dyn JumpMap>,
    pub base_dim: usize,
}

impl JumpMap for LiftedJump {
    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = x.clone();
        let head = self.inner.eval(&x.rows(0, self.base_dim).into_owned());
        out.rows_mut(0, self.base_dim).copy_from(&head);
        out
    }
    fn jac(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = x.len();
        let mut j = DMatrix::identity(n, n);
        let inner = self.inner.jac(&x.rows(0, self.base_dim).into_owned());
        j.view_mut((0, 0), (self.base_dim, self.base_dim))
            .copy_from(&inner);
        j
    }
    fn is_identity(&self) -> bool {
        self.inner.is_identity()
    }
}

/// Augments a field with the running cost as an extra state `ẋ_{n+1} = l(x, u)`.
#[derive(Clone, Debug)]
pub struct LiftedField {
    pub inner: Arc<dyn ControlledField>,
    pub loss: Option<Loss>,
}

impl LiftedField {
    fn head(&self, x: &DVector<f64>) -> DVector<f64> {
        x.rows(0, self.inner.dim()).into_owned()
    }
}

impl ControlledField for LiftedField {
    fn dim(&self) -> usize {
        self.inner.dim() + 1
    }
    fn control_dim(&self) -> usize {
        self.inner.control_dim()
    }
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let n = self.inner.dim();
        let head = self.head(x);
        let mut out = DVector::zeros(n + 1);
        out.rows_mut(0, n).copy_from(&self.inner.eval(&head, u));
        out[n] = self.loss.as_ref().map_or(0.0, |l| l.eval(&head, u));
        out
    }
    fn jac_x(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let n = self.inner.dim();
        let head = self.head(x);
        let mut j = DMatrix::zeros(n + 1, n + 1);
        j.view_mut((0, 0), (n, n))
            .copy_from(&self.inner.jac_x(&head, u));
        match &self.loss {
            None | Some(Loss::ControlEnergy { .. }) => {}
            Some(Loss::Custom(l)) => {
                let h = JACOBIAN_FD_STEP;
                for i in 0..n {
                    let mut xp = head.clone();
                    let mut xm = head.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    j[(n, i)] = (l(&xp, u) - l(&xm, u)) / (2.0 * h);
                }
            }
        }
        j
    }
}

/// Piecewise-constant-left control: `values[k]` holds on `[grid[k], grid[k+1])`,
/// and the last value holds from the last grid point onward.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSignal {
    grid: Vec<f64>,
    values: Vec<DVector<f64>>,
}

impl ControlSignal {
    pub fn new(grid: Vec<f64>, values: Vec<DVector<f64>>) -> Self {
        assert!(!grid.is_empty() && grid.len() == values.len());
        assert!(
            grid.windows(2).all(|w| w[0] < w[1]),
            "control grid must be strictly increasing"
        );
        Self { grid, values }
    }

    pub fn constant(t0: f64, value: DVector<f64>) -> Self {
        Self::new(vec![t0], vec![value])
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn control_dim(&self) -> usize {
        self.values[0].len()
    }

    fn index_at(&self, t: f64) -> usize {
        // largest k with grid[k] <= t
        self.grid.partition_point(|g| *g <= t).saturating_sub(1)
    }

    /// Value at `t` (right-continuous).
    pub fn at(&self, t: f64) -> &DVector<f64> {
        &self.values[self.index_at(t)]
    }

    /// Left limit `u(t⁻)`.
    pub fn left_limit(&self, t: f64) -> &DVector<f64> {
        let k = self.grid.partition_point(|g| *g < t).saturating_sub(1);
        &self.values[k]
    }

    /// Breakpoints strictly inside `(a, b)`.
    pub fn breakpoints_in(&self, a: f64, b: f64) -> impl Iterator<Item = f64> + '_ {
        let start = self.grid.partition_point(|g| *g <= a);
        self.grid[start..].iter().copied().take_while(move |g| *g < b)
    }

    /// Replaces the control on `[a, b)` by `value`.
    pub fn with_override(&self, a: f64, b: f64, value: &DVector<f64>) -> Self {
        assert!(a <= b);
        if a == b {
            return self.clone();
        }
        let after = self.at(b).clone();
        let mut grid = Vec::with_capacity(self.grid.len() + 2);
        let mut values = Vec::with_capacity(self.grid.len() + 2);
        for (g, v) in self.grid.iter().zip(&self.values) {
            if *g < a {
                grid.push(*g);
                values.push(v.clone());
            }
        }
        grid.push(a);
        values.push(value.clone());
        grid.push(b);
        values.push(after);
        for (g, v) in self.grid.iter().zip(&self.values) {
            if *g > b {
                grid.push(*g);
                values.push(v.clone());
            }
        }
        Self::new(grid, values)
    }

    /// Exact `∫_a^b φ(u(t)) dt` for the piecewise-constant signal.
    pub fn integrate(&self, a: f64, b: f64, phi: impl Fn(&DVector<f64>) -> f64) -> f64 {
        let mut knots = vec![a];
        knots.extend(self.breakpoints_in(a, b));
        knots.push(b);
        knots
            .windows(2)
            .map(|w| (w[1] - w[0]) * phi(self.at(w[0])))
            .sum()
    }
}

/// The five-tuple plus costs, with a fixed a-priori transition schedule.
#[derive(Clone, Debug)]
pub struct HybridSystem {
    pub manifold: RiemannianManifold,
    pub states: Vec<String>,
    pub fields: Vec<Arc<dyn ControlledField>>,
    /// Ordered event schedule: `surfaces[k]` fires the `k`-th transition.
    pub surfaces: Vec<SwitchingSurface>,
    pub jumps: Vec<Arc<dyn JumpMap>>,
    pub control_bounds: Vec<(f64, f64)>,
    pub losses: Vec<Option<Loss>>,
    pub terminal_cost: TerminalCost,
}

impl HybridSystem {
    pub fn dim(&self) -> usize {
        self.manifold.dimension()
    }

    pub fn control_dim(&self) -> usize {
        self.control_bounds.len()
    }

    pub fn is_mayer(&self) -> bool {
        self.losses.iter().all(Option::is_none)
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s == name)
    }

    /// Discrete-state sequence implied by the schedule starting from `q0`.
    pub fn state_sequence(&self, q0: usize) -> Vec<usize> {
        let mut seq = vec![q0];
        seq.extend(self.surfaces.iter().map(|s| s.to_state));
        seq
    }

    pub fn hamiltonian(
        &self,
        q: usize,
        x: &DVector<f64>,
        p: &DVector<f64>,
        u: &DVector<f64>,
    ) -> f64 {
        p.dot(&self.fields[q].eval(x, u))
    }
}

/// Dense path of one inter-switch interval.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentPath {
    pub state_id: usize,
    pub times: Vec<f64>,
    pub points: Vec<ChartPoint>,
    /// Control active on `[times[k], times[k+1])`; the last entry repeats the
    /// left limit at the segment end.
    pub controls: Vec<DVector<f64>>,
}

impl SegmentPath {
    pub fn t_start(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn start(&self) -> &ChartPoint {
        &self.points[0]
    }

    pub fn end(&self) -> &ChartPoint {
        self.points.last().unwrap()
    }

    /// Index `k` of the node step containing `t` (`times[k] <= t <= times[k+1]`).
    pub fn step_index(&self, t: f64) -> usize {
        let k = self.times.partition_point(|s| *s <= t).saturating_sub(1);
        k.min(self.times.len().saturating_sub(2))
    }

    /// Cubic Hermite interpolation of the state at `t`, using the field
    /// values at the step ends as slopes.
    pub fn interpolate(&self, field: &dyn ControlledField, t: f64) -> DVector<f64> {
        let k = self.step_index(t);
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let h = t1 - t0;
        let (x0, x1) = (&self.points[k].coords, &self.points[k + 1].coords);
        if h <= 0.0 {
            return x0.clone();
        }
        let u = &self.controls[k];
        let f0 = field.eval(x0, u);
        let f1 = field.eval(x1, u);
        let s = (t - t0) / h;
        let h00 = 2.0 * s.powi(3) - 3.0 * s * s + 1.0;
        let h10 = s.powi(3) - 2.0 * s * s + s;
        let h01 = -2.0 * s.powi(3) + 3.0 * s * s;
        let h11 = s.powi(3) - s * s;
        x0 * h00 + f0 * (h10 * h) + x1 * h01 + f1 * (h11 * h)
    }
}

/// One switching event of a simulated trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct SwitchEvent {
    pub surface: usize,
    pub time: f64,
    pub x_minus: ChartPoint,
    pub x_plus: ChartPoint,
    /// `⟨dN, f_{q}(x⁻, u⁻)⟩` at the crossing.
    pub dn_f: f64,
}

/// `(τ, q, x)`: switching times, discrete states and per-interval paths.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridTrajectory {
    pub switch_times: Vec<f64>,
    pub state_seq: Vec<usize>,
    pub segments: Vec<SegmentPath>,
    pub events: Vec<SwitchEvent>,
}

impl HybridTrajectory {
    pub fn jump_pairs(&self) -> Vec<(ChartPoint, ChartPoint)> {
        self.events
            .iter()
            .map(|e| (e.x_minus.clone(), e.x_plus.clone()))
            .collect()
    }

    pub fn t_start(&self) -> f64 {
        self.segments[0].t_start()
    }

    pub fn t_end(&self) -> f64 {
        self.segments.last().unwrap().t_end()
    }

    pub fn terminal(&self) -> &ChartPoint {
        self.segments.last().unwrap().end()
    }

    /// Segment index active at `t` (right-continuous at switches).
    pub fn segment_at(&self, t: f64) -> usize {
        self.switch_times.partition_point(|s| *s <= t)
    }

    /// State at time `t`, by Hermite interpolation inside its segment.
    pub fn state_at(&self, sys: &HybridSystem, t: f64) -> DVector<f64> {
        let k = self.segment_at(t).min(self.segments.len() - 1);
        let seg = &self.segments[k];
        seg.interpolate(sys.fields[seg.state_id].as_ref(), t)
    }
}

/// The Bolza to Mayer lift onto `M × ℝ`.
pub fn mayer_lift(sys: &HybridSystem) -> HybridSystem {
    let n = sys.dim();
    let fields = sys
        .fields
        .iter()
        .zip(&sys.losses)
        .map(|(f, l)| {
            Arc::new(LiftedField {
                inner: f.clone(),
                loss: l.clone(),
            }) as Arc<dyn ControlledField>
        })
        .collect();
    let surfaces = sys
        .surfaces
        .iter()
        .map(|s| SwitchingSurface {
            name: s.name.clone(),
            constraint: match &s.constraint {
                Constraint::Affine { normal, offset } => {
                    let mut padded = DVector::zeros(n + 1);
                    padded.rows_mut(0, n).copy_from(normal);
                    Constraint::Affine {
                        normal: padded,
                        offset: *offset,
                    }
                }
                other => other.lifted(n),
            },
            from_state: s.from_state,
            to_state: s.to_state,
            orientation: s.orientation,
        })
        .collect();
    let jumps = sys
        .jumps
        .iter()
        .map(|j| {
            Arc::new(LiftedJump {
                inner: j.clone(),
                base_dim: n,
            }) as Arc<dyn JumpMap>
        })
        .collect();
    HybridSystem {
        manifold: sys.manifold.with_flat_dims(1),
        states: sys.states.clone(),
        fields,
        surfaces,
        jumps,
        control_bounds: sys.control_bounds.clone(),
        losses: vec![None; sys.losses.len()],
        terminal_cost: TerminalCost::Lifted {
            inner: Box::new(sys.terminal_cost.clone()),
            base_dim: n,
        },
    }
}

/// Appends a zero running-cost coordinate to a chart point.
pub fn lift_point(x: &ChartPoint) -> ChartPoint {
    let n = x.dim();
    let mut c = DVector::zeros(n + 1);
    c.rows_mut(0, n).copy_from(&x.coords);
    ChartPoint::new(c)
}

/// Bolza cost `Σ ∫ l_q + h(x(t_f))` of a trajectory by trapezoid quadrature
/// over the stored nodes.
pub fn bolza_cost(sys: &HybridSystem, traj: &HybridTrajectory) -> f64 {
    let mut total = 0.0;
    for seg in &traj.segments {
        if let Some(loss) = &sys.losses[seg.state_id] {
            for k in 0..seg.times.len() - 1 {
                let h = seg.times[k + 1] - seg.times[k];
                let u = &seg.controls[k];
                let a = loss.eval(&seg.points[k].coords, u);
                let b = loss.eval(&seg.points[k + 1].coords, u);
                total += 0.5 * h * (a + b);
            }
        }
    }
    total + sys.terminal_cost.eval(&traj.terminal().coords)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    /// A1: the initial state lies on a switching surface.
    InitialOnSurface { surface: String, value: f64 },
    /// The constraint differential vanishes at a sampled point.
    DegenerateSurface { surface: String },
    /// The metric failed the positive-definiteness test.
    MetricNotPositive { coords: Vec<f64> },
    /// A surface refers to a discrete state outside `Q`.
    UnknownState { surface: String },
    /// The schedule is not a chain starting at `q0`.
    BrokenSchedule { surface: String },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the standing assumptions at the initial condition.
pub fn validate(sys: &HybridSystem, x0: &ChartPoint, q0: usize) -> ValidationReport {
    let mut violations = Vec::new();
    if sys.manifold.metric_at(x0).is_err() {
        violations.push(Violation::MetricNotPositive {
            coords: x0.coords.as_slice().to_vec(),
        });
    }
    let mut current = q0;
    for s in &sys.surfaces {
        if s.from_state >= sys.states.len() || s.to_state >= sys.states.len() {
            violations.push(Violation::UnknownState {
                surface: s.name.clone(),
            });
            continue;
        }
        if s.from_state != current {
            violations.push(Violation::BrokenSchedule {
                surface: s.name.clone(),
            });
        }
        current = s.to_state;
        let value = s.value(&x0.coords);
        if value.abs() <= crate::manifold::SURFACE_TOLERANCE {
            violations.push(Violation::InitialOnSurface {
                surface: s.name.clone(),
                value,
            });
        }
        if s.oriented_differential(&x0.coords).is_err() {
            violations.push(Violation::DegenerateSurface {
                surface: s.name.clone(),
            });
        }
    }
    ValidationReport { violations }
}
