//! Forward hybrid integration with switching-surface events, and variational
//! transport of tangents (push-forward) and covectors (pull-back) along
//! stored segments.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::hybrid::{
    ControlSignal, ControlledField, HybridSystem, HybridTrajectory, SegmentPath, SwitchEvent,
};
use crate::manifold::{ChartPoint, Cotangent, ManifoldError, SwitchingSurface, Tangent};

/// Constraint tolerance for a located event.
pub const EVENT_TOLERANCE: f64 = 1e-10;
/// Relative threshold on `|⟨dN, f⟩| / (‖dN‖ ‖f‖)` separating crossing from grazing.
pub const TRANSVERSALITY_THRESHOLD: f64 = 1e-6;
/// Default number of RK4 steps per integration horizon.
pub const DEFAULT_STEPS: usize = 1024;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("state became non-finite after t = {last_good_time}")]
    BlowUp {
        last_good_time: f64,
        partial: Option<Box<HybridTrajectory>>,
    },
    #[error("non-transversal intersection with surface '{surface}' at t = {time} (⟨dN,f⟩ = {dn_f:e})")]
    NonTransversal {
        surface: String,
        time: f64,
        dn_f: f64,
        partial: Option<Box<HybridTrajectory>>,
    },
    #[error("schedule incomplete: reached {reached} of {expected} switching events before t_f")]
    IncompleteSchedule {
        reached: usize,
        expected: usize,
        partial: Box<HybridTrajectory>,
    },
    #[error("invalid time span [{t0}, {t1}]")]
    EmptySpan { t0: f64, t1: f64 },
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
}

impl FlowError {
    pub fn partial(&self) -> Option<&HybridTrajectory> {
        match self {
            FlowError::BlowUp { partial, .. } | FlowError::NonTransversal { partial, .. } => {
                partial.as_deref()
            }
            FlowError::IncompleteSchedule { partial, .. } => Some(partial),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, FlowError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegratorOptions {
    /// RK4 steps across the whole integration horizon; control breakpoints
    /// are added to the node grid on top of these.
    pub steps: usize,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
        }
    }
}

/// One classical RK4 step with the control frozen over the step.
pub fn rk4_step(
    field: &dyn ControlledField,
    x: &DVector<f64>,
    u: &DVector<f64>,
    h: f64,
) -> DVector<f64> {
    let k1 = field.eval(x, u);
    let k2 = field.eval(&(x + &k1 * (0.5 * h)), u);
    let k3 = field.eval(&(x + &k2 * (0.5 * h)), u);
    let k4 = field.eval(&(x + &k3 * h), u);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Uniform grid of `steps` cells on `[t0, t1]` merged with the control
/// breakpoints inside the span.
fn node_grid(breaks: &[f64], t0: f64, t1: f64, steps: usize) -> Vec<f64> {
    let h = (t1 - t0) / steps as f64;
    let mut grid: Vec<f64> = (0..=steps).map(|k| t0 + h * k as f64).collect();
    grid[steps] = t1;
    grid.extend(breaks.iter().copied().filter(|b| *b > t0 && *b < t1));
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let min_gap = 1e-12 * (1.0 + t1.abs().max(t0.abs()));
    let mut out: Vec<f64> = Vec::with_capacity(grid.len());
    for t in grid {
        match out.last() {
            Some(&last) if t - last < min_gap => {
                // keep exact breakpoints over nearby uniform nodes
                if breaks.contains(&t) && out.len() > 1 {
                    *out.last_mut().unwrap() = t;
                }
            }
            _ => out.push(t),
        }
    }
    *out.last_mut().unwrap() = t1;
    out
}

/// Integrates one mode over `[t0, t1]` with fixed-step RK4.
pub fn integrate_segment(
    field: &dyn ControlledField,
    state_id: usize,
    x0: &ChartPoint,
    u: &ControlSignal,
    t0: f64,
    t1: f64,
    opts: IntegratorOptions,
) -> Result<SegmentPath> {
    if !(t1 > t0) {
        return Err(FlowError::EmptySpan { t0, t1 });
    }
    let grid = node_grid(u.grid(), t0, t1, opts.steps);
    let mut points = Vec::with_capacity(grid.len());
    let mut controls = Vec::with_capacity(grid.len());
    let mut x = x0.coords.clone();
    points.push(x0.clone());
    for w in grid.windows(2) {
        let uk = u.at(w[0]).clone();
        x = rk4_step(field, &x, &uk, w[1] - w[0]);
        if x.iter().any(|c| !c.is_finite()) {
            return Err(FlowError::BlowUp {
                last_good_time: w[0],
                partial: None,
            });
        }
        points.push(ChartPoint::new(x.clone()));
        controls.push(uk);
    }
    controls.push(controls.last().unwrap().clone());
    Ok(SegmentPath {
        state_id,
        times: grid,
        points,
        controls,
    })
}

/// A located crossing of a switching surface inside one step.
#[derive(Clone, Debug, PartialEq)]
pub struct LocatedEvent {
    pub time: f64,
    pub x_minus: ChartPoint,
    pub dn_f: f64,
}

/// Locates the constraint root inside the step `[t, t + h]` starting at `x`
/// with control `u` frozen, by bisection on the step length followed by a
/// Newton polish with `⟨dN, f⟩` as derivative.
fn locate_in_step(
    field: &dyn ControlledField,
    surface: &SwitchingSurface,
    x: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
    h: f64,
) -> Result<LocatedEvent> {
    let phi = |s: f64| surface.value(&rk4_step(field, x, u, s));
    let sign0 = surface.value(x).signum();
    let (mut lo, mut hi) = (0.0, h);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if phi(mid).signum() == sign0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut s = if phi(lo).abs() <= phi(hi).abs() { lo } else { hi };
    for _ in 0..4 {
        let xs = rk4_step(field, x, u, s);
        let value = surface.value(&xs);
        if value.abs() <= EVENT_TOLERANCE * 1e-3 {
            break;
        }
        let slope = surface.constraint.differential(&xs).dot(&field.eval(&xs, u));
        if slope.abs() < 1e-12 {
            break;
        }
        let next = s - value / slope;
        if !(next >= 0.0 && next <= h) {
            break;
        }
        if phi(next).abs() < value.abs() {
            s = next;
        } else {
            break;
        }
    }
    let xs = rk4_step(field, x, u, s);
    let dn = surface.oriented_differential(&xs)?;
    let f = field.eval(&xs, u);
    let dn_f = dn.dot(&f);
    let scale = dn.norm() * f.norm();
    if !(dn_f.abs() >= TRANSVERSALITY_THRESHOLD * scale) || scale == 0.0 {
        return Err(FlowError::NonTransversal {
            surface: surface.name.clone(),
            time: t + s,
            dn_f,
            partial: None,
        });
    }
    Ok(LocatedEvent {
        time: t + s,
        x_minus: ChartPoint::new(xs),
        dn_f,
    })
}

fn crosses(a: f64, b: f64) -> bool {
    (a < 0.0 && b >= 0.0) || (a > 0.0 && b <= 0.0)
}

/// First crossing of `surface` along a stored path, refined by local
/// re-integration inside the step where the constraint changes sign.
pub fn detect_switch(
    field: &dyn ControlledField,
    path: &SegmentPath,
    surface: &SwitchingSurface,
) -> Result<Option<LocatedEvent>> {
    for k in 0..path.times.len() - 1 {
        let a = surface.value(&path.points[k].coords);
        let b = surface.value(&path.points[k + 1].coords);
        if crosses(a, b) {
            let h = path.times[k + 1] - path.times[k];
            return locate_in_step(
                field,
                surface,
                &path.points[k].coords,
                &path.controls[k],
                path.times[k],
                h,
            )
            .map(Some);
        }
    }
    Ok(None)
}

/// Simulates the hybrid system on `[t0, tf]`, firing the scheduled surfaces
/// in order and applying the state jump at each event.
pub fn simulate_hybrid(
    sys: &HybridSystem,
    u: &ControlSignal,
    x0: &ChartPoint,
    q0: usize,
    t0: f64,
    tf: f64,
    opts: IntegratorOptions,
) -> Result<HybridTrajectory> {
    if !(tf > t0) {
        return Err(FlowError::EmptySpan { t0, t1: tf });
    }
    let grid = node_grid(u.grid(), t0, tf, opts.steps);
    run_hybrid(sys, &grid, |_, t| u.at(t).clone(), x0, q0, t0, tf)
}

/// Like [`simulate_hybrid`], but segment `k` (counted by events fired so far)
/// is driven by `controls[k]`, held past its own grid until the next event
/// actually fires. Signals may be defined on overlapping spans.
pub fn simulate_hybrid_per_segment(
    sys: &HybridSystem,
    controls: &[ControlSignal],
    x0: &ChartPoint,
    q0: usize,
    t0: f64,
    tf: f64,
    opts: IntegratorOptions,
) -> Result<HybridTrajectory> {
    if !(tf > t0) {
        return Err(FlowError::EmptySpan { t0, t1: tf });
    }
    assert!(!controls.is_empty(), "at least one segment control");
    let breaks: Vec<f64> = controls.iter().flat_map(|c| c.grid().iter().copied()).collect();
    let grid = node_grid(&breaks, t0, tf, opts.steps);
    let last = controls.len() - 1;
    run_hybrid(sys, &grid, |k, t| controls[k.min(last)].at(t).clone(), x0, q0, t0, tf)
}

fn run_hybrid(
    sys: &HybridSystem,
    grid: &[f64],
    u: impl Fn(usize, f64) -> DVector<f64>,
    x0: &ChartPoint,
    q0: usize,
    t0: f64,
    tf: f64,
) -> Result<HybridTrajectory> {
    let min_gap = 1e-12 * (1.0 + tf.abs());

    let mut traj = HybridTrajectory {
        switch_times: Vec::new(),
        state_seq: vec![q0],
        segments: Vec::new(),
        events: Vec::new(),
    };
    let mut q = q0;
    let mut t = t0;
    let mut x = x0.coords.clone();
    let mut seg = SegmentPath {
        state_id: q,
        times: vec![t],
        points: vec![x0.clone()],
        controls: Vec::new(),
    };
    let mut next_node = 1;

    let finish_segment = |seg: &mut SegmentPath, last_u: DVector<f64>| {
        seg.controls.push(last_u);
    };

    while next_node < grid.len() {
        let t_next = grid[next_node];
        let h = t_next - t;
        if h < min_gap {
            next_node += 1;
            continue;
        }
        let field = sys.fields[q].as_ref();
        let uk = u(traj.events.len(), t);
        let x_next = rk4_step(field, &x, &uk, h);
        if x_next.iter().any(|c| !c.is_finite()) {
            finish_segment(&mut seg, uk);
            traj.segments.push(seg);
            return Err(FlowError::BlowUp {
                last_good_time: t,
                partial: Some(Box::new(traj)),
            });
        }
        let armed = sys.surfaces.get(traj.events.len());
        if let Some(surface) = armed {
            let a = surface.value(&x);
            let b = surface.value(&x_next);
            if crosses(a, b) {
                let located = match locate_in_step(field, surface, &x, &uk, t, h) {
                    Ok(ev) => ev,
                    Err(FlowError::NonTransversal {
                        surface, time, dn_f, ..
                    }) => {
                        finish_segment(&mut seg, uk);
                        traj.segments.push(seg);
                        return Err(FlowError::NonTransversal {
                            surface,
                            time,
                            dn_f,
                            partial: Some(Box::new(traj)),
                        });
                    }
                    Err(e) => return Err(e),
                };
                let k = traj.events.len();
                if located.time - t > min_gap {
                    seg.times.push(located.time);
                    seg.points.push(located.x_minus.clone());
                    seg.controls.push(uk.clone());
                }
                finish_segment(&mut seg, uk);
                traj.segments.push(seg);

                let x_plus = sys.jumps[k].eval(&located.x_minus.coords);
                let x_plus = ChartPoint::new(x_plus);
                traj.switch_times.push(located.time);
                traj.events.push(SwitchEvent {
                    surface: k,
                    time: located.time,
                    x_minus: located.x_minus,
                    x_plus: x_plus.clone(),
                    dn_f: located.dn_f,
                });
                q = surface.to_state;
                traj.state_seq.push(q);
                t = located.time;
                x = x_plus.coords.clone();
                seg = SegmentPath {
                    state_id: q,
                    times: vec![t],
                    points: vec![x_plus],
                    controls: Vec::new(),
                };
                if t_next - t < min_gap {
                    next_node += 1;
                }
                continue;
            }
        }
        seg.times.push(t_next);
        seg.points.push(ChartPoint::new(x_next.clone()));
        seg.controls.push(uk);
        x = x_next;
        t = t_next;
        next_node += 1;
    }
    let last_u = seg
        .controls
        .last()
        .cloned()
        .unwrap_or_else(|| u(traj.events.len(), tf));
    finish_segment(&mut seg, last_u);
    if seg.times.len() < 2 {
        // switch landed on t_f: keep a degenerate two-node segment
        seg.times.push(tf);
        seg.points.push(seg.points[0].clone());
        let c = seg.controls[0].clone();
        seg.controls.push(c);
    }
    traj.segments.push(seg);
    if traj.events.len() < sys.surfaces.len() {
        return Err(FlowError::IncompleteSchedule {
            reached: traj.events.len(),
            expected: sys.surfaces.len(),
            partial: Box::new(traj),
        });
    }
    Ok(traj)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Lift {
    Tangent,
    Cotangent,
}

/// Knots from `a` to `b` (either direction) through the segment nodes.
fn knots(seg: &SegmentPath, a: f64, b: f64) -> Vec<f64> {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let mut ks = vec![lo];
    ks.extend(seg.times.iter().copied().filter(|t| *t > lo && *t < hi));
    ks.push(hi);
    if a > b {
        ks.reverse();
    }
    ks
}

fn lift_rhs(
    seg: &SegmentPath,
    field: &dyn ControlledField,
    step: usize,
    t: f64,
    y: &DMatrix<f64>,
    lift: Lift,
) -> DMatrix<f64> {
    let x = interpolate_in_step(seg, field, step, t);
    let j = field.jac_x(&x, &seg.controls[step]);
    match lift {
        Lift::Tangent => j * y,
        Lift::Cotangent => -(j.transpose() * y),
    }
}

fn interpolate_in_step(
    seg: &SegmentPath,
    field: &dyn ControlledField,
    k: usize,
    t: f64,
) -> DVector<f64> {
    let (t0, t1) = (seg.times[k], seg.times[k + 1]);
    let h = t1 - t0;
    if t == t0 || h <= 0.0 {
        return seg.points[k].coords.clone();
    }
    if t == t1 {
        return seg.points[k + 1].coords.clone();
    }
    let (x0, x1) = (&seg.points[k].coords, &seg.points[k + 1].coords);
    let u = &seg.controls[k];
    let f0 = field.eval(x0, u);
    let f1 = field.eval(x1, u);
    let s = (t - t0) / h;
    let h00 = 2.0 * s.powi(3) - 3.0 * s * s + 1.0;
    let h10 = s.powi(3) - 2.0 * s * s + s;
    let h01 = -2.0 * s.powi(3) + 3.0 * s * s;
    let h11 = s.powi(3) - s * s;
    x0 * h00 + f0 * (h10 * h) + x1 * h01 + f1 * (h11 * h)
}

/// Linear transport of the columns of `y` from `t_from` to `t_to` along the
/// nominal segment. Each RK4 sub-step stays inside one node step so the
/// control is constant over it.
fn transport(
    seg: &SegmentPath,
    field: &dyn ControlledField,
    y: DMatrix<f64>,
    t_from: f64,
    t_to: f64,
    lift: Lift,
) -> DMatrix<f64> {
    let mut y = y;
    for w in knots(seg, t_from, t_to).windows(2) {
        let (a, b) = (w[0], w[1]);
        let h = b - a;
        if h == 0.0 {
            continue;
        }
        let step = seg.step_index(0.5 * (a + b));
        let mid = a + 0.5 * h;
        let k1 = lift_rhs(seg, field, step, a, &y, lift);
        let k2 = lift_rhs(seg, field, step, mid, &(&y + &k1 * (0.5 * h)), lift);
        let k3 = lift_rhs(seg, field, step, mid, &(&y + &k2 * (0.5 * h)), lift);
        let k4 = lift_rhs(seg, field, step, b, &(&y + &k3 * h), lift);
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    y
}

fn point_at(seg: &SegmentPath, field: &dyn ControlledField, t: f64) -> ChartPoint {
    ChartPoint::new(seg.interpolate(field, t))
}

/// Tangent lift `TΦ^{(t2,t1)} v` along the stored segment.
pub fn pushforward(
    seg: &SegmentPath,
    field: &dyn ControlledField,
    v: &Tangent,
    t1: f64,
    t2: f64,
) -> Tangent {
    let y = DMatrix::from_column_slice(v.components.len(), 1, v.components.as_slice());
    let out = transport(seg, field, y, t1, t2, Lift::Tangent);
    Tangent::new(point_at(seg, field, t2), out.column(0).into_owned())
}

/// Cotangent lift `T*Φ^{(t2,t1)} p`: transports `p` at `t2` back to `t1`.
pub fn pullback(
    seg: &SegmentPath,
    field: &dyn ControlledField,
    p: &Cotangent,
    t2: f64,
    t1: f64,
) -> Cotangent {
    let y = DMatrix::from_column_slice(p.components.len(), 1, p.components.as_slice());
    let out = transport(seg, field, y, t2, t1, Lift::Cotangent);
    Cotangent::new(point_at(seg, field, t1), out.column(0).into_owned())
}

/// Push-forward of `v` (given at the first node) recorded at every node.
pub fn pushforward_nodes(
    seg: &SegmentPath,
    field: &dyn ControlledField,
    v: &DVector<f64>,
) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(seg.times.len());
    let mut y = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    out.push(v.clone());
    for k in 0..seg.times.len() - 1 {
        y = transport(seg, field, y, seg.times[k], seg.times[k + 1], Lift::Tangent);
        out.push(y.column(0).into_owned());
    }
    out
}

/// Pull-back of `p` (given at the last node) recorded at every node.
pub fn pullback_nodes(
    seg: &SegmentPath,
    field: &dyn ControlledField,
    p_end: &DVector<f64>,
) -> Vec<DVector<f64>> {
    let n_nodes = seg.times.len();
    let mut out = vec![DVector::zeros(p_end.len()); n_nodes];
    let mut y = DMatrix::from_column_slice(p_end.len(), 1, p_end.as_slice());
    out[n_nodes - 1] = p_end.clone();
    for k in (0..n_nodes - 1).rev() {
        y = transport(seg, field, y, seg.times[k + 1], seg.times[k], Lift::Cotangent);
        out[k] = y.column(0).into_owned();
    }
    out
}

/// Coordinate matrix of the tangent lift of one segment's flow.
pub struct TransportOperator<'a> {
    pub segment: &'a SegmentPath,
    pub field: &'a dyn ControlledField,
}

impl<'a> TransportOperator<'a> {
    pub fn new(segment: &'a SegmentPath, field: &'a dyn ControlledField) -> Self {
        Self { segment, field }
    }

    /// Matrix of `TΦ^{(t2,t1)}`.
    pub fn matrix(&self, t2: f64, t1: f64) -> DMatrix<f64> {
        let n = self.segment.points[0].dim();
        transport(
            self.segment,
            self.field,
            DMatrix::identity(n, n),
            t1,
            t2,
            Lift::Tangent,
        )
    }
}
