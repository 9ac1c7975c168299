//! Adjoint construction for the hybrid minimum principle: terminal covector,
//! backward transport, covector jumps at switches and the Hamiltonian checks.

use nalgebra::DVector;
use thiserror::Error;

use crate::flow::{pullback, pullback_nodes, TRANSVERSALITY_THRESHOLD};
use crate::hybrid::{ControlledField, HybridSystem, HybridTrajectory, JumpMap, TerminalCost};
use crate::manifold::{
    surface_oneform_with_tolerance, ChartPoint, Cotangent, ManifoldError, Tangent,
};

#[derive(Debug, Error)]
pub enum HmpError {
    #[error("switch {index}: ⟨dN, f⟩ = {dn_f:e} is below the transversality threshold")]
    Transversality { index: usize, dn_f: f64 },
    #[error("adjoint construction needs a Mayer system; apply mayer_lift first")]
    NotMayer,
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
}

pub type Result<T> = std::result::Result<T, HmpError>;

/// `p(t_f) = dh(x(t_f))`.
pub fn terminal_covector(h: &TerminalCost, x_tf: &ChartPoint) -> Cotangent {
    Cotangent::new(x_tf.clone(), h.differential(&x_tf.coords))
}

/// `H_q(x, p, u) = ⟨p, f_q(x, u)⟩`.
pub fn hamiltonian(
    sys: &HybridSystem,
    q: usize,
    x: &ChartPoint,
    p: &Cotangent,
    u: &DVector<f64>,
) -> f64 {
    sys.hamiltonian(q, &x.coords, &p.components, u)
}

/// Covector jump across a switch.
///
/// Given `p⁺ = p(t_s)`, returns `p⁻ = T*ζ p⁺ + μ dN` with
/// `μ = ⟨p⁺, f₁⁺ − Tζ f₀⁻⟩ / ⟨dN, f₀⁻⟩`, which makes the Hamiltonian
/// continuous: `⟨p⁻, f₀⁻⟩ = ⟨p⁺, f₁⁺⟩`. `Tζ` is evaluated at `x(t_s⁻)`, the
/// base point of `dN` and `f₀⁻`.
pub fn adjoint_switch_jump(
    p_plus: &Cotangent,
    jump: &dyn JumpMap,
    dn: &Cotangent,
    f0_minus: &Tangent,
    f1_plus: &Tangent,
) -> Result<(Cotangent, f64)> {
    let dn_f = dn.components.dot(&f0_minus.components);
    let scale = dn.components.norm() * f0_minus.components.norm();
    if !(dn_f.abs() >= TRANSVERSALITY_THRESHOLD * scale) || scale == 0.0 {
        return Err(HmpError::Transversality { index: 0, dn_f });
    }
    let tz = jump.jac(&dn.base.coords);
    let pushed_f0 = &tz * &f0_minus.components;
    let mu = p_plus.components.dot(&(&f1_plus.components - pushed_f0)) / dn_f;
    let p_minus = tz.transpose() * &p_plus.components + &dn.components * mu;
    Ok((Cotangent::new(dn.base.clone(), p_minus), mu))
}

/// Per-switch record of the covector jump.
#[derive(Clone, Debug, PartialEq)]
pub struct SwitchAdjoint {
    pub time: f64,
    pub mu: f64,
    pub dn: Cotangent,
    pub dn_f: f64,
    pub p_minus: Cotangent,
    pub p_plus: Cotangent,
    pub h_minus: f64,
    pub h_plus: f64,
}

impl SwitchAdjoint {
    pub fn hamiltonian_gap(&self) -> f64 {
        (self.h_minus - self.h_plus).abs()
    }

    /// Norm of the component of `p⁻ − T*ζ p⁺` orthogonal to `dN`, relative to
    /// the jump size.
    pub fn jump_direction_residual(&self, jump: &dyn JumpMap) -> f64 {
        let tz = jump.jac(&self.dn.base.coords);
        let delta = &self.p_minus.components - tz.transpose() * &self.p_plus.components;
        let d = &self.dn.components;
        let along = d * (delta.dot(d) / d.norm_squared());
        let residual = (&delta - along).norm();
        residual / (1.0 + delta.norm())
    }
}

/// Covector path of one segment on the state trajectory's node grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointSegment {
    pub state_id: usize,
    pub times: Vec<f64>,
    pub covectors: Vec<DVector<f64>>,
    pub hamiltonian: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdjointTrajectory {
    pub segments: Vec<AdjointSegment>,
    pub switches: Vec<SwitchAdjoint>,
}

impl AdjointTrajectory {
    pub fn mus(&self) -> Vec<f64> {
        self.switches.iter().map(|s| s.mu).collect()
    }

    pub fn initial(&self) -> &DVector<f64> {
        &self.segments[0].covectors[0]
    }

    pub fn terminal(&self) -> &DVector<f64> {
        self.segments.last().unwrap().covectors.last().unwrap()
    }
}

/// Tolerance for "`x(t_s⁻)` lies on the surface" when building `dN`.
const EVENT_SURFACE_TOLERANCE: f64 = 1e-8;

/// Backward adjoint along a complete trajectory of a Mayer system.
pub fn backward_adjoint(sys: &HybridSystem, traj: &HybridTrajectory) -> Result<AdjointTrajectory> {
    if !sys.is_mayer() {
        return Err(HmpError::NotMayer);
    }
    let n_seg = traj.segments.len();
    let mut segments: Vec<Option<AdjointSegment>> = vec![None; n_seg];
    let mut switches: Vec<Option<SwitchAdjoint>> = vec![None; traj.events.len()];

    let mut p_end = terminal_covector(&sys.terminal_cost, traj.terminal()).components;
    for k in (0..n_seg).rev() {
        let seg = &traj.segments[k];
        let field = sys.fields[seg.state_id].as_ref();
        let covectors = pullback_nodes(seg, field, &p_end);
        let hamiltonian = seg
            .points
            .iter()
            .zip(&covectors)
            .zip(&seg.controls)
            .map(|((x, p), u)| sys.hamiltonian(seg.state_id, &x.coords, p, u))
            .collect();
        let p_start = covectors[0].clone();
        segments[k] = Some(AdjointSegment {
            state_id: seg.state_id,
            times: seg.times.clone(),
            covectors,
            hamiltonian,
        });
        if k == 0 {
            break;
        }
        // switch k-1 joins segment k-1 (before) and k (after)
        let ev = &traj.events[k - 1];
        let before = &traj.segments[k - 1];
        let u_minus = before.controls.last().unwrap();
        let u_plus = &seg.controls[0];
        let f0 = sys.fields[before.state_id].eval(&ev.x_minus.coords, u_minus);
        let f1 = sys.fields[seg.state_id].eval(&ev.x_plus.coords, u_plus);
        let surface = &sys.surfaces[ev.surface];
        let dn = surface_oneform_with_tolerance(surface, &ev.x_minus, EVENT_SURFACE_TOLERANCE)?;
        let p_plus = Cotangent::new(ev.x_plus.clone(), p_start);
        let (p_minus, mu) = adjoint_switch_jump(
            &p_plus,
            sys.jumps[ev.surface].as_ref(),
            &dn,
            &Tangent::new(ev.x_minus.clone(), f0.clone()),
            &Tangent::new(ev.x_plus.clone(), f1.clone()),
        )
        .map_err(|e| match e {
            HmpError::Transversality { dn_f, .. } => HmpError::Transversality {
                index: k - 1,
                dn_f,
            },
            other => other,
        })?;
        let h_minus = p_minus.components.dot(&f0);
        let h_plus = p_plus.components.dot(&f1);
        let dn_f = dn.components.dot(&f0);
        p_end = p_minus.components.clone();
        switches[k - 1] = Some(SwitchAdjoint {
            time: ev.time,
            mu,
            dn,
            dn_f,
            p_minus,
            p_plus,
            h_minus,
            h_plus,
        });
    }
    Ok(AdjointTrajectory {
        segments: segments.into_iter().map(Option::unwrap).collect(),
        switches: switches.into_iter().map(Option::unwrap).collect(),
    })
}

/// Uniform grid over the control box with local quadratic refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlGrid {
    pub bounds: Vec<(f64, f64)>,
    pub points_per_axis: usize,
}

impl ControlGrid {
    pub fn new(bounds: Vec<(f64, f64)>, points_per_axis: usize) -> Self {
        assert!(points_per_axis >= 3);
        Self {
            bounds,
            points_per_axis,
        }
    }

    fn axis(&self, i: usize) -> Vec<f64> {
        let (lo, hi) = self.bounds[i];
        let n = self.points_per_axis;
        (0..n)
            .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
            .collect()
    }

    /// Minimum of `phi` over the grid, then one parabolic refinement per axis
    /// around the best grid point (kept only if it improves).
    pub fn minimize(&self, phi: impl Fn(&DVector<f64>) -> f64) -> (DVector<f64>, f64) {
        let m = self.bounds.len();
        let axes: Vec<Vec<f64>> = (0..m).map(|i| self.axis(i)).collect();
        let n = self.points_per_axis;
        let total = n.pow(m as u32);
        let mut best_idx = vec![0usize; m];
        let mut best_val = f64::INFINITY;
        let mut idx = vec![0usize; m];
        let mut u = DVector::zeros(m);
        for flat in 0..total {
            let mut r = flat;
            for i in 0..m {
                idx[i] = r % n;
                r /= n;
                u[i] = axes[i][idx[i]];
            }
            let val = phi(&u);
            if val < best_val {
                best_val = val;
                best_idx.clone_from(&idx);
            }
        }
        let mut best_u = DVector::from_fn(m, |i, _| axes[i][best_idx[i]]);
        for i in 0..m {
            let k = best_idx[i];
            if k == 0 || k == n - 1 {
                continue;
            }
            let step = axes[i][1] - axes[i][0];
            let mut probe = best_u.clone();
            probe[i] = axes[i][k - 1];
            let fm = phi(&probe);
            probe[i] = axes[i][k + 1];
            let fp = phi(&probe);
            let f0 = best_val;
            let curv = fp - 2.0 * f0 + fm;
            if curv > 0.0 {
                let offset = 0.5 * step * (fm - fp) / curv;
                probe[i] = (best_u[i] + offset).clamp(self.bounds[i].0, self.bounds[i].1);
                let val = phi(&probe);
                if val < best_val {
                    best_val = val;
                    best_u = probe;
                }
            }
        }
        (best_u, best_val)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PmpSample {
    pub time: f64,
    pub segment: usize,
    pub h_nominal: f64,
    pub h_min: f64,
    pub u_min: DVector<f64>,
}

impl PmpSample {
    pub fn gap(&self) -> f64 {
        self.h_nominal - self.h_min
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PmpReport {
    /// `max_t [H(u°(t)) − min_{u₁} H(u₁)]` over the samples.
    pub max_min_violation: f64,
    pub switch_gaps: Vec<f64>,
    pub jump_residuals: Vec<f64>,
    pub samples: Vec<PmpSample>,
}

impl PmpReport {
    pub fn max_switch_gap(&self) -> f64 {
        self.switch_gaps.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_jump_residual(&self) -> f64 {
        self.jump_residuals.iter().copied().fold(0.0, f64::max)
    }
}

/// Samples the pointwise minimization condition at the midpoints of
/// `sample_count` integration steps spread uniformly over the trajectory and
/// reports the Hamiltonian jump at every switch.
pub fn check_pmp(
    sys: &HybridSystem,
    traj: &HybridTrajectory,
    adjoint: &AdjointTrajectory,
    grid: &ControlGrid,
    sample_count: usize,
) -> PmpReport {
    let steps: Vec<(usize, usize)> = traj
        .segments
        .iter()
        .enumerate()
        .flat_map(|(s, seg)| (0..seg.times.len() - 1).map(move |k| (s, k)))
        .collect();
    let picks: Vec<(usize, usize)> = if steps.len() <= sample_count {
        steps
    } else {
        (0..sample_count)
            .map(|i| steps[i * (steps.len() - 1) / (sample_count - 1).max(1)])
            .collect()
    };
    let samples: Vec<PmpSample> = picks
        .into_iter()
        .map(|(s, k)| {
            let seg = &traj.segments[s];
            let q = seg.state_id;
            let field = sys.fields[q].as_ref();
            let t = 0.5 * (seg.times[k] + seg.times[k + 1]);
            let x = seg.interpolate(field, t);
            let p_next = Cotangent::new(
                seg.points[k + 1].clone(),
                adjoint.segments[s].covectors[k + 1].clone(),
            );
            let p = pullback(seg, field, &p_next, seg.times[k + 1], t).components;
            let h_nominal = sys.hamiltonian(q, &x, &p, &seg.controls[k]);
            let (u_min, h_min) = grid.minimize(|u| sys.hamiltonian(q, &x, &p, u));
            PmpSample {
                time: t,
                segment: s,
                h_nominal,
                h_min,
                u_min,
            }
        })
        .collect();
    let max_min_violation = samples
        .iter()
        .map(PmpSample::gap)
        .fold(f64::NEG_INFINITY, f64::max);
    let switch_gaps = adjoint
        .switches
        .iter()
        .map(SwitchAdjoint::hamiltonian_gap)
        .collect();
    let jump_residuals = adjoint
        .switches
        .iter()
        .zip(&traj.events)
        .map(|(s, ev)| s.jump_direction_residual(sys.jumps[ev.surface].as_ref()))
        .collect();
    PmpReport {
        max_min_violation,
        switch_gaps,
        jump_residuals,
        samples,
    }
}

/// Field evaluated at a chart point as a bound tangent.
pub fn field_tangent(field: &dyn ControlledField, x: &ChartPoint, u: &DVector<f64>) -> Tangent {
    Tangent::new(x.clone(), field.eval(&x.coords, u))
}
