#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use hmp_core::config;
use hmp_core::hybrid::{
    ControlledField, HybridSystem, IdentityJump, JumpMap, LinearField, Loss, TerminalCost,
};
use hmp_core::manifold::{Constraint, RiemannianManifold, SwitchingSurface};
use hmp_core::solver::SteeringProblem;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

pub fn load_config(name: &str) -> config::LoadedConfig {
    config::load(&config_path(name)).expect("shipped config loads")
}

pub fn torus_problem() -> (config::LoadedConfig, SteeringProblem) {
    let loaded = load_config("torus.toml");
    let setup = loaded.run.system().expect("torus system builds");
    let problem = setup.steering_problem().expect("torus problem builds");
    (loaded, problem)
}

/// Taylor series with scaling and squaring; independent of nalgebra's Padé.
pub fn expm_taylor(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.abs().row_sum().max();
    let mut squarings = 0;
    let mut s = 1.0;
    while norm * s > 0.25 {
        s *= 0.5;
        squarings += 1;
    }
    let x = a * s;
    let mut term = DMatrix::identity(n, n);
    let mut sum = term.clone();
    for k in 1..30 {
        term = &term * &x / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// `∫_0^h e^{As} ds` by the same series: `Σ A^k h^{k+1}/(k+1)!`, split into
/// pieces short enough for the series to converge quickly.
pub fn expm_integral(a: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let pieces = ((a.abs().row_sum().max() * h) / 0.25).ceil().max(1.0) as usize;
    let dh = h / pieces as f64;
    let mut term = DMatrix::identity(n, n) * dh;
    let mut piece = term.clone();
    for k in 1..30 {
        term = &term * a * dh / (k + 1) as f64;
        piece += &term;
    }
    let step = expm_taylor(&(a * dh));
    let mut acc = DMatrix::zeros(n, n);
    let mut shift = DMatrix::identity(n, n);
    for _ in 0..pieces {
        acc += &shift * &piece;
        shift = &shift * &step;
    }
    acc
}

pub fn random_matrix(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

pub fn random_vector(rng: &mut impl Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

/// `(A, B)` with a well-conditioned controllability matrix.
pub fn random_controllable_pair(
    rng: &mut impl Rng,
    n: usize,
    m: usize,
    scale: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    loop {
        let a = random_matrix(rng, n, n, scale);
        let b = random_matrix(rng, n, m, 1.0);
        let mut cols = Vec::new();
        let mut blk = b.clone();
        for _ in 0..n {
            cols.extend(blk.column_iter().map(|c| c.into_owned()));
            blk = &a * blk;
        }
        let c = DMatrix::from_columns(&cols);
        let sv = c.singular_values();
        if sv.min() > 0.2 * sv.max() {
            return (a, b);
        }
    }
}

pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>) -> Arc<dyn ControlledField> {
    Arc::new(LinearField::new(a, b))
}

/// Linear modes chained by coordinate surfaces, energy cost `½∫‖u‖²`.
pub fn linear_chain(
    modes: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    surfaces: Vec<Constraint>,
    jumps: Vec<Arc<dyn JumpMap>>,
) -> HybridSystem {
    let n = modes[0].0.nrows();
    let m = modes[0].1.ncols();
    let count = modes.len();
    HybridSystem {
        manifold: RiemannianManifold::euclidean(n),
        states: (0..count).map(|k| format!("q{k}")).collect(),
        fields: modes.into_iter().map(|(a, b)| linear(a, b)).collect(),
        surfaces: surfaces
            .into_iter()
            .enumerate()
            .map(|(k, c)| SwitchingSurface::new(format!("S{}", k + 1), c, k, k + 1))
            .collect(),
        jumps,
        control_bounds: vec![(-50.0, 50.0); m],
        losses: vec![Some(Loss::ControlEnergy { weight: 0.5 }); count],
        terminal_cost: TerminalCost::Zero,
    }
}

pub fn identity_jump() -> Arc<dyn JumpMap> {
    Arc::new(IdentityJump)
}

/// Closed-form minimum-energy steering evaluated with the Taylor exponential
/// and composite Simpson quadrature of the Gramian.
pub struct SteerOracle {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub t0: f64,
    pub t1: f64,
    pub lambda: DVector<f64>,
    pub cost: f64,
}

impl SteerOracle {
    pub fn new(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        x0: &DVector<f64>,
        x1: &DVector<f64>,
        t0: f64,
        t1: f64,
    ) -> Self {
        let n = a.nrows();
        let panels = 2000;
        let h = (t1 - t0) / panels as f64;
        let mut g = DMatrix::zeros(n, n);
        for k in 0..=panels {
            let w = if k == 0 || k == panels {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let e = expm_taylor(&(a * (k as f64 * h))) * b;
            g += &e * e.transpose() * w;
        }
        g *= h / 3.0;
        let d = x1 - expm_taylor(&(a * (t1 - t0))) * x0;
        let lambda = g.lu().solve(&d).expect("oracle Gramian invertible");
        let cost = 0.5 * d.dot(&lambda);
        Self {
            a: a.clone(),
            b: b.clone(),
            t0,
            t1,
            lambda,
            cost,
        }
    }

    /// `u(t) = Bᵀ e^{Aᵀ(t1−t)} λ`.
    pub fn control(&self, t: f64) -> DVector<f64> {
        self.b.transpose() * expm_taylor(&(self.a.transpose() * (self.t1 - t))) * &self.lambda
    }

    /// Costate of `½∫‖u‖²`: `p(t) = −e^{Aᵀ(t1−t)} λ`.
    pub fn costate(&self, t: f64) -> DVector<f64> {
        -expm_taylor(&(self.a.transpose() * (self.t1 - t))) * &self.lambda
    }
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
