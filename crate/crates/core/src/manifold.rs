//! Chart-based Riemannian manifolds.
//!
//! Every manifold carries a single global chart. Periodic coordinates are
//! identified modulo their period only when a point is explicitly
//! canonicalized; dynamics and switching surfaces live on the unwrapped
//! chart (the universal cover), so a trajectory that winds around the torus
//! keeps a continuous coordinate history.

use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Step used for central differences of the metric.
pub const METRIC_FD_STEP: f64 = 1e-6;
/// Smallest eigenvalue accepted for a metric sample.
pub const METRIC_EIGEN_FLOOR: f64 = 1e-10;
/// Default tolerance for "x lies on the switching surface".
pub const SURFACE_TOLERANCE: f64 = 1e-8;
/// Smallest constraint gradient norm accepted for a codimension-one surface.
pub const SURFACE_GRADIENT_FLOOR: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManifoldError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("metric is not positive definite at {coords:?} (smallest eigenvalue {min_eigenvalue:e})")]
    MetricDegenerate {
        coords: Vec<f64>,
        min_eigenvalue: f64,
    },
    #[error("metric matrix is singular at {coords:?}")]
    SingularMetric { coords: Vec<f64> },
    #[error("geodesic integration escaped at parameter {theta}")]
    GeodesicEscape { theta: f64 },
    #[error("surface '{surface}' has a vanishing differential at {coords:?}")]
    DegenerateSurface { surface: String, coords: Vec<f64> },
    #[error("point {coords:?} is off surface '{surface}' (constraint value {value:e})")]
    OffSurface {
        surface: String,
        coords: Vec<f64>,
        value: f64,
    },
    #[error("base points differ: {left:?} vs {right:?}")]
    BaseMismatch { left: Vec<f64>, right: Vec<f64> },
}

pub type Result<T> = std::result::Result<T, ManifoldError>;

/// A point of the manifold in chart coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ChartPoint {
    pub coords: DVector<f64>,
}

impl ChartPoint {
    pub fn new(coords: DVector<f64>) -> Self {
        Self { coords }
    }

    pub fn from_slice(coords: &[f64]) -> Self {
        Self {
            coords: DVector::from_column_slice(coords),
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }
}

/// A tangent vector bound to its base point.
#[derive(Clone, Debug, PartialEq)]
pub struct Tangent {
    pub base: ChartPoint,
    pub components: DVector<f64>,
}

impl Tangent {
    pub fn new(base: ChartPoint, components: DVector<f64>) -> Self {
        debug_assert_eq!(base.dim(), components.len());
        Self { base, components }
    }

    pub fn zero(base: ChartPoint) -> Self {
        let n = base.dim();
        Self::new(base, DVector::zeros(n))
    }
}

/// A covector (coordinate coframe coefficients) bound to its base point.
#[derive(Clone, Debug, PartialEq)]
pub struct Cotangent {
    pub base: ChartPoint,
    pub components: DVector<f64>,
}

impl Cotangent {
    pub fn new(base: ChartPoint, components: DVector<f64>) -> Self {
        debug_assert_eq!(base.dim(), components.len());
        Self { base, components }
    }

    pub fn zero(base: ChartPoint) -> Self {
        let n = base.dim();
        Self::new(base, DVector::zeros(n))
    }

    /// Natural pairing with a tangent vector at the same base point.
    pub fn pair(&self, v: &Tangent) -> f64 {
        self.components.dot(&v.components)
    }
}

/// Christoffel symbols `Γ^k_{ij}` stored densely as `[k][i][j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Christoffel {
    dim: usize,
    data: Vec<f64>,
}

impl Christoffel {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.data[(k * self.dim + i) * self.dim + j]
    }

    /// Sets both `Γ^k_{ij}` and `Γ^k_{ji}`.
    pub fn set_symmetric(&mut self, k: usize, i: usize, j: usize, value: f64) {
        let n = self.dim;
        self.data[(k * n + i) * n + j] = value;
        self.data[(k * n + j) * n + i] = value;
    }

    /// `Γ^k_{ij} v^i w^j` for every `k`.
    pub fn contract(&self, v: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let n = self.dim;
        DVector::from_fn(n, |k, _| {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    acc += self.get(k, i, j) * v[i] * w[j];
                }
            }
            acc
        })
    }
}

/// A Riemannian metric expressed in one chart.
pub trait Metric: Send + Sync + fmt::Debug {
    fn dimension(&self) -> usize;

    /// Metric coefficients `g_ij(x)`.
    fn matrix(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// Analytic Christoffel symbols, when the metric knows them.
    fn christoffel(&self, _x: &DVector<f64>) -> Option<Christoffel> {
        None
    }
}

#[derive(Clone, Debug)]
pub struct EuclideanMetric {
    pub dim: usize,
}

impl Metric for EuclideanMetric {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim)
    }

    fn christoffel(&self, _x: &DVector<f64>) -> Option<Christoffel> {
        Some(Christoffel::zeros(self.dim))
    }
}

/// Induced metric of the torus of revolution in the chart `(ζ, w)`:
/// `(R + r cos w)^2 dζ⊗dζ + r^2 dw⊗dw`.
#[derive(Clone, Debug)]
pub struct TorusMetric {
    pub major: f64,
    pub minor: f64,
}

impl Metric for TorusMetric {
    fn dimension(&self) -> usize {
        2
    }

    fn matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let rho = self.major + self.minor * x[1].cos();
        DMatrix::from_row_slice(2, 2, &[rho * rho, 0.0, 0.0, self.minor * self.minor])
    }
}

/// Round sphere in polar/azimuth chart `(θ, φ)`: `ρ^2 dθ⊗dθ + ρ^2 sin^2θ dφ⊗dφ`.
#[derive(Clone, Debug)]
pub struct SphereMetric {
    pub radius: f64,
}

impl Metric for SphereMetric {
    fn dimension(&self) -> usize {
        2
    }

    fn matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let r2 = self.radius * self.radius;
        let s = x[0].sin();
        DMatrix::from_row_slice(2, 2, &[r2, 0.0, 0.0, r2 * s * s])
    }
}

/// Product of a base metric with flat trailing coordinates.
#[derive(Clone, Debug)]
pub struct ProductMetric {
    pub base: Arc<dyn Metric>,
    pub flat_dims: usize,
}

impl Metric for ProductMetric {
    fn dimension(&self) -> usize {
        self.base.dimension() + self.flat_dims
    }

    fn matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.base.dimension();
        let total = self.dimension();
        let mut g = DMatrix::identity(total, total);
        let head = DVector::from_iterator(n, x.iter().take(n).copied());
        g.view_mut((0, 0), (n, n)).copy_from(&self.base.matrix(&head));
        g
    }

    fn christoffel(&self, x: &DVector<f64>) -> Option<Christoffel> {
        let n = self.base.dimension();
        let head = DVector::from_iterator(n, x.iter().take(n).copied());
        let inner = self.base.christoffel(&head)?;
        let mut out = Christoffel::zeros(self.dimension());
        for k in 0..n {
            for i in 0..n {
                for j in i..n {
                    out.set_symmetric(k, i, j, inner.get(k, i, j));
                }
            }
        }
        Some(out)
    }
}

/// Map from chart coordinates to an ambient Euclidean space (export only).
#[derive(Clone, Debug, PartialEq)]
pub enum Embedding {
    Torus { major: f64, minor: f64 },
    Sphere { radius: f64 },
}

impl Embedding {
    pub fn ambient_dim(&self) -> usize {
        3
    }

    /// Chart dimension the embedding reads (leading coordinates).
    pub fn chart_dim(&self) -> usize {
        2
    }

    pub fn embed(&self, coords: &[f64]) -> Vec<f64> {
        match *self {
            Embedding::Torus { major, minor } => {
                let (z, w) = (coords[0], coords[1]);
                let rho = major + minor * w.cos();
                vec![rho * z.cos(), rho * z.sin(), minor * w.sin()]
            }
            Embedding::Sphere { radius } => {
                let (th, ph) = (coords[0], coords[1]);
                vec![
                    radius * th.sin() * ph.cos(),
                    radius * th.sin() * ph.sin(),
                    radius * th.cos(),
                ]
            }
        }
    }

    /// Jacobian of `embed` (ambient × chart), by central differences.
    fn jacobian(&self, coords: &[f64]) -> DMatrix<f64> {
        let n = self.chart_dim();
        let m = self.ambient_dim();
        let h = 1e-7;
        let mut jac = DMatrix::zeros(m, n);
        let mut c = coords[..n].to_vec();
        for j in 0..n {
            let x0 = c[j];
            c[j] = x0 + h;
            let fp = self.embed(&c);
            c[j] = x0 - h;
            let fm = self.embed(&c);
            c[j] = x0;
            for i in 0..m {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        jac
    }

    /// Least-squares chart preimage of an ambient point, Gauss–Newton from
    /// `hint`. Returns the chart coordinates and the ambient residual norm.
    pub fn invert(&self, ambient: &[f64], hint: &[f64]) -> (Vec<f64>, f64) {
        let n = self.chart_dim();
        let target = DVector::from_column_slice(ambient);
        let mut c = hint[..n].to_vec();
        let residual = |c: &[f64]| DVector::from_vec(self.embed(c)) - &target;
        for _ in 0..100 {
            let r = residual(&c);
            let jac = self.jacobian(&c);
            let jtj = jac.transpose() * &jac;
            let jtr = jac.transpose() * &r;
            let Some(step) = jtj.lu().solve(&jtr) else {
                break;
            };
            for j in 0..n {
                c[j] -= step[j];
            }
            if step.norm() < 1e-14 {
                break;
            }
        }
        let res = residual(&c).norm();
        (c, res)
    }
}

/// A manifold: a metric on one global chart with optional periodic coordinates.
#[derive(Clone, Debug)]
pub struct RiemannianManifold {
    pub name: String,
    metric: Arc<dyn Metric>,
    periods: Vec<Option<f64>>,
    embedding: Option<Embedding>,
}

impl RiemannianManifold {
    pub fn new(
        name: impl Into<String>,
        metric: Arc<dyn Metric>,
        periods: Vec<Option<f64>>,
        embedding: Option<Embedding>,
    ) -> Self {
        assert_eq!(
            periods.len(),
            metric.dimension(),
            "one periodicity entry per coordinate"
        );
        if let Some(e) = &embedding {
            assert!(e.ambient_dim() >= metric.dimension().min(e.chart_dim()));
        }
        Self {
            name: name.into(),
            metric,
            periods,
            embedding,
        }
    }

    pub fn euclidean(dim: usize) -> Self {
        Self::new(
            "euclidean",
            Arc::new(EuclideanMetric { dim }),
            vec![None; dim],
            None,
        )
    }

    pub fn torus(major: f64, minor: f64) -> Self {
        Self::new(
            "torus",
            Arc::new(TorusMetric { major, minor }),
            vec![Some(TAU), Some(TAU)],
            Some(Embedding::Torus { major, minor }),
        )
    }

    pub fn sphere(radius: f64) -> Self {
        Self::new(
            "sphere",
            Arc::new(SphereMetric { radius }),
            vec![None, Some(TAU)],
            Some(Embedding::Sphere { radius }),
        )
    }

    pub fn dimension(&self) -> usize {
        self.metric.dimension()
    }

    pub fn metric(&self) -> &Arc<dyn Metric> {
        &self.metric
    }

    pub fn periods(&self) -> &[Option<f64>] {
        &self.periods
    }

    pub fn embedding(&self) -> Option<&Embedding> {
        self.embedding.as_ref()
    }

    /// `M × ℝ^k` with the product metric; embedding still reads the base chart.
    pub fn with_flat_dims(&self, k: usize) -> Self {
        let mut periods = self.periods.clone();
        periods.extend(std::iter::repeat_n(None, k));
        Self {
            name: format!("{}xR{}", self.name, k),
            metric: Arc::new(ProductMetric {
                base: self.metric.clone(),
                flat_dims: k,
            }),
            periods,
            embedding: self.embedding.clone(),
        }
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.dimension() {
            return Err(ManifoldError::DimensionMismatch {
                expected: self.dimension(),
                got: n,
            });
        }
        Ok(())
    }

    /// Representative of `x` with every periodic coordinate in `[0, period)`.
    pub fn canonicalize(&self, x: &ChartPoint) -> ChartPoint {
        let mut c = x.coords.clone();
        for (i, p) in self.periods.iter().enumerate() {
            if let Some(p) = p {
                let mut v = c[i].rem_euclid(*p);
                if v >= *p {
                    v = 0.0;
                }
                c[i] = v;
            }
        }
        ChartPoint::new(c)
    }

    /// Metric matrix at `x`, checked for symmetry and positive definiteness.
    pub fn metric_at(&self, x: &ChartPoint) -> Result<DMatrix<f64>> {
        self.check_dim(x.dim())?;
        let g = self.metric.matrix(&x.coords);
        let g = (&g + g.transpose()) * 0.5;
        let min_eigenvalue = g.clone().symmetric_eigen().eigenvalues.min();
        if !(min_eigenvalue > METRIC_EIGEN_FLOOR) {
            return Err(ManifoldError::MetricDegenerate {
                coords: x.coords.as_slice().to_vec(),
                min_eigenvalue,
            });
        }
        Ok(g)
    }

    fn metric_inverse(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.metric
            .matrix(x)
            .try_inverse()
            .ok_or_else(|| ManifoldError::SingularMetric {
                coords: x.as_slice().to_vec(),
            })
    }

    /// Levi-Civita Christoffel symbols at `x`; analytic when the metric
    /// provides them, central differences of the metric otherwise.
    pub fn christoffel(&self, x: &ChartPoint) -> Result<Christoffel> {
        self.check_dim(x.dim())?;
        if let Some(c) = self.metric.christoffel(&x.coords) {
            return Ok(c);
        }
        self.christoffel_fd(&x.coords, METRIC_FD_STEP)
    }

    /// Finite-difference Christoffel symbols with an explicit step.
    pub fn christoffel_fd(&self, x: &DVector<f64>, step: f64) -> Result<Christoffel> {
        let n = self.dimension();
        let ginv = self.metric_inverse(x)?;
        // dg[l] = ∂_l g
        let dg: Vec<DMatrix<f64>> = (0..n)
            .map(|l| {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[l] += step;
                xm[l] -= step;
                (self.metric.matrix(&xp) - self.metric.matrix(&xm)) / (2.0 * step)
            })
            .collect();
        let mut out = Christoffel::zeros(n);
        for k in 0..n {
            for i in 0..n {
                for j in i..n {
                    let mut acc = 0.0;
                    for l in 0..n {
                        acc += ginv[(k, l)]
                            * (dg[i][(j, l)] + dg[j][(i, l)] - dg[l][(i, j)]);
                    }
                    out.set_symmetric(k, i, j, 0.5 * acc);
                }
            }
        }
        Ok(out)
    }

    fn geodesic_rhs(&self, state: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.dimension();
        let x = state.rows(0, n).into_owned();
        let v = state.rows(n, n).into_owned();
        let gamma = self.christoffel(&ChartPoint::new(x))?;
        let acc = -gamma.contract(&v, &v);
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&v);
        out.rows_mut(n, n).copy_from(&acc);
        Ok(out)
    }

    /// RK4 integration of the geodesic equation; returns every node `(x, ẋ)`.
    pub fn geodesic_path(
        &self,
        p: &ChartPoint,
        v: &Tangent,
        theta: f64,
        steps: usize,
    ) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
        self.check_dim(p.dim())?;
        self.check_dim(v.components.len())?;
        let n = self.dimension();
        let h = theta / steps as f64;
        let mut y = DVector::zeros(2 * n);
        y.rows_mut(0, n).copy_from(&p.coords);
        y.rows_mut(n, n).copy_from(&v.components);
        let mut out = Vec::with_capacity(steps + 1);
        out.push((p.coords.clone(), v.components.clone()));
        for s in 0..steps {
            let k1 = self.geodesic_rhs(&y)?;
            let k2 = self.geodesic_rhs(&(&y + &k1 * (0.5 * h)))?;
            let k3 = self.geodesic_rhs(&(&y + &k2 * (0.5 * h)))?;
            let k4 = self.geodesic_rhs(&(&y + &k3 * h))?;
            y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            if y.iter().any(|c| !c.is_finite()) {
                return Err(ManifoldError::GeodesicEscape {
                    theta: h * (s + 1) as f64,
                });
            }
            out.push((y.rows(0, n).into_owned(), y.rows(n, n).into_owned()));
        }
        Ok(out)
    }

    /// `exp_p(θ v)`, canonicalized under periodicity.
    ///
    /// Fixed-step RK4 with `θ/256` steps; the result is compared against a
    /// run with half as many steps and the step count doubles until the two
    /// agree to `1e-10` (relative), up to `2^16` steps.
    pub fn geodesic_exp(&self, p: &ChartPoint, v: &Tangent, theta: f64) -> Result<ChartPoint> {
        Ok(self.canonicalize(&self.geodesic_exp_unwrapped(p, v, theta)?))
    }

    /// Same as [`geodesic_exp`](Self::geodesic_exp) without canonicalization.
    pub fn geodesic_exp_unwrapped(
        &self,
        p: &ChartPoint,
        v: &Tangent,
        theta: f64,
    ) -> Result<ChartPoint> {
        if theta == 0.0 || v.components.iter().all(|c| *c == 0.0) {
            self.check_dim(p.dim())?;
            return Ok(p.clone());
        }
        let mut steps = 256usize;
        let mut coarse = self.geodesic_path(p, v, theta, steps / 2)?.pop().unwrap().0;
        loop {
            let fine = self.geodesic_path(p, v, theta, steps)?.pop().unwrap().0;
            let scale = 1.0 + fine.norm();
            if (&fine - &coarse).norm() <= 1e-10 * scale {
                return Ok(ChartPoint::new(fine));
            }
            if steps >= 1 << 16 {
                return Err(ManifoldError::GeodesicEscape { theta });
            }
            coarse = fine;
            steps *= 2;
        }
    }

    /// Index lowering `v ↦ g(v, ·)`.
    pub fn lower(&self, v: &Tangent) -> Result<Cotangent> {
        let g = self.metric_at(&v.base)?;
        Ok(Cotangent::new(v.base.clone(), g * &v.components))
    }

    /// Index raising `α ↦ g^{-1} α`.
    pub fn raise(&self, alpha: &Cotangent) -> Result<Tangent> {
        let g = self.metric_at(&alpha.base)?;
        let comps = g
            .lu()
            .solve(&alpha.components)
            .ok_or_else(|| ManifoldError::SingularMetric {
                coords: alpha.base.coords.as_slice().to_vec(),
            })?;
        Ok(Tangent::new(alpha.base.clone(), comps))
    }

    /// Riemannian inner product of two tangents at the same base.
    pub fn inner(&self, a: &Tangent, b: &Tangent) -> Result<f64> {
        let g = self.metric_at(&a.base)?;
        Ok(a.components.dot(&(g * &b.components)))
    }
}

/// Local defining function `n(x)` of a switching surface.
#[derive(Clone)]
pub enum Constraint {
    /// `x_index − level`.
    Coordinate { index: usize, level: f64 },
    /// `⟨normal, x⟩ − offset`.
    Affine { normal: DVector<f64>, offset: f64 },
    /// Arbitrary smooth function; differential by central differences.
    Custom(Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>),
}

impl fmt::Debug for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constraint::Coordinate { index, level } => f
                .debug_struct("Coordinate")
                .field("index", index)
                .field("level", level)
                .finish(),
            Constraint::Affine { normal, offset } => f
                .debug_struct("Affine")
                .field("normal", &normal.as_slice())
                .field("offset", offset)
                .finish(),
            Constraint::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl Constraint {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match self {
            Constraint::Coordinate { index, level } => x[*index] - level,
            Constraint::Affine { normal, offset } => {
                normal.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>() - offset
            }
            Constraint::Custom(f) => f(x),
        }
    }

    /// Coordinate differential `dn(x)`.
    pub fn differential(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = x.len();
        match self {
            Constraint::Coordinate { index, .. } => {
                let mut d = DVector::zeros(n);
                d[*index] = 1.0;
                d
            }
            Constraint::Affine { normal, .. } => {
                let mut d = DVector::zeros(n);
                for (i, a) in normal.iter().enumerate().take(n) {
                    d[i] = *a;
                }
                d
            }
            Constraint::Custom(f) => {
                let h = 1e-6;
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

    /// Cylindrical extension to `M × ℝ^k` (independent of the new coordinates).
    pub fn lifted(&self, base_dim: usize) -> Constraint {
        match self {
            Constraint::Coordinate { .. } => self.clone(),
            Constraint::Affine { normal, offset } => Constraint::Affine {
                normal: normal.clone(),
                offset: *offset,
            },
            Constraint::Custom(f) => {
                let f = f.clone();
                Constraint::Custom(Arc::new(move |x: &DVector<f64>| {
                    f(&x.rows(0, base_dim).into_owned())
                }))
            }
        }
    }
}

/// Codimension-one switching surface `{ n(x) = 0 }` triggering `from → to`.
#[derive(Clone, Debug)]
pub struct SwitchingSurface {
    pub name: String,
    pub constraint: Constraint,
    pub from_state: usize,
    pub to_state: usize,
    /// `+1`: nominal crossing from `n < 0` to `n > 0`; `-1`: the reverse.
    pub orientation: f64,
}

impl SwitchingSurface {
    pub fn new(
        name: impl Into<String>,
        constraint: Constraint,
        from_state: usize,
        to_state: usize,
    ) -> Self {
        Self {
            name: name.into(),
            constraint,
            from_state,
            to_state,
            orientation: 1.0,
        }
    }

    pub fn with_orientation(mut self, orientation: f64) -> Self {
        self.orientation = orientation.signum();
        self
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.constraint.value(x)
    }

    /// Oriented differential `orientation · dn(x)`, checked for codimension one.
    pub fn oriented_differential(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let d = self.constraint.differential(x) * self.orientation;
        if d.norm() <= SURFACE_GRADIENT_FLOOR {
            return Err(ManifoldError::DegenerateSurface {
                surface: self.name.clone(),
                coords: x.as_slice().to_vec(),
            });
        }
        Ok(d)
    }
}

/// The one-form `dN_x` annihilating `T_x S`, as the oriented coordinate
/// differential of the constraint.
pub fn surface_oneform(s: &SwitchingSurface, x: &ChartPoint) -> Result<Cotangent> {
    surface_oneform_with_tolerance(s, x, SURFACE_TOLERANCE)
}

pub fn surface_oneform_with_tolerance(
    s: &SwitchingSurface,
    x: &ChartPoint,
    tolerance: f64,
) -> Result<Cotangent> {
    let value = s.value(&x.coords);
    if value.abs() > tolerance {
        return Err(ManifoldError::OffSurface {
            surface: s.name.clone(),
            coords: x.coords.as_slice().to_vec(),
            value,
        });
    }
    Ok(Cotangent::new(x.clone(), s.oriented_differential(&x.coords)?))
}

/// Metric pulled back along the affine map `s ↦ base + basis · s`.
#[derive(Clone, Debug)]
pub struct ParametrizedMetric {
    pub ambient: Arc<dyn Metric>,
    pub base: DVector<f64>,
    pub basis: DMatrix<f64>,
}

impl Metric for ParametrizedMetric {
    fn dimension(&self) -> usize {
        self.basis.ncols()
    }

    fn matrix(&self, s: &DVector<f64>) -> DMatrix<f64> {
        let x = &self.base + &self.basis * s;
        self.basis.transpose() * self.ambient.matrix(&x) * &self.basis
    }
}

/// Global affine parametrization of a flat switching surface.
#[derive(Clone, Debug)]
pub struct SurfaceChart {
    pub base: DVector<f64>,
    /// Orthonormal columns spanning the surface directions.
    pub basis: DMatrix<f64>,
    periods: Vec<Option<f64>>,
}

impl SurfaceChart {
    /// Chart for `Coordinate` and `Affine` constraints; `None` for custom
    /// constraints, which have no global parametrization here.
    pub fn for_surface(surface: &SwitchingSurface, ambient: &RiemannianManifold) -> Option<Self> {
        let n = ambient.dimension();
        match &surface.constraint {
            Constraint::Coordinate { index, level } => {
                let mut base = DVector::zeros(n);
                base[*index] = *level;
                let keep: Vec<usize> = (0..n).filter(|i| i != index).collect();
                let basis = DMatrix::from_fn(n, n - 1, |r, c| if r == keep[c] { 1.0 } else { 0.0 });
                let periods = keep.iter().map(|i| ambient.periods()[*i]).collect();
                Some(Self { base, basis, periods })
            }
            Constraint::Affine { normal, offset } => {
                let norm2 = normal.norm_squared();
                if norm2 == 0.0 || normal.len() != n {
                    return None;
                }
                let base = normal * (*offset / norm2);
                let unit = normal / norm2.sqrt();
                // complete `unit` to an orthonormal frame by Gram-Schmidt on the
                // coordinate axes and keep everything after it
                let mut frame: Vec<DVector<f64>> = vec![unit];
                for i in 0..n {
                    let mut e = DVector::zeros(n);
                    e[i] = 1.0;
                    for f in &frame {
                        e -= f * f.dot(&e);
                    }
                    if e.norm() > 1e-8 {
                        frame.push(e.normalize());
                    }
                    if frame.len() == n {
                        break;
                    }
                }
                let basis = DMatrix::from_columns(&frame[1..]);
                Some(Self {
                    base,
                    basis,
                    periods: vec![None; n - 1],
                })
            }
            Constraint::Custom(_) => None,
        }
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn embed(&self, s: &DVector<f64>) -> ChartPoint {
        ChartPoint::new(&self.base + &self.basis * s)
    }

    /// Surface coordinates of the orthogonal projection of `x`.
    pub fn project(&self, x: &ChartPoint) -> DVector<f64> {
        self.basis.transpose() * (&x.coords - &self.base)
    }

    /// The surface as a manifold with the induced metric.
    pub fn manifold(&self, ambient: &RiemannianManifold, name: &str) -> RiemannianManifold {
        RiemannianManifold::new(
            name,
            Arc::new(ParametrizedMetric {
                ambient: ambient.metric().clone(),
                base: self.base.clone(),
                basis: self.basis.clone(),
            }),
            self.periods.clone(),
            None,
        )
    }
}
