//! TOML run configuration: the hybrid system, boundary data and the
//! command-specific blocks.
//!
//! A run file may name a separate system file with `system = "path"`; its
//! tables are merged into the run file (a key present in both is an error).

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use thiserror::Error;

use crate::flow::{IntegratorOptions, DEFAULT_STEPS};
use crate::hybrid::{
    registered_field, registered_loss, AffineJump, ControlledField, HybridSystem, IdentityJump,
    JumpMap, LinearField, TerminalCost,
};
use crate::manifold::{
    ChartPoint, Constraint, EuclideanMetric, RiemannianManifold, SwitchingSurface,
};
use crate::needle::{sinusoidal_jump, NeedleSpec, DEFAULT_EPSILONS};
use crate::solver::{Method, SolverOptions, SteeringProblem, SwitchDecision};

/// Control box used when the config gives none.
pub const DEFAULT_CONTROL_BOUND: f64 = 50.0;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub manifold: ManifoldConfig,
    pub states: Vec<StateConfig>,
    #[serde(default)]
    pub surfaces: Vec<SurfaceConfig>,
    #[serde(default)]
    pub cost: CostConfig,
    pub horizon: HorizonConfig,
    pub boundary: BoundaryConfig,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ManifoldConfig {
    Euclidean {
        dim: usize,
        /// Coordinates with period 2π.
        #[serde(default)]
        periodic: Vec<bool>,
    },
    Torus {
        major: f64,
        minor: f64,
    },
    Sphere {
        radius: f64,
    },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateConfig {
    pub name: String,
    /// Rows of `A` for `ẋ = Ax + Bu`.
    pub a: Option<Vec<Vec<f64>>>,
    pub b: Option<Vec<Vec<f64>>>,
    /// Registered nonlinear field, instead of `a`/`b`.
    pub field: Option<String>,
    /// Registered running cost; defaults to `cost.loss`.
    pub loss: Option<String>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceConfig {
    pub name: Option<String>,
    pub from: String,
    pub to: String,
    /// `x[coordinate] = level`
    pub coordinate: Option<usize>,
    pub level: Option<f64>,
    /// `⟨normal, x⟩ = offset`
    pub normal: Option<Vec<f64>>,
    pub offset: Option<f64>,
    #[serde(default = "one")]
    pub orientation: f64,
    #[serde(default)]
    pub jump: JumpConfig,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum JumpConfig {
    Named(String),
    Map(JumpMapConfig),
}

impl Default for JumpConfig {
    fn default() -> Self {
        JumpConfig::Named("identity".into())
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum JumpMapConfig {
    /// `x ↦ Mx + c`
    Affine { matrix: Vec<Vec<f64>>, offset: Vec<f64> },
    /// `x_i ↦ x_i + amp_i sin(Σ_j freq_ij x_j + phase_i)`
    Sinusoidal {
        amp: Vec<f64>,
        freq: Vec<Vec<f64>>,
        phase: Vec<f64>,
    },
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub loss: Option<String>,
    #[serde(default)]
    pub terminal: TerminalConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum TerminalConfig {
    Named(String),
    Map(TerminalMapConfig),
}

impl Default for TerminalConfig {
    fn default() -> Self {
        TerminalConfig::Named("zero".into())
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TerminalMapConfig {
    /// `½ weight ‖x − target‖²`
    Quadratic { target: Vec<f64>, weight: f64 },
    /// `⟨covector, x⟩`
    Linear { covector: Vec<f64> },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonConfig {
    #[serde(default)]
    pub t0: f64,
    pub tf: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryConfig {
    /// Initial discrete state; defaults to the first one.
    pub q0: Option<String>,
    pub x0: PointConfig,
    pub xf: Option<PointConfig>,
}

/// Chart coordinates, or an ambient point inverted through the embedding
/// starting from `hint`.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum PointConfig {
    Chart(Vec<f64>),
    Ambient { ambient: Vec<f64>, hint: Vec<f64> },
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    /// `[lo, hi]` per control axis.
    pub bounds: Option<Vec<[f64; 2]>>,
    pub constant: Option<Vec<f64>>,
    /// Control CSV as written by `solve`, relative to the config file.
    pub file: Option<PathBuf>,
    /// Solve the steering problem and use its control.
    #[serde(default)]
    pub from_solver: bool,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iter: Option<usize>,
    pub grad_tol: Option<f64>,
    pub fd_step: Option<f64>,
    pub armijo_c: Option<f64>,
    pub max_halvings: Option<usize>,
    pub time_margin: Option<f64>,
    pub method: Option<Method>,
    pub cells: Option<usize>,
    pub realize_steps: Option<usize>,
    pub descent_iter: Option<usize>,
    pub polish_iter: Option<usize>,
    pub polish_tol: Option<f64>,
    pub pmp_grid: Option<usize>,
    pub pmp_samples: Option<usize>,
    pub initial: Option<InitialDecision>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialDecision {
    pub times: Vec<f64>,
    /// Surface-chart coordinates per switch; zeros if omitted.
    pub coords: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// Random one-switch oracle instances.
    #[serde(default = "default_instances")]
    pub instances: usize,
    pub epsilons: Option<Vec<f64>>,
    /// Needles on the configured system (single-switch systems only).
    #[serde(default)]
    pub needles: Vec<NeedleConfig>,
    #[serde(default = "default_cone_samples")]
    pub cone_samples: usize,
}

fn default_instances() -> usize {
    20
}

fn default_cone_samples() -> usize {
    10_000
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            instances: default_instances(),
            epsilons: None,
            needles: Vec::new(),
            cone_samples: default_cone_samples(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeedleConfig {
    pub t1: f64,
    pub u1: Vec<f64>,
}

/// Where the nominal control comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum ControlSource {
    Constant(DVector<f64>),
    File(PathBuf),
    Solver,
}

/// Chart value of a boundary point and, for ambient input, the distance
/// between the ambient point and the embedding of its preimage.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct BoundaryPoint {
    pub chart: Vec<f64>,
    pub ambient: Option<Vec<f64>>,
    pub residual: f64,
}

/// A parsed system with resolved boundary data.
#[derive(Clone, Debug)]
pub struct Setup {
    pub sys: HybridSystem,
    pub q0: usize,
    pub t0: f64,
    pub tf: f64,
    pub x0: BoundaryPoint,
    pub xf: Option<BoundaryPoint>,
}

impl Setup {
    pub fn x0_point(&self) -> ChartPoint {
        ChartPoint::from_slice(&self.x0.chart)
    }

    pub fn steering_problem(&self) -> Result<SteeringProblem> {
        let Some(xf) = &self.xf else {
            return invalid("the solver needs boundary.xf");
        };
        SteeringProblem::new(
            self.sys.clone(),
            self.x0_point(),
            ChartPoint::from_slice(&xf.chart),
            self.q0,
            self.t0,
            self.tf,
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

/// A run config together with the text it was read from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub run: RunConfig,
    /// Directory of the run file; relative paths resolve against it.
    pub dir: PathBuf,
    /// Contents of every file read, in load order.
    pub source: String,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_table(path: &Path, text: &str) -> Result<toml::Table> {
    toml::from_str(text).map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<LoadedConfig> {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut source = read(path)?;
    let mut table = parse_table(path, &source)?;
    if let Some(sys) = table.remove("system") {
        let Some(rel) = sys.as_str() else {
            return invalid("`system` must be a path");
        };
        let sys_path = dir.join(rel);
        let sys_text = read(&sys_path)?;
        let sys_table = parse_table(&sys_path, &sys_text)?;
        for (k, v) in sys_table {
            if table.contains_key(&k) {
                return invalid(format!("`{k}` is set in both the run file and {rel}"));
            }
            table.insert(k, v);
        }
        source.push_str(&sys_text);
    }
    let run: RunConfig = table.try_into().map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    let loaded = LoadedConfig { run, dir, source };
    if let Some(ControlSource::File(p)) = loaded.control_source()? {
        if !p.exists() {
            return invalid(format!("control file {} does not exist", p.display()));
        }
    }
    Ok(loaded)
}

pub fn parse(text: &str) -> Result<RunConfig> {
    toml::from_str(text).map_err(|source| ConfigError::Parse {
        path: PathBuf::from("<string>"),
        source,
    })
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return invalid(format!("{what} must be a non-empty rectangular matrix"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl ManifoldConfig {
    pub fn build(&self) -> Result<RiemannianManifold> {
        match self {
            ManifoldConfig::Euclidean { dim, periodic } => {
                if *dim == 0 {
                    return invalid("manifold dimension must be positive");
                }
                if !periodic.is_empty() && periodic.len() != *dim {
                    return invalid("`periodic` needs one entry per coordinate");
                }
                let periods = (0..*dim)
                    .map(|i| periodic.get(i).copied().unwrap_or(false).then_some(TAU))
                    .collect();
                Ok(RiemannianManifold::new(
                    "euclidean",
                    Arc::new(EuclideanMetric { dim: *dim }),
                    periods,
                    None,
                ))
            }
            ManifoldConfig::Torus { major, minor } => {
                if !(*minor > 0.0 && major > minor) {
                    return invalid("torus needs major > minor > 0");
                }
                Ok(RiemannianManifold::torus(*major, *minor))
            }
            ManifoldConfig::Sphere { radius } => {
                if !(*radius > 0.0) {
                    return invalid("sphere radius must be positive");
                }
                Ok(RiemannianManifold::sphere(*radius))
            }
        }
    }
}

impl JumpConfig {
    fn build(&self, dim: usize) -> Result<Arc<dyn JumpMap>> {
        match self {
            JumpConfig::Named(name) if name == "identity" => Ok(Arc::new(IdentityJump)),
            JumpConfig::Named(name) => invalid(format!("unknown jump '{name}'")),
            JumpConfig::Map(JumpMapConfig::Affine { matrix: m, offset }) => {
                let m = matrix(m, "jump matrix")?;
                if m.shape() != (dim, dim) || offset.len() != dim {
                    return invalid(format!("affine jump must be {dim}×{dim} with a {dim}-offset"));
                }
                Ok(Arc::new(AffineJump {
                    matrix: m,
                    offset: DVector::from_column_slice(offset),
                }))
            }
            JumpConfig::Map(JumpMapConfig::Sinusoidal { amp, freq, phase }) => {
                let c = matrix(freq, "jump frequencies")?;
                if amp.len() != dim || c.shape() != (dim, dim) || phase.len() != dim {
                    return invalid(format!(
                        "sinusoidal jump needs {dim} amplitudes and phases and {dim}×{dim} frequencies"
                    ));
                }
                let row_major = freq.iter().flatten().copied().collect();
                Ok(Arc::new(sinusoidal_jump(amp.clone(), row_major, phase.clone())))
            }
        }
    }
}

impl TerminalConfig {
    fn build(&self, dim: usize) -> Result<TerminalCost> {
        match self {
            TerminalConfig::Named(name) if name == "zero" || name == "none" => {
                Ok(TerminalCost::Zero)
            }
            TerminalConfig::Named(name) => invalid(format!("unknown terminal cost '{name}'")),
            TerminalConfig::Map(TerminalMapConfig::Quadratic { target, weight }) => {
                if target.len() != dim {
                    return invalid(format!("terminal target needs {dim} entries"));
                }
                Ok(TerminalCost::Quadratic {
                    target: DVector::from_column_slice(target),
                    weight: *weight,
                })
            }
            TerminalConfig::Map(TerminalMapConfig::Linear { covector }) => {
                if covector.len() != dim {
                    return invalid(format!("terminal covector needs {dim} entries"));
                }
                Ok(TerminalCost::Linear {
                    covector: DVector::from_column_slice(covector),
                })
            }
        }
    }
}

fn boundary_point(
    point: &PointConfig,
    manifold: &RiemannianManifold,
    what: &str,
) -> Result<BoundaryPoint> {
    let dim = manifold.dimension();
    match point {
        PointConfig::Chart(c) => {
            if c.len() != dim {
                return invalid(format!("{what} needs {dim} chart coordinates"));
            }
            Ok(BoundaryPoint {
                chart: c.clone(),
                ambient: None,
                residual: 0.0,
            })
        }
        PointConfig::Ambient { ambient, hint } => {
            let Some(emb) = manifold.embedding() else {
                return invalid(format!("{what}: ambient input needs an embedded manifold"));
            };
            if ambient.len() != emb.ambient_dim() || hint.len() != dim {
                return invalid(format!(
                    "{what}: ambient point needs {} entries and the hint {dim}",
                    emb.ambient_dim()
                ));
            }
            let (chart, residual) = emb.invert(ambient, hint);
            Ok(BoundaryPoint {
                chart,
                ambient: Some(ambient.clone()),
                residual,
            })
        }
    }
}

impl RunConfig {
    pub fn system(&self) -> Result<Setup> {
        let manifold = self.manifold.build()?;
        let n = manifold.dimension();
        if self.states.is_empty() {
            return invalid("at least one discrete state is required");
        }
        let mut states = Vec::new();
        let mut fields: Vec<Arc<dyn ControlledField>> = Vec::new();
        let mut losses = Vec::new();
        for s in &self.states {
            if states.contains(&s.name) {
                return invalid(format!("duplicate state '{}'", s.name));
            }
            let field: Arc<dyn ControlledField> = match (&s.a, &s.b, &s.field) {
                (Some(a), Some(b), None) => {
                    let a = matrix(a, "A")?;
                    let b = matrix(b, "B")?;
                    if a.shape() != (n, n) || b.nrows() != n {
                        return invalid(format!(
                            "state '{}': A must be {n}×{n} and B must have {n} rows",
                            s.name
                        ));
                    }
                    Arc::new(LinearField::new(a, b))
                }
                (None, None, Some(name)) => registered_field(name)
                    .ok_or_else(|| ConfigError::Invalid(format!("unknown field '{name}'")))?,
                _ => {
                    return invalid(format!(
                        "state '{}' needs either `a` and `b` or `field`",
                        s.name
                    ))
                }
            };
            if field.dim() != n {
                return invalid(format!("state '{}' has dimension {}, manifold {n}", s.name, field.dim()));
            }
            let loss_name = s.loss.as_deref().or(self.cost.loss.as_deref()).unwrap_or("zero");
            let loss = registered_loss(loss_name)
                .ok_or_else(|| ConfigError::Invalid(format!("unknown loss '{loss_name}'")))?;
            states.push(s.name.clone());
            fields.push(field);
            losses.push(loss);
        }
        let m = fields[0].control_dim();
        if fields.iter().any(|f| f.control_dim() != m) {
            return invalid("all states must share the control dimension");
        }
        let control_bounds: Vec<(f64, f64)> = match &self.control.bounds {
            Some(b) => b.iter().map(|[lo, hi]| (*lo, *hi)).collect(),
            None => vec![(-DEFAULT_CONTROL_BOUND, DEFAULT_CONTROL_BOUND); m],
        };
        if control_bounds.len() != m || control_bounds.iter().any(|(lo, hi)| !(lo < hi)) {
            return invalid(format!("control bounds need {m} intervals with lo < hi"));
        }

        let index = |name: &str| {
            states
                .iter()
                .position(|s| s == name)
                .ok_or_else(|| ConfigError::Invalid(format!("unknown state '{name}'")))
        };
        let mut surfaces = Vec::new();
        let mut jumps = Vec::new();
        for (k, s) in self.surfaces.iter().enumerate() {
            let constraint = match (s.coordinate, s.level, &s.normal, s.offset) {
                (Some(index), Some(level), None, None) if index < n => {
                    Constraint::Coordinate { index, level }
                }
                (None, None, Some(normal), Some(offset)) if normal.len() == n => {
                    Constraint::Affine {
                        normal: DVector::from_column_slice(normal),
                        offset,
                    }
                }
                _ => {
                    return invalid(format!(
                        "surface {k}: give `coordinate` < {n} and `level`, or an {n}-entry `normal` and `offset`"
                    ))
                }
            };
            if s.orientation == 0.0 {
                return invalid(format!("surface {k}: orientation must be ±1"));
            }
            let name = s.name.clone().unwrap_or_else(|| format!("S{}", k + 1));
            surfaces.push(
                SwitchingSurface::new(name, constraint, index(&s.from)?, index(&s.to)?)
                    .with_orientation(s.orientation),
            );
            jumps.push(s.jump.build(n)?);
        }
        let q0 = match &self.boundary.q0 {
            Some(q) => index(q)?,
            None => 0,
        };
        let (t0, tf) = (self.horizon.t0, self.horizon.tf);
        if !(tf > t0) {
            return invalid(format!("empty horizon [{t0}, {tf}]"));
        }
        let x0 = boundary_point(&self.boundary.x0, &manifold, "boundary.x0")?;
        let xf = self
            .boundary
            .xf
            .as_ref()
            .map(|p| boundary_point(p, &manifold, "boundary.xf"))
            .transpose()?;
        let terminal_cost = self.cost.terminal.build(n)?;
        let sys = HybridSystem {
            manifold,
            states,
            fields,
            surfaces,
            jumps,
            control_bounds,
            losses,
            terminal_cost,
        };
        let report = crate::hybrid::validate(&sys, &ChartPoint::from_slice(&x0.chart), q0);
        if !report.is_clean() {
            return invalid(format!("{:?}", report.violations));
        }
        Ok(Setup {
            sys,
            q0,
            t0,
            tf,
            x0,
            xf,
        })
    }

    pub fn integrator(&self) -> IntegratorOptions {
        IntegratorOptions {
            steps: self.integrator.steps.max(1),
        }
    }

    pub fn solver_options(&self, problem: &SteeringProblem) -> Result<SolverOptions> {
        let c = &self.solver;
        let d = SolverOptions::default();
        let mut o = SolverOptions {
            max_iter: c.max_iter.unwrap_or(d.max_iter),
            grad_tol: c.grad_tol.unwrap_or(d.grad_tol),
            fd_step: c.fd_step.unwrap_or(d.fd_step),
            armijo_c: c.armijo_c.unwrap_or(d.armijo_c),
            max_halvings: c.max_halvings.unwrap_or(d.max_halvings),
            time_margin: c.time_margin.unwrap_or(d.time_margin),
            method: c.method.unwrap_or(d.method),
            initial: None,
            cells: c.cells.unwrap_or(d.cells),
            realize_steps: c.realize_steps.unwrap_or(d.realize_steps),
            descent_iter: c.descent_iter.unwrap_or(d.descent_iter),
            polish_iter: c.polish_iter.unwrap_or(d.polish_iter),
            polish_tol: c.polish_tol.unwrap_or(d.polish_tol),
            pmp_grid: c.pmp_grid.unwrap_or(d.pmp_grid),
            pmp_samples: c.pmp_samples.unwrap_or(d.pmp_samples),
        };
        if !(o.fd_step > 0.0 && o.grad_tol > 0.0 && o.cells > 0 && o.pmp_grid > 1) {
            return invalid("solver: fd_step and grad_tol must be positive, cells ≥ 1, pmp_grid ≥ 2");
        }
        if let Some(init) = &c.initial {
            let base = problem.initial_decision();
            if init.times.len() != base.len() {
                return invalid(format!("solver.initial needs {} times", base.len()));
            }
            let coords = match &init.coords {
                Some(cs) => {
                    if cs.len() != base.len()
                        || cs.iter().zip(&base.coords).any(|(c, b)| c.len() != b.len())
                    {
                        return invalid("solver.initial.coords does not match the surfaces");
                    }
                    cs.iter().map(|c| DVector::from_column_slice(c)).collect()
                }
                None => base.coords.clone(),
            };
            o.initial = Some(SwitchDecision {
                surfaces: base.surfaces,
                coords,
                times: init.times.clone(),
            });
        }
        Ok(o)
    }

    pub fn epsilons(&self) -> Vec<f64> {
        self.verify
            .epsilons
            .clone()
            .unwrap_or_else(|| DEFAULT_EPSILONS.to_vec())
    }

    pub fn needles(&self) -> Vec<NeedleSpec> {
        self.verify
            .needles
            .iter()
            .map(|n| {
                NeedleSpec::new(n.t1, DVector::from_column_slice(&n.u1))
                    .with_epsilons(self.epsilons())
            })
            .collect()
    }
}

impl LoadedConfig {
    /// The configured control source; `None` if the file names none.
    pub fn control_source(&self) -> Result<Option<ControlSource>> {
        let c = &self.run.control;
        let given = c.constant.is_some() as u8 + c.file.is_some() as u8 + c.from_solver as u8;
        if given > 1 {
            return invalid("control: give at most one of `constant`, `file`, `from_solver`");
        }
        Ok(if let Some(v) = &c.constant {
            Some(ControlSource::Constant(DVector::from_column_slice(v)))
        } else if let Some(p) = &c.file {
            Some(ControlSource::File(self.dir.join(p)))
        } else if c.from_solver {
            Some(ControlSource::Solver)
        } else {
            None
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TORUS: &str = r#"
[manifold]
kind = "torus"
major = 1.0
minor = 0.5

[[states]]
name = "q0"
a = [[1.5, 0.0], [0.0, 1.0]]
b = [[1.0], [1.0]]

[[states]]
name = "q1"
a = [[5.0, 0.0], [0.0, 1.0]]
b = [[1.0], [1.0]]

[[surfaces]]
from = "q0"
to = "q1"
coordinate = 0
level = 0.0

[cost]
loss = "half_control_energy"

[horizon]
tf = 2.0

[boundary]
x0 = { ambient = [1.4117, -0.4367, -0.1478], hint = [-0.3, -0.3] }
xf = [0.5, 0.2]
"#;

    #[test]
    fn torus_config_builds() {
        let run = parse(TORUS).unwrap();
        let setup = run.system().unwrap();
        assert_eq!(setup.sys.states, vec!["q0", "q1"]);
        assert_eq!(setup.sys.control_bounds, vec![(-50.0, 50.0)]);
        assert_eq!(setup.sys.surfaces[0].name, "S1");
        assert!(setup.x0.residual < 1e-3);
        assert!((setup.x0.chart[0] + 0.3).abs() < 1e-3);
        assert!(setup.steering_problem().is_ok());
    }

    #[test]
    fn rejects_mixed_dynamics() {
        let text = TORUS.replacen("name = \"q0\"", "name = \"q0\"\nfield = \"pendulum\"", 1);
        let err = parse(&text).unwrap().system().unwrap_err();
        assert!(err.to_string().contains("either"), "{err}");
    }

    #[test]
    fn rejects_unknown_state() {
        let text = TORUS.replace("to = \"q1\"", "to = \"q7\"");
        assert!(parse(&text).unwrap().system().is_err());
    }

    #[test]
    fn rejects_unknown_key() {
        assert!(parse(&format!("{TORUS}\nbogus = 1\n")).is_err());
    }

    #[test]
    fn initial_override() {
        let run = parse(&format!("{TORUS}\n[solver]\ninitial = {{ times = [0.7] }}\n")).unwrap();
        let problem = run.system().unwrap().steering_problem().unwrap();
        let o = run.solver_options(&problem).unwrap();
        assert_eq!(o.initial.unwrap().times, vec![0.7]);
        let bad = parse(&format!("{TORUS}\n[solver]\ninitial = {{ times = [0.7, 0.9] }}\n"))
            .unwrap();
        assert!(bad.solver_options(&problem).is_err());
    }
}
