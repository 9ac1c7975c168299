//! Output files: CSV for dense series, JSON for reports. Every file starts
//! with a provenance header and is written through a temporary file and a
//! rename.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use hmp_core::hmp::{AdjointTrajectory, PmpReport};
use hmp_core::hybrid::{ControlSignal, HybridSystem, HybridTrajectory};
use nalgebra::DVector;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub type Result<T> = std::result::Result<T, String>;

/// Provenance recorded at the top of every output.
#[derive(Clone, Debug, Serialize)]
pub struct Header {
    pub tool: String,
    pub config_sha256: String,
    pub seed: u64,
}

impl Header {
    pub fn new(config_source: &str, seed: u64) -> Self {
        let digest = Sha256::digest(config_source.as_bytes());
        Self {
            tool: format!("hmp {}", env!("CARGO_PKG_VERSION")),
            config_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
            seed,
        }
    }

    fn line(&self) -> String {
        format!(
            "# {} config_sha256={} seed={}\n",
            self.tool, self.config_sha256, self.seed
        )
    }
}

pub struct Writer {
    dir: PathBuf,
    header: Header,
}

#[derive(Serialize)]
struct WithHeader<'a, T: Serialize> {
    header: &'a Header,
    #[serde(flatten)]
    body: &'a T,
}

impl Writer {
    pub fn new(dir: &Path, header: Header) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            header,
        })
    }

    fn atomic(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let target = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, &target)
        };
        write().map_err(|e| format!("cannot write {}: {e}", target.display()))
    }

    pub fn csv(&self, name: &str, columns: &[String], rows: &[Vec<String>]) -> Result<()> {
        let mut out = self.header.line().into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            let err = |e: csv::Error| e.to_string();
            w.write_record(columns).map_err(err)?;
            for r in rows {
                w.write_record(r).map_err(err)?;
            }
            w.flush().map_err(|e| e.to_string())?;
        }
        self.atomic(name, &out)
    }

    pub fn json<T: Serialize>(&self, name: &str, body: &T) -> Result<()> {
        let doc = WithHeader {
            header: &self.header,
            body,
        };
        let mut text = serde_json::to_string_pretty(&doc).map_err(|e| e.to_string())?;
        text.push('\n');
        self.atomic(name, text.as_bytes())
    }

    pub fn text(&self, name: &str, body: &str) -> Result<()> {
        let mut out = self.header.line();
        out.push_str(body);
        self.atomic(name, out.as_bytes())
    }
}

/// Shortest round-trip form; scientific outside `[1e-4, 1e15)`.
pub fn num(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn nums(v: &[f64]) -> impl Iterator<Item = String> + '_ {
    v.iter().map(|x| num(*x))
}

fn names(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}{i}"))
}

/// Columns: segment_index, q, t, chart coordinates, embedded coordinates
/// (when the manifold has an embedding), control.
pub fn trajectory_csv(
    w: &Writer,
    name: &str,
    sys: &HybridSystem,
    traj: &HybridTrajectory,
) -> Result<()> {
    let dim = traj.segments[0].points[0].dim();
    let m = traj.segments[0].controls.first().map_or(0, DVector::len);
    let emb = sys.manifold.embedding();
    let mut cols: Vec<String> = vec!["segment_index".into(), "q".into(), "t".into()];
    cols.extend(names("x", dim));
    if let Some(e) = emb {
        cols.extend(names("e", e.ambient_dim()));
    }
    cols.extend(names("u", m));
    let mut rows = Vec::new();
    for (s, seg) in traj.segments.iter().enumerate() {
        for (k, (t, p)) in seg.times.iter().zip(&seg.points).enumerate() {
            let mut r = vec![s.to_string(), sys.states[seg.state_id].clone(), num(*t)];
            r.extend(nums(p.coords.as_slice()));
            if let Some(e) = emb {
                r.extend(nums(&e.embed(p.coords.as_slice())));
            }
            let u = &seg.controls[k.min(seg.controls.len() - 1)];
            r.extend(nums(u.as_slice()));
            rows.push(r);
        }
    }
    w.csv(name, &cols, &rows)
}

/// Columns: k, t_s, x⁻, x⁺, surface, ⟨dN, f⟩.
pub fn events_csv(w: &Writer, sys: &HybridSystem, traj: &HybridTrajectory) -> Result<()> {
    let dim = traj.segments[0].points[0].dim();
    let mut cols: Vec<String> = vec!["k".into(), "t_s".into()];
    cols.extend(names("x_minus", dim));
    cols.extend(names("x_plus", dim));
    cols.push("surface".into());
    cols.push("dn_f".into());
    let rows = traj
        .events
        .iter()
        .enumerate()
        .map(|(k, ev)| {
            let mut r = vec![k.to_string(), num(ev.time)];
            r.extend(nums(ev.x_minus.coords.as_slice()));
            r.extend(nums(ev.x_plus.coords.as_slice()));
            r.push(sys.surfaces[ev.surface].name.clone());
            r.push(num(ev.dn_f));
            r
        })
        .collect::<Vec<_>>();
    w.csv("events.csv", &cols, &rows)
}

/// Columns: segment, t, p, H.
pub fn adjoint_csv(w: &Writer, adj: &AdjointTrajectory) -> Result<()> {
    let dim = adj.segments[0].covectors[0].len();
    let mut cols: Vec<String> = vec!["segment".into(), "t".into()];
    cols.extend(names("p", dim));
    cols.push("H".into());
    let mut rows = Vec::new();
    for (s, seg) in adj.segments.iter().enumerate() {
        for ((t, p), h) in seg.times.iter().zip(&seg.covectors).zip(&seg.hamiltonian) {
            let mut r = vec![s.to_string(), num(*t)];
            r.extend(nums(p.as_slice()));
            r.push(num(*h));
            rows.push(r);
        }
    }
    w.csv("adjoint.csv", &cols, &rows)
}

/// Columns: k, t_s, μ, |ΔH|, ⟨dN, f0⟩, jump direction residual.
pub fn switches_csv(w: &Writer, adj: &AdjointTrajectory, pmp: &PmpReport) -> Result<()> {
    let cols: Vec<String> = ["k", "t_s", "mu", "abs_delta_h", "dn_f0", "jump_residual"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = adj
        .switches
        .iter()
        .enumerate()
        .map(|(k, s)| {
            vec![
                k.to_string(),
                num(s.time),
                num(s.mu),
                num(s.hamiltonian_gap()),
                num(s.dn_f),
                num(pmp.jump_residuals.get(k).copied().unwrap_or(f64::NAN)),
            ]
        })
        .collect::<Vec<_>>();
    w.csv("switches.csv", &cols, &rows)
}

#[derive(Serialize)]
pub struct PmpSummary {
    pub max_min_violation: f64,
    pub switch_gaps: Vec<f64>,
    pub jump_residuals: Vec<f64>,
    pub samples: Vec<PmpSampleRow>,
}

#[derive(Serialize)]
pub struct PmpSampleRow {
    pub t: f64,
    pub segment: usize,
    pub h_nominal: f64,
    pub h_min: f64,
    pub u_min: Vec<f64>,
}

impl PmpSummary {
    pub fn new(pmp: &PmpReport) -> Self {
        Self {
            max_min_violation: pmp.max_min_violation,
            switch_gaps: pmp.switch_gaps.clone(),
            jump_residuals: pmp.jump_residuals.clone(),
            samples: pmp
                .samples
                .iter()
                .map(|s| PmpSampleRow {
                    t: s.time,
                    segment: s.segment,
                    h_nominal: s.h_nominal,
                    h_min: s.h_min,
                    u_min: s.u_min.iter().copied().collect(),
                })
                .collect(),
        }
    }
}

/// Columns: segment, t, u. One row per hold cell; `t` is the cell start.
pub fn control_csv(w: &Writer, controls: &[ControlSignal]) -> Result<()> {
    let m = controls[0].control_dim();
    let mut cols: Vec<String> = vec!["segment".into(), "t".into()];
    cols.extend(names("u", m));
    let mut rows = Vec::new();
    for (s, c) in controls.iter().enumerate() {
        for (t, u) in c.grid().iter().zip(c.values()) {
            let mut r = vec![s.to_string(), num(*t)];
            r.extend(nums(u.as_slice()));
            rows.push(r);
        }
    }
    w.csv("control.csv", &cols, &rows)
}

/// Reads a control CSV back into one signal per segment.
pub fn read_control_csv(path: &Path) -> Result<Vec<ControlSignal>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    let mut segments: Vec<(Vec<f64>, Vec<DVector<f64>>)> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| format!("{}: {e}", path.display()))?;
        let bad = || format!("{}: row {} is malformed", path.display(), line + 1);
        let fields: Vec<f64> = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        if fields.len() < 3 || fields[0] < 0.0 || fields[0].fract() != 0.0 {
            return Err(bad());
        }
        let s = fields[0] as usize;
        if s + 1 < segments.len() || s > segments.len() {
            return Err(format!("{}: segments must appear in order", path.display()));
        }
        if s == segments.len() {
            segments.push((Vec::new(), Vec::new()));
        }
        let (grid, values) = &mut segments[s];
        if grid.last().is_some_and(|t| fields[1] <= *t) {
            return Err(format!("{}: times must increase within a segment", path.display()));
        }
        grid.push(fields[1]);
        values.push(DVector::from_column_slice(&fields[2..]));
    }
    if segments.is_empty() {
        return Err(format!("{}: no control rows", path.display()));
    }
    Ok(segments
        .into_iter()
        .map(|(g, v)| ControlSignal::new(g, v))
        .collect())
}
