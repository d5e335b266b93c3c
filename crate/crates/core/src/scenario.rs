//! Scenario configuration and orchestration: TOML schema, built-in presets,
//! dotted-key overrides, run driver with CSV/VTK/state output, and the
//! manufactured-solution studies.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use serde::{Deserialize, Serialize};

use crate::energy::{EnergyParams, Forms, SpontaneousCurvature};
use crate::error::{LdgError, Result};
use crate::flow::{assemble_step, run_flow, solve_step, FlowConfig, FlowOperator, FlowState, SchurPreconditioner, StepRecord};
use crate::hessian::{LiftingConfig, LiftingMode, Mat2};
use crate::io::{export_surface, write_state};
use crate::mesh::{
    build_crease_mesh, build_rect_mesh, build_trapezoid_triangle_mesh, build_tri_rect_mesh, BoundarySelector, Mesh,
};
use crate::space::{flat_plate, interpolate, l2_error, BoundaryData, DGField, DGSpace};

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 6] = ["flat", "cylinder", "cigar", "helix", "climate", "origami"];

/// Mesh description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeshSpec {
    /// Uniform quadrilaterals.
    Rect { xmin: f64, xmax: f64, ymin: f64, ymax: f64, nx: usize, ny: usize },
    /// Uniform triangles (each rectangle split along a diagonal).
    TriRect { xmin: f64, xmax: f64, ymin: f64, ymax: f64, nx: usize, ny: usize },
    /// Curved quadrilaterals fitted to a parabolic crease through three points.
    Crease { xmin: f64, xmax: f64, ymin: f64, ymax: f64, nx: usize, ny: usize, crease: [[f64; 2]; 3] },
    /// Unit equilateral triangle split into three trapezoids, each refined `refinement x refinement`.
    Trapezoid { refinement: usize },
}

impl MeshSpec {
    pub fn build(&self, boundary: &BoundarySpec) -> Result<Mesh> {
        let sel = boundary.selector();
        match *self {
            MeshSpec::Rect { xmin, xmax, ymin, ymax, nx, ny } => build_rect_mesh(xmin, xmax, ymin, ymax, nx, ny, sel),
            MeshSpec::TriRect { xmin, xmax, ymin, ymax, nx, ny } => {
                build_tri_rect_mesh(xmin, xmax, ymin, ymax, nx, ny, sel)
            }
            MeshSpec::Crease { xmin, xmax, ymin, ymax, nx, ny, crease } => {
                if sel != BoundarySelector::None {
                    return Err(LdgError::Config("crease meshes support only a free boundary".into()));
                }
                build_crease_mesh(xmin, xmax, ymin, ymax, crease, nx, ny)
            }
            MeshSpec::Trapezoid { refinement } => build_trapezoid_triangle_mesh(refinement, sel),
        }
    }
}

/// Spontaneous curvature description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CurvatureSpec {
    Constant { value: Mat2 },
    /// One matrix per region id.
    PerRegion { values: Vec<Mat2> },
    /// `R(theta) diag(0, alpha) R(theta)^T`.
    Uniaxial {
        alpha: f64,
        #[serde(default)]
        theta: f64,
    },
}

impl CurvatureSpec {
    pub fn build(&self, mesh: &Mesh) -> Result<SpontaneousCurvature> {
        let check = |z: &Mat2| {
            if (z[0][1] - z[1][0]).abs() > 1e-14 * (1.0 + z[0][1].abs()) {
                Err(LdgError::Config(format!("spontaneous curvature {z:?} is not symmetric")))
            } else {
                Ok(())
            }
        };
        match self {
            CurvatureSpec::Constant { value } => {
                check(value)?;
                Ok(SpontaneousCurvature::constant(mesh, *value))
            }
            CurvatureSpec::PerRegion { values } => {
                values.iter().try_for_each(check)?;
                SpontaneousCurvature::per_region(mesh, values)
            }
            CurvatureSpec::Uniaxial { alpha, theta } => Ok(SpontaneousCurvature::rotated_uniaxial(mesh, *alpha, *theta)),
        }
    }
}

/// Boundary condition. Clamped edges take the flat embedding `y = x`, `grad y = [I; 0]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundarySpec {
    Free,
    Clamped { edges: BoundarySelector },
}

impl BoundarySpec {
    pub fn selector(&self) -> BoundarySelector {
        match self {
            BoundarySpec::Free => BoundarySelector::None,
            BoundarySpec::Clamped { edges } => *edges,
        }
    }
}

/// Where and how often to write results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// Write a VTK snapshot every this many steps; 0 keeps only the first and last.
    pub every: usize,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec { dir: PathBuf::from("out"), every: 0 }
    }
}

fn default_degree() -> usize {
    2
}

/// A complete run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default = "default_degree")]
    pub degree: usize,
    pub mesh: MeshSpec,
    pub curvature: CurvatureSpec,
    pub boundary: BoundarySpec,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub output: OutputSpec,
}

fn rect(xmin: f64, xmax: f64, ymin: f64, ymax: f64, nx: usize, ny: usize) -> MeshSpec {
    MeshSpec::Rect { xmin, xmax, ymin, ymax, nx, ny }
}

/// Built-in scenarios with the parameters of the reference experiments.
pub fn preset(name: &str) -> Result<ScenarioConfig> {
    let flow = |tau: f64| FlowConfig { tau, tol: 1e-4, ..FlowConfig::default() };
    let clamp_left = BoundarySpec::Clamped { edges: BoundarySelector::Left };
    let cfg = match name {
        "flat" => ScenarioConfig {
            name: name.into(),
            degree: 2,
            mesh: rect(-5.0, 5.0, -2.0, 2.0, 8, 4),
            curvature: CurvatureSpec::Constant { value: [[0.0; 2]; 2] },
            boundary: clamp_left,
            flow: flow(5e-3),
            output: OutputSpec::default(),
        },
        "cylinder" => ScenarioConfig {
            name: name.into(),
            degree: 2,
            mesh: rect(-5.0, 5.0, -2.0, 2.0, 16, 16),
            curvature: CurvatureSpec::Constant { value: [[1.0, 0.0], [0.0, 1.0]] },
            boundary: clamp_left,
            flow: flow(5e-3),
            output: OutputSpec::default(),
        },
        "cigar" => ScenarioConfig {
            name: name.into(),
            degree: 2,
            mesh: rect(-5.0, 5.0, -2.0, 2.0, 32, 32),
            curvature: CurvatureSpec::Constant { value: [[3.0, -2.0], [-2.0, 3.0]] },
            boundary: BoundarySpec::Free,
            flow: flow(5e-3),
            output: OutputSpec::default(),
        },
        "helix" => ScenarioConfig {
            name: name.into(),
            degree: 2,
            mesh: rect(-8.0, 8.0, -0.5, 0.5, 32, 32),
            curvature: CurvatureSpec::Constant { value: [[1.0, -1.5], [-1.5, 1.0]] },
            boundary: BoundarySpec::Free,
            flow: flow(1e-2),
            output: OutputSpec::default(),
        },
        "climate" => ScenarioConfig {
            name: name.into(),
            degree: 2,
            mesh: MeshSpec::Trapezoid { refinement: 8 },
            curvature: CurvatureSpec::Uniaxial { alpha: 3.0, theta: 0.0 },
            boundary: BoundarySpec::Clamped { edges: BoundarySelector::Bottom },
            flow: flow(1.0),
            output: OutputSpec::default(),
        },
        "origami" => ScenarioConfig {
            name: name.into(),
            degree: 2,
            mesh: MeshSpec::Crease {
                xmin: 0.0,
                xmax: 9.6,
                ymin: 0.0,
                ymax: 15.0,
                nx: 12,
                ny: 18,
                crease: [[0.0, 2.0], [9.6, 2.0], [4.8, 6.0]],
            },
            curvature: CurvatureSpec::PerRegion { values: vec![[[0.0, 0.0], [0.0, 0.5]], [[0.0, 0.0], [0.0, -0.5]]] },
            boundary: BoundarySpec::Free,
            flow: FlowConfig {
                lifting: LiftingConfig { mode: LiftingMode::Crease, ..LiftingConfig::default() },
                ..flow(1e-2)
            },
            output: OutputSpec::default(),
        },
        other => {
            return Err(LdgError::Config(format!("unknown preset '{other}' (expected one of {})", PRESETS.join(", "))))
        }
    };
    Ok(cfg)
}

/// Parse a raw override value as a TOML literal, falling back to a bare string.
fn parse_literal(raw: &str) -> toml::Value {
    let raw = raw.trim();
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl ScenarioConfig {
    /// Parse a TOML document. Errors carry line and column information.
    pub fn from_toml_str(text: &str) -> Result<ScenarioConfig> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| LdgError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<ScenarioConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            LdgError::Config(m) => LdgError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| LdgError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !PRESETS.contains(&self.name.as_str()) && self.name != "custom" {
            return Err(LdgError::Config(format!("unknown scenario name '{}'", self.name)));
        }
        if self.degree < 2 {
            return Err(LdgError::Config(format!("polynomial degree must be at least 2, got {}", self.degree)));
        }
        self.flow.validate().map_err(|e| LdgError::Config(e.to_string()))
    }

    /// Apply `key.path=value`, e.g. `flow.tau=1e-3` or `mesh.nx=64`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| LdgError::Config(format!("override '{assignment}' is not of the form key=value")))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(LdgError::Config(format!("malformed override key '{key}'")));
        }
        let mut root = toml::Value::try_from(&*self).map_err(|e| LdgError::Config(e.to_string()))?;
        let mut node = &mut root;
        for (i, part) in path.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| LdgError::Config(format!("override '{key}': '{}' is not a table", path[..i].join("."))))?;
            if i + 1 == path.len() {
                table.insert(part.to_string(), parse_literal(raw));
                break;
            }
            node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let updated: ScenarioConfig =
            root.try_into().map_err(|e: toml::de::Error| LdgError::Config(format!("override '{assignment}': {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}

/// Everything needed to start a flow.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub forms: Arc<Forms>,
    pub initial: DGField,
    pub curvature: SpontaneousCurvature,
}

/// Build mesh, space, forms, initial flat state and curvature for a configuration.
pub fn prepare(config: &ScenarioConfig) -> Result<Prepared> {
    config.validate()?;
    let mesh = Arc::new(config.mesh.build(&config.boundary)?);
    let space = Arc::new(DGSpace::new(mesh.clone(), config.degree)?);
    let params = EnergyParams { gamma0: config.flow.gamma0, gamma1: config.flow.gamma1 };
    let forms = Arc::new(Forms::new(space.clone(), config.flow.lifting, params)?);
    let initial = flat_plate(&space)?;
    let curvature = config.curvature.build(&mesh)?;
    Ok(Prepared { forms, initial, curvature })
}

pub const CSV_HEADER: &str = "step,pseudo_time,E_h,B_h,C_h,max_defect,increment_norm,cg_iters,wall_ms,E_full";

pub fn csv_row(r: &StepRecord) -> String {
    format!(
        "{},{:.10e},{:.15e},{:.15e},{:.15e},{:.15e},{:.15e},{},{:.3},{:.15e}",
        r.step, r.pseudo_time, r.energy, r.bending, r.cubic, r.max_defect, r.increment_norm, r.cg_iters, r.wall_ms,
        r.energy_full
    )
}

/// Parse rows written with [`CSV_HEADER`] (wall time is ignored).
pub fn parse_energies_csv(text: &str) -> Result<Vec<StepRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(LdgError::Config("energies.csv: unexpected header".into())),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || LdgError::Config(format!("energies.csv line {}: malformed row", i + 2));
            if f.len() != 10 {
                return Err(bad());
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
            Ok(StepRecord {
                step: f[0].trim().parse().map_err(|_| bad())?,
                pseudo_time: num(f[1])?,
                energy: num(f[2])?,
                bending: num(f[3])?,
                cubic: num(f[4])?,
                max_defect: num(f[5])?,
                increment_norm: num(f[6])?,
                cg_iters: f[7].trim().parse().map_err(|_| bad())?,
                wall_ms: num(f[8])?,
                tangency: 0.0,
                max_linearized_defect: 0.0,
                energy_full: num(f[9])?,
            })
        })
        .collect()
}

/// Result of [`run_scenario`].
#[derive(Debug)]
pub struct ScenarioOutcome {
    pub state: FlowState,
    pub out_dir: PathBuf,
}

/// Run a scenario, writing `energies.csv`, `snapshot_<step>.vtk`,
/// `final_state.bin` and the resolved `config.toml` into the output directory.
///
/// If the flow aborts, the last accepted iterate is dumped to `failed_state.bin`.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioOutcome> {
    let prepared = prepare(config)?;
    let out_dir = config.output.dir.clone();
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config.toml"), config.to_toml_string()?)?;
    let mut csv = BufWriter::new(File::create(out_dir.join("energies.csv"))?);
    writeln!(csv, "{CSV_HEADER}")?;
    csv.flush()?;
    let every = config.output.every;
    let mut last_accepted: Option<DGField> = None;
    let mut observer = |s: &FlowState| -> Result<()> {
        let r = s.last().expect("history has the initial record");
        writeln!(csv, "{}", csv_row(r))?;
        csv.flush()?;
        if s.step == 0 || (every > 0 && s.step.is_multiple_of(every)) {
            export_surface(&s.y, &out_dir.join(format!("snapshot_{}.vtk", s.step)))?;
        }
        if r.step.is_multiple_of(100) {
            info!("step {} E_h {:.6} defect {:.3e} cg {}", r.step, r.energy, r.max_defect, r.cg_iters);
        }
        last_accepted = Some(s.y.clone());
        Ok(())
    };
    let result = run_flow(prepared.forms, prepared.initial, &prepared.curvature, &config.flow, &mut observer);
    let state = match result {
        Ok(state) => state,
        Err(e) => {
            if let Some(y) = &last_accepted {
                write_state(y, &out_dir.join("failed_state.bin"))?;
            }
            return Err(e);
        }
    };
    let final_snapshot = out_dir.join(format!("snapshot_{}.vtk", state.step));
    if !final_snapshot.exists() {
        export_surface(&state.y, &final_snapshot)?;
    }
    write_state(&state.y, &out_dir.join("final_state.bin"))?;
    Ok(ScenarioOutcome { state, out_dir })
}

/// Manufactured studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    /// `||H_h[I_h v] - D^2 v||_{L^2}` for `v = (sin x1, x1 x2, cos x2)`.
    HessianConvergence,
    /// `||I_h v - v||_{L^2}` for the same `v`.
    Interpolation,
    /// Unpreconditioned Schur CG iterations of the first cylinder step.
    CgScaling,
}

impl std::str::FromStr for StudyKind {
    type Err = LdgError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hessian_convergence" => Ok(StudyKind::HessianConvergence),
            "interpolation" => Ok(StudyKind::Interpolation),
            "cg_scaling" => Ok(StudyKind::CgScaling),
            other => Err(LdgError::Config(format!(
                "unknown study '{other}' (expected hessian_convergence, interpolation or cg_scaling)"
            ))),
        }
    }
}

/// One refinement level of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub level: usize,
    pub elements: usize,
    pub h_max: f64,
    pub value: f64,
    /// `value[level - 1] / value[level]`.
    pub ratio: Option<f64>,
}

fn manufactured(x: [f64; 2]) -> [f64; 3] {
    [x[0].sin(), x[0] * x[1], x[1].cos()]
}

/// Exact Hessians of [`manufactured`], per component.
fn manufactured_hessian(x: [f64; 2]) -> [Mat2; 3] {
    [[[-x[0].sin(), 0.0], [0.0, 0.0]], [[0.0, 1.0], [1.0, 0.0]], [[0.0, 0.0], [0.0, -x[1].cos()]]]
}

/// `||H_h[I_h v] - D^2 v||_{L^2}` on a uniform `n x n` mesh of the unit square.
pub fn hessian_error(n: usize) -> Result<(usize, f64, f64)> {
    let mesh = Arc::new(build_rect_mesh(0.0, 1.0, 0.0, 1.0, n, n, BoundarySelector::None)?);
    let space = Arc::new(DGSpace::new(mesh.clone(), 2)?);
    let v = interpolate(&space, manufactured, None)?;
    let h = crate::hessian::discrete_hessian(&v, LiftingConfig::default())?;
    let mut acc = 0.0;
    for e in 0..mesh.num_elements() {
        let cache = space.element(e);
        for (q, (x, w)) in cache.points.iter().zip(&cache.weights).enumerate() {
            let exact = manufactured_hessian(*x);
            for (c, ex) in exact.iter().enumerate() {
                let d = h.value(e, c, q);
                let diff = [[d[0][0] - ex[0][0], d[0][1] - ex[0][1]], [d[1][0] - ex[1][0], d[1][1] - ex[1][1]]];
                acc += w * crate::hessian::frob(&diff, &diff);
            }
        }
    }
    Ok((mesh.num_elements(), mesh.h_max(), acc.sqrt()))
}

fn interpolation_error(n: usize) -> Result<(usize, f64, f64)> {
    let mesh = Arc::new(build_rect_mesh(0.0, 1.0, 0.0, 1.0, n, n, BoundarySelector::None)?);
    let space = Arc::new(DGSpace::new(mesh.clone(), 2)?);
    let v = interpolate(&space, manufactured, None)?;
    Ok((mesh.num_elements(), mesh.h_max(), l2_error(&v, manufactured)))
}

/// Cylinder configuration on an `nx x ny` mesh.
pub fn cylinder_config(nx: usize, ny: usize) -> ScenarioConfig {
    let mut c = preset("cylinder").expect("built-in preset");
    c.mesh = rect(-5.0, 5.0, -2.0, 2.0, nx, ny);
    c
}

/// First-step Schur CG iteration count of a scenario, started from `lambda = 0`.
pub fn first_step_cg_iterations(config: &ScenarioConfig) -> Result<(usize, f64)> {
    let p = prepare(config)?;
    let op = FlowOperator::new(p.forms.clone(), &config.flow)?;
    let hy = p.forms.hessian(&p.initial);
    let sys = assemble_step(&op, &p.initial, &hy, &p.curvature)?;
    let sol = solve_step(&sys, &config.flow, None)?;
    Ok((sol.cg_iters, p.forms.space().mesh().h_min()))
}

/// Run a study over `levels >= 2` uniform refinements.
pub fn manufactured_study(kind: StudyKind, levels: usize) -> Result<Vec<StudyRow>> {
    if levels < 2 {
        return Err(LdgError::InvalidArgument("a study needs at least two levels".into()));
    }
    let mut rows: Vec<StudyRow> = Vec::with_capacity(levels);
    for level in 0..levels {
        let (elements, h_max, value) = match kind {
            StudyKind::HessianConvergence => hessian_error(2 << level)?,
            StudyKind::Interpolation => interpolation_error(2 << level)?,
            StudyKind::CgScaling => {
                let n = 8 << level;
                let mut cfg = cylinder_config(n, n);
                cfg.flow.schur_preconditioner = SchurPreconditioner::None;
                let (iters, _) = first_step_cg_iterations(&cfg)?;
                let h = ((10.0 / n as f64).powi(2) + (4.0 / n as f64).powi(2)).sqrt();
                (n * n, h, iters as f64)
            }
        };
        let ratio = rows.last().map(|p| match kind {
            StudyKind::CgScaling => value / p.value,
            _ => p.value / value,
        });
        rows.push(StudyRow { level, elements, h_max, value, ratio });
    }
    Ok(rows)
}

/// CSV rendering of a study.
pub fn study_csv(kind: StudyKind, rows: &[StudyRow]) -> String {
    let label = match kind {
        StudyKind::HessianConvergence => "hessian_l2_error",
        StudyKind::Interpolation => "l2_error",
        StudyKind::CgScaling => "cg_iterations",
    };
    let mut s = format!("level,elements,h_max,{label},ratio\n");
    for r in rows {
        let ratio = r.ratio.map(|v| format!("{v:.6}")).unwrap_or_default();
        s.push_str(&format!("{},{},{:.6e},{:.10e},{}\n", r.level, r.elements, r.h_max, r.value, ratio));
    }
    s
}

/// Boundary data used for clamped scenarios.
pub fn clamped_data() -> BoundaryData {
    BoundaryData::flat()
}
