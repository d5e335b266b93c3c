//! Semi-implicit discrete H^2 gradient flow with linearized isometry
//! constraints enforced by piecewise constant Lagrange multipliers.
//!
//! Each step solves the saddle system
//!
//! ```text
//! (tau^-1 M + A) dy + B_n^T lambda = l[y^n] - a(y^n, .)
//!                 B_n dy           = 0
//! ```
//!
//! by conjugate gradients on the Schur complement `B_n A^-1 B_n^T`, where the
//! scalar operator `tau^-1 M + A` is factored once per run and shared by the
//! three components.

use std::sync::Arc;
use std::time::Instant;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::energy::{defect_of, EnergyParams, EnergyReport, Forms, MultiplierField, SpontaneousCurvature};
use crate::error::{LdgError, Result};
use crate::hessian::{DiscreteHessian, LiftingConfig, Mat2};
use nalgebra::{DMatrix, Matrix3};

use crate::linalg::{dot, norm, BlockSparse, EnvelopeCholesky};
use crate::space::{DGField, DGSpace};

/// Parameters of one flow run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub tau: f64,
    /// Stop once `tau^-1 |E_h[y^{n+1}] - E_h[y^n]| <= tol`.
    pub tol: f64,
    pub max_steps: usize,
    pub gamma0: f64,
    pub gamma1: f64,
    /// Weight of the L^2 term in the metric; `None` picks 1 without Dirichlet edges and 0 otherwise.
    pub l2_weight: Option<f64>,
    pub cg_rel_tol: f64,
    pub cg_max_iters: usize,
    /// Warn when the max isometry defect exceeds this.
    pub defect_budget: Option<f64>,
    /// Abort when a step increases the energy beyond `1e-8 (1 + |E_h|)`.
    pub abort_on_energy_increase: bool,
    pub lifting: LiftingConfig,
    pub schur_preconditioner: SchurPreconditioner,
}

/// Preconditioner for the Schur complement CG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchurPreconditioner {
    /// Plain CG.
    None,
    /// `B D^-1 B^T` with `D` the element-diagonal blocks of `tau^-1 M + A`;
    /// block diagonal with one `3 x 3` block per element.
    #[default]
    ElementBlock,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            tau: 5e-3,
            tol: 1e-4,
            max_steps: 100_000,
            gamma0: 1.0,
            gamma1: 1.0,
            l2_weight: None,
            cg_rel_tol: 1e-8,
            cg_max_iters: 20_000,
            defect_budget: None,
            abort_on_energy_increase: true,
            lifting: LiftingConfig::default(),
            schur_preconditioner: SchurPreconditioner::default(),
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LdgError::InvalidArgument(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if !(self.cg_rel_tol > 0.0 && self.cg_rel_tol < 1.0) {
            return bad(format!("cg_rel_tol must lie in (0, 1), got {}", self.cg_rel_tol));
        }
        if let Some(w) = self.l2_weight {
            if !(w >= 0.0) {
                return bad(format!("l2_weight must be nonnegative, got {w}"));
            }
        }
        Ok(())
    }

    pub fn energy_params(&self) -> EnergyParams {
        EnergyParams { gamma0: self.gamma0, gamma1: self.gamma1 }
    }

    /// Step-size independent slack for the per-step energy decrease test.
    pub fn energy_slack(energy: f64) -> f64 {
        1e-8 * (1.0 + energy.abs())
    }
}

/// One row of the run history. Step 0 describes the initial state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub pseudo_time: f64,
    /// `E_h = B_h - C_h`.
    pub energy: f64,
    pub bending: f64,
    pub cubic: f64,
    pub max_defect: f64,
    /// `||dy||_{H^2_h}` (metric including the L^2 weight).
    pub increment_norm: f64,
    pub cg_iters: usize,
    pub wall_ms: f64,
    /// `||B_n dy|| / (||B_n|| ||dy||)` in coefficient norms.
    pub tangency: f64,
    /// `max_T |L[dy; y^n](x_T)|_F`.
    pub max_linearized_defect: f64,
    /// `E_h + 1/2 int |Z|^2`, the energy of the unreduced functional.
    pub energy_full: f64,
}

/// Pointwise diagnostics of an accepted step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepChecks {
    /// `1 - d <= |d_i y|^2 <= 1 + d` and `|d_1 y . d_2 y| <= d` with `d` the max defect.
    pub constraint_bounds: bool,
    /// `D[y^{n+1}] <= D[y^n] + |I[dy]| + |L[dy; y^n]|` at every barycenter.
    pub defect_growth: bool,
    /// `E_{n+1} + (2 tau)^-1 sum ||dy||^2 <= E_0` within `1e-6 |E_0| + 1e-10`.
    pub stability_ledger: bool,
}

/// Mutable state of a run.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub step: usize,
    pub tau: f64,
    pub y: DGField,
    pub lambda: MultiplierField,
    /// Multiplier coordinates in the orthonormal basis, reused as CG warm start.
    pub lambda_coords: Vec<f64>,
    pub history: Vec<StepRecord>,
    pub checks: Vec<StepChecks>,
    pub converged: bool,
    /// Running `(2 tau)^-1 sum ||dy||^2`.
    pub dissipation: f64,
}

impl FlowState {
    pub fn new(y: DGField, tau: f64) -> FlowState {
        let n = y.space().mesh().num_elements();
        FlowState {
            step: 0,
            tau,
            y,
            lambda: MultiplierField::zeros(n),
            lambda_coords: vec![0.0; 3 * n],
            history: Vec::new(),
            checks: Vec::new(),
            converged: false,
            dissipation: 0.0,
        }
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.history.last()
    }

    pub fn energies(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.energy).collect()
    }
}

/// Step-independent part of the saddle system: forms, metric, and the factored
/// scalar operator `tau^-1 M + A`.
#[derive(Debug, Clone)]
pub struct FlowOperator {
    forms: Arc<Forms>,
    tau: f64,
    l2_weight: f64,
    metric: BlockSparse,
    matrix: BlockSparse,
    factor: EnvelopeCholesky,
    /// Inverses of the element-diagonal blocks of `matrix`.
    element_inverses: Vec<DMatrix<f64>>,
}

impl FlowOperator {
    pub fn new(forms: Arc<Forms>, config: &FlowConfig) -> Result<FlowOperator> {
        config.validate()?;
        let clamped = forms.clamped();
        let l2_weight = config.l2_weight.unwrap_or(if clamped { 0.0 } else { 1.0 });
        let metric = forms.metric_matrix(l2_weight);
        let matrix = metric.linear_combination(1.0 / config.tau, &forms.a_matrix(), 1.0);
        let factor = EnvelopeCholesky::factor(&matrix).map_err(|e| match e {
            LdgError::Singular(m) => LdgError::Singular(format!(
                "{m}; the flow operator is not positive definite (a free plate needs l2_weight > 0)"
            )),
            other => other,
        })?;
        debug!("flow operator: dim {} envelope {}", factor.dim(), factor.envelope_size());
        let bs = matrix.block_size();
        let element_inverses = (0..matrix.num_blocks())
            .map(|i| {
                let (_, block) = matrix.block_row(i).iter().find(|(j, _)| *j == i).expect("diagonal block");
                DMatrix::from_row_slice(bs, bs, block)
                    .cholesky()
                    .map(|c| c.inverse())
                    .ok_or_else(|| LdgError::Singular(format!("element {i}: diagonal block of the flow operator")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FlowOperator { forms, tau: config.tau, l2_weight, metric, matrix, factor, element_inverses })
    }

    pub fn forms(&self) -> &Arc<Forms> {
        &self.forms
    }

    pub fn space(&self) -> &Arc<DGSpace> {
        self.forms.space()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn l2_weight(&self) -> f64 {
        self.l2_weight
    }

    /// The scalar matrix `tau^-1 M + A`.
    pub fn matrix(&self) -> &BlockSparse {
        &self.matrix
    }

    /// The scalar metric matrix `M`.
    pub fn metric(&self) -> &BlockSparse {
        &self.metric
    }

    fn per_component(&self, x: &[f64], f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
        let n = self.space().scalar_dofs();
        let mut out = Vec::with_capacity(3 * n);
        for c in 0..3 {
            out.extend(f(&x[c * n..(c + 1) * n]));
        }
        out
    }

    /// `(tau^-1 M + A)^-1 b` for a vector field right-hand side.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.per_component(b, |x| self.factor.solve(x))
    }

    /// `(tau^-1 M + A) x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.per_component(x, |v| self.matrix.matvec(v))
    }

    /// `||v||_{H^2_h}` of homogeneous coefficients.
    pub fn metric_norm(&self, v: &[f64]) -> f64 {
        dot(v, &self.per_component(v, |x| self.metric.matvec(x))).max(0.0).sqrt()
    }
}

/// Constraint matrix `B_n`: block diagonal with one `3 x 3 nb` block per element.
#[derive(Debug, Clone)]
pub struct ConstraintMatrix {
    nb: usize,
    scalar_dofs: usize,
    /// `blocks[t][c * nb + j]` holds the three rows of column `(c, t, j)`.
    blocks: Vec<Vec<[f64; 3]>>,
}

impl ConstraintMatrix {
    pub fn assemble(forms: &Forms, y: &DGField) -> ConstraintMatrix {
        use rayon::prelude::*;
        let space = forms.space();
        let blocks = (0..space.mesh().num_elements()).into_par_iter().map(|t| forms.constraint_block(y, t)).collect();
        ConstraintMatrix { nb: space.dofs_per_element(), scalar_dofs: space.scalar_dofs(), blocks }
    }

    pub fn rows(&self) -> usize {
        3 * self.blocks.len()
    }

    pub fn cols(&self) -> usize {
        3 * self.scalar_dofs
    }

    fn col(&self, c: usize, t: usize, j: usize) -> usize {
        c * self.scalar_dofs + t * self.nb + j
    }

    /// `B x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows()];
        for (t, blk) in self.blocks.iter().enumerate() {
            for c in 0..3 {
                for j in 0..self.nb {
                    let v = x[self.col(c, t, j)];
                    let r = blk[c * self.nb + j];
                    for a in 0..3 {
                        out[3 * t + a] += r[a] * v;
                    }
                }
            }
        }
        out
    }

    /// `B^T m`.
    pub fn apply_transpose(&self, m: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols()];
        for (t, blk) in self.blocks.iter().enumerate() {
            for c in 0..3 {
                for j in 0..self.nb {
                    let r = blk[c * self.nb + j];
                    out[self.col(c, t, j)] = r[0] * m[3 * t] + r[1] * m[3 * t + 1] + r[2] * m[3 * t + 2];
                }
            }
        }
        out
    }

    /// Inverses of the element blocks of `B D^-1 B^T` for element-diagonal
    /// matrices `D^-1` shared by the three components.
    fn element_schur_inverses(&self, d_inv: &[DMatrix<f64>]) -> Vec<Matrix3<f64>> {
        let nb = self.nb;
        self.blocks
            .iter()
            .zip(d_inv)
            .map(|(blk, dinv)| {
                let mut p = Matrix3::<f64>::zeros();
                for c in 0..3 {
                    let rows = &blk[c * nb..(c + 1) * nb];
                    for a in 0..3 {
                        for j in 0..nb {
                            let mut w = 0.0;
                            for k in 0..nb {
                                w += dinv[(j, k)] * rows[k][a];
                            }
                            for b in 0..3 {
                                p[(b, a)] += rows[j][b] * w;
                            }
                        }
                    }
                }
                p.try_inverse().unwrap_or_else(Matrix3::identity)
            })
            .collect()
    }

    /// Spectral norm, the max over the element blocks.
    pub fn spectral_norm(&self) -> f64 {
        let mut best: f64 = 0.0;
        for blk in &self.blocks {
            let mut g = nalgebra::Matrix3::<f64>::zeros();
            for r in blk {
                for a in 0..3 {
                    for b in 0..3 {
                        g[(a, b)] += r[a] * r[b];
                    }
                }
            }
            let ev = g.symmetric_eigenvalues();
            best = best.max(ev.max());
        }
        best.max(0.0).sqrt()
    }

    /// Dense copy, for tests and oracles.
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.rows(), self.cols());
        for (t, blk) in self.blocks.iter().enumerate() {
            for c in 0..3 {
                for j in 0..self.nb {
                    for a in 0..3 {
                        m[(3 * t + a, self.col(c, t, j))] = blk[c * self.nb + j][a];
                    }
                }
            }
        }
        m
    }
}

/// Step-dependent saddle system.
#[derive(Debug, Clone)]
pub struct SaddleSystem<'a> {
    pub operator: &'a FlowOperator,
    pub constraints: ConstraintMatrix,
    /// `l[y^n](.) - a(y^n, .)` on homogeneous basis functions.
    pub load: Vec<f64>,
}

impl SaddleSystem<'_> {
    /// `S m = B A^-1 B^T m`.
    pub fn schur_apply(&self, m: &[f64]) -> Vec<f64> {
        self.constraints.apply(&self.operator.solve(&self.constraints.apply_transpose(m)))
    }

    pub fn schur_dim(&self) -> usize {
        self.constraints.rows()
    }
}

/// Solution of one saddle system.
#[derive(Debug, Clone)]
pub struct StepSolution {
    pub increment: Vec<f64>,
    pub lambda_coords: Vec<f64>,
    pub cg_iters: usize,
    pub cg_residual: f64,
}

/// Cached Dirichlet offset and the Hessian it induces.
fn hessian_of(forms: &Forms, y: &DGField, offset: Option<&[Mat2]>) -> DiscreteHessian {
    forms.table().apply(y.coefficients(), offset)
}

/// Assemble `B_n` and the load at `y`, whose discrete Hessian is `hy`.
pub fn assemble_step<'a>(
    operator: &'a FlowOperator,
    y: &DGField,
    hy: &DiscreteHessian,
    z: &SpontaneousCurvature,
) -> Result<SaddleSystem<'a>> {
    let forms = operator.forms();
    let constraints = ConstraintMatrix::assemble(forms, y);
    let ell = forms.ell_vector(y, hy, z);
    let a = forms.a_vector(y, hy)?;
    let load = ell.iter().zip(&a).map(|(l, a)| l - a).collect();
    Ok(SaddleSystem { operator, constraints, load })
}

/// Schur complement CG for the multiplier, then back substitution.
///
/// Since the residual of `S lambda = B A^-1 f` equals `B dy(lambda)`, the
/// iteration tracks `A^-1 B^T lambda` alongside `lambda` and stops once the
/// residual is below `cg_rel_tol` relative both to the right-hand side and
/// to `||B|| ||dy||`. The second test is waived once the residual has dropped
/// a further factor `1e-4` below the first, which only matters close to a
/// constrained equilibrium where `dy` vanishes. The iteration is
/// preconditioned according to `config.schur_preconditioner`.
pub fn solve_step(sys: &SaddleSystem, config: &FlowConfig, warm_start: Option<&[f64]>) -> Result<StepSolution> {
    let n = sys.schur_dim();
    let af = sys.operator.solve(&sys.load);
    let rhs = sys.constraints.apply(&af);
    let gnorm = norm(&rhs);
    if gnorm == 0.0 {
        return Ok(StepSolution { increment: af, lambda_coords: vec![0.0; n], cg_iters: 0, cg_residual: 0.0 });
    }
    let tol = config.cg_rel_tol;
    let bnorm = sys.constraints.spectral_norm();
    let mut lambda = match warm_start {
        Some(w) if w.len() == n => w.to_vec(),
        _ => vec![0.0; n],
    };
    // u = A^-1 B^T lambda, so that dy = af - u and r = B dy
    let mut u = if lambda.iter().any(|v| *v != 0.0) {
        sys.operator.solve(&sys.constraints.apply_transpose(&lambda))
    } else {
        vec![0.0; af.len()]
    };
    let dy_norm = |u: &[f64]| af.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let done = |rn: f64, u: &[f64]| rn <= tol * gnorm && (rn <= tol * bnorm * dy_norm(u) || rn <= 1e-4 * tol * gnorm);
    let precond: Option<Vec<Matrix3<f64>>> = match config.schur_preconditioner {
        SchurPreconditioner::None => None,
        SchurPreconditioner::ElementBlock => Some(sys.constraints.element_schur_inverses(&sys.operator.element_inverses)),
    };
    let apply_precond = |r: &[f64]| -> Vec<f64> {
        match &precond {
            None => r.to_vec(),
            Some(blocks) => {
                let mut z = vec![0.0; r.len()];
                for (t, p) in blocks.iter().enumerate() {
                    let v = p * nalgebra::Vector3::new(r[3 * t], r[3 * t + 1], r[3 * t + 2]);
                    z[3 * t..3 * t + 3].copy_from_slice(v.as_slice());
                }
                z
            }
        }
    };
    let bu = sys.constraints.apply(&u);
    let mut r: Vec<f64> = rhs.iter().zip(&bu).map(|(g, b)| g - b).collect();
    let mut rnorm = norm(&r);
    let mut iterations = 0;
    if !done(rnorm, &u) {
        let mut z = apply_precond(&r);
        let mut rz = dot(&r, &z);
        let mut p = z.clone();
        loop {
            if iterations == config.cg_max_iters {
                let residual = rnorm / gnorm;
                warn!("Schur CG stalled at relative residual {residual:.3e}; try a smaller tau or a looser cg_rel_tol");
                return Err(LdgError::CgNotConverged { iterations, residual });
            }
            iterations += 1;
            let w = sys.operator.solve(&sys.constraints.apply_transpose(&p));
            let sp = sys.constraints.apply(&w);
            let pap = dot(&p, &sp);
            if !(pap > 0.0) {
                return Err(LdgError::IndefiniteSchur { iteration: iterations, curvature: pap / dot(&p, &p) });
            }
            let alpha = rz / pap;
            for i in 0..n {
                lambda[i] += alpha * p[i];
                r[i] -= alpha * sp[i];
            }
            for (ui, wi) in u.iter_mut().zip(&w) {
                *ui += alpha * wi;
            }
            rnorm = norm(&r);
            if done(rnorm, &u) {
                break;
            }
            z = apply_precond(&r);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
    }
    let bt = sys.constraints.apply_transpose(&lambda);
    let rhs2: Vec<f64> = sys.load.iter().zip(&bt).map(|(f, b)| f - b).collect();
    let increment = sys.operator.solve(&rhs2);
    Ok(StepSolution { increment, lambda_coords: lambda, cg_iters: iterations, cg_residual: rnorm / gnorm })
}

fn barycenter_grads(y: &DGField) -> Vec<[[f64; 2]; 3]> {
    (0..y.space().mesh().num_elements()).map(|e| y.eval_center(e).grad).collect()
}

fn constraint_bounds_hold(grads: &[[[f64; 2]; 3]], delta: f64) -> bool {
    let slack = 1e-12;
    grads.iter().all(|g| {
        let d1: f64 = (0..3).map(|c| g[c][0] * g[c][0]).sum();
        let d2: f64 = (0..3).map(|c| g[c][1] * g[c][1]).sum();
        let d12: f64 = (0..3).map(|c| g[c][0] * g[c][1]).sum();
        [d1, d2].iter().all(|d| (d - 1.0).abs() <= delta + slack) && d12.abs() <= delta + slack
    })
}

fn record(
    step: usize,
    tau: f64,
    rep: &EnergyReport,
    shift: f64,
    increment_norm: f64,
    cg_iters: usize,
    wall_ms: f64,
    tangency: f64,
    max_linearized_defect: f64,
) -> StepRecord {
    StepRecord {
        step,
        pseudo_time: step as f64 * tau,
        energy: rep.total,
        bending: rep.bending,
        cubic: rep.cubic,
        max_defect: rep.max_defect,
        increment_norm,
        cg_iters,
        wall_ms,
        tangency,
        max_linearized_defect,
        energy_full: rep.total + shift,
    }
}

/// Run the flow from `initial` until the stopping rule fires or `max_steps`
/// is reached. `observer` sees the state after the initial evaluation and
/// after every accepted step; an error from it aborts the run.
pub fn run_flow(
    forms: Arc<Forms>,
    initial: DGField,
    z: &SpontaneousCurvature,
    config: &FlowConfig,
    observer: &mut dyn FnMut(&FlowState) -> Result<()>,
) -> Result<FlowState> {
    config.validate()?;
    if !Arc::ptr_eq(initial.space(), forms.space()) {
        return Err(LdgError::InvalidArgument("initial field lives on a different space".into()));
    }
    let operator = FlowOperator::new(forms.clone(), config)?;
    let mesh = forms.space().mesh().clone();
    let shift = z.energy_shift(&mesh);
    let offset: Option<Vec<Mat2>> = match initial.boundary_data() {
        Some(d) if mesh.has_dirichlet() => Some(forms.table().dirichlet_offset(d)),
        _ => None,
    };
    let offset = offset.as_deref();

    let mut state = FlowState::new(initial, config.tau);
    let start = Instant::now();
    let mut hy = hessian_of(&forms, &state.y, offset);
    let mut rep = forms.report_with(&state.y, &hy, z)?;
    if rep.max_defect > 1e-10 {
        warn!("initial state has isometry defect {:.3e}", rep.max_defect);
    }
    let e0 = rep.total;
    state.history.push(record(0, config.tau, &rep, shift, 0.0, 0, start.elapsed().as_secs_f64() * 1e3, 0.0, 0.0));
    state.checks.push(StepChecks {
        constraint_bounds: constraint_bounds_hold(&barycenter_grads(&state.y), rep.max_defect),
        defect_growth: true,
        stability_ledger: true,
    });
    observer(&state)?;

    while state.step < config.max_steps {
        let t0 = Instant::now();
        let sys = assemble_step(&operator, &state.y, &hy, z)?;
        let sol = solve_step(&sys, config, Some(&state.lambda_coords))?;
        if sol.increment.iter().any(|v| !v.is_finite()) {
            return Err(LdgError::NotFinite(state.step + 1));
        }

        let bdy = sys.constraints.apply(&sol.increment);
        let dnorm = norm(&sol.increment);
        let tangency = if dnorm > 0.0 { norm(&bdy) / (sys.constraints.spectral_norm() * dnorm) } else { 0.0 };
        let max_lin = (0..mesh.num_elements())
            .map(|t| {
                let s = mesh.area(t).sqrt();
                (bdy[3 * t].powi(2) + bdy[3 * t + 1].powi(2) + bdy[3 * t + 2].powi(2)).sqrt() / s
            })
            .fold(0.0, f64::max);

        let grads_old = barycenter_grads(&state.y);
        let mut y_new = state.y.clone();
        y_new.axpy(1.0, &sol.increment);
        let hy_new = hessian_of(&forms, &y_new, offset);
        let rep_new = forms.report_with(&y_new, &hy_new, z)?;
        if !rep_new.total.is_finite() {
            return Err(LdgError::NotFinite(state.step + 1));
        }
        let before = rep.total;
        if rep_new.total > before + FlowConfig::energy_slack(before) {
            if config.abort_on_energy_increase {
                return Err(LdgError::EnergyIncrease { step: state.step + 1, before, after: rep_new.total });
            }
            warn!("step {}: energy increased from {before} to {}", state.step + 1, rep_new.total);
        }

        let inc_norm = operator.metric_norm(&sol.increment);
        state.dissipation += inc_norm * inc_norm / (2.0 * config.tau);

        let delta = DGField::from_coefficients(forms.space().clone(), sol.increment.clone())?;
        let grads_new = barycenter_grads(&y_new);
        let defect_growth = (0..mesh.num_elements()).all(|t| {
            let gd = delta.eval_center(t).grad;
            let mut first = [[0.0; 2]; 2];
            for a in 0..2 {
                for b in 0..2 {
                    first[a][b] = (0..3).map(|c| gd[c][a] * gd[c][b]).sum();
                }
            }
            let i_norm = crate::hessian::frob(&first, &first).sqrt();
            defect_of(&grads_new[t]) <= defect_of(&grads_old[t]) + i_norm + max_lin + 1e-12
        });
        let stability_ledger = rep_new.total + state.dissipation <= e0 + 1e-6 * e0.abs() + 1e-10;
        if !stability_ledger {
            debug!("step {}: stability ledger exceeded", state.step + 1);
        }

        state.step += 1;
        state.y = y_new;
        state.lambda = MultiplierField::from_orthonormal(&mesh, &sol.lambda_coords);
        state.lambda_coords = sol.lambda_coords;
        hy = hy_new;
        rep = rep_new;
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        state.history.push(record(state.step, config.tau, &rep, shift, inc_norm, sol.cg_iters, wall_ms, tangency, max_lin));
        state.checks.push(StepChecks {
            constraint_bounds: constraint_bounds_hold(&grads_new, rep.max_defect),
            defect_growth,
            stability_ledger,
        });
        if let Some(budget) = config.defect_budget {
            if rep.max_defect > budget {
                warn!("step {}: max defect {:.3e} exceeds budget {budget:.3e}", state.step, rep.max_defect);
            }
        }
        debug!(
            "step {} E_h {:.10} defect {:.3e} cg {} |dy| {:.3e}",
            state.step, rep.total, rep.max_defect, sol.cg_iters, inc_norm
        );
        observer(&state)?;
        if (rep.total - before).abs() / config.tau <= config.tol {
            state.converged = true;
            break;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_rect_mesh, BoundarySelector};
    use crate::space::flat_plate;

    fn setup(nx: usize, ny: usize, sel: BoundarySelector) -> Arc<Forms> {
        let mesh = build_rect_mesh(-5.0, 5.0, -2.0, 2.0, nx, ny, sel).unwrap();
        let space = Arc::new(DGSpace::new(Arc::new(mesh), 2).unwrap());
        Arc::new(Forms::new(space, LiftingConfig::default(), EnergyParams::default()).unwrap())
    }

    #[test]
    fn flat_plate_without_curvature_is_stationary() {
        let forms = setup(4, 2, BoundarySelector::Left);
        let y = flat_plate(forms.space()).unwrap();
        let z = SpontaneousCurvature::zero(forms.space().mesh());
        let state = run_flow(forms, y, &z, &FlowConfig::default(), &mut |_| Ok(())).unwrap();
        assert_eq!(state.step, 1);
        assert!(state.converged);
        assert!(state.history.iter().all(|r| r.energy.abs() < 1e-12));
        assert!(state.history[1].increment_norm < 1e-10);
    }

    #[test]
    fn operator_is_symmetric_and_load_vanishes_without_curvature() {
        let forms = setup(2, 2, BoundarySelector::Left);
        let op = FlowOperator::new(forms.clone(), &FlowConfig::default()).unwrap();
        assert!(op.matrix().max_asymmetry() < 1e-12 * 1e3);
        let y = flat_plate(forms.space()).unwrap();
        let hy = forms.hessian(&y);
        let z = SpontaneousCurvature::zero(forms.space().mesh());
        let sys = assemble_step(&op, &y, &hy, &z).unwrap();
        assert!(norm(&sys.load) < 1e-10);
        assert_eq!(sys.constraints.rows(), 3 * 4);
        assert_eq!(sys.constraints.cols(), forms.space().total_dofs());
        let sol = solve_step(&sys, &FlowConfig::default(), None).unwrap();
        assert!(norm(&sol.increment) < 1e-10);
    }

    #[test]
    fn saddle_solution_satisfies_both_equations() {
        let forms = setup(4, 2, BoundarySelector::Left);
        let config = FlowConfig::default();
        let op = FlowOperator::new(forms.clone(), &config).unwrap();
        let y = flat_plate(forms.space()).unwrap();
        let hy = forms.hessian(&y);
        let z = SpontaneousCurvature::constant(forms.space().mesh(), [[1.0, 0.0], [0.0, 1.0]]);
        let sys = assemble_step(&op, &y, &hy, &z).unwrap();
        assert!(norm(&sys.load) > 0.0);
        let sol = solve_step(&sys, &config, None).unwrap();
        let ad = op.apply(&sol.increment);
        let bt = sys.constraints.apply_transpose(&sol.lambda_coords);
        let res: Vec<f64> = (0..ad.len()).map(|i| ad[i] + bt[i] - sys.load[i]).collect();
        assert!(norm(&res) / norm(&sys.load) < 10.0 * config.cg_rel_tol);
        let bd = sys.constraints.apply(&sol.increment);
        assert!(norm(&bd) <= 10.0 * config.cg_rel_tol * sys.constraints.spectral_norm() * norm(&sol.increment));
    }

    #[test]
    fn constraint_transpose_is_adjoint() {
        let forms = setup(2, 1, BoundarySelector::None);
        let y = flat_plate(forms.space()).unwrap();
        let b = ConstraintMatrix::assemble(&forms, &y);
        let x: Vec<f64> = (0..b.cols()).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
        let m: Vec<f64> = (0..b.rows()).map(|i| (i as f64).sin()).collect();
        assert!((dot(&b.apply(&x), &m) - dot(&x, &b.apply_transpose(&m))).abs() < 1e-10);
        let dense = b.to_dense();
        let s = dense.singular_values();
        assert!((s.max() - b.spectral_norm()).abs() < 1e-10 * s.max());
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = FlowConfig { tau: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
        c.tau = 1e-3;
        c.tol = -1.0;
        assert!(c.validate().is_err());
    }
}
