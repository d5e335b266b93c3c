//! Energies and variational forms: the mesh-dependent H^2 product, bending
//! energy with stabilization, the cubic spontaneous-curvature energy by
//! midpoint quadrature, the isometry defect, and the flow forms `a`, `l`, `b`
//! both as scalar functionals of fields and as assembled matrices/vectors.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LdgError, Result};
use crate::hessian::{frob, BasisHessianTable, DiscreteHessian, LiftingConfig, Mat2};
use crate::linalg::{BlockSparse, BlockSparseBuilder};
use crate::mesh::{EdgeKind, Mesh};
use crate::space::{DGField, DGSpace};

/// Piecewise constant symmetric spontaneous curvature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpontaneousCurvature {
    values: Vec<Mat2>,
}

fn symmetrize(z: Mat2) -> Mat2 {
    let off = 0.5 * (z[0][1] + z[1][0]);
    [[z[0][0], off], [off, z[1][1]]]
}

impl SpontaneousCurvature {
    pub fn constant(mesh: &Mesh, z: Mat2) -> Self {
        SpontaneousCurvature { values: vec![symmetrize(z); mesh.num_elements()] }
    }

    pub fn zero(mesh: &Mesh) -> Self {
        Self::constant(mesh, [[0.0; 2]; 2])
    }

    /// One matrix per region id (`regions[id]`).
    pub fn per_region(mesh: &Mesh, regions: &[Mat2]) -> Result<Self> {
        let mut values = Vec::with_capacity(mesh.num_elements());
        for e in 0..mesh.num_elements() {
            let r = mesh.region(e) as usize;
            let z = regions
                .get(r)
                .ok_or_else(|| LdgError::InvalidArgument(format!("no curvature given for region {r}")))?;
            values.push(symmetrize(*z));
        }
        Ok(SpontaneousCurvature { values })
    }

    /// `R(theta) diag(0, alpha) R(theta)^T` on every element.
    pub fn rotated_uniaxial(mesh: &Mesh, alpha: f64, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        // columns of R: (c, s), (-s, c); R diag(0, a) R^T = a * (-s, c)(-s, c)^T
        let z = [[alpha * s * s, -alpha * s * c], [-alpha * s * c, alpha * c * c]];
        Self::constant(mesh, z)
    }

    pub fn value(&self, e: usize) -> Mat2 {
        self.values[e]
    }

    /// `||Z||_{L^inf}` (Frobenius pointwise).
    pub fn max_norm(&self) -> f64 {
        self.values.iter().map(|z| frob(z, z).sqrt()).fold(0.0, f64::max)
    }

    /// `1/2 int |Z|^2`, the constant separating the reduced energy from the full one.
    pub fn energy_shift(&self, mesh: &Mesh) -> f64 {
        0.5 * (0..mesh.num_elements()).map(|e| mesh.area(e) * frob(&self.values[e], &self.values[e])).sum::<f64>()
    }
}

/// Piecewise constant symmetric multiplier, stored as `(mu11, mu22, mu12)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierField {
    pub values: Vec<[f64; 3]>,
}

impl MultiplierField {
    pub fn zeros(n: usize) -> Self {
        MultiplierField { values: vec![[0.0; 3]; n] }
    }

    pub fn matrix(&self, e: usize) -> Mat2 {
        let [a, b, c] = self.values[e];
        [[a, c], [c, b]]
    }

    /// Build from coordinates in the orthonormal basis
    /// `{e11, e22, (e12 + e21)/sqrt 2} / sqrt|T|`.
    pub fn from_orthonormal(mesh: &Mesh, m: &[f64]) -> Self {
        let values = (0..mesh.num_elements())
            .map(|e| {
                let s = mesh.area(e).sqrt();
                [m[3 * e] / s, m[3 * e + 1] / s, m[3 * e + 2] / (std::f64::consts::SQRT_2 * s)]
            })
            .collect();
        MultiplierField { values }
    }

    pub fn l2_norm(&self, mesh: &Mesh) -> f64 {
        (0..self.values.len())
            .map(|e| {
                let m = self.matrix(e);
                mesh.area(e) * frob(&m, &m)
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Stabilization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyParams {
    pub gamma0: f64,
    pub gamma1: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams { gamma0: 1.0, gamma1: 1.0 }
    }
}

/// All energies of one state.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    /// `B_h`, including the stabilization.
    pub bending: f64,
    pub stabilization: f64,
    pub cubic: f64,
    /// `E_h = B_h - C_h`.
    pub total: f64,
    pub max_defect: f64,
    pub defects: Vec<f64>,
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Columns `d_1 y`, `d_2 y` of a 3x2 gradient.
fn columns(grad: &[[f64; 2]; 3]) -> ([f64; 3], [f64; 3]) {
    ([grad[0][0], grad[1][0], grad[2][0]], [grad[0][1], grad[1][1], grad[2][1]])
}

/// Linearized isometry constraint `grad v^T grad y + grad y^T grad v`.
pub fn linearized_constraint(grad_v: &[[f64; 2]; 3], grad_y: &[[f64; 2]; 3]) -> Mat2 {
    let mut l = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            l[a][b] = (0..3).map(|c| grad_v[c][a] * grad_y[c][b] + grad_y[c][a] * grad_v[c][b]).sum();
        }
    }
    l
}

/// `|grad y^T grad y - I|` (Frobenius).
pub fn defect_of(grad: &[[f64; 2]; 3]) -> f64 {
    let mut acc = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            let g: f64 = (0..3).map(|c| grad[c][a] * grad[c][b]).sum::<f64>() - if a == b { 1.0 } else { 0.0 };
            acc += g * g;
        }
    }
    acc.sqrt()
}

/// Per-element isometry defect at the barycenters.
pub fn isometry_defect(y: &DGField) -> Vec<f64> {
    (0..y.space().mesh().num_elements()).map(|e| defect_of(&y.eval_center(e).grad)).collect()
}

/// Discrete forms on one space with fixed lifting and stabilization.
#[derive(Debug, Clone)]
pub struct Forms {
    table: BasisHessianTable,
    params: EnergyParams,
}

impl Forms {
    pub fn new(space: Arc<DGSpace>, lifting: LiftingConfig, params: EnergyParams) -> Result<Forms> {
        if !(params.gamma0 > 0.0) || !(params.gamma1 > 0.0) {
            return Err(LdgError::InvalidArgument(format!(
                "stabilization parameters must be positive (gamma0 = {}, gamma1 = {})",
                params.gamma0, params.gamma1
            )));
        }
        Ok(Forms { table: BasisHessianTable::new(space, lifting)?, params })
    }

    pub fn space(&self) -> &Arc<DGSpace> {
        self.table.space()
    }

    pub fn table(&self) -> &BasisHessianTable {
        &self.table
    }

    pub fn params(&self) -> &EnergyParams {
        &self.params
    }

    pub fn lifting(&self) -> &LiftingConfig {
        self.table.config()
    }

    fn check_space(&self, f: &DGField) -> Result<()> {
        if !Arc::ptr_eq(f.space(), self.space()) {
            return Err(LdgError::InvalidArgument("field lives on a different space".into()));
        }
        Ok(())
    }

    /// Discrete Hessian of a field, including its Dirichlet data.
    pub fn hessian(&self, y: &DGField) -> DiscreteHessian {
        self.table.hessian_of(y)
    }

    /// `(sum_e h_e^-1 ||[grad u] . [grad v]||, sum_e h_e^-3 ([u], [v]))`, each with its own data.
    fn penalty_pair(&self, u: &DGField, v: &DGField) -> Result<(f64, f64)> {
        let space = self.space();
        let mesh = space.mesh();
        let mut pg = 0.0;
        let mut pv = 0.0;
        for (id, edge) in mesh.edges().iter().enumerate() {
            if !edge.kind.is_active() {
                continue;
            }
            let use_g = self.lifting().uses_gradient_jump(space, id);
            let w = &space.edge(id).weights;
            for (g, wg) in w.iter().enumerate() {
                let ju = u.jump_and_average(id, g)?;
                let jv = v.jump_and_average(id, g)?;
                if use_g {
                    let s: f64 = (0..3).map(|c| ju.grad_jump[c][0] * jv.grad_jump[c][0] + ju.grad_jump[c][1] * jv.grad_jump[c][1]).sum();
                    pg += wg * s / edge.h;
                }
                pv += wg * dot3(ju.value_jump, jv.value_jump) / edge.h.powi(3);
            }
        }
        Ok((pg, pv))
    }

    /// Mesh-dependent H^2 product plus `l2_weight (u, v)`.
    pub fn h2_product(&self, u: &DGField, v: &DGField, l2_weight: f64) -> Result<f64> {
        self.check_space(u)?;
        self.check_space(v)?;
        let space = self.space();
        let mut acc = 0.0;
        for e in 0..space.mesh().num_elements() {
            let w = &space.element(e).weights;
            for (q, wq) in w.iter().enumerate() {
                let hu = u.hessian_qp(e, q);
                let hv = v.hessian_qp(e, q);
                let s: f64 = (0..3).map(|c| frob(&hu[c], &hv[c])).sum();
                acc += wq * s;
                if l2_weight != 0.0 {
                    acc += l2_weight * wq * dot3(u.eval_qp(e, q).value, v.eval_qp(e, q).value);
                }
            }
        }
        let (pg, pv) = self.penalty_pair(u, v)?;
        Ok(acc + pg + pv)
    }

    /// `int H[u] : H[v]`.
    fn hessian_product(&self, hu: &DiscreteHessian, hv: &DiscreteHessian) -> f64 {
        let space = self.space();
        let mut acc = 0.0;
        for e in 0..space.mesh().num_elements() {
            let w = &space.element(e).weights;
            for c in 0..3 {
                for (q, wq) in w.iter().enumerate() {
                    acc += wq * frob(&hu.value(e, c, q), &hv.value(e, c, q));
                }
            }
        }
        acc
    }

    /// `a_h(u, v)`.
    pub fn a_form(&self, u: &DGField, v: &DGField) -> Result<f64> {
        self.check_space(u)?;
        self.check_space(v)?;
        let (pg, pv) = self.penalty_pair(u, v)?;
        let h = self.hessian_product(&self.hessian(u), &self.hessian(v));
        Ok(h + self.params.gamma1 * pg + self.params.gamma0 * pv)
    }

    /// Stabilization `S_h` (with the factor one half, so that `a(v, v) = 2 B_h[v]`).
    pub fn stabilization(&self, y: &DGField) -> Result<f64> {
        let (pg, pv) = self.penalty_pair(y, y)?;
        Ok(0.5 * (self.params.gamma1 * pg + self.params.gamma0 * pv))
    }

    /// `B_h[y]`.
    pub fn bending_energy(&self, y: &DGField) -> Result<f64> {
        self.check_space(y)?;
        let h = self.hessian(y);
        Ok(0.5 * self.hessian_product(&h, &h) + self.stabilization(y)?)
    }

    /// `C_h[y]` given its discrete Hessian.
    pub fn cubic_energy_with(&self, y: &DGField, h: &DiscreteHessian, z: &SpontaneousCurvature) -> f64 {
        let mesh = self.space().mesh();
        let mut acc = 0.0;
        for e in 0..mesh.num_elements() {
            let zt = z.value(e);
            if zt == [[0.0; 2]; 2] {
                continue;
            }
            let (d1, d2) = columns(&y.eval_center(e).grad);
            let n = cross(d1, d2);
            let hb = h.reduced(e);
            let mut s = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    s += zt[a][b] * (0..3).map(|c| hb[c][a][b] * n[c]).sum::<f64>();
                }
            }
            acc += mesh.area(e) * s;
        }
        acc
    }

    /// `C_h[y]`.
    pub fn cubic_energy(&self, y: &DGField, z: &SpontaneousCurvature) -> Result<f64> {
        self.check_space(y)?;
        Ok(self.cubic_energy_with(y, &self.hessian(y), z))
    }

    /// Full energy report.
    pub fn report(&self, y: &DGField, z: &SpontaneousCurvature) -> Result<EnergyReport> {
        self.check_space(y)?;
        self.report_with(y, &self.hessian(y), z)
    }

    /// Report using an already computed discrete Hessian of `y`.
    pub fn report_with(&self, y: &DGField, h: &DiscreteHessian, z: &SpontaneousCurvature) -> Result<EnergyReport> {
        let stabilization = self.stabilization(y)?;
        let bending = 0.5 * self.hessian_product(h, h) + stabilization;
        let cubic = self.cubic_energy_with(y, h, z);
        let defects = isometry_defect(y);
        let max_defect = defects.iter().cloned().fold(0.0, f64::max);
        Ok(EnergyReport { bending, stabilization, cubic, total: bending - cubic, max_defect, defects })
    }

    /// `l[y](v)`, the first variation of `C_h` at `y` in direction `v` (homogeneous).
    pub fn ell_form(&self, y: &DGField, v: &DGField, z: &SpontaneousCurvature) -> Result<f64> {
        self.check_space(y)?;
        self.check_space(v)?;
        let hy = self.hessian(y);
        let hv = self.table.apply(v.coefficients(), None);
        let mesh = self.space().mesh();
        let mut acc = 0.0;
        for e in 0..mesh.num_elements() {
            let zt = z.value(e);
            let (d1, d2) = columns(&y.eval_center(e).grad);
            let (v1, v2) = columns(&v.eval_center(e).grad);
            let n = cross(d1, d2);
            let n1 = cross(v1, d2);
            let n2 = cross(d1, v2);
            let hby = hy.reduced(e);
            let hbv = hv.reduced(e);
            let mut s = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    let col = |h: &[Mat2; 3]| [h[0][a][b], h[1][a][b], h[2][a][b]];
                    s += zt[a][b] * (dot3(col(&hbv), n) + dot3(col(&hby), n1) + dot3(col(&hby), n2));
                }
            }
            acc += mesh.area(e) * s;
        }
        Ok(acc)
    }

    /// `b_h(y; v, mu)`.
    pub fn b_form(&self, y: &DGField, v: &DGField, mu: &MultiplierField) -> Result<f64> {
        self.check_space(y)?;
        self.check_space(v)?;
        let mesh = self.space().mesh();
        let mut acc = 0.0;
        for e in 0..mesh.num_elements() {
            let l = linearized_constraint(&v.eval_center(e).grad, &y.eval_center(e).grad);
            acc += mesh.area(e) * frob(&l, &mu.matrix(e));
        }
        Ok(acc)
    }

    // ---- assembled operators on the scalar space; all three components share them ----

    /// `int H[phi_i] : H[phi_j]` over homogeneous scalar basis functions.
    pub fn hessian_gram(&self) -> BlockSparse {
        let space = self.space();
        let nb = space.dofs_per_element();
        let nel = space.mesh().num_elements();
        let parts: Vec<Vec<(usize, usize, Vec<f64>)>> = (0..nel)
            .into_par_iter()
            .map(|t| {
                let w = &space.element(t).weights;
                let blocks = self.table.blocks(t);
                let mut out = Vec::new();
                for b1 in blocks {
                    for b2 in blocks {
                        let mut m = vec![0.0; nb * nb];
                        for (q, wq) in w.iter().enumerate() {
                            for ab in 0..4 {
                                let r1 = &b1.values[(q * 4 + ab) * nb..(q * 4 + ab + 1) * nb];
                                let r2 = &b2.values[(q * 4 + ab) * nb..(q * 4 + ab + 1) * nb];
                                for i in 0..nb {
                                    let s = wq * r1[i];
                                    if s == 0.0 {
                                        continue;
                                    }
                                    for j in 0..nb {
                                        m[i * nb + j] += s * r2[j];
                                    }
                                }
                            }
                        }
                        out.push((b1.source, b2.source, m));
                    }
                }
                out
            })
            .collect();
        let mut builder = BlockSparseBuilder::new(nel, nb);
        for part in parts {
            for (i, j, m) in part {
                builder.add(i, j, &m, 1.0);
            }
        }
        builder.build()
    }

    /// `int D^2 phi_i : D^2 phi_j` elementwise (block diagonal).
    pub fn broken_hessian_gram(&self) -> BlockSparse {
        self.element_gram(|cache, q, i, j, nb| {
            let a = cache.hessians[q * nb + i];
            let b = cache.hessians[q * nb + j];
            frob(&a, &b)
        })
    }

    /// Scalar L^2 mass matrix.
    pub fn mass(&self) -> BlockSparse {
        self.element_gram(|cache, q, i, j, nb| cache.values[q * nb + i] * cache.values[q * nb + j])
    }

    fn element_gram(&self, f: impl Fn(&crate::space::ElementCache, usize, usize, usize, usize) -> f64 + Sync) -> BlockSparse {
        let space = self.space();
        let nb = space.dofs_per_element();
        let nel = space.mesh().num_elements();
        let blocks: Vec<Vec<f64>> = (0..nel)
            .into_par_iter()
            .map(|e| {
                let cache = space.element(e);
                let mut m = vec![0.0; nb * nb];
                for (q, wq) in cache.weights.iter().enumerate() {
                    for i in 0..nb {
                        for j in 0..nb {
                            m[i * nb + j] += wq * f(cache, q, i, j, nb);
                        }
                    }
                }
                m
            })
            .collect();
        let mut b = BlockSparseBuilder::new(nel, nb);
        for (e, m) in blocks.iter().enumerate() {
            b.add(e, e, m, 1.0);
        }
        b.build()
    }

    /// Jump penalty matrices `(sum h^-1 [grad phi_i].[grad phi_j], sum h^-3 [phi_i][phi_j])`
    /// over homogeneous scalar basis functions.
    pub fn penalty_matrices(&self) -> (BlockSparse, BlockSparse) {
        let space = self.space();
        let mesh = space.mesh();
        let nb = space.dofs_per_element();
        let nel = mesh.num_elements();
        let mut bg = BlockSparseBuilder::new(nel, nb);
        let mut bv = BlockSparseBuilder::new(nel, nb);
        for (id, edge) in mesh.edges().iter().enumerate() {
            if !edge.kind.is_active() {
                continue;
            }
            let use_g = self.lifting().uses_gradient_jump(space, id);
            let ec = space.edge(id);
            for s1 in 0..edge.num_elements {
                for s2 in 0..edge.num_elements {
                    let sign = if s1 == s2 { 1.0 } else { -1.0 };
                    let (c1, c2) = (&ec.sides[s1], &ec.sides[s2]);
                    let mut mg = vec![0.0; nb * nb];
                    let mut mv = vec![0.0; nb * nb];
                    for (g, wg) in ec.weights.iter().enumerate() {
                        for i in 0..nb {
                            for j in 0..nb {
                                let gi = c1.grads[g * nb + i];
                                let gj = c2.grads[g * nb + j];
                                mg[i * nb + j] += wg * sign * (gi[0] * gj[0] + gi[1] * gj[1]) / edge.h;
                                mv[i * nb + j] += wg * sign * c1.values[g * nb + i] * c2.values[g * nb + j] / edge.h.powi(3);
                            }
                        }
                    }
                    if use_g {
                        bg.add(c1.element, c2.element, &mg, 1.0);
                    }
                    bv.add(c1.element, c2.element, &mv, 1.0);
                }
            }
        }
        (bg.build(), bv.build())
    }

    /// Scalar matrix of `a_h` on homogeneous fields.
    pub fn a_matrix(&self) -> BlockSparse {
        let (pg, pv) = self.penalty_matrices();
        let hg = self.hessian_gram();
        hg.linear_combination(1.0, &pg.linear_combination(self.params.gamma1, &pv, self.params.gamma0), 1.0)
    }

    /// Scalar matrix of the H^2_h metric plus `l2_weight` times the mass.
    pub fn metric_matrix(&self, l2_weight: f64) -> BlockSparse {
        let (pg, pv) = self.penalty_matrices();
        let m = self.broken_hessian_gram().linear_combination(1.0, &pg.linear_combination(1.0, &pv, 1.0), 1.0);
        if l2_weight != 0.0 {
            m.linear_combination(1.0, &self.mass(), l2_weight)
        } else {
            m
        }
    }

    /// The vector `a_h(y, phi)` for every homogeneous vector basis function `phi`,
    /// where `y` carries its Dirichlet data and `hy` is its discrete Hessian.
    pub fn a_vector(&self, y: &DGField, hy: &DiscreteHessian) -> Result<Vec<f64>> {
        let space = self.space();
        let mesh = space.mesh();
        let nb = space.dofs_per_element();
        let nel = mesh.num_elements();
        let mut out = vec![0.0; space.total_dofs()];
        let parts: Vec<Vec<(usize, [Vec<f64>; 3])>> = (0..nel)
            .into_par_iter()
            .map(|t| {
                let w = &space.element(t).weights;
                self.table
                    .blocks(t)
                    .iter()
                    .map(|blk| {
                        let mut r = [vec![0.0; nb], vec![0.0; nb], vec![0.0; nb]];
                        for (c, rc) in r.iter_mut().enumerate() {
                            for (q, wq) in w.iter().enumerate() {
                                let h = hy.value(t, c, q);
                                for ab in 0..4 {
                                    let s = wq * h[ab / 2][ab % 2];
                                    let row = &blk.values[(q * 4 + ab) * nb..(q * 4 + ab + 1) * nb];
                                    for j in 0..nb {
                                        rc[j] += s * row[j];
                                    }
                                }
                            }
                        }
                        (blk.source, r)
                    })
                    .collect()
            })
            .collect();
        for part in parts {
            for (src, r) in part {
                for (c, rc) in r.iter().enumerate() {
                    let start = space.dof(c, src, 0);
                    for j in 0..nb {
                        out[start + j] += rc[j];
                    }
                }
            }
        }
        for (id, edge) in mesh.edges().iter().enumerate() {
            if !edge.kind.is_active() {
                continue;
            }
            let use_g = self.lifting().uses_gradient_jump(space, id);
            let ec = space.edge(id);
            for (g, wg) in ec.weights.iter().enumerate() {
                let j = y.jump_and_average(id, g)?;
                for side in 0..edge.num_elements {
                    let sigma = if side == 0 { 1.0 } else { -1.0 };
                    let sc = &ec.sides[side];
                    for c in 0..3 {
                        let start = space.dof(c, sc.element, 0);
                        for i in 0..nb {
                            let mut v = self.params.gamma0 * sc.values[g * nb + i] * j.value_jump[c] / edge.h.powi(3);
                            if use_g {
                                let gi = sc.grads[g * nb + i];
                                v += self.params.gamma1 * (gi[0] * j.grad_jump[c][0] + gi[1] * j.grad_jump[c][1]) / edge.h;
                            }
                            out[start + i] += wg * sigma * v;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// The vector `l[y](phi)` for every homogeneous vector basis function.
    pub fn ell_vector(&self, y: &DGField, hy: &DiscreteHessian, z: &SpontaneousCurvature) -> Vec<f64> {
        let space = self.space();
        let mesh = space.mesh();
        let nb = space.dofs_per_element();
        let mut out = vec![0.0; space.total_dofs()];
        for t in 0..mesh.num_elements() {
            let zt = z.value(t);
            if zt == [[0.0; 2]; 2] {
                continue;
            }
            let area = mesh.area(t);
            let (d1, d2) = columns(&y.eval_center(t).grad);
            let n = cross(d1, d2);
            let hb = hy.reduced(t);
            let mut w1 = [0.0; 3];
            let mut w2 = [0.0; 3];
            for a in 0..2 {
                for b in 0..2 {
                    let h = [hb[0][a][b], hb[1][a][b], hb[2][a][b]];
                    let x1 = cross(d2, h);
                    let x2 = cross(h, d1);
                    for c in 0..3 {
                        w1[c] += zt[a][b] * x1[c];
                        w2[c] += zt[a][b] * x2[c];
                    }
                }
            }
            for blk in self.table.blocks(t) {
                for j in 0..nb {
                    let zh: f64 = (0..4).map(|ab| zt[ab / 2][ab % 2] * blk.averages[ab * nb + j]).sum();
                    for c in 0..3 {
                        out[space.dof(c, blk.source, j)] += area * zh * n[c];
                    }
                }
            }
            let center = &space.element(t).center;
            for j in 0..nb {
                let g = center.grads[j];
                for c in 0..3 {
                    out[space.dof(c, t, j)] += area * (g[0] * w1[c] + g[1] * w2[c]);
                }
            }
        }
        out
    }

    /// Constraint block of element `t`: rows are the orthonormal multiplier
    /// basis functions of `t`, columns the local dofs ordered `c * nb + j`.
    pub fn constraint_block(&self, y: &DGField, t: usize) -> Vec<[f64; 3]> {
        let space = self.space();
        let nb = space.dofs_per_element();
        let s = space.mesh().area(t).sqrt();
        let grad_y = y.eval_center(t).grad;
        let center = &space.element(t).center;
        let mut out = vec![[0.0; 3]; 3 * nb];
        for c in 0..3 {
            for j in 0..nb {
                let g = center.grads[j];
                out[c * nb + j] = [
                    s * 2.0 * g[0] * grad_y[c][0],
                    s * 2.0 * g[1] * grad_y[c][1],
                    s * std::f64::consts::SQRT_2 * (g[0] * grad_y[c][1] + grad_y[c][0] * g[1]),
                ];
            }
        }
        out
    }

    /// Whether the mesh has any Dirichlet edge.
    pub fn clamped(&self) -> bool {
        self.space().mesh().edges().iter().any(|e| e.kind == EdgeKind::Dirichlet)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_rect_mesh, BoundarySelector};
    use crate::space::{flat_plate, interpolate, BoundaryData};

    fn forms(nx: usize, ny: usize, sel: BoundarySelector) -> Forms {
        let mesh = build_rect_mesh(0.0, 2.0, 0.0, 1.0, nx, ny, sel).unwrap();
        let space = Arc::new(DGSpace::new(Arc::new(mesh), 2).unwrap());
        Forms::new(space, LiftingConfig::default(), EnergyParams::default()).unwrap()
    }

    #[test]
    fn rejects_nonpositive_gamma() {
        let f = forms(1, 1, BoundarySelector::None);
        let bad = EnergyParams { gamma0: 0.0, gamma1: 1.0 };
        assert!(Forms::new(f.space().clone(), LiftingConfig::default(), bad).is_err());
    }

    #[test]
    fn flat_plate_energies_vanish() {
        let f = forms(4, 2, BoundarySelector::Left);
        let y = flat_plate(f.space()).unwrap();
        let z = SpontaneousCurvature::constant(f.space().mesh(), [[1.0, 0.3], [0.3, -2.0]]);
        let r = f.report(&y, &z).unwrap();
        assert!(r.bending.abs() < 1e-12 && r.cubic.abs() < 1e-12 && r.max_defect < 1e-12);
        assert!(f.h2_product(&y, &y, 0.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn stretched_map_defect() {
        let f = forms(3, 2, BoundarySelector::None);
        let y = interpolate(f.space(), |x| [2.0 * x[0], x[1], 0.0], None).unwrap();
        for d in isometry_defect(&y) {
            assert!((d - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn h2_product_of_quadratic() {
        let f = forms(4, 2, BoundarySelector::All);
        let data = BoundaryData::new(|x| [x[0] * x[0], 0.0, 0.0], |x| [[2.0 * x[0], 0.0], [0.0; 2], [0.0; 2]]);
        let u = interpolate(f.space(), |x| [x[0] * x[0], 0.0, 0.0], Some(data)).unwrap();
        let v = f.h2_product(&u, &u, 0.0).unwrap();
        assert!((v - 4.0 * 2.0).abs() < 1e-10, "{v}");
    }

    #[test]
    fn a_is_twice_bending_on_homogeneous_fields() {
        let f = forms(3, 2, BoundarySelector::Left);
        let v = interpolate(f.space(), |x| [x[0].sin(), x[1] * x[0], (x[0] + x[1]).cos()], None).unwrap();
        let a = f.a_form(&v, &v).unwrap();
        let b = f.bending_energy(&v).unwrap();
        assert!((a - 2.0 * b).abs() < 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn assembled_matrices_match_field_forms() {
        let f = forms(3, 2, BoundarySelector::Left);
        let u = interpolate(f.space(), |x| [x[0].sin(), x[1] * x[0], (x[0] + x[1]).cos()], None).unwrap();
        let v = interpolate(f.space(), |x| [x[1].exp(), x[0] * x[0], x[0] * x[1] * x[1]], None).unwrap();
        let a = f.a_matrix();
        let n = f.space().scalar_dofs();
        let mut s = 0.0;
        for c in 0..3 {
            let av = a.matvec(&v.coefficients()[c * n..(c + 1) * n]);
            s += crate::linalg::dot(&u.coefficients()[c * n..(c + 1) * n], &av);
        }
        let direct = f.a_form(&u, &v).unwrap();
        assert!((s - direct).abs() < 1e-10 * direct.abs().max(1.0), "{s} vs {direct}");
        let hv = f.hessian(&v);
        let vec = f.a_vector(&v, &hv).unwrap();
        let s2 = crate::linalg::dot(u.coefficients(), &vec);
        assert!((s2 - direct).abs() < 1e-10 * direct.abs().max(1.0));
        let m = f.metric_matrix(0.5);
        let mut s3 = 0.0;
        for c in 0..3 {
            let mv = m.matvec(&v.coefficients()[c * n..(c + 1) * n]);
            s3 += crate::linalg::dot(&u.coefficients()[c * n..(c + 1) * n], &mv);
        }
        let h2 = f.h2_product(&u, &v, 0.5).unwrap();
        assert!((s3 - h2).abs() < 1e-10 * h2.abs().max(1.0));
        assert!(a.max_asymmetry() < 1e-10);
    }

    #[test]
    fn ell_vector_matches_ell_form() {
        let f = forms(3, 2, BoundarySelector::None);
        let z = SpontaneousCurvature::constant(f.space().mesh(), [[1.0, -0.5], [-0.5, 2.0]]);
        let y = interpolate(f.space(), |x| [x[0] + 0.1 * x[1] * x[1], x[1], 0.2 * x[0] * x[0]], None).unwrap();
        let v = interpolate(f.space(), |x| [x[1].sin(), x[0] * x[0], x[0] * x[1]], None).unwrap();
        let hy = f.hessian(&y);
        let vec = f.ell_vector(&y, &hy, &z);
        let s = crate::linalg::dot(v.coefficients(), &vec);
        let direct = f.ell_form(&y, &v, &z).unwrap();
        assert!((s - direct).abs() < 1e-11 * direct.abs().max(1.0), "{s} vs {direct}");
    }

    #[test]
    fn vertical_directions_are_tangent_at_the_flat_state() {
        let f = forms(2, 2, BoundarySelector::None);
        let y = flat_plate(f.space()).unwrap();
        let v = interpolate(f.space(), |x| [0.0, 0.0, x[0] * x[1] + x[0]], None).unwrap();
        let mu = MultiplierField { values: vec![[1.0, -2.0, 0.7]; 4] };
        assert!(f.b_form(&y, &v, &mu).unwrap().abs() < 1e-14);
    }

    #[test]
    fn uniaxial_rotation() {
        let mesh = build_rect_mesh(0.0, 1.0, 0.0, 1.0, 1, 1, BoundarySelector::None).unwrap();
        let z = SpontaneousCurvature::rotated_uniaxial(&mesh, 2.0, 0.0);
        assert_eq!(z.value(0), [[0.0, 0.0], [0.0, 2.0]]);
    }
}
