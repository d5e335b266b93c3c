//! Lifting operators and the reconstructed discrete Hessian.
//!
//! The discrete Hessian of a field is stored by its values at the element
//! quadrature points. Since the three components decouple, every operator
//! here is scalar and applied componentwise.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LdgError, Result};
use crate::mesh::EdgeKind;
use crate::space::{pushforward, BoundaryData, DGField, DGSpace};
use crate::reference::LagrangeBasis;

/// 2x2 matrix.
pub type Mat2 = [[f64; 2]; 2];

/// Whether gradient-jump liftings are dropped on crease edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LiftingMode {
    #[default]
    Standard,
    Crease,
}

/// Degrees of the two liftings and the crease mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiftingConfig {
    pub l1: usize,
    pub l2: usize,
    pub mode: LiftingMode,
}

impl Default for LiftingConfig {
    fn default() -> Self {
        LiftingConfig { l1: 2, l2: 2, mode: LiftingMode::Standard }
    }
}

impl LiftingConfig {
    /// Whether the gradient-jump terms of edge `id` take part (lifting and penalty).
    pub fn uses_gradient_jump(&self, space: &DGSpace, id: usize) -> bool {
        let edge = space.mesh().edge(id);
        edge.kind.is_active() && !(self.mode == LiftingMode::Crease && edge.crease)
    }

    fn validate(&self, space: &DGSpace) -> Result<()> {
        if self.mode == LiftingMode::Crease && !space.mesh().has_crease() {
            return Err(LdgError::InvalidArgument("crease lifting mode requires a mesh with crease edges".into()));
        }
        Ok(())
    }
}

/// Lifting maps of one edge onto one element of its patch: from data at the
/// edge quadrature points to values at the element quadrature points.
#[derive(Debug, Clone)]
struct TargetLift {
    element: usize,
    /// `vr[q * ng + g]`: gradient-jump lifting kernel.
    vr: Vec<f64>,
    /// `vb[b][q * ng + g]`: value-jump lifting kernel for derivative direction `b`.
    vb: [Vec<f64>; 2],
}

/// Lifting kernels for all active edges.
#[derive(Debug, Clone)]
pub struct Liftings {
    config: LiftingConfig,
    /// Indexed by edge id; empty for free edges.
    edges: Vec<Vec<TargetLift>>,
}

fn local_mass_inverse(space: &DGSpace, e: usize, basis: &LagrangeBasis) -> Result<DMatrix<f64>> {
    let m = space.mass_matrix(e, basis);
    let chol = m
        .cholesky()
        .ok_or_else(|| LdgError::Singular(format!("element {e}: lifting mass matrix not positive definite")))?;
    Ok(chol.inverse())
}

impl Liftings {
    /// Precompute lifting kernels for every active edge.
    pub fn new(space: &DGSpace, config: LiftingConfig) -> Result<Liftings> {
        config.validate(space)?;
        let shape = space.mesh().shape();
        let b1 = LagrangeBasis::new(shape, config.l1);
        let b2 = LagrangeBasis::new(shape, config.l2);
        let nq = space.nq();
        let ng = space.ng();
        // element quadrature values of both lifting bases (reference values; maps do not change them)
        let e1: Vec<Vec<f64>> = space.element_rule().points.iter().map(|p| b1.eval(*p).values).collect();
        let e2: Vec<Vec<f64>> = space.element_rule().points.iter().map(|p| b2.eval(*p).values).collect();
        let mesh = space.mesh();
        let edges = (0..mesh.edges().len())
            .into_par_iter()
            .map(|id| -> Result<Vec<TargetLift>> {
                let edge = mesh.edge(id);
                if !edge.kind.is_active() {
                    return Ok(Vec::new());
                }
                let ec = space.edge(id);
                let w_avg = if edge.kind == EdgeKind::Interior { 0.5 } else { 1.0 };
                let mut out = Vec::with_capacity(edge.num_elements);
                for side in 0..edge.num_elements {
                    let t = edge.elements[side];
                    let m1 = local_mass_inverse(space, t, &b1)?;
                    let m2 = local_mass_inverse(space, t, &b2)?;
                    let n1 = b1.len();
                    let n2 = b2.len();
                    // right-hand-side kernels P1(i,g), P2_b(i,g)
                    let mut p1 = DMatrix::<f64>::zeros(n1, ng);
                    let mut p2 = [DMatrix::<f64>::zeros(n2, ng), DMatrix::<f64>::zeros(n2, ng)];
                    for g in 0..ng {
                        let rp = ec.sides[side].reference_points[g];
                        let w = w_avg * ec.weights[g];
                        let v1 = b1.eval(rp);
                        for i in 0..n1 {
                            p1[(i, g)] = w * v1.values[i];
                        }
                        let s2 = pushforward(&mesh.map(t, rp), &b2.eval(rp))?;
                        for i in 0..n2 {
                            p2[0][(i, g)] = w * s2.grads[i][0];
                            p2[1][(i, g)] = w * s2.grads[i][1];
                        }
                    }
                    let c1 = &m1 * &p1;
                    let c2 = [&m2 * &p2[0], &m2 * &p2[1]];
                    let mut vr = vec![0.0; nq * ng];
                    let mut vb = [vec![0.0; nq * ng], vec![0.0; nq * ng]];
                    for q in 0..nq {
                        for g in 0..ng {
                            vr[q * ng + g] = (0..n1).map(|i| e1[q][i] * c1[(i, g)]).sum();
                            for b in 0..2 {
                                vb[b][q * ng + g] = (0..n2).map(|i| e2[q][i] * c2[b][(i, g)]).sum();
                            }
                        }
                    }
                    out.push(TargetLift { element: t, vr, vb });
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Liftings { config, edges })
    }

    pub fn config(&self) -> &LiftingConfig {
        &self.config
    }

    /// Lift edge data onto each element of the patch of edge `id`:
    /// `grad_jump[g][c][a]` for `r_e`, `value_jump[g][c]` for `b_e`.
    /// Returns `(element, values[c * nq + q])` per patch element.
    fn lift(
        &self,
        space: &DGSpace,
        id: usize,
        grad_jump: Option<&[[[f64; 2]; 3]]>,
        value_jump: Option<&[[f64; 3]]>,
    ) -> Vec<(usize, Vec<Mat2>)> {
        let nq = space.nq();
        let ng = space.ng();
        let normals = &space.edge(id).normals;
        self.edges[id]
            .iter()
            .map(|tl| {
                let mut vals = vec![[[0.0; 2]; 2]; 3 * nq];
                for c in 0..3 {
                    for q in 0..nq {
                        let mut h = [[0.0; 2]; 2];
                        for g in 0..ng {
                            let n = normals[g];
                            if let Some(gj) = grad_jump {
                                let k = tl.vr[q * ng + g];
                                for a in 0..2 {
                                    for b in 0..2 {
                                        h[a][b] += k * n[b] * gj[g][c][a];
                                    }
                                }
                            }
                            if let Some(vj) = value_jump {
                                for a in 0..2 {
                                    for b in 0..2 {
                                        h[a][b] += tl.vb[b][q * ng + g] * n[a] * vj[g][c];
                                    }
                                }
                            }
                        }
                        vals[c * nq + q] = h;
                    }
                }
                (tl.element, vals)
            })
            .collect()
    }

    /// Contribution of `r_e([grad v])` on the patch of edge `id`.
    pub fn lift_gradient_jump(&self, id: usize, field: &DGField) -> Result<Vec<(usize, Vec<Mat2>)>> {
        let space = field.space();
        let mut gj = Vec::with_capacity(space.ng());
        for g in 0..space.ng() {
            gj.push(field.jump_and_average(id, g)?.grad_jump);
        }
        Ok(self.lift(space, id, Some(&gj), None))
    }

    /// Contribution of `b_e([v])` on the patch of edge `id`.
    pub fn lift_value_jump(&self, id: usize, field: &DGField) -> Result<Vec<(usize, Vec<Mat2>)>> {
        let space = field.space();
        let mut vj = Vec::with_capacity(space.ng());
        for g in 0..space.ng() {
            vj.push(field.jump_and_average(id, g)?.value_jump);
        }
        Ok(self.lift(space, id, None, Some(&vj)))
    }

    /// Direct evaluation `H_h[v] = D_h^2 v - R_h([grad v]) + B_h([v])`.
    pub fn discrete_hessian(&self, field: &DGField) -> Result<DiscreteHessian> {
        let space = field.space();
        let mesh = space.mesh();
        let nq = space.nq();
        let nel = mesh.num_elements();
        let mut values = vec![[[0.0; 2]; 2]; nel * 3 * nq];
        for e in 0..nel {
            for q in 0..nq {
                let h = field.hessian_qp(e, q);
                for c in 0..3 {
                    values[(e * 3 + c) * nq + q] = h[c];
                }
            }
        }
        for id in 0..mesh.edges().len() {
            if !mesh.edge(id).kind.is_active() {
                continue;
            }
            if self.config.uses_gradient_jump(space, id) {
                for (t, vals) in self.lift_gradient_jump(id, field)? {
                    for (k, v) in vals.iter().enumerate() {
                        sub_assign(&mut values[t * 3 * nq + k], v);
                    }
                }
            }
            for (t, vals) in self.lift_value_jump(id, field)? {
                for (k, v) in vals.iter().enumerate() {
                    add_assign(&mut values[t * 3 * nq + k], v);
                }
            }
        }
        Ok(DiscreteHessian::from_values(space, values, None))
    }
}

fn add_assign(a: &mut Mat2, b: &Mat2) {
    for i in 0..2 {
        for j in 0..2 {
            a[i][j] += b[i][j];
        }
    }
}

fn sub_assign(a: &mut Mat2, b: &Mat2) {
    for i in 0..2 {
        for j in 0..2 {
            a[i][j] -= b[i][j];
        }
    }
}

/// Frobenius product of 2x2 matrices.
pub fn frob(a: &Mat2, b: &Mat2) -> f64 {
    a[0][0] * b[0][0] + a[0][1] * b[0][1] + a[1][0] * b[1][0] + a[1][1] * b[1][1]
}

/// Discrete Hessian of a vector field at the element quadrature points,
/// with its elementwise averages.
#[derive(Debug, Clone)]
pub struct DiscreteHessian {
    nq: usize,
    /// `values[(e * 3 + c) * nq + q]`
    values: Vec<Mat2>,
    /// `averages[e * 3 + c]`
    averages: Vec<Mat2>,
    /// Contribution of the Dirichlet data alone (included in `values`).
    offset: Option<Vec<Mat2>>,
}

impl DiscreteHessian {
    fn from_values(space: &DGSpace, values: Vec<Mat2>, offset: Option<Vec<Mat2>>) -> DiscreteHessian {
        let nq = space.nq();
        let nel = space.mesh().num_elements();
        let mut averages = vec![[[0.0; 2]; 2]; nel * 3];
        for e in 0..nel {
            let w = &space.element(e).weights;
            let area = space.mesh().area(e);
            for c in 0..3 {
                let mut acc = [[0.0; 2]; 2];
                for q in 0..nq {
                    let v = values[(e * 3 + c) * nq + q];
                    for a in 0..2 {
                        for b in 0..2 {
                            acc[a][b] += w[q] * v[a][b];
                        }
                    }
                }
                for row in acc.iter_mut() {
                    for x in row.iter_mut() {
                        *x /= area;
                    }
                }
                averages[e * 3 + c] = acc;
            }
        }
        DiscreteHessian { nq, values, averages, offset }
    }

    pub fn num_points(&self) -> usize {
        self.nq
    }

    /// `H[c]` at quadrature point `q` of element `e`.
    pub fn value(&self, e: usize, c: usize, q: usize) -> Mat2 {
        self.values[(e * 3 + c) * self.nq + q]
    }

    pub fn values(&self) -> &[Mat2] {
        &self.values
    }

    /// Reduced Hessian: elementwise average of component `c` on element `e`.
    pub fn average(&self, e: usize, c: usize) -> Mat2 {
        self.averages[e * 3 + c]
    }

    /// Reduced Hessian on element `e` as `[c][a][b]`.
    pub fn reduced(&self, e: usize) -> [Mat2; 3] {
        [self.average(e, 0), self.average(e, 1), self.average(e, 2)]
    }

    pub fn offset(&self) -> Option<&[Mat2]> {
        self.offset.as_deref()
    }

    /// `||H||_{L^2}`.
    pub fn l2_norm(&self, space: &DGSpace) -> f64 {
        let mut acc = 0.0;
        for e in 0..space.mesh().num_elements() {
            let w = &space.element(e).weights;
            for c in 0..3 {
                for q in 0..self.nq {
                    let v = self.value(e, c, q);
                    acc += w[q] * frob(&v, &v);
                }
            }
        }
        acc.sqrt()
    }

    /// `||Hbar||_{L^2}`.
    pub fn reduced_l2_norm(&self, space: &DGSpace) -> f64 {
        let mut acc = 0.0;
        for e in 0..space.mesh().num_elements() {
            for c in 0..3 {
                let v = self.average(e, c);
                acc += space.mesh().area(e) * frob(&v, &v);
            }
        }
        acc.sqrt()
    }
}

/// Discrete Hessian of a field by direct lifting of its jumps.
pub fn discrete_hessian(field: &DGField, config: LiftingConfig) -> Result<DiscreteHessian> {
    if field.boundary_data().is_none() && field.space().mesh().has_dirichlet() {
        log::debug!("discrete Hessian of a field without boundary data: Dirichlet jumps taken against zero");
    }
    Liftings::new(field.space(), config)?.discrete_hessian(field)
}

/// Elementwise average of a discrete Hessian.
pub fn reduced_hessian(dh: &DiscreteHessian, e: usize) -> [Mat2; 3] {
    dh.reduced(e)
}

/// Contribution of the scalar basis functions of element `source` to the
/// discrete Hessian on element `target`.
#[derive(Debug, Clone)]
pub struct HessianBlock {
    pub source: usize,
    /// `values[(q * 4 + 2a + b) * nb + j]`
    pub values: Vec<f64>,
    /// `averages[(2a + b) * nb + j]`
    pub averages: Vec<f64>,
}

/// Precomputed discrete Hessians of all scalar basis functions, grouped by
/// the element they are evaluated on.
#[derive(Debug, Clone)]
pub struct BasisHessianTable {
    space: Arc<DGSpace>,
    liftings: Liftings,
    /// `blocks[target]`; the first block is the element itself.
    blocks: Vec<Vec<HessianBlock>>,
}

impl BasisHessianTable {
    pub fn new(space: Arc<DGSpace>, config: LiftingConfig) -> Result<BasisHessianTable> {
        let liftings = Liftings::new(&space, config)?;
        let mesh = space.mesh();
        let nq = space.nq();
        let ng = space.ng();
        let nb = space.dofs_per_element();
        let blocks = (0..mesh.num_elements())
            .into_par_iter()
            .map(|t| {
                let cache = space.element(t);
                let mut own = HessianBlock { source: t, values: vec![0.0; nq * 4 * nb], averages: vec![0.0; 4 * nb] };
                for q in 0..nq {
                    for j in 0..nb {
                        let h = cache.hessians[q * nb + j];
                        for a in 0..2 {
                            for b in 0..2 {
                                own.values[(q * 4 + 2 * a + b) * nb + j] = h[a][b];
                            }
                        }
                    }
                }
                let mut list = vec![own];
                for &id in mesh.element_edges(t) {
                    let edge = mesh.edge(id);
                    if !edge.kind.is_active() {
                        continue;
                    }
                    let use_r = config.uses_gradient_jump(&space, id);
                    let target = liftings.edges[id].iter().find(|tl| tl.element == t).expect("patch contains element");
                    let normals = &space.edge(id).normals;
                    let ec = space.edge(id);
                    for side in 0..edge.num_elements {
                        let source = edge.elements[side];
                        let sigma = if side == 0 { 1.0 } else { -1.0 };
                        let sc = &ec.sides[side];
                        let pos = match list.iter().position(|b| b.source == source) {
                            Some(p) => p,
                            None => {
                                list.push(HessianBlock {
                                    source,
                                    values: vec![0.0; nq * 4 * nb],
                                    averages: vec![0.0; 4 * nb],
                                });
                                list.len() - 1
                            }
                        };
                        let block = &mut list[pos];
                        for q in 0..nq {
                            for g in 0..ng {
                                let n = normals[g];
                                let kr = target.vr[q * ng + g];
                                for j in 0..nb {
                                    let phi = sc.values[g * nb + j];
                                    let grad = sc.grads[g * nb + j];
                                    for a in 0..2 {
                                        for b in 0..2 {
                                            let mut v = target.vb[b][q * ng + g] * n[a] * phi;
                                            if use_r {
                                                v -= kr * n[b] * grad[a];
                                            }
                                            block.values[(q * 4 + 2 * a + b) * nb + j] += sigma * v;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let area = mesh.area(t);
                for block in list.iter_mut() {
                    for q in 0..nq {
                        for k in 0..4 * nb {
                            block.averages[k] += cache.weights[q] * block.values[q * 4 * nb + k] / area;
                        }
                    }
                }
                list
            })
            .collect();
        Ok(BasisHessianTable { space, liftings, blocks })
    }

    pub fn space(&self) -> &Arc<DGSpace> {
        &self.space
    }

    pub fn config(&self) -> &LiftingConfig {
        self.liftings.config()
    }

    pub fn liftings(&self) -> &Liftings {
        &self.liftings
    }

    /// Blocks evaluated on element `target`.
    pub fn blocks(&self, target: usize) -> &[HessianBlock] {
        &self.blocks[target]
    }

    /// Elements on which the basis functions of element `source` have a nonzero discrete Hessian.
    pub fn support_of(&self, source: usize) -> Vec<usize> {
        let mut out: Vec<usize> = (0..self.blocks.len())
            .filter(|&t| self.blocks[t].iter().any(|b| b.source == source))
            .collect();
        out.sort_unstable();
        out
    }

    /// Discrete Hessian contribution of the Dirichlet data alone.
    pub fn dirichlet_offset(&self, data: &BoundaryData) -> Vec<Mat2> {
        let space = &self.space;
        let mesh = space.mesh();
        let nq = space.nq();
        let ng = space.ng();
        let mut out = vec![[[0.0; 2]; 2]; mesh.num_elements() * 3 * nq];
        for (id, edge) in mesh.edges().iter().enumerate() {
            if edge.kind != EdgeKind::Dirichlet {
                continue;
            }
            let ec = space.edge(id);
            let vj: Vec<[f64; 3]> = ec.points.iter().map(|x| (data.phi)(*x).map(|v| -v)).collect();
            let gj: Vec<[[f64; 2]; 3]> = ec.points.iter().map(|x| (data.grad)(*x).map(|r| r.map(|v| -v))).collect();
            debug_assert_eq!(vj.len(), ng);
            let use_r = self.liftings.config.uses_gradient_jump(space, id);
            let lifted = self.liftings.lift(space, id, if use_r { Some(&gj) } else { None }, None);
            for (t, vals) in lifted {
                for (k, v) in vals.iter().enumerate() {
                    sub_assign(&mut out[t * 3 * nq + k], v);
                }
            }
            for (t, vals) in self.liftings.lift(space, id, None, Some(&vj)) {
                for (k, v) in vals.iter().enumerate() {
                    add_assign(&mut out[t * 3 * nq + k], v);
                }
            }
        }
        out
    }

    /// Apply the table to a coefficient vector, adding `offset` if given.
    pub fn apply(&self, coefficients: &[f64], offset: Option<&[Mat2]>) -> DiscreteHessian {
        let space = &self.space;
        let nq = space.nq();
        let nb = space.dofs_per_element();
        let nel = space.mesh().num_elements();
        let per_element: Vec<Vec<Mat2>> = (0..nel)
            .into_par_iter()
            .map(|t| {
                let mut vals = vec![[[0.0; 2]; 2]; 3 * nq];
                for block in &self.blocks[t] {
                    for c in 0..3 {
                        let start = space.dof(c, block.source, 0);
                        let u = &coefficients[start..start + nb];
                        for q in 0..nq {
                            let h = &mut vals[c * nq + q];
                            for ab in 0..4 {
                                let row = &block.values[(q * 4 + ab) * nb..(q * 4 + ab + 1) * nb];
                                h[ab / 2][ab % 2] += row.iter().zip(u).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                }
                if let Some(off) = offset {
                    for (k, v) in vals.iter_mut().enumerate() {
                        add_assign(v, &off[t * 3 * nq + k]);
                    }
                }
                vals
            })
            .collect();
        let values: Vec<Mat2> = per_element.into_iter().flatten().collect();
        DiscreteHessian::from_values(space, values, offset.map(|o| o.to_vec()))
    }

    /// Discrete Hessian of a field (including its Dirichlet data).
    pub fn hessian_of(&self, field: &DGField) -> DiscreteHessian {
        match field.boundary_data() {
            Some(d) if self.space.mesh().has_dirichlet() => {
                let off = self.dirichlet_offset(d);
                self.apply(field.coefficients(), Some(&off))
            }
            _ => self.apply(field.coefficients(), None),
        }
    }
}
