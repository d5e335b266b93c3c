//! Broken polynomial spaces on a mesh: physical shape functions with full
//! second-order pushforward, cached quadrature data, vector fields with
//! optional Dirichlet data, jumps and averages, and elementwise projection.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{LdgError, Result};
use crate::mesh::{EdgeKind, MapEval, Mesh};
use crate::reference::{gauss_legendre, BasisEval, LagrangeBasis, QuadratureRule};

/// Number of components of the deformation.
pub const COMPONENTS: usize = 3;

/// Physical values, gradients and Hessians of all scalar basis functions of one element at one point.
#[derive(Debug, Clone)]
pub struct ShapeEval {
    pub x: [f64; 2],
    pub det: f64,
    pub values: Vec<f64>,
    pub grads: Vec<[f64; 2]>,
    pub hessians: Vec<[[f64; 2]; 2]>,
}

/// Push reference derivatives forward through a geometric map.
///
/// Gradients use `J^{-T}`, Hessians the full chain rule
/// `J^{-T} (D^2 u_hat - sum_i (grad u)_i D^2 F_i) J^{-1}`.
pub fn pushforward(map: &MapEval, reference: &BasisEval) -> Result<ShapeEval> {
    let det = map.det();
    if !(det > 0.0) || !det.is_finite() {
        return Err(LdgError::Singular(format!("geometric map has Jacobian determinant {det:e}")));
    }
    let ji = map.inverse_jacobian();
    let n = reference.values.len();
    let mut grads = Vec::with_capacity(n);
    let mut hessians = Vec::with_capacity(n);
    for j in 0..n {
        let gh = reference.grads[j];
        // grad u = J^{-T} grad_hat
        let g = [ji[0][0] * gh[0] + ji[1][0] * gh[1], ji[0][1] * gh[0] + ji[1][1] * gh[1]];
        let hh = reference.hessians[j];
        let mut m = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                m[a][b] = hh[a][b] - g[0] * map.d2[0][a][b] - g[1] * map.d2[1][a][b];
            }
        }
        let mut h = [[0.0; 2]; 2];
        for r in 0..2 {
            for s in 0..2 {
                let mut acc = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        acc += ji[a][r] * m[a][b] * ji[b][s];
                    }
                }
                h[r][s] = acc;
            }
        }
        grads.push(g);
        hessians.push(h);
    }
    Ok(ShapeEval { x: map.x, det, values: reference.values.clone(), grads, hessians })
}

/// Cached data of one element at its quadrature points.
#[derive(Debug, Clone)]
pub struct ElementCache {
    pub points: Vec<[f64; 2]>,
    /// Reference weight times Jacobian determinant.
    pub weights: Vec<f64>,
    /// `values[q * nb + i]`
    pub values: Vec<f64>,
    pub grads: Vec<[f64; 2]>,
    pub hessians: Vec<[[f64; 2]; 2]>,
    /// Shape data at the barycenter.
    pub center: ShapeEval,
}

/// Cached data of one side of an edge at the edge quadrature points.
#[derive(Debug, Clone)]
pub struct EdgeSideCache {
    pub element: usize,
    pub values: Vec<f64>,
    pub grads: Vec<[f64; 2]>,
    /// Reference points on this element, used for lifting tests of other degrees.
    pub reference_points: Vec<[f64; 2]>,
}

/// Cached data of one edge.
#[derive(Debug, Clone)]
pub struct EdgeCache {
    pub points: Vec<[f64; 2]>,
    /// Gauss weight times arclength speed.
    pub weights: Vec<f64>,
    /// Unit normal at each point, pointing away from the minus side.
    pub normals: Vec<[f64; 2]>,
    pub sides: Vec<EdgeSideCache>,
}

/// The broken space `[V_h^k]^3` on a mesh.
#[derive(Debug)]
pub struct DGSpace {
    mesh: Arc<Mesh>,
    basis: LagrangeBasis,
    element_rule: QuadratureRule,
    edge_rule: (Vec<f64>, Vec<f64>),
    elements: Vec<ElementCache>,
    edges: Vec<EdgeCache>,
}

impl DGSpace {
    /// Build the space of degree `k` (at least 2) on `mesh`.
    pub fn new(mesh: Arc<Mesh>, k: usize) -> Result<DGSpace> {
        if k < 2 {
            return Err(LdgError::InvalidArgument(format!("polynomial degree must be at least 2, got {k}")));
        }
        let shape = mesh.shape();
        let basis = LagrangeBasis::new(shape, k);
        let element_rule = QuadratureRule::element(shape, k + 2);
        let edge_rule = gauss_legendre(k + 2);
        let nb = basis.len();
        let elements = (0..mesh.num_elements())
            .into_par_iter()
            .map(|e| -> Result<ElementCache> {
                let nq = element_rule.len();
                let mut c = ElementCache {
                    points: Vec::with_capacity(nq),
                    weights: Vec::with_capacity(nq),
                    values: Vec::with_capacity(nq * nb),
                    grads: Vec::with_capacity(nq * nb),
                    hessians: Vec::with_capacity(nq * nb),
                    center: pushforward(&mesh.map(e, shape.barycenter()), &basis.eval(shape.barycenter()))?,
                };
                for (p, w) in element_rule.points.iter().zip(&element_rule.weights) {
                    let s = pushforward(&mesh.map(e, *p), &basis.eval(*p))?;
                    c.points.push(s.x);
                    c.weights.push(w * s.det);
                    c.values.extend_from_slice(&s.values);
                    c.grads.extend_from_slice(&s.grads);
                    c.hessians.extend_from_slice(&s.hessians);
                }
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        let edges = (0..mesh.edges().len())
            .into_par_iter()
            .map(|id| -> Result<EdgeCache> {
                let edge = mesh.edge(id);
                let (gx, gw) = &edge_rule;
                let mut c = EdgeCache { points: Vec::new(), weights: Vec::new(), normals: Vec::new(), sides: Vec::new() };
                for side in 0..edge.num_elements {
                    c.sides.push(EdgeSideCache {
                        element: edge.elements[side],
                        values: Vec::new(),
                        grads: Vec::new(),
                        reference_points: Vec::new(),
                    });
                }
                for (s, w) in gx.iter().zip(gw) {
                    let t0 = mesh.edge_local_t(id, 0, *s);
                    c.weights.push(w * mesh.edge_speed(edge.elements[0], edge.local[0], t0));
                    c.normals.push(mesh.edge_normal_at(edge.elements[0], edge.local[0], t0));
                    for side in 0..edge.num_elements {
                        let p = mesh.edge_reference_point(id, side, *s);
                        let sh = pushforward(&mesh.map(edge.elements[side], p), &basis.eval(p))?;
                        if side == 0 {
                            c.points.push(sh.x);
                        }
                        let sc = &mut c.sides[side];
                        sc.values.extend_from_slice(&sh.values);
                        sc.grads.extend_from_slice(&sh.grads);
                        sc.reference_points.push(p);
                    }
                }
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DGSpace { mesh, basis, element_rule, edge_rule, elements, edges })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn mesh_arc(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn degree(&self) -> usize {
        self.basis.degree()
    }

    pub fn basis(&self) -> &LagrangeBasis {
        &self.basis
    }

    /// Scalar basis functions per element.
    pub fn dofs_per_element(&self) -> usize {
        self.basis.len()
    }

    /// Scalar dofs (one component).
    pub fn scalar_dofs(&self) -> usize {
        self.basis.len() * self.mesh.num_elements()
    }

    /// Total dofs of the vector field.
    pub fn total_dofs(&self) -> usize {
        COMPONENTS * self.scalar_dofs()
    }

    /// Global index of component `c`, element `e`, local basis `i`.
    pub fn dof(&self, c: usize, e: usize, i: usize) -> usize {
        c * self.scalar_dofs() + e * self.basis.len() + i
    }

    pub fn element_rule(&self) -> &QuadratureRule {
        &self.element_rule
    }

    /// Number of element quadrature points.
    pub fn nq(&self) -> usize {
        self.element_rule.len()
    }

    /// Number of edge quadrature points.
    pub fn ng(&self) -> usize {
        self.edge_rule.0.len()
    }

    pub fn edge_rule(&self) -> (&[f64], &[f64]) {
        (&self.edge_rule.0, &self.edge_rule.1)
    }

    pub fn element(&self, e: usize) -> &ElementCache {
        &self.elements[e]
    }

    pub fn edge(&self, id: usize) -> &EdgeCache {
        &self.edges[id]
    }

    /// Physical shape data of element `e` at a reference point.
    pub fn eval_shape(&self, e: usize, reference_point: [f64; 2]) -> Result<ShapeEval> {
        pushforward(&self.mesh.map(e, reference_point), &self.basis.eval(reference_point))
    }

    /// Scalar mass matrix of element `e` for a basis of degree `degree`.
    pub fn mass_matrix(&self, e: usize, basis: &LagrangeBasis) -> DMatrix<f64> {
        let n = basis.len();
        let mut m = DMatrix::zeros(n, n);
        let rule = &self.element_rule;
        for (q, p) in rule.points.iter().enumerate() {
            let v = basis.eval(*p).values;
            let w = self.elements[e].weights[q];
            for i in 0..n {
                for j in 0..n {
                    m[(i, j)] += w * v[i] * v[j];
                }
            }
        }
        m
    }
}

/// Dirichlet data `(phi, Phi)`: boundary position and gradient.
#[derive(Clone)]
pub struct BoundaryData {
    pub phi: Arc<dyn Fn([f64; 2]) -> [f64; 3] + Send + Sync>,
    pub grad: Arc<dyn Fn([f64; 2]) -> [[f64; 2]; 3] + Send + Sync>,
}

impl std::fmt::Debug for BoundaryData {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("BoundaryData")
    }
}

impl BoundaryData {
    pub fn new(
        phi: impl Fn([f64; 2]) -> [f64; 3] + Send + Sync + 'static,
        grad: impl Fn([f64; 2]) -> [[f64; 2]; 3] + Send + Sync + 'static,
    ) -> Self {
        BoundaryData { phi: Arc::new(phi), grad: Arc::new(grad) }
    }

    /// The flat-plate data `phi(x) = (x1, x2, 0)`, `Phi = [I; 0]`.
    pub fn flat() -> Self {
        BoundaryData::new(|x| [x[0], x[1], 0.0], |_| [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    }

    /// Homogeneous data `(0, 0)`.
    pub fn zero() -> Self {
        BoundaryData::new(|_| [0.0; 3], |_| [[0.0; 2]; 3])
    }
}

/// A vector-valued broken polynomial with optional Dirichlet data.
#[derive(Debug, Clone)]
pub struct DGField {
    space: Arc<DGSpace>,
    coefficients: Vec<f64>,
    boundary: Option<BoundaryData>,
}

/// Value and gradient of a vector field at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointValue {
    pub value: [f64; 3],
    /// `grad[c][a] = d y_c / d x_a`
    pub grad: [[f64; 2]; 3],
}

/// Jumps and averages of a field at one edge quadrature point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpAverage {
    pub value_jump: [f64; 3],
    pub grad_jump: [[f64; 2]; 3],
    pub value_average: [f64; 3],
    pub grad_average: [[f64; 2]; 3],
    /// Average of the row-wise divergence of the gradient (the Laplacian).
    pub div_grad_average: [f64; 3],
}

impl DGField {
    pub fn zeros(space: Arc<DGSpace>) -> DGField {
        let n = space.total_dofs();
        DGField { space, coefficients: vec![0.0; n], boundary: None }
    }

    pub fn from_coefficients(space: Arc<DGSpace>, coefficients: Vec<f64>) -> Result<DGField> {
        if coefficients.len() != space.total_dofs() {
            return Err(LdgError::InvalidArgument(format!(
                "expected {} coefficients, got {}",
                space.total_dofs(),
                coefficients.len()
            )));
        }
        Ok(DGField { space, coefficients, boundary: None })
    }

    pub fn with_boundary_data(mut self, data: BoundaryData) -> DGField {
        self.boundary = Some(data);
        self
    }

    /// Same coefficients, homogeneous data.
    pub fn homogeneous(&self) -> DGField {
        DGField { space: self.space.clone(), coefficients: self.coefficients.clone(), boundary: None }
    }

    pub fn space(&self) -> &Arc<DGSpace> {
        &self.space
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn coefficients_mut(&mut self) -> &mut [f64] {
        &mut self.coefficients
    }

    pub fn into_coefficients(self) -> Vec<f64> {
        self.coefficients
    }

    pub fn boundary_data(&self) -> Option<&BoundaryData> {
        self.boundary.as_ref()
    }

    /// Local coefficients of component `c` on element `e`.
    pub fn local(&self, c: usize, e: usize) -> &[f64] {
        let nb = self.space.dofs_per_element();
        let start = self.space.dof(c, e, 0);
        &self.coefficients[start..start + nb]
    }

    /// Add `alpha * other` (coefficients only; data stays).
    pub fn axpy(&mut self, alpha: f64, other: &[f64]) {
        for (a, b) in self.coefficients.iter_mut().zip(other) {
            *a += alpha * b;
        }
    }

    fn combine(&self, values: &[f64], grads: &[[f64; 2]], e: usize) -> PointValue {
        let mut out = PointValue { value: [0.0; 3], grad: [[0.0; 2]; 3] };
        for c in 0..COMPONENTS {
            let u = self.local(c, e);
            for (i, ui) in u.iter().enumerate() {
                out.value[c] += ui * values[i];
                out.grad[c][0] += ui * grads[i][0];
                out.grad[c][1] += ui * grads[i][1];
            }
        }
        out
    }

    /// Evaluate on element `e` at a reference point.
    pub fn eval(&self, e: usize, reference_point: [f64; 2]) -> Result<PointValue> {
        let s = self.space.eval_shape(e, reference_point)?;
        Ok(self.combine(&s.values, &s.grads, e))
    }

    /// Evaluate at element quadrature point `q`.
    pub fn eval_qp(&self, e: usize, q: usize) -> PointValue {
        let nb = self.space.dofs_per_element();
        let c = self.space.element(e);
        self.combine(&c.values[q * nb..(q + 1) * nb], &c.grads[q * nb..(q + 1) * nb], e)
    }

    /// Evaluate at the element barycenter.
    pub fn eval_center(&self, e: usize) -> PointValue {
        let c = &self.space.element(e).center;
        self.combine(&c.values, &c.grads, e)
    }

    /// Broken Hessian `hess[c][a][b]` at element quadrature point `q`.
    pub fn hessian_qp(&self, e: usize, q: usize) -> [[[f64; 2]; 2]; 3] {
        let nb = self.space.dofs_per_element();
        let h = &self.space.element(e).hessians[q * nb..(q + 1) * nb];
        let mut out = [[[0.0; 2]; 2]; 3];
        for (c, oc) in out.iter_mut().enumerate() {
            for (i, ui) in self.local(c, e).iter().enumerate() {
                for a in 0..2 {
                    for b in 0..2 {
                        oc[a][b] += ui * h[i][a][b];
                    }
                }
            }
        }
        out
    }

    /// Traces of value and gradient from side `side` of edge `id` at edge point `g`.
    pub fn edge_trace(&self, id: usize, side: usize, g: usize) -> PointValue {
        let nb = self.space.dofs_per_element();
        let sc = &self.space.edge(id).sides[side];
        self.combine(&sc.values[g * nb..(g + 1) * nb], &sc.grads[g * nb..(g + 1) * nb], sc.element)
    }

    /// Jumps and averages at edge quadrature point `g` of active edge `id`.
    ///
    /// Dirichlet jumps are taken against the field's boundary data (zero if absent).
    pub fn jump_and_average(&self, id: usize, g: usize) -> Result<JumpAverage> {
        let edge = self.space.mesh().edge(id);
        if !edge.kind.is_active() {
            return Err(LdgError::Contract(format!("edge {id} is free; jumps are not defined there")));
        }
        let minus = self.edge_trace(id, 0, g);
        let lap_minus = self.edge_laplacian(id, 0, g)?;
        let (other, lap_other, avg_w) = match edge.kind {
            EdgeKind::Interior => (self.edge_trace(id, 1, g), self.edge_laplacian(id, 1, g)?, 0.5),
            _ => {
                let x = self.space.edge(id).points[g];
                let (phi, grad) = match &self.boundary {
                    Some(d) => ((d.phi)(x), (d.grad)(x)),
                    None => ([0.0; 3], [[0.0; 2]; 3]),
                };
                (PointValue { value: phi, grad }, [0.0; 3], 1.0)
            }
        };
        let mut out = JumpAverage {
            value_jump: [0.0; 3],
            grad_jump: [[0.0; 2]; 3],
            value_average: [0.0; 3],
            grad_average: [[0.0; 2]; 3],
            div_grad_average: [0.0; 3],
        };
        let interior = edge.kind == EdgeKind::Interior;
        for c in 0..3 {
            out.value_jump[c] = minus.value[c] - other.value[c];
            out.value_average[c] = if interior { avg_w * (minus.value[c] + other.value[c]) } else { minus.value[c] };
            out.div_grad_average[c] = if interior { avg_w * (lap_minus[c] + lap_other[c]) } else { lap_minus[c] };
            for a in 0..2 {
                out.grad_jump[c][a] = minus.grad[c][a] - other.grad[c][a];
                out.grad_average[c][a] =
                    if interior { avg_w * (minus.grad[c][a] + other.grad[c][a]) } else { minus.grad[c][a] };
            }
        }
        Ok(out)
    }

    fn edge_laplacian(&self, id: usize, side: usize, g: usize) -> Result<[f64; 3]> {
        let sc = &self.space.edge(id).sides[side];
        let s = self.space.eval_shape(sc.element, sc.reference_points[g])?;
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            for (i, ui) in self.local(c, sc.element).iter().enumerate() {
                *o += ui * (s.hessians[i][0][0] + s.hessians[i][1][1]);
            }
        }
        Ok(out)
    }

    /// Check `Phi = grad phi` (tangentially, by differences) and `Phi^T Phi = I` on Dirichlet edges.
    pub fn is_compatible(&self, tol: f64) -> bool {
        let Some(d) = &self.boundary else { return !self.space.mesh().has_dirichlet() };
        let mesh = self.space.mesh();
        for (id, edge) in mesh.edges().iter().enumerate() {
            if edge.kind != EdgeKind::Dirichlet {
                continue;
            }
            let ec = self.space.edge(id);
            for (g, x) in ec.points.iter().enumerate() {
                let n = ec.normals[g];
                let t = [-n[1], n[0]];
                let grad = (d.grad)(*x);
                let eps = 1e-6 * edge.h;
                let p = (d.phi)([x[0] + eps * t[0], x[1] + eps * t[1]]);
                let m = (d.phi)([x[0] - eps * t[0], x[1] - eps * t[1]]);
                for c in 0..3 {
                    let fd = (p[c] - m[c]) / (2.0 * eps);
                    let exact = grad[c][0] * t[0] + grad[c][1] * t[1];
                    if (fd - exact).abs() > tol.max(1e-7) {
                        return false;
                    }
                }
                for a in 0..2 {
                    for b in 0..2 {
                        let g_ab: f64 = (0..3).map(|c| grad[c][a] * grad[c][b]).sum();
                        let target = if a == b { 1.0 } else { 0.0 };
                        if (g_ab - target).abs() > tol {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

/// Elementwise L^2 projection of `f` onto the space, attaching `boundary` data.
pub fn interpolate(
    space: &Arc<DGSpace>,
    f: impl Fn([f64; 2]) -> [f64; 3] + Sync,
    boundary: Option<BoundaryData>,
) -> Result<DGField> {
    let nb = space.dofs_per_element();
    let nq = space.nq();
    let blocks = (0..space.mesh().num_elements())
        .into_par_iter()
        .map(|e| -> Result<[Vec<f64>; 3]> {
            let cache = space.element(e);
            let mut m = DMatrix::<f64>::zeros(nb, nb);
            let mut rhs = [DVector::<f64>::zeros(nb), DVector::zeros(nb), DVector::zeros(nb)];
            for q in 0..nq {
                let w = cache.weights[q];
                let v = &cache.values[q * nb..(q + 1) * nb];
                let fx = f(cache.points[q]);
                for i in 0..nb {
                    for j in 0..nb {
                        m[(i, j)] += w * v[i] * v[j];
                    }
                    for c in 0..3 {
                        rhs[c][i] += w * fx[c] * v[i];
                    }
                }
            }
            let chol = m
                .cholesky()
                .ok_or_else(|| LdgError::Singular(format!("element {e}: local mass matrix not positive definite")))?;
            Ok([0, 1, 2].map(|c| chol.solve(&rhs[c]).iter().copied().collect()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut coefficients = vec![0.0; space.total_dofs()];
    for (e, block) in blocks.iter().enumerate() {
        for c in 0..3 {
            let start = space.dof(c, e, 0);
            coefficients[start..start + nb].copy_from_slice(&block[c]);
        }
    }
    let field = DGField::from_coefficients(space.clone(), coefficients)?;
    Ok(match boundary {
        Some(b) => field.with_boundary_data(b),
        None => field,
    })
}

/// The flat plate `y(x) = (x1, x2, 0)` with flat Dirichlet data.
pub fn flat_plate(space: &Arc<DGSpace>) -> Result<DGField> {
    interpolate(space, |x| [x[0], x[1], 0.0], Some(BoundaryData::flat()))
}

/// Broken L^2 norm of `field - f`.
pub fn l2_error(field: &DGField, f: impl Fn([f64; 2]) -> [f64; 3]) -> f64 {
    let space = field.space();
    let mut acc = 0.0;
    for e in 0..space.mesh().num_elements() {
        let cache = space.element(e);
        for q in 0..space.nq() {
            let v = field.eval_qp(e, q).value;
            let ex = f(cache.points[q]);
            acc += cache.weights[q] * (0..3).map(|c| (v[c] - ex[c]).powi(2)).sum::<f64>();
        }
    }
    acc.sqrt()
}
