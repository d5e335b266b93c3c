//! Reference elements, quadrature rules and nodal Lagrange bases.
//!
//! The reference quadrilateral is the unit square `[0,1]^2` and the reference
//! triangle is `{x >= 0, y >= 0, x + y <= 1}`. Local vertices are numbered
//! counterclockwise and local edge `i` runs from vertex `i` to vertex `i+1`.

use nalgebra::DMatrix;

/// Element shape, homogeneous per mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Quad,
    Tri,
}

impl Shape {
    pub fn num_vertices(self) -> usize {
        match self {
            Shape::Quad => 4,
            Shape::Tri => 3,
        }
    }

    pub fn vertices(self) -> &'static [[f64; 2]] {
        match self {
            Shape::Quad => &[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            Shape::Tri => &[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        }
    }

    pub fn barycenter(self) -> [f64; 2] {
        match self {
            Shape::Quad => [0.5, 0.5],
            Shape::Tri => [1.0 / 3.0, 1.0 / 3.0],
        }
    }

    /// Reference point on local edge `edge` at parameter `t` in `[0,1]`.
    pub fn edge_point(self, edge: usize, t: f64) -> [f64; 2] {
        let v = self.vertices();
        let n = v.len();
        let a = v[edge];
        let b = v[(edge + 1) % n];
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }

    /// Dimension of the local polynomial space of degree `k` (`Q_k` or `P_k`).
    pub fn space_dim(self, k: usize) -> usize {
        match self {
            Shape::Quad => (k + 1) * (k + 1),
            Shape::Tri => (k + 1) * (k + 2) / 2,
        }
    }
}

/// Gauss–Legendre rule with `n` points on `[0,1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Chebyshev initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        dp = if d != 0.0 { d } else { dp };
        nodes[i] = 0.5 * (1.0 - x);
        weights[i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    // ascending order
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| nodes[a].partial_cmp(&nodes[b]).unwrap());
    (idx.iter().map(|&i| nodes[i]).collect(), idx.iter().map(|&i| weights[i]).collect())
}

/// Legendre polynomial `P_n(x)` and its derivative.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for j in 2..=n {
        let jf = j as f64;
        let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Gauss–Lobatto nodes of degree `k` (k+1 points) on `[0,1]`.
pub fn gauss_lobatto_nodes(k: usize) -> Vec<f64> {
    assert!(k >= 1);
    let mut nodes = vec![0.0, 1.0];
    if k >= 2 {
        // interior nodes are roots of P'_k on [-1,1]
        for i in 1..k {
            let mut x = -(std::f64::consts::PI * i as f64 / k as f64).cos();
            for _ in 0..100 {
                let (d1, d2) = legendre_derivs(k, x);
                let dx = d1 / d2;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            nodes.push(0.5 * (1.0 + x));
        }
    }
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // snap the midpoint of symmetric rules exactly
    for x in nodes.iter_mut() {
        if (*x - 0.5).abs() < 1e-14 {
            *x = 0.5;
        }
    }
    nodes
}

/// First and second derivative of `P_n` at interior `x`.
fn legendre_derivs(n: usize, x: f64) -> (f64, f64) {
    let (p, d1) = legendre(n, x);
    let nf = n as f64;
    // (1-x^2) P'' - 2x P' + n(n+1) P = 0
    let d2 = (2.0 * x * d1 - nf * (nf + 1.0) * p) / (1.0 - x * x);
    (d1, d2)
}

/// A quadrature rule on a reference element.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// Tensor Gauss rule with `n` points per direction on the square, or the
    /// collapsed (Duffy) tensor rule on the triangle.
    pub fn element(shape: Shape, n: usize) -> Self {
        let (x, w) = gauss_legendre(n);
        let mut points = Vec::with_capacity(n * n);
        let mut weights = Vec::with_capacity(n * n);
        match shape {
            Shape::Quad => {
                for j in 0..n {
                    for i in 0..n {
                        points.push([x[i], x[j]]);
                        weights.push(w[i] * w[j]);
                    }
                }
            }
            Shape::Tri => {
                // x = u, y = v (1 - u); one extra point in u absorbs the Jacobian factor
                let (xu, wu) = gauss_legendre(n + 1);
                for (u, wu) in xu.iter().zip(&wu) {
                    for (v, wv) in x.iter().zip(&w) {
                        points.push([*u, v * (1.0 - u)]);
                        weights.push(wu * wv * (1.0 - u));
                    }
                }
            }
        }
        Self { points, weights }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Values, gradients and Hessians of all basis functions at one reference point.
#[derive(Debug, Clone, Default)]
pub struct BasisEval {
    pub values: Vec<f64>,
    pub grads: Vec<[f64; 2]>,
    pub hessians: Vec<[[f64; 2]; 2]>,
}

/// Nodal Lagrange basis of `Q_k` (square) or `P_k` (triangle).
///
/// Quadrilateral nodes are tensor Gauss–Lobatto points indexed `j*(k+1)+i`;
/// triangle nodes are equispaced.
#[derive(Debug, Clone)]
pub struct LagrangeBasis {
    shape: Shape,
    degree: usize,
    nodes: Vec<[f64; 2]>,
    /// Quad: 1D monomial coefficients, `coef1d[(p, i)]` is the x^p coefficient of l_i.
    /// Tri: 2D monomial coefficients `coef[(m, i)]`.
    coef: DMatrix<f64>,
    monomials: Vec<(usize, usize)>,
}

impl LagrangeBasis {
    pub fn new(shape: Shape, degree: usize) -> Self {
        match shape {
            Shape::Quad => {
                let z = if degree == 0 { vec![0.5] } else { gauss_lobatto_nodes(degree) };
                let n = degree + 1;
                let vdm = DMatrix::from_fn(n, n, |m, p| z[m].powi(p as i32));
                let coef = vdm.try_inverse().expect("1D Vandermonde is invertible");
                let mut nodes = Vec::with_capacity(n * n);
                for j in 0..n {
                    for i in 0..n {
                        nodes.push([z[i], z[j]]);
                    }
                }
                Self { shape, degree, nodes, coef, monomials: Vec::new() }
            }
            Shape::Tri => {
                let mut monomials = Vec::new();
                for total in 0..=degree {
                    for b in 0..=total {
                        monomials.push((total - b, b));
                    }
                }
                let mut nodes = Vec::new();
                if degree == 0 {
                    nodes.push([1.0 / 3.0, 1.0 / 3.0]);
                } else {
                    let kf = degree as f64;
                    for j in 0..=degree {
                        for i in 0..=(degree - j) {
                            nodes.push([i as f64 / kf, j as f64 / kf]);
                        }
                    }
                }
                let n = nodes.len();
                let vdm = DMatrix::from_fn(n, n, |m, p| {
                    let (a, b) = monomials[p];
                    nodes[m][0].powi(a as i32) * nodes[m][1].powi(b as i32)
                });
                let coef = vdm.try_inverse().expect("triangle Vandermonde is invertible");
                Self { shape, degree, nodes, coef, monomials }
            }
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    /// 1D Lagrange values and first/second derivatives at `x` (quad only).
    fn eval_1d(&self, x: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.degree + 1;
        let mut v = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut dd = vec![0.0; n];
        for i in 0..n {
            for p in 0..n {
                let c = self.coef[(p, i)];
                v[i] += c * pow(x, p);
                if p >= 1 {
                    d[i] += c * p as f64 * pow(x, p - 1);
                }
                if p >= 2 {
                    dd[i] += c * (p * (p - 1)) as f64 * pow(x, p - 2);
                }
            }
        }
        (v, d, dd)
    }

    /// Evaluate all basis functions with reference derivatives at `p`.
    pub fn eval(&self, p: [f64; 2]) -> BasisEval {
        let nb = self.len();
        let mut out = BasisEval {
            values: vec![0.0; nb],
            grads: vec![[0.0; 2]; nb],
            hessians: vec![[[0.0; 2]; 2]; nb],
        };
        match self.shape {
            Shape::Quad => {
                let n = self.degree + 1;
                let (vx, dx, ddx) = self.eval_1d(p[0]);
                let (vy, dy, ddy) = self.eval_1d(p[1]);
                for j in 0..n {
                    for i in 0..n {
                        let b = j * n + i;
                        out.values[b] = vx[i] * vy[j];
                        out.grads[b] = [dx[i] * vy[j], vx[i] * dy[j]];
                        out.hessians[b] = [
                            [ddx[i] * vy[j], dx[i] * dy[j]],
                            [dx[i] * dy[j], vx[i] * ddy[j]],
                        ];
                    }
                }
            }
            Shape::Tri => {
                let (x, y) = (p[0], p[1]);
                for (m, &(a, b)) in self.monomials.iter().enumerate() {
                    let v = pow(x, a) * pow(y, b);
                    let gx = if a >= 1 { a as f64 * pow(x, a - 1) * pow(y, b) } else { 0.0 };
                    let gy = if b >= 1 { b as f64 * pow(x, a) * pow(y, b - 1) } else { 0.0 };
                    let hxx = if a >= 2 { (a * (a - 1)) as f64 * pow(x, a - 2) * pow(y, b) } else { 0.0 };
                    let hyy = if b >= 2 { (b * (b - 1)) as f64 * pow(x, a) * pow(y, b - 2) } else { 0.0 };
                    let hxy = if a >= 1 && b >= 1 {
                        (a * b) as f64 * pow(x, a - 1) * pow(y, b - 1)
                    } else {
                        0.0
                    };
                    for i in 0..nb {
                        let c = self.coef[(m, i)];
                        out.values[i] += c * v;
                        out.grads[i][0] += c * gx;
                        out.grads[i][1] += c * gy;
                        out.hessians[i][0][0] += c * hxx;
                        out.hessians[i][0][1] += c * hxy;
                        out.hessians[i][1][0] += c * hxy;
                        out.hessians[i][1][1] += c * hyy;
                    }
                }
            }
        }
        out
    }

    /// Reference nodes lying on local edge `edge`, ordered along the edge.
    pub fn edge_nodes(&self, edge: usize) -> Vec<usize> {
        let nv = self.shape.num_vertices();
        let verts = self.shape.vertices();
        let a = verts[edge];
        let b = verts[(edge + 1) % nv];
        let mut on: Vec<(f64, usize)> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let t = [b[0] - a[0], b[1] - a[1]];
                let r = [p[0] - a[0], p[1] - a[1]];
                let cross = t[0] * r[1] - t[1] * r[0];
                if cross.abs() < 1e-12 {
                    let s = (t[0] * r[0] + t[1] * r[1]) / (t[0] * t[0] + t[1] * t[1]);
                    if (-1e-12..=1.0 + 1e-12).contains(&s) {
                        return Some((s, i));
                    }
                }
                None
            })
            .collect();
        on.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
        on.into_iter().map(|(_, i)| i).collect()
    }
}

#[inline]
fn pow(x: f64, p: usize) -> f64 {
    x.powi(p as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_rule_integrates_monomials_exactly() {
        for n in 1..=6 {
            let (x, w) = gauss_legendre(n);
            for p in 0..(2 * n) {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(p as i32)).sum();
                assert!((q - 1.0 / (p as f64 + 1.0)).abs() < 1e-14, "n={n} p={p}");
            }
        }
    }

    #[test]
    fn lobatto_nodes_degree_two_and_three() {
        assert_eq!(gauss_lobatto_nodes(2), vec![0.0, 0.5, 1.0]);
        let z = gauss_lobatto_nodes(3);
        let expect = 0.5 * (1.0 - 1.0 / 5f64.sqrt());
        assert!((z[1] - expect).abs() < 1e-14);
    }

    #[test]
    fn element_rule_exact_to_degree_2k_plus_3() {
        let k = 2;
        let rule = QuadratureRule::element(Shape::Quad, k + 2);
        for a in 0..=(2 * k + 3) {
            for b in 0..=(2 * k + 3) {
                let q: f64 = rule
                    .points
                    .iter()
                    .zip(&rule.weights)
                    .map(|(p, w)| w * p[0].powi(a as i32) * p[1].powi(b as i32))
                    .sum();
                let exact = 1.0 / ((a + 1) * (b + 1)) as f64;
                assert!((q - exact).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn triangle_rule_exact_for_total_degree() {
        let rule = QuadratureRule::element(Shape::Tri, 4);
        // int_T x^a y^b = a! b! / (a+b+2)!
        let fact = |n: usize| (1..=n).map(|i| i as f64).product::<f64>();
        for a in 0..=6 {
            for b in 0..=(6 - a) {
                let q: f64 = rule
                    .points
                    .iter()
                    .zip(&rule.weights)
                    .map(|(p, w)| w * p[0].powi(a as i32) * p[1].powi(b as i32))
                    .sum();
                let exact = fact(a) * fact(b) / fact(a + b + 2);
                assert!((q - exact).abs() < 1e-14, "a={a} b={b}");
            }
        }
    }

    #[test]
    fn lagrange_basis_is_nodal_and_partition_of_unity() {
        for shape in [Shape::Quad, Shape::Tri] {
            for k in 1..=3 {
                let basis = LagrangeBasis::new(shape, k);
                assert_eq!(basis.len(), shape.space_dim(k));
                for (i, node) in basis.nodes().iter().enumerate() {
                    let e = basis.eval(*node);
                    for (j, v) in e.values.iter().enumerate() {
                        let expect = if i == j { 1.0 } else { 0.0 };
                        assert!((v - expect).abs() < 1e-12);
                    }
                }
                let e = basis.eval([0.3, 0.2]);
                let s: f64 = e.values.iter().sum();
                let g: f64 = e.grads.iter().map(|g| g[0]).sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(g.abs() < 1e-11);
            }
        }
    }

    #[test]
    fn edge_nodes_are_found_in_order() {
        let basis = LagrangeBasis::new(Shape::Quad, 2);
        assert_eq!(basis.edge_nodes(0), vec![0, 1, 2]);
        assert_eq!(basis.edge_nodes(1), vec![2, 5, 8]);
        assert_eq!(basis.edge_nodes(2), vec![8, 7, 6]);
        assert_eq!(basis.edge_nodes(3), vec![6, 3, 0]);
        let tri = LagrangeBasis::new(Shape::Tri, 2);
        assert_eq!(tri.edge_nodes(0).len(), 3);
        assert_eq!(tri.edge_nodes(1).len(), 3);
    }
}
