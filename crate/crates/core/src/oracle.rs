//! Independent checks used by the test suites: the closed-form solution of
//! the matrix equation `(A^T B + B^T A) : C = |C|^2`, central finite
//! differences of energy functionals, midpoint quadrature, and extremal
//! eigenvalues of the Schur complement.

use nalgebra::{DMatrix, Matrix2, Matrix3x2};

use crate::error::{LdgError, Result};
use crate::flow::SaddleSystem;
use crate::linalg::lanczos_extremes;
use crate::mesh::Mesh;
use crate::space::{DGField, DGSpace};

/// Closed-form solution of the matrix equation together with its checks.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixLemmaResult {
    pub a: Matrix3x2<f64>,
    /// `|(A^T B + B^T A) : C - |C|^2|`.
    pub residual: f64,
    pub norm_a: f64,
    /// `|C| / (2 sigma_2(B))`.
    pub bound: f64,
    pub sigma2: f64,
}

impl MatrixLemmaResult {
    pub fn bound_holds(&self) -> bool {
        self.norm_a <= self.bound * (1.0 + 1e-12)
    }
}

/// Smallest singular value of a 3x2 matrix from the eigenvalues of `B^T B`.
pub fn smallest_singular_value(b: &Matrix3x2<f64>) -> f64 {
    let g: Matrix2<f64> = b.transpose() * b;
    let tr = g[(0, 0)] + g[(1, 1)];
    let det = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    let hi = 0.5 * tr + disc;
    // the small root via det / hi avoids cancellation
    let lo = if hi > 0.0 { det / hi } else { 0.0 };
    lo.max(0.0).sqrt()
}

/// `A = B C |C|^2 / (2 |B C|^2)`, with `A = 0` when `C = 0`.
pub fn solve_matrix_equation(b: &Matrix3x2<f64>, c: &Matrix2<f64>) -> Result<MatrixLemmaResult> {
    if (c[(0, 1)] - c[(1, 0)]).abs() > 1e-14 * c.norm().max(1.0) {
        return Err(LdgError::InvalidArgument("C must be symmetric".into()));
    }
    let sigma2 = smallest_singular_value(b);
    if !(sigma2 > 1e-14 * b.norm().max(1e-300)) {
        return Err(LdgError::InvalidArgument("B must have full rank".into()));
    }
    let c2 = c.norm_squared();
    let bc = b * c;
    let a = if c2 == 0.0 { Matrix3x2::zeros() } else { bc * (c2 / (2.0 * bc.norm_squared())) };
    let sym = a.transpose() * b + b.transpose() * a;
    let residual = (sym.component_mul(c).sum() - c2).abs();
    Ok(MatrixLemmaResult { a, residual, norm_a: a.norm(), bound: c.norm() / (2.0 * sigma2), sigma2 })
}

/// Central difference `(F[y + eps v] - F[y - eps v]) / (2 eps)`.
pub fn fd_variation(
    functional: impl Fn(&DGField) -> Result<f64>,
    y: &DGField,
    v: &DGField,
    eps: f64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(LdgError::InvalidArgument(format!("finite difference step {eps} outside [1e-7, 1e-3]")));
    }
    let mut plus = y.clone();
    plus.axpy(eps, v.coefficients());
    let mut minus = y.clone();
    minus.axpy(-eps, v.coefficients());
    Ok((functional(&plus)? - functional(&minus)?) / (2.0 * eps))
}

/// `sum_T |T| f(x_T)`.
pub fn midpoint_rule(mesh: &Mesh, f: impl Fn(usize, [f64; 2]) -> f64) -> f64 {
    (0..mesh.num_elements()).map(|e| mesh.area(e) * f(e, mesh.barycenter(e))).sum()
}

/// `int f` with the element quadrature of the space.
pub fn element_quadrature(space: &DGSpace, f: impl Fn(usize, [f64; 2]) -> f64) -> f64 {
    let mut acc = 0.0;
    for e in 0..space.mesh().num_elements() {
        let cache = space.element(e);
        for (x, w) in cache.points.iter().zip(&cache.weights) {
            acc += w * f(e, *x);
        }
    }
    acc
}

/// Extremal eigenvalue estimates of the Schur complement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumProbe {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub condition: f64,
}

/// Lanczos estimate of the spectrum of `S_n = B_n A^-1 B_n^T`.
pub fn schur_spectrum_probe(sys: &SaddleSystem, steps: usize) -> SpectrumProbe {
    let n = sys.schur_dim();
    let (lambda_min, lambda_max) = lanczos_extremes(|m| sys.schur_apply(m), n, steps);
    SpectrumProbe { lambda_min, lambda_max, condition: lambda_max / lambda_min }
}

/// Dense `S_n`, one column per multiplier basis function.
pub fn dense_schur(sys: &SaddleSystem) -> DMatrix<f64> {
    let n = sys.schur_dim();
    let mut s = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = sys.schur_apply(&e);
        e[j] = 0.0;
        for i in 0..n {
            s[(i, j)] = col[i];
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_right_hand_side() {
        let b = Matrix3x2::new(1.0, 0.0, 0.0, 1.0, 0.0, 0.0);
        let r = solve_matrix_equation(&b, &Matrix2::zeros()).unwrap();
        assert_eq!(r.a, Matrix3x2::zeros());
        assert_eq!(r.residual, 0.0);
    }

    #[test]
    fn identity_example() {
        let b = Matrix3x2::new(1.0, 0.0, 0.0, 1.0, 0.0, 0.0);
        let r = solve_matrix_equation(&b, &Matrix2::identity()).unwrap();
        let expected = Matrix3x2::new(0.5, 0.0, 0.0, 0.5, 0.0, 0.0);
        assert!((r.a - expected).norm() < 1e-15);
        assert!(r.residual < 1e-15);
        assert!((r.norm_a - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((r.bound - 2f64.sqrt() / 2.0).abs() < 1e-15);
        assert!(r.bound_holds());
    }

    #[test]
    fn rank_deficient_rejected() {
        let b = Matrix3x2::new(1.0, 2.0, 2.0, 4.0, 0.0, 0.0);
        assert!(solve_matrix_equation(&b, &Matrix2::identity()).is_err());
    }

    #[test]
    fn singular_value_matches_svd() {
        let b = Matrix3x2::new(0.3, -1.2, 2.0, 0.4, -0.7, 0.9);
        let s = b.svd(false, false).singular_values;
        assert!((smallest_singular_value(&b) - s.min()).abs() < 1e-14);
    }
}
