use nalgebra::{Matrix2, Matrix3x2};
use proptest::prelude::*;

use ldg_core::oracle::{smallest_singular_value, solve_matrix_equation};

fn entry() -> impl Strategy<Value = f64> {
    -3.0..3.0f64
}

proptest! {
    #[test]
    fn matrix_equation_is_solved_within_the_bound(
        b in proptest::collection::vec(entry(), 6),
        c in proptest::collection::vec(entry(), 3),
    ) {
        let b = Matrix3x2::from_column_slice(&b);
        prop_assume!(smallest_singular_value(&b) > 0.05);
        let c = Matrix2::new(c[0], c[2], c[2], c[1]);
        let r = solve_matrix_equation(&b, &c).unwrap();
        let scale = c.norm_squared().max(1.0);
        prop_assert!(r.residual <= 1e-9 * scale, "residual {}", r.residual);
        let sym = r.a.transpose() * b + b.transpose() * r.a;
        prop_assert!((sym.component_mul(&c).sum() - c.norm_squared()).abs() <= 1e-9 * scale);
        prop_assert!(r.bound_holds());
    }
}
