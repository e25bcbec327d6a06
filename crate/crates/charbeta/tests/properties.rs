//! Property tests for the structural invariants of the panel and sieve
//! primitives.

use charbeta::panel::realized_qcov_mat;
use charbeta::sieve::ProjectionOperator;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| DMatrix::from_row_slice(rows, cols, &v))
}

fn rotation_2d() -> impl Strategy<Value = DMatrix<f64>> {
    (0.0f64..std::f64::consts::TAU).prop_map(|a| {
        DMatrix::from_row_slice(2, 2, &[a.cos(), -a.sin(), a.sin(), a.cos()])
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn qcov_symmetric_psd_and_bilinear(a in small_matrix(2, 8), b in small_matrix(2, 8), s in -2.0f64..2.0) {
        let delta = 0.1;
        let qaa = realized_qcov_mat(&a, &a, delta).unwrap();
        // Symmetry and positive semidefiniteness on the diagonal blocks.
        prop_assert!((qaa.clone() - qaa.transpose()).abs().max() < 1e-10);
        let eig = nalgebra::SymmetricEigen::new(qaa.clone());
        prop_assert!(eig.eigenvalues.min() > -1e-10);

        // Bilinearity: qcov(a, s·b) = s·qcov(a, b).
        let qab = realized_qcov_mat(&a, &b, delta).unwrap();
        let qasb = realized_qcov_mat(&a, &(&b * s), delta).unwrap();
        prop_assert!((qasb - &qab * s).abs().max() < 1e-9);

        // Additivity in the first argument.
        let qa_plus = realized_qcov_mat(&(&a + &b), &b, delta).unwrap();
        let qbb = realized_qcov_mat(&b, &b, delta).unwrap();
        prop_assert!((qa_plus - (&qab + &qbb)).abs().max() < 1e-9);
    }

    #[test]
    fn qcov_commutes_with_joint_rotation(a in small_matrix(2, 10), b in small_matrix(2, 10), r in rotation_2d()) {
        let delta = 0.25;
        let q = realized_qcov_mat(&a, &b, delta).unwrap();
        let qr = realized_qcov_mat(&(&r * &a), &(&r * &b), delta).unwrap();
        prop_assert!((qr - &r * q * r.transpose()).abs().max() < 1e-9);
    }

    #[test]
    fn projection_idempotent_and_contractive(
        raw in small_matrix(12, 3),
        v in prop::collection::vec(-5.0f64..5.0, 12),
    ) {
        // Skip degenerate bases; the builder rejects them anyway.
        let op = match ProjectionOperator::from_phi(raw, 1e8) {
            Ok(op) => op,
            Err(_) => return Ok(()),
        };
        let v = DVector::from_column_slice(&v);
        let pv = op.project_vec(&v).unwrap();
        let ppv = op.project_vec(&pv).unwrap();
        prop_assert!((ppv - &pv).abs().max() < 1e-10);
        prop_assert!(pv.norm() <= v.norm() + 1e-10);
    }
}
