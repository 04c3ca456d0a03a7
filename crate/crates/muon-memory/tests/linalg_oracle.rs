//! SVD and matrix sign against nalgebra, plus property checks.

use muon_memory::linalg::{matrix_sign, svd, DenseMatrix, LinalgError, SignMethod};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn to_na(a: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(a.rows(), a.cols(), a.data())
}

/// U Vᵀ from nalgebra's SVD, skipping tiny singular values.
fn na_sign(a: &DenseMatrix) -> DMatrix<f64> {
    let s = to_na(a).svd(true, true);
    let (u, vt) = (s.u.unwrap(), s.v_t.unwrap());
    let smax = s.singular_values.max();
    let tol = a.rows().max(a.cols()) as f64 * f64::EPSILON * smax;
    let mut out = DMatrix::zeros(a.rows(), a.cols());
    for k in 0..s.singular_values.len() {
        if s.singular_values[k] > tol {
            out += u.column(k) * vt.row(k);
        }
    }
    out
}

fn max_diff(a: &DenseMatrix, b: &DMatrix<f64>) -> f64 {
    (0..a.rows())
        .flat_map(|i| (0..a.cols()).map(move |j| (i, j)))
        .map(|(i, j)| (a.get(i, j) - b[(i, j)]).abs())
        .fold(0.0, f64::max)
}

#[test]
fn sign_of_permutation_like() {
    let a = DenseMatrix::from_rows(&[vec![0.0, 2.0], vec![1.0, 0.0]]).unwrap();
    let s = matrix_sign(&a, SignMethod::Exact).unwrap();
    let want = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    assert!(s.max_abs_diff(&want).unwrap() < 1e-14);
}

#[test]
fn singular_values_match_nalgebra() {
    let a = DenseMatrix::from_fn(7, 5, |i, j| ((i * 5 + j) as f64 * 0.37).sin() + if i == j { 1.0 } else { 0.0 });
    let ours = svd(&a).unwrap();
    let mut theirs: Vec<f64> = to_na(&a).singular_values().iter().cloned().collect();
    theirs.sort_by(|x, y| y.partial_cmp(x).unwrap());
    for (x, y) in ours.sigma.iter().zip(&theirs) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
    assert!(ours.reconstruct().max_abs_diff(&a).unwrap() < 1e-12);
}

#[test]
fn errors() {
    let nan = DenseMatrix::from_fn(2, 2, |i, _| if i == 0 { f64::NAN } else { 1.0 });
    assert!(matches!(matrix_sign(&nan, SignMethod::Exact), Err(LinalgError::NonFinite(_))));
    let z = DenseMatrix::zeros(3, 3);
    assert_eq!(matrix_sign(&z, SignMethod::Exact).unwrap(), z);
    assert!(matches!(matrix_sign(&z, SignMethod::NewtonSchulz(5)), Err(LinalgError::ZeroInput)));
}

fn matrix(max: usize) -> impl Strategy<Value = DenseMatrix> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-3.0f64..3.0, r * c).prop_map(move |d| DenseMatrix::new(r, c, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn matches_nalgebra(a in matrix(8)) {
        let s = matrix_sign(&a, SignMethod::Exact).unwrap();
        prop_assert!(max_diff(&s, &na_sign(&a)) < 1e-9);
    }

    #[test]
    fn idempotent_and_scale_invariant(a in matrix(8), c in 0.01f64..100.0) {
        let s = matrix_sign(&a, SignMethod::Exact).unwrap();
        let ss = matrix_sign(&s, SignMethod::Exact).unwrap();
        prop_assert!(ss.max_abs_diff(&s).unwrap() < 1e-9);
        let sc = matrix_sign(&a.scale(c), SignMethod::Exact).unwrap();
        prop_assert!(sc.max_abs_diff(&s).unwrap() < 1e-9);
    }

    #[test]
    fn projector(a in matrix(8)) {
        let s = matrix_sign(&a, SignMethod::Exact).unwrap();
        let p = s.matmul(&s.transpose()).unwrap();
        prop_assert!(p.matmul(&p).unwrap().max_abs_diff(&p).unwrap() < 1e-9);
        // s sᵀ a = a
        prop_assert!(p.matmul(&a).unwrap().max_abs_diff(&a).unwrap() < 1e-9 * (1.0 + a.max_abs()));
    }
}
