use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;

use siv_core::quantum_core::{
    apply_channel, bell_overlap, max_abs_diff, partial_trace, tensor_product, CMatrix, DensityMatrix, KrausChannel, UnitaryOperator,
};

fn random_state(dim: usize, entries: &[(f64, f64)]) -> DensityMatrix {
    let m = DMatrix::from_fn(dim, dim, |i, j| {
        let (re, im) = entries[i * dim + j];
        Complex64::new(re, im)
    });
    let rho: CMatrix = &m * m.adjoint();
    let tr = rho.trace().re;
    DensityMatrix::new(rho / Complex64::new(tr, 0.0)).unwrap()
}

fn entries(n: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), n).prop_filter("non-zero", |v| v.iter().any(|(a, b)| a.abs() + b.abs() > 1e-3))
}

/// exp(iH) for Hermitian H built from the draw, via eigen-decomposition.
fn random_unitary(dim: usize, e: &[(f64, f64)]) -> UnitaryOperator {
    let a = DMatrix::from_fn(dim, dim, |i, j| Complex64::new(e[i * dim + j].0, e[i * dim + j].1));
    let h = (&a + a.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = h.clone().symmetric_eigen();
    let phases = DMatrix::from_diagonal(&eig.eigenvalues.map(|x| Complex64::from_polar(1.0, x)));
    UnitaryOperator::new(&eig.eigenvectors * phases * eig.eigenvectors.adjoint()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn unitary_evolution_preserves_trace_and_positivity(s in entries(16), u in entries(16)) {
        let rho = random_state(4, &s);
        let u = random_unitary(4, &u);
        prop_assert!(u.unitarity_error() < 1e-10);
        let out = u.apply(&rho).unwrap();
        prop_assert!((out.trace() - 1.0).abs() < 1e-10);
        prop_assert!(out.min_eigenvalue() > -1e-10);
    }

    #[test]
    fn depolarizing_channel_is_trace_preserving(s in entries(16), p in 0.0..1.0f64) {
        let ch = KrausChannel::depolarizing(4, p).unwrap();
        prop_assert!(ch.is_trace_preserving());
        let out = apply_channel(&random_state(4, &s), &ch).unwrap();
        prop_assert!((out.trace() - 1.0).abs() < 1e-10);
        prop_assert!(out.min_eigenvalue() > -1e-10);
    }

    #[test]
    fn partial_trace_recovers_product_factors(a in entries(4), b in entries(9)) {
        let (ra, rb) = (random_state(2, &a), random_state(3, &b));
        let joint = tensor_product(&ra, &rb).unwrap();
        let back_a = partial_trace(&joint, &[0], &[2, 3]).unwrap();
        let back_b = partial_trace(&joint, &[1], &[2, 3]).unwrap();
        prop_assert!(max_abs_diff(back_a.matrix(), ra.matrix()) < 1e-12);
        prop_assert!(max_abs_diff(back_b.matrix(), rb.matrix()) < 1e-12);
    }

    #[test]
    fn bell_overlap_is_a_probability(s in entries(16)) {
        let f = bell_overlap(&random_state(4, &s)).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&f));
    }
}
