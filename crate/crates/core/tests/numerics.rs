mod common;

use icon::autodiff::{value_and_grad, ParamVector};
use icon::numerics::{
    default_step, finite_diff_jacobian, pca_project, pearson, rmse, singular_values, spectral_norm, Matrix, Pca,
    RngStream,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn to_nalgebra(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

#[test]
fn spectral_norm_matches_full_svd() {
    for seed in 0..10 {
        let m = RngStream::new(seed, 0).normal_matrix(8, 8);
        let svd = to_nalgebra(&m).svd(false, false);
        let top = svd.singular_values.max();
        assert!((spectral_norm(&m) - top).abs() / top < 1e-8, "seed {seed}");
    }
}

#[test]
fn singular_values_match_nalgebra() {
    let m = RngStream::new(3, 0).normal_matrix(7, 5);
    let mut ours = singular_values(&m).unwrap();
    let mut theirs: Vec<f64> = to_nalgebra(&m).svd(false, false).singular_values.iter().copied().collect();
    ours.sort_by(|a, b| b.total_cmp(a));
    theirs.sort_by(|a, b| b.total_cmp(a));
    for (a, b) in ours.iter().zip(&theirs) {
        assert!((a - b).abs() < 1e-10 * b.max(1.0));
    }
}

#[test]
fn rmse_matches_scalar_loop() {
    let mut rng = RngStream::new(1, 0);
    let (a, b) = (rng.normal_matrix(37, 5), rng.normal_matrix(37, 5));
    let mut acc = 0.0;
    for i in 0..37 {
        for j in 0..5 {
            acc += (a.get(i, j) - b.get(i, j)).powi(2);
        }
    }
    assert!((rmse(&a, &b).unwrap() - (acc / 185.0).sqrt()).abs() < 1e-12);
}

#[test]
fn pearson_hand_computed_case() {
    // Covariance 1.5, variances 1 and 7/3 (divisor n − 1).
    let expected = 1.5 / (1.0_f64 * (7.0_f64 / 3.0)).sqrt();
    assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap() - expected).abs() < 1e-12);
    assert!((expected - 0.98198).abs() < 1e-5);
}

fn pairwise(m: &Matrix) -> Vec<f64> {
    let mut d = Vec::new();
    for i in 0..m.rows() {
        for j in 0..i {
            d.push(m.row(i).iter().zip(m.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        }
    }
    d
}

#[test]
fn full_rank_projection_is_an_isometry() {
    let p = RngStream::new(5, 0).normal_matrix(40, 2);
    let q = pca_project(&p, 2).unwrap();
    for (a, b) in pairwise(&p).iter().zip(pairwise(&q)) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn reconstruction_error_equals_discarded_variance() {
    let mut rng = RngStream::new(6, 0);
    let scales = [3.0, 2.0, 1.0, 0.5, 0.2];
    let p = Matrix::from_fn(500, 5, |_, j| scales[j] * rng.normal());
    let pca = Pca::fit(&p).unwrap();
    let k = 2;
    let coords = pca.project(&p, k).unwrap();
    let mut back = coords.gemm(false, &pca.axes.slice_cols(0, k), true).unwrap();
    back.add_row_vector(&pca.mean);
    let err = (0..p.rows())
        .map(|i| p.row(i).iter().zip(back.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum::<f64>()
        / p.rows() as f64;
    let discarded: f64 = pca.eigenvalues[k..].iter().sum();
    assert!((err - discarded).abs() / discarded < 1e-8);
}

#[test]
fn finite_differences_match_reverse_mode_on_a_flow() {
    let f = common::randomized_flow(5, 5, 3, 8, 9, 0.2);
    let x0: Vec<f64> = (0..5).map(|i| 0.3 * i as f64 - 0.5).collect();
    let mut xp = ParamVector::new();
    xp.push("x", 1, 5).unwrap().copy_from_slice(&x0);
    let mut reverse = Matrix::zeros(5, 5);
    for out in 0..5 {
        let lg = value_and_grad(&xp, |t, s| {
            let xv = t.param(s, &xp, "x")?;
            let sf = t.bind(&f.params);
            let z = f.arch.tape_inverse(t, sf, &f.params, xv)?;
            let col = t.slice_cols(z, out, out + 1)?;
            Ok(t.sum_all(col))
        })
        .unwrap();
        for (j, g) in lg.grad.iter().enumerate() {
            reverse.set(out, j, *g);
        }
    }
    let inv = |v: &[f64]| Ok(f.inverse(&Matrix::row_vector(v))?.into_vec());
    let numeric = finite_diff_jacobian(inv, &x0, None).unwrap();
    let scale = reverse.max_abs();
    assert!(numeric.max_abs_diff(&reverse) / scale < 1e-4);
}

#[test]
fn default_step_scales_with_the_point() {
    assert_eq!(default_step(&[0.1, -0.2]), 1e-4);
    assert!((default_step(&[3.0, -50.0]) - 5e-3).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn power_iteration_never_exceeds_frobenius(seed in 0u64..10_000, r in 1usize..7, c in 1usize..7) {
        let m = RngStream::new(seed, 1).normal_matrix(r, c);
        prop_assert!(spectral_norm(&m) <= m.frobenius_norm() * (1.0 + 1e-12));
    }

    #[test]
    fn draws_are_reproducible_per_stream(seed in any::<u64>(), stream in any::<u64>()) {
        let draw = || {
            let mut r = RngStream::new(seed, stream);
            (r.normal(), r.uniform(-1.0, 1.0), r.index(97), r.permutation(8))
        };
        prop_assert_eq!(draw(), draw());
    }

    #[test]
    fn linear_maps_have_exact_jacobians(seed in 0u64..10_000, n in 1usize..6) {
        let mut rng = RngStream::new(seed, 2);
        let a = rng.normal_matrix(n, n);
        let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let f = |v: &[f64]| Ok(a.matmul(&Matrix::from_vec(n, 1, v.to_vec())?)?.into_vec());
        let j = finite_diff_jacobian(f, &x, None).unwrap();
        prop_assert!(j.max_abs_diff(&a) < 1e-9);
    }
}
