use convpac::bound::{
    beta_grid_cover, beta_range, c1, generalization_bound, ArchitectureSpec, BoundInputs, ConfidenceTerm,
};
use convpac::fourier::{conv_spectral_norm_fft, operator_spectral_norm};
use convpac::linalg::{frobenius_norm, gaussian_vec, spectral_norm, Matrix, RngStream, DEFAULT_TOL};
use convpac::structured::{build_mask, sparsify, ConvShape, LayerSpec, StructuredOperator};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn svd_norm(m: &Matrix) -> f64 {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
        .singular_values()
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::new(rows, cols, gaussian_vec(rows * cols, 1.0, &RngStream::new(seed, 0))).unwrap()
}

fn conv_shape() -> impl Strategy<Value = ConvShape> {
    (1usize..=3, 1usize..=3, 1usize..=3, 3usize..=7, 1u32..=2)
        .prop_map(|(a, b, q, n, dim)| ConvShape::new(a, b, q, n, dim))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn power_iteration_matches_svd(rows in 1usize..=200, cols in 1usize..=200, seed in any::<u64>()) {
        let m = random_matrix(rows, cols, seed);
        let exact = svd_norm(&m);
        let est = spectral_norm(&m, DEFAULT_TOL).unwrap();
        prop_assert!((est - exact).abs() <= 1e-8 * exact, "{est} vs {exact}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn norm_homogeneity_and_frobenius_dominance(rows in 1usize..=30, cols in 1usize..=30, seed in any::<u64>(), c in -5.0f64..5.0) {
        let m = random_matrix(rows, cols, seed);
        let s = spectral_norm(&m, DEFAULT_TOL).unwrap();
        let sc = spectral_norm(&m.scaled(c), DEFAULT_TOL).unwrap();
        prop_assert!((sc - c.abs() * s).abs() <= 1e-8 * s.max(1.0));
        prop_assert!(s <= frobenius_norm(&m).unwrap() * (1.0 + 1e-12));
    }

    #[test]
    fn conv_and_convlike_share_support_and_tied_weights(shape in conv_shape(), seed in any::<u64>()) {
        let conv = LayerSpec::Conv(shape);
        let like = LayerSpec::ConvLike(shape);
        let mask = build_mask(&conv).unwrap();
        prop_assert_eq!(&mask, &build_mask(&like).unwrap());

        // a conv-like layer whose values repeat the filter at every position is the conv layer
        let g = gaussian_vec(shape.b * shape.a * shape.taps(), 1.0, &RngStream::new(seed, 0));
        let op = StructuredOperator::from_params(conv, g).unwrap();
        let tied: Vec<f64> = mask.entries().iter().map(|&(r, c)| op.matrix.get(r, c)).collect();
        let like_op = StructuredOperator::from_params(like, tied).unwrap();
        prop_assert_eq!(&like_op.matrix, &op.matrix);
        let a = conv_spectral_norm_fft(&op).unwrap();
        let b = operator_spectral_norm(&like_op).unwrap();
        prop_assert!((a - b).abs() <= 1e-7 * a.max(1e-12));
    }

    #[test]
    fn sparsify_is_idempotent(rows in 1usize..=20, cols in 1usize..=20, seed in any::<u64>(), frac in 0.0f64..1.0) {
        let m = random_matrix(rows, cols, seed);
        let s = 1 + (frac * rows.max(cols) as f64) as usize;
        let once = sparsify(&m, s.min(rows.max(cols))).unwrap();
        let twice = sparsify(&once.matrix, s.min(rows.max(cols))).unwrap();
        prop_assert_eq!(once.matrix, twice.matrix);
    }

    #[test]
    fn bound_is_monotone(m1 in 2usize..100_000, extra in 1usize..100_000, gamma in 0.1f64..10.0, scale in 1.0f64..3.0) {
        let layers = vec![LayerSpec::Conv(ConvShape::new(3, 8, 3, 16, 2)), LayerSpec::dense(2048, 10, 205)];
        let arch = ArchitectureSpec::with_unit_norms("p", layers.clone());
        let inputs = |m, gamma| BoundInputs { gamma, input_bound: 1.0, m, delta: 0.05, confidence: ConfidenceTerm::ClassCount(10) };
        let b = |m, gamma| generalization_bound(&arch, &inputs(m, gamma), 0.0).unwrap().bound_value;
        // more data or a larger margin never loosens the bound
        prop_assert!(b(m1 + extra, gamma) <= b(m1, gamma));
        prop_assert!(b(m1, gamma * scale) <= b(m1, gamma));
        // larger spectral norms never tighten it
        let mut big = arch.clone();
        big.spectral_norms = vec![scale, 1.0];
        let bb = generalization_bound(&big, &inputs(m1, gamma), 0.0).unwrap().bound_value;
        prop_assert!(bb >= b(m1, gamma) * (1.0 - 1e-12));
        prop_assert!(c1(&layers, true) > c1(&layers, false));
    }

    #[test]
    fn grid_cover_brute_force(gamma in 0.01f64..10.0, b in 0.1f64..10.0, d in 1usize..=20, m in 2usize..1_000_000) {
        let (grid, count) = beta_grid_cover(gamma, b, d, m).unwrap();
        prop_assert_eq!(count, grid.len());
        let (lo, hi) = beta_range(gamma, b, d, m);
        for k in 0..=400 {
            let beta = lo * (hi / lo).powf(k as f64 / 400.0);
            let covered = grid.iter().any(|&g| (g - beta).abs() <= beta / d as f64 * (1.0 + 1e-12));
            prop_assert!(covered, "beta {beta} uncovered (d={d})");
        }
    }
}
