use flopeq::symmetry::{
    isotypical_decompose, patch_parity_forward, patch_parity_inverse, GroupElement, ParityLayout, Representation,
    TokenAction, DEFAULT_INVOLUTION_EPS,
};
use flopeq::tensor::Tensor;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// `S·diag(±1)·S⁻¹` with `S = I + G/(2√n)`, `G` Gaussian, so `S` stays well
/// conditioned. Returns the matrix and its number of `+1` eigenvalues.
fn random_involution(n: usize, seed: u64) -> (Tensor<f64>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = DMatrix::<f64>::from_fn(n, n, |i, j| {
        let g: f64 = rng.sample(StandardNormal);
        f64::from(u8::from(i == j)) + g / (2.0 * (n as f64).sqrt())
    });
    let signs: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let k_plus = signs.iter().filter(|&&s| s > 0.0).count();
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(signs));
    let a = &s * d * s.clone().try_inverse().unwrap();
    let data = (0..n * n).map(|k| a[(k / n, k % n)]).collect();
    (Tensor::new([n, n], data).unwrap(), k_plus)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn involutions_decompose_and_reconstruct(n in 1usize..=32, seed in any::<u64>()) {
        let (a, k_plus) = random_involution(n, seed);
        let dec = isotypical_decompose(&a, DEFAULT_INVOLUTION_EPS).unwrap();
        prop_assert_eq!(dec.k_plus, k_plus);
        prop_assert_eq!(dec.k_plus + dec.k_minus, n);
        let err = dec.reconstruct().max_abs_diff(&a).unwrap();
        prop_assert!(err <= 1e-8, "reconstruction error {err}");
        let trace: f64 = (0..n).map(|i| a.at(&[i, i])).sum();
        prop_assert!((trace - (dec.k_plus as f64 - dec.k_minus as f64)).abs() <= 1e-6);
    }

    #[test]
    fn patch_parity_round_trip(half_grid in 1usize..4, half_d in 1usize..5, seed in any::<u64>()) {
        let grid = 2 * half_grid;
        let d = 2 * half_d;
        let layout = ParityLayout::balanced(d).unwrap();
        let x = Tensor::<f64>::randn([grid * grid, d], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let p = patch_parity_forward(&x, &layout, grid).unwrap();
        let back = patch_parity_inverse(&p).unwrap();
        prop_assert!(back.max_abs_diff(&x).unwrap() <= 1e-12);
        // The butterfly is orthonormal, so energy is preserved.
        let energy = p.pp.norm_sq() + p.pm.norm_sq() + p.mp.norm_sq() + p.mm.norm_sq();
        prop_assert!((energy - x.norm_sq()).abs() <= 1e-9 * x.norm_sq().max(1.0));
    }

    #[test]
    fn token_representation_is_an_involution(prefix in 0usize..2, rows in 1usize..5, cols in 1usize..5, half_d in 1usize..4, seed in any::<u64>()) {
        let d = 2 * half_d;
        let rep = Representation::Tokens {
            action: TokenAction::grid_flop(prefix, rows, cols),
            layout: ParityLayout::balanced(d).unwrap(),
        };
        let x = Tensor::<f64>::randn([prefix + rows * cols, d], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let once = rep.apply(&x, GroupElement::Flop).unwrap();
        prop_assert_eq!(rep.apply(&once, GroupElement::Flop).unwrap(), x.clone());
        prop_assert_eq!(rep.apply(&x, GroupElement::Identity).unwrap(), x);
    }
}

#[test]
fn non_involution_is_rejected() {
    let a = Tensor::from_f64([2, 2], &[1.0, 1.0, 0.0, 1.0]).unwrap();
    assert!(isotypical_decompose(&a, DEFAULT_INVOLUTION_EPS).is_err());
}

#[test]
fn spatial_flop_reverses_width_only() {
    let x = Tensor::<f64>::from_f64([1, 2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
    let y = Representation::Spatial { layout: None }
        .apply(&x, GroupElement::Flop)
        .unwrap();
    assert_eq!(y.data(), &[3., 2., 1., 6., 5., 4.]);
}
