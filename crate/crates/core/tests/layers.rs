use flopeq::autodiff::{Activation, Tape};
use flopeq::counter::count_macs;
use flopeq::gradcheck::GradCheckOptions;
use flopeq::layers::{
    eval, naive_correlation_1d, reduced_symmetric_correlation_1d, BlockDiagLinear, PatchEmbed, Pointwise,
};
use flopeq::models::layer_gradient_suite;
use flopeq::symmetry::{FilterParity, ParityLayout};
use flopeq::tensor::{matmul, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn block_diagonal_matches_zero_padded_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (c, d) in [(4, 4), (8, 12), (6, 2)] {
        let lin = BlockDiagLinear::<f64>::new(
            "fc",
            ParityLayout::balanced(c).unwrap(),
            ParityLayout::balanced(d).unwrap(),
            true,
            &mut rng,
        )
        .unwrap();
        let x = Tensor::<f64>::randn([5, c], &mut rng).unwrap();
        let (y, macs) = count_macs(|| eval(&lin, &x).unwrap());
        let bias = lin.dense_bias().unwrap();
        let mut dense = matmul(&x, &lin.to_dense().unwrap()).unwrap();
        for row in dense.data_mut().chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(bias.data()) {
                *v += b;
            }
        }
        assert!(y.max_abs_diff(&dense).unwrap() <= 1e-12);
        assert_eq!(2 * macs.total(), (5 * c * d) as u64);
    }
}

#[test]
fn identity_pointwise_is_identity() {
    let p = Pointwise::new(Activation::Identity, Some(ParityLayout::balanced(2).unwrap())).unwrap();
    let x = Tensor::<f64>::randn([1024, 2], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(eval(&p, &x).unwrap().max_abs_diff(&x).unwrap() <= 1e-6);
}

fn mirrored(half: &[f64], k: usize, parity: FilterParity) -> Vec<f64> {
    (0..k)
        .map(|j| {
            let m = k - 1 - j;
            if j == m && parity == FilterParity::Antisymmetric {
                0.0
            } else if j < half.len() && j <= m {
                half[j]
            } else {
                match parity {
                    FilterParity::Symmetric => half[m],
                    FilterParity::Antisymmetric => -half[m],
                }
            }
        })
        .collect()
}

#[test]
fn reduced_correlation_matches_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f64>::randn([64], &mut rng).unwrap();
    for k in 2usize..=9 {
        for parity in [FilterParity::Symmetric, FilterParity::Antisymmetric] {
            let free = match parity {
                FilterParity::Symmetric => k.div_ceil(2),
                FilterParity::Antisymmetric => k / 2,
            };
            let half: Vec<f64> = (0..free).map(|_| rng.random_range(-1.0..1.0)).collect();
            let full = Tensor::from_f64([k], &mirrored(&half, k, parity)).unwrap();
            let (naive, naive_counts) = naive_correlation_1d(&x, &full).unwrap();
            let (fast, counts) =
                reduced_symmetric_correlation_1d(&x, &Tensor::from_f64([free], &half).unwrap(), k, parity).unwrap();
            assert!(fast.max_abs_diff(&naive).unwrap() <= 1e-6, "k={k} {parity:?}");
            let n_out = (64 - k + 1) as u64;
            assert_eq!(counts.mults, free as u64 * n_out, "k={k} {parity:?}");
            assert_eq!(naive_counts.mults, k as u64 * n_out);
        }
    }
}

#[test]
fn pair_filter_shares_one_product() {
    let (a, x, y, z) = (1.5, 2.0, -3.0, 0.25);
    let signal = Tensor::<f64>::from_f64([3], &[x, y, z]).unwrap();
    let (out, counts) = reduced_symmetric_correlation_1d(
        &signal,
        &Tensor::from_f64([1], &[a]).unwrap(),
        2,
        FilterParity::Symmetric,
    )
    .unwrap();
    assert_eq!(out.to_f64_vec(), vec![a * (x + y), a * (y + z)]);
    assert_eq!(counts.mults, 2);
}

#[test]
fn fast_patch_embedding_matches_materialized_filters() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for eq in [false, true] {
        for patch in [2, 4, 8] {
            let embed = PatchEmbed::<f64>::new("embed", 3, 8, patch, eq, &mut rng).unwrap();
            let img = Tensor::<f64>::randn([3, 2 * patch, 4 * patch], &mut rng).unwrap();
            let fast = eval(&embed, &img).unwrap();
            let tape = Tape::no_grad();
            let v = tape.constant(img.clone());
            let y = embed.forward_materialized(&tape, v).unwrap();
            let slow = tape.value(y).clone();
            assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-10, "eq={eq} P={patch}");
        }
    }
}

#[test]
fn every_layer_gradient_matches_central_differences() {
    for r in layer_gradient_suite(GradCheckOptions::default()).unwrap() {
        assert!(r.n_checked >= 64, "{}: {} coordinates", r.name, r.n_checked);
        assert!(r.passed, "{r:?}");
    }
}
