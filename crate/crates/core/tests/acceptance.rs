//! One PASS/FAIL line per acceptance criterion; exits nonzero on any failure.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use flopeq::accounting::{bench_blockdiag, count_flops, count_params, table_rows, BenchOptions};
use flopeq::autodiff::Activation;
use flopeq::gradcheck::GradCheckOptions;
use flopeq::layers::{eval, naive_correlation_1d, reduced_symmetric_correlation_1d, Pointwise};
use flopeq::models::{
    layer_gradient_suite, layer_suite, logit_invariance, model_gradient_check, model_suite, train_demo, Family,
    ModelConfig, TrainDemoOptions, Variant,
};
use flopeq::symmetry::{isotypical_decompose, CheckOptions, FilterParity, ParityLayout, DEFAULT_INVOLUTION_EPS};
use flopeq::tensor::Tensor;
use flopeq::Result;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { passed, detail })
}

fn named(family: Family, size: &str, variant: Variant) -> Result<ModelConfig> {
    ModelConfig::named(family, size, variant)
}

fn rel_err(value: f64, target: f64) -> f64 {
    (value - target).abs() / target
}

fn flop_reproduction() -> Result<Outcome> {
    let cases = [
        (Family::Vit, "B", Variant::Baseline, 17.7),
        (Family::Vit, "B", Variant::Equivariant, 9.3),
        (Family::Vit, "H", Variant::Baseline, 168.0),
        (Family::Vit, "H", Variant::Hybrid, 127.6),
        (Family::Resmlp, "B", Variant::Baseline, 23.2),
        (Family::Resmlp, "B", Variant::Equivariant, 11.7),
        (Family::ConvnextIso, "B", Variant::Baseline, 17.0),
        (Family::ConvnextIso, "B", Variant::Equivariant, 8.6),
    ];
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (family, size, variant, target) in cases {
        let cfg = named(family, size, variant)?;
        let g = count_flops(&cfg)?.gflops();
        worst = worst.max(rel_err(g, target));
        parts.push(format!("{}={g:.2}", cfg.label(size)));
    }
    outcome(
        worst <= 0.03,
        format!("worst rel. err {worst:.4} (≤ 0.03); {}", parts.join(" ")),
    )
}

fn param_reproduction() -> Result<Outcome> {
    let cases = [
        (Family::Vit, 86.6, 43.3),
        (Family::Resmlp, 115.7, 58.0),
        (Family::ConvnextIso, 87.1, 43.6),
    ];
    let (mut worst, mut ratio_ok) = (0.0f64, true);
    let mut parts = Vec::new();
    for (family, base, eq) in cases {
        let b = count_params(&named(family, "B", Variant::Baseline)?)?.millions();
        let e = count_params(&named(family, "B", Variant::Equivariant)?)?.millions();
        worst = worst.max(rel_err(b, base)).max(rel_err(e, eq));
        ratio_ok &= (0.49..=0.51).contains(&(e / b));
        parts.push(format!("{family}:{b:.2}/{e:.2}"));
    }
    for row in table_rows()? {
        if row.config.variant == Variant::Equivariant {
            ratio_ok &= (0.49..=0.51).contains(&row.param_ratio);
        }
    }
    outcome(
        worst <= 0.01 && ratio_ok,
        format!(
            "worst rel. err {worst:.4} (≤ 0.01), E/baseline ratios in [0.49, 0.51]: {ratio_ok}; {}",
            parts.join(" ")
        ),
    )
}

fn flop_halving() -> Result<Outcome> {
    let rows: Vec<_> = table_rows()?
        .into_iter()
        .filter(|r| r.config.variant == Variant::Equivariant)
        .collect();
    let lo = rows.iter().map(|r| r.flop_ratio).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.flop_ratio).fold(0.0, f64::max);
    outcome(
        !rows.is_empty() && lo >= 0.48 && hi <= 0.55,
        format!(
            "{} pairs, flop ratios in [{lo:.4}, {hi:.4}] (need [0.48, 0.55])",
            rows.len()
        ),
    )
}

fn equivariance_suite() -> Result<Outcome> {
    let opts = CheckOptions::default();
    let mut reports = layer_suite(opts)?;
    for family in Family::ALL {
        reports.extend(model_suite(&named(family, "XT", Variant::Equivariant)?, opts)?);
    }
    reports.extend(model_suite(&named(Family::Vit, "XT", Variant::Hybrid)?, opts)?);
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    let worst = reports.iter().map(|r| r.worst_violation).fold(0.0, f64::max);
    outcome(
        failed.is_empty(),
        format!(
            "{} checks × {} samples, worst {worst:.2e} (tol {:.0e}); failed: {failed:?}",
            reports.len(),
            opts.n_samples,
            opts.tol
        ),
    )
}

fn end_to_end_invariance() -> Result<Outcome> {
    let opts = CheckOptions::default();
    let (mut ok, mut parts) = (true, Vec::new());
    for family in Family::ALL {
        let e = logit_invariance(&named(family, "XT", Variant::Equivariant)?, opts)?;
        let b = logit_invariance(&named(family, "XT", Variant::Baseline)?, opts)?;
        ok &= e.worst_violation <= 1e-5 && b.worst_violation > 1e-2;
        parts.push(format!(
            "{family}: E {:.2e} / baseline {:.2e}",
            e.worst_violation, b.worst_violation
        ));
    }
    outcome(ok, parts.join("; "))
}

fn identity_pointwise() -> Result<Outcome> {
    let p = Pointwise::new(Activation::Identity, Some(ParityLayout::balanced(2)?))?;
    let x = Tensor::<f64>::randn([1024, 2], &mut ChaCha8Rng::seed_from_u64(0))?;
    let err = eval(&p, &x)?.max_abs_diff(&x)?;
    outcome(err <= 1e-6, format!("1024 pairs, max err {err:.2e} (≤ 1e-6)"))
}

fn gradient_correctness() -> Result<Outcome> {
    let opts = GradCheckOptions::default();
    let mut reports = layer_gradient_suite(opts)?;
    reports.push(model_gradient_check(
        &named(Family::Vit, "XT", Variant::Equivariant)?,
        opts,
    )?);
    let failed: Vec<_> = reports
        .iter()
        .filter(|r| !r.passed || r.n_checked < 64)
        .map(|r| r.name.clone())
        .collect();
    let worst = reports.iter().map(|r| r.worst_error).fold(0.0, f64::max);
    let fewest = reports.iter().map(|r| r.n_checked).min().unwrap_or(0);
    outcome(
        failed.is_empty(),
        format!(
            "{} checks, ≥ {fewest} coords each, worst rel. err {worst:.2e} (tol {:.0e}); failed: {failed:?}",
            reports.len(),
            opts.tol
        ),
    )
}

fn mirrored(half: &[f64], k: usize, parity: FilterParity) -> Vec<f64> {
    (0..k)
        .map(|j| {
            let m = k - 1 - j;
            match (j.cmp(&m), parity) {
                (std::cmp::Ordering::Equal, FilterParity::Antisymmetric) => 0.0,
                (std::cmp::Ordering::Greater, FilterParity::Symmetric) => half[m],
                (std::cmp::Ordering::Greater, FilterParity::Antisymmetric) => -half[m],
                _ => half[j],
            }
        })
        .collect()
}

fn reduced_correlation() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f64>::randn([64], &mut rng)?;
    let (mut worst, mut counts_ok) = (0.0f64, true);
    for k in 2usize..=9 {
        for parity in [FilterParity::Symmetric, FilterParity::Antisymmetric] {
            let free = match parity {
                FilterParity::Symmetric => k.div_ceil(2),
                FilterParity::Antisymmetric => k / 2,
            };
            let half: Vec<f64> = (0..free).map(|_| rng.sample(StandardNormal)).collect();
            let (naive, _) = naive_correlation_1d(&x, &Tensor::from_f64([k], &mirrored(&half, k, parity))?)?;
            let (fast, counts) = reduced_symmetric_correlation_1d(&x, &Tensor::from_f64([free], &half)?, k, parity)?;
            worst = worst.max(fast.max_abs_diff(&naive)?);
            counts_ok &= counts.mults == (free * fast.len()) as u64;
        }
    }
    let (a, xs) = (0.75, [1.5, -2.0, 4.0]);
    let (pair, _) = reduced_symmetric_correlation_1d(
        &Tensor::<f64>::from_f64([3], &xs)?,
        &Tensor::from_f64([1], &[a])?,
        2,
        FilterParity::Symmetric,
    )?;
    let pair_ok = pair.to_f64_vec() == vec![a * (xs[0] + xs[1]), a * (xs[1] + xs[2])];
    outcome(
        worst <= 1e-6 && counts_ok && pair_ok,
        format!("k=2..9 both parities, max err {worst:.2e} (≤ 1e-6), mults ⌈k/2⌉/⌊k/2⌋: {counts_ok}, [a,a]⋆[x,y,z]: {pair_ok}"),
    )
}

fn isotypical() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut worst_rec, mut worst_trace) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(1..=32usize);
        let s = DMatrix::<f64>::from_fn(n, n, |i, j| {
            let g: f64 = rng.sample(StandardNormal);
            f64::from(u8::from(i == j)) + g / (2.0 * (n as f64).sqrt())
        });
        let signs: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let s_inv = s.clone().try_inverse().expect("diagonally dominant");
        let a = &s * DMatrix::from_diagonal(&DVector::from_vec(signs)) * s_inv;
        let a = Tensor::new([n, n], (0..n * n).map(|k| a[(k / n, k % n)]).collect())?;
        let dec = isotypical_decompose(&a, DEFAULT_INVOLUTION_EPS)?;
        worst_rec = worst_rec.max(dec.reconstruct().max_abs_diff(&a)?);
        let trace: f64 = (0..n).map(|i| a.at(&[i, i])).sum();
        worst_trace = worst_trace.max((trace - (dec.k_plus as f64 - dec.k_minus as f64)).abs());
    }
    outcome(
        worst_rec <= 1e-8 && worst_trace <= 1e-6,
        format!("100 involutions n ≤ 32, reconstruction {worst_rec:.2e} (≤ 1e-8), trace {worst_trace:.2e} (≤ 1e-6)"),
    )
}

fn training_demo() -> Result<Outcome> {
    let r = train_demo(&TrainDemoOptions::default())?;
    outcome(
        r.diverged_at.is_none() && r.accuracy >= 0.9 && r.max_invariance_gap <= 1e-4,
        format!(
            "{} steps, held-out accuracy {:.3} (≥ 0.9, untrained {:.3}), max gap {:.2e} (≤ 1e-4)",
            r.options.steps, r.accuracy, r.initial_accuracy, r.max_invariance_gap
        ),
    )
}

fn benchmark() -> Result<Outcome> {
    let r = bench_blockdiag(BenchOptions::default())?;
    outcome(
        r.flop_ratio == 0.5 && r.max_abs_diff <= 1e-6,
        format!(
            "d={} FLOP ratio {} (= 0.5), max diff {:.2e} (≤ 1e-6), time ratio {:.3} (reported only)",
            r.options.d, r.flop_ratio, r.max_abs_diff, r.time_ratio
        ),
    )
}

type Criterion = (&'static str, Duration, fn() -> Result<Outcome>);

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("flop reproduction", Duration::from_secs(1), flop_reproduction),
        ("parameter reproduction", Duration::from_secs(1), param_reproduction),
        ("flop halving", Duration::from_secs(1), flop_halving),
        ("equivariance suite", Duration::from_secs(60), equivariance_suite),
        ("end-to-end invariance", Duration::from_secs(30), end_to_end_invariance),
        ("identity pointwise", Duration::from_secs(1), identity_pointwise),
        ("gradient correctness", Duration::from_secs(300), gradient_correctness),
        (
            "reduced symmetric correlation",
            Duration::from_secs(5),
            reduced_correlation,
        ),
        ("isotypical decomposition", Duration::from_secs(5), isotypical),
        ("training demo", Duration::from_secs(300), training_demo),
        ("benchmark integrity", Duration::from_secs(120), benchmark),
    ];
    let mut failures = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let (passed, detail) = match result {
            Ok(o) => (o.passed && elapsed <= *budget, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!passed);
        println!(
            "{} {:>2} {name}: {detail} [{:.2}s, budget {}s]",
            if passed { "PASS" } else { "FAIL" },
            i + 1,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("{}/{} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
