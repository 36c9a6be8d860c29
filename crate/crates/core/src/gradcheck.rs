//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Parameterized, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Coordinates to probe; every parameter tensor gets at least one while
    /// the budget lasts, the rest are drawn uniformly.
    pub n_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            n_coords: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub passed: bool,
    /// `|analytic − numeric| / max(1, |analytic|)` at the worst coordinate.
    pub worst_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub n_checked: usize,
    pub tol: f64,
}

fn choose_coords(sizes: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let total: usize = sizes.iter().sum();
    if total <= n {
        return sizes
            .iter()
            .enumerate()
            .flat_map(|(p, &s)| (0..s).map(move |i| (p, i)))
            .collect();
    }
    let mut coords: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .take(n)
        .map(|(p, &s)| (p, rng.random_range(0..s)))
        .collect();
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, &s| {
            let o = *acc;
            *acc += s;
            Some(o)
        })
        .collect();
    for flat in sample(rng, total, n - coords.len()).into_iter() {
        let p = offsets.partition_point(|&o| o <= flat) - 1;
        coords.push((p, flat - offsets[p]));
    }
    coords
}

/// Compares reverse-mode gradients of `loss` with central differences
/// `(f(θ+h) − f(θ−h)) / 2h` on sampled parameter coordinates.
pub fn grad_check<M, F>(name: &str, model: &mut M, loss: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    M: Parameterized<f64>,
    F: Fn(&M, &Tape<f64>) -> Result<Var>,
{
    let tape = Tape::new();
    let l = loss(model, &tape)?;
    let grads = tape.backward(l)?;
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| grads.get(p).to_f64_vec()).collect();
    let names: Vec<String> = model.params().iter().map(|p| p.name().to_string()).collect();
    let sizes: Vec<usize> = model.params().iter().map(|p| p.numel()).collect();

    let eval = |m: &M| -> Result<f64> {
        let t = Tape::no_grad();
        let v = loss(m, &t)?;
        let out = t.value(v).item()?;
        if !out.is_finite() {
            return Err(Error::NonFinite(format!("loss of {name}")));
        }
        Ok(out)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let coords = choose_coords(&sizes, opts.n_coords, &mut rng);
    let mut report = GradCheckReport {
        name: name.to_string(),
        passed: true,
        worst_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        n_checked: coords.len(),
        tol: opts.tol,
    };
    for &(p, i) in &coords {
        let orig = model.params_mut()[p].value.data()[i];
        model.params_mut()[p].value.data_mut()[i] = orig + opts.h;
        let plus = eval(model);
        model.params_mut()[p].value.data_mut()[i] = orig - opts.h;
        let minus = eval(model);
        model.params_mut()[p].value.data_mut()[i] = orig;
        let numeric = (plus? - minus?) / (2.0 * opts.h);
        let a = analytic[p][i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err >= report.worst_error {
            report.worst_error = err;
            report.worst_param = names[p].clone();
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.passed = report.worst_error <= opts.tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Param, ParamKind};
    use crate::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut theta = Param::new("theta", ParamKind::Bias, Tensor::<f64>::from_f64([1], &[3.0]).unwrap());
        let r = grad_check(
            "square",
            &mut theta,
            |p, tape| {
                let v = tape.param(p);
                let sq = tape.mul(v, v)?;
                Ok(tape.sum(sq))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passed);
        assert!((r.analytic - 6.0).abs() < 1e-12);
        assert!((r.numeric - 6.0).abs() < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_reported_not_panicked() {
        // A loss built from a detached copy has zero analytic gradient.
        let mut theta = Param::new(
            "theta",
            ParamKind::Bias,
            Tensor::<f64>::from_f64([2], &[1.0, 2.0]).unwrap(),
        );
        let r = grad_check(
            "detached",
            &mut theta,
            |p, tape| {
                let v = tape.constant(p.value.clone());
                let sq = tape.mul(v, v)?;
                Ok(tape.sum(sq))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!r.passed);
        assert_eq!(r.n_checked, 2);
    }

    #[test]
    fn coordinate_budget_covers_every_tensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = choose_coords(&[100, 1, 50], 10, &mut rng);
        assert_eq!(c.len(), 10);
        for p in 0..3 {
            assert!(c.iter().any(|&(q, _)| q == p));
        }
        assert!(c.iter().all(|&(p, i)| i < [100, 1, 50][p]));
    }
}
