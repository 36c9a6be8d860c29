use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GroupElement, Representation};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub n_samples: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            n_samples: 32,
            tol: 1e-5,
            seed: 0,
        }
    }
}

/// Outcome of a sampled check. `seed` is the base seed; sample `i` draws its
/// input from `seed + i`, and `worst_sample_seed` names the worst one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub worst_violation: f64,
    pub tol: f64,
    pub n_samples: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worst_sample_seed: Option<u64>,
}

impl CheckReport {
    pub fn summary(&self) -> String {
        format!(
            "{:<40} {} worst={:.3e} tol={:.1e} samples={} seed={}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.worst_violation,
            self.tol,
            self.n_samples,
            self.worst_sample_seed.unwrap_or(self.seed)
        )
    }
}

/// Measures `‖f(ρ_in(h)x) − ρ_out(h)f(x)‖∞ / max(1, ‖f(x)‖∞)` over standard
/// normal inputs of `input_shape`.
pub fn check_equivariance<T: Scalar>(
    name: &str,
    f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
    input_shape: &[usize],
    in_rep: &Representation,
    out_rep: &Representation,
    opts: CheckOptions,
) -> Result<CheckReport> {
    let mut worst = 0.0f64;
    let mut worst_seed = None;
    for i in 0..opts.n_samples {
        let sample_seed = opts.seed.wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let x = Tensor::<T>::randn(input_shape, &mut rng)?;
        let fx = f(&x)?;
        let f_gx = f(&in_rep.apply(&x, GroupElement::Flop)?)?;
        if !fx.is_finite() || !f_gx.is_finite() {
            return Err(Error::NonFinite(format!("{name} on sample seed {sample_seed}")));
        }
        let g_fx = out_rep.apply(&fx, GroupElement::Flop)?;
        let violation = f_gx.max_abs_diff(&g_fx)? / fx.max_abs().max(1.0);
        if worst_seed.is_none() || violation > worst {
            worst = violation;
            worst_seed = Some(sample_seed);
        }
    }
    Ok(CheckReport {
        name: name.to_string(),
        passed: worst <= opts.tol,
        worst_violation: worst,
        tol: opts.tol,
        n_samples: opts.n_samples,
        seed: opts.seed,
        worst_sample_seed: worst_seed,
    })
}
