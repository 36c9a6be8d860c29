use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamKind, Parameterized};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the training-time weight initialiser.
pub const TRUNC_NORMAL_STD: f64 = 0.02;

/// How parameter values are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Truncated normal (σ = 0.02, cut at ±2σ) for weights and embeddings,
    /// zero biases and shifts, scales at their declared initial value.
    Training,
    /// Every parameter drawn at unit-scale so that no branch is
    /// numerically negligible: weights `N(0, 1/fan_in)`, biases and shifts
    /// `N(0, 0.1²)`, scales `1 + N(0, 0.1²)`, embeddings `N(0, 0.5²)`.
    Verification,
}

fn truncated_normal<R: Rng + ?Sized>(std: f64, rng: &mut R) -> f64 {
    let n = Normal::new(0.0, std).expect("positive std");
    loop {
        let v = n.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

fn normal<R: Rng + ?Sized>(mean: f64, std: f64, rng: &mut R) -> f64 {
    Normal::new(mean, std).expect("positive std").sample(rng)
}

/// Draws one scalar for a parameter of `kind`.
pub fn sample_value<R: Rng + ?Sized>(kind: ParamKind, scheme: InitScheme, rng: &mut R) -> f64 {
    match (scheme, kind) {
        (InitScheme::Training, ParamKind::Weight { .. } | ParamKind::Embedding) => {
            truncated_normal(TRUNC_NORMAL_STD, rng)
        }
        (InitScheme::Training, ParamKind::Bias | ParamKind::Shift) => 0.0,
        (InitScheme::Training, ParamKind::Scale { init }) => init,
        (InitScheme::Verification, ParamKind::Weight { fan_in }) => {
            normal(0.0, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
        }
        (InitScheme::Verification, ParamKind::Bias | ParamKind::Shift) => normal(0.0, 0.1, rng),
        (InitScheme::Verification, ParamKind::Scale { .. }) => normal(1.0, 0.1, rng),
        (InitScheme::Verification, ParamKind::Embedding) => normal(0.0, 0.5, rng),
    }
}

pub fn init_tensor<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    kind: ParamKind,
    scheme: InitScheme,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(sample_value(kind, scheme, rng))).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Redraws every parameter of `m` in its deterministic order.
pub fn reinitialize<T: Scalar, M: Parameterized<T> + ?Sized, R: Rng + ?Sized>(
    m: &mut M,
    scheme: InitScheme,
    rng: &mut R,
) {
    for p in m.params_mut() {
        let kind = p.kind();
        for v in p.value.data_mut() {
            *v = T::from_f64(sample_value(kind, scheme, rng));
        }
    }
}
