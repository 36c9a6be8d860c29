use rand::Rng;

use super::{add_leading_shift, join, new_param, Module};
use crate::autodiff::{Param, ParamKind, Parameterized, Tape, Var};
use crate::error::{Error, Result};
use crate::symmetry::ParityLayout;
use crate::tensor::Scalar;

pub const LN_EPS: f64 = 1e-6;
pub const LAYER_SCALE_INIT: f64 = 1e-4;

fn shift_width(d: usize, layout: Option<ParityLayout>) -> Result<usize> {
    match layout {
        None => Ok(d),
        Some(l) => {
            l.expect_width(d)?;
            Ok(l.n_inv)
        }
    }
}

/// Per-token normalisation over all channels, per-channel scale, and a shift
/// that only reaches invariant channels when a layout is given. With a
/// layout only the invariant channels are mean-centred (on their own mean):
/// the mean of the sign-flip channels changes sign under the flop, so
/// subtracting the full-vector mean would mix the two halves.
#[derive(Debug, Clone)]
pub struct LayerNorm<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub layout: Option<ParityLayout>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        d: usize,
        layout: Option<ParityLayout>,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if eps <= 0.0 {
            return Err(Error::Usage(format!("layer-norm epsilon must be positive, got {eps}")));
        }
        let n_shift = shift_width(d, layout)?;
        Ok(Self {
            gamma: new_param(join(name, "gamma"), ParamKind::Scale { init: 1.0 }, &[d], rng)?,
            beta: new_param(join(name, "beta"), ParamKind::Shift, &[n_shift], rng)?,
            layout,
            eps,
        })
    }
}

impl<T: Scalar> Parameterized<T> for LayerNorm<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let d = self.gamma.numel();
        let centered = self.layout.map_or(d, |l| l.n_inv);
        let y = tape.normalize_rows_centered(x, centered, self.eps)?;
        let y = tape.mul_row(y, tape.param(&self.gamma))?;
        add_leading_shift(tape, y, tape.param(&self.beta), d)
    }
}

/// `Diag(α)x + β` with `β` zero on sign-flip channels when a layout is given.
#[derive(Debug, Clone)]
pub struct Affine<T: Scalar> {
    pub alpha: Param<T>,
    pub beta: Param<T>,
    pub layout: Option<ParityLayout>,
}

impl<T: Scalar> Affine<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, d: usize, layout: Option<ParityLayout>, rng: &mut R) -> Result<Self> {
        let n_shift = shift_width(d, layout)?;
        Ok(Self {
            alpha: new_param(join(name, "alpha"), ParamKind::Scale { init: 1.0 }, &[d], rng)?,
            beta: new_param(join(name, "beta"), ParamKind::Shift, &[n_shift], rng)?,
            layout,
        })
    }
}

impl<T: Scalar> Parameterized<T> for Affine<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.alpha, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.alpha, &mut self.beta]
    }
}

impl<T: Scalar> Module<T> for Affine<T> {
    fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let y = tape.mul_row(x, tape.param(&self.alpha))?;
        add_leading_shift(tape, y, tape.param(&self.beta), self.alpha.numel())
    }
}

/// Learnable per-channel scaling of a residual branch.
#[derive(Debug, Clone)]
pub struct LayerScale<T: Scalar> {
    pub lambda: Param<T>,
}

impl<T: Scalar> LayerScale<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, d: usize, init: f64, rng: &mut R) -> Result<Self> {
        Ok(Self {
            lambda: new_param(join(name, "lambda"), ParamKind::Scale { init }, &[d], rng)?,
        })
    }
}

impl<T: Scalar> Parameterized<T> for LayerScale<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.lambda]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.lambda]
    }
}

impl<T: Scalar> Module<T> for LayerScale<T> {
    fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        tape.mul_row(x, tape.param(&self.lambda))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::eval;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn affine_hand_case() {
        let mut a = Affine::<f64>::new("a", 2, Some(ParityLayout::new(1, 1)), &mut rng()).unwrap();
        a.alpha.value = Tensor::from_f64([2], &[2.0, 3.0]).unwrap();
        a.beta.value = Tensor::from_f64([1], &[5.0]).unwrap();
        let y = eval(&a, &Tensor::from_f64([1, 2], &[1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(y.to_f64_vec(), vec![7.0, 3.0]);
        assert_eq!(a.num_params(), 3);
    }

    #[test]
    fn layer_scale_zero_and_identity() {
        let mut ls = LayerScale::<f64>::new("ls", 3, 0.0, &mut rng()).unwrap();
        let x = Tensor::from_f64([1, 3], &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(eval(&ls, &x).unwrap().max_abs(), 0.0);
        ls.lambda.value = Tensor::full([3], 1.0).unwrap();
        assert_eq!(eval(&ls, &x).unwrap(), x);
        let fresh = LayerScale::<f64>::new("ls", 3, LAYER_SCALE_INIT, &mut rng()).unwrap();
        assert_eq!(fresh.lambda.value.to_f64_vec(), vec![1e-4; 3]);
    }

    #[test]
    fn layernorm_degenerate_and_prenormalised() {
        let ln = LayerNorm::<f64>::new("ln", 4, Some(ParityLayout::new(2, 2)), LN_EPS, &mut rng()).unwrap();
        let flat = Tensor::from_f64([1, 4], &[3.0, 3.0, 0.0, 0.0]).unwrap();
        assert!(eval(&ln, &flat.map(|_| 3.0)).unwrap().is_finite());
        assert!(eval(&ln, &flat).unwrap().is_finite());
        let ln64 = LayerNorm::<f64>::new("ln", 4, None, 1e-12, &mut rng()).unwrap();
        let pre = Tensor::from_f64([1, 4], &[1.0, -1.0, 1.0, -1.0]).unwrap();
        assert!(eval(&ln64, &pre).unwrap().max_abs_diff(&pre).unwrap() < 1e-6);
        assert!(LayerNorm::<f64>::new("ln", 4, None, 0.0, &mut rng()).is_err());
    }
}
