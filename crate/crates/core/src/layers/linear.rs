use rand::Rng;

use super::{add_leading_shift, join, new_param, Module};
use crate::autodiff::{Param, ParamKind, Parameterized, Tape, Var};
use crate::error::{shape_err, Result};
use crate::symmetry::ParityLayout;
use crate::tensor::{Scalar, Tensor};

/// `y = x·W + b` along the last axis of a `tokens×c` input.
#[derive(Debug, Clone)]
pub struct DenseLinear<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> DenseLinear<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, c: usize, d: usize, bias: bool, rng: &mut R) -> Result<Self> {
        Ok(Self {
            weight: new_param(join(name, "weight"), ParamKind::Weight { fan_in: c }, &[c, d], rng)?,
            bias: if bias {
                Some(new_param(join(name, "bias"), ParamKind::Bias, &[d], rng)?)
            } else {
                None
            },
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[1]
    }
}

impl<T: Scalar> Parameterized<T> for DenseLinear<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }
}

impl<T: Scalar> Module<T> for DenseLinear<T> {
    fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => tape.add_row(y, tape.param(b)),
            None => Ok(y),
        }
    }
}

/// Parity-preserving linear map: `y₁ = x₁·W₁₁ + b`, `y₋₁ = x₋₁·W₋₁₋₁`. The
/// parity-mixing blocks are structurally absent and the bias only reaches
/// invariant outputs.
#[derive(Debug, Clone)]
pub struct BlockDiagLinear<T: Scalar> {
    pub w_inv: Param<T>,
    pub w_equi: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_layout: ParityLayout,
    pub out_layout: ParityLayout,
}

impl<T: Scalar> BlockDiagLinear<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_layout: ParityLayout,
        out_layout: ParityLayout,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let (ci, ce) = (in_layout.n_inv, in_layout.n_equi);
        let (di, de) = (out_layout.n_inv, out_layout.n_equi);
        if ci == 0 || ce == 0 || di == 0 || de == 0 {
            return Err(crate::Error::Unsupported(format!(
                "block-diagonal linear needs both parities on each side, got {ci}+{ce} → {di}+{de}"
            )));
        }
        Ok(Self {
            w_inv: new_param(join(name, "w_inv"), ParamKind::Weight { fan_in: ci }, &[ci, di], rng)?,
            w_equi: new_param(join(name, "w_equi"), ParamKind::Weight { fan_in: ce }, &[ce, de], rng)?,
            bias: if bias {
                Some(new_param(join(name, "bias"), ParamKind::Bias, &[di], rng)?)
            } else {
                None
            },
            in_layout,
            out_layout,
        })
    }

    /// The equivalent `c×d` dense matrix with zero off-diagonal blocks.
    pub fn to_dense(&self) -> Result<Tensor<T>> {
        let (ci, c) = (self.in_layout.n_inv, self.in_layout.total());
        let (di, d) = (self.out_layout.n_inv, self.out_layout.total());
        let mut w = Tensor::zeros([c, d])?;
        for r in 0..ci {
            for k in 0..di {
                w.set(&[r, k], self.w_inv.value.at(&[r, k]));
            }
        }
        for r in ci..c {
            for k in di..d {
                w.set(&[r, k], self.w_equi.value.at(&[r - ci, k - di]));
            }
        }
        Ok(w)
    }

    /// Bias padded with zeros on sign-flip outputs.
    pub fn dense_bias(&self) -> Option<Tensor<T>> {
        self.bias.as_ref().map(|b| {
            let mut data = b.value.data().to_vec();
            data.resize(self.out_layout.total(), T::zero());
            Tensor::new([self.out_layout.total()], data).expect("non-empty")
        })
    }
}

impl<T: Scalar> Parameterized<T> for BlockDiagLinear<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.w_inv, &self.w_equi];
        v.extend(self.bias.as_ref());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.w_inv, &mut self.w_equi];
        v.extend(self.bias.as_mut());
        v
    }
}

impl<T: Scalar> Module<T> for BlockDiagLinear<T> {
    fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 {
            return Err(shape_err!("linear input must be tokens×c, got {shape:?}"));
        }
        self.in_layout.expect_width(shape[1])?;
        let c = self.in_layout.total();
        let x_inv = tape.cols(x, 0, self.in_layout.n_inv)?;
        let x_equi = tape.cols(x, self.in_layout.n_inv, c)?;
        let y_inv = tape.matmul(x_inv, tape.param(&self.w_inv))?;
        let y_equi = tape.matmul(x_equi, tape.param(&self.w_equi))?;
        let y = tape.concat_cols(&[y_inv, y_equi])?;
        match &self.bias {
            Some(b) => add_leading_shift(tape, y, tape.param(b), self.out_layout.total()),
            None => Ok(y),
        }
    }
}

/// Either variant behind one interface.
#[derive(Debug, Clone)]
pub enum Linear<T: Scalar> {
    Dense(DenseLinear<T>),
    BlockDiag(BlockDiagLinear<T>),
}

impl<T: Scalar> Linear<T> {
    /// `c → d` map; block-diagonal over balanced layouts when `equivariant`.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        c: usize,
        d: usize,
        bias: bool,
        equivariant: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if equivariant {
            Ok(Linear::BlockDiag(BlockDiagLinear::new(
                name,
                ParityLayout::balanced(c)?,
                ParityLayout::balanced(d)?,
                bias,
                rng,
            )?))
        } else {
            Ok(Linear::Dense(DenseLinear::new(name, c, d, bias, rng)?))
        }
    }

    pub fn is_equivariant(&self) -> bool {
        matches!(self, Linear::BlockDiag(_))
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn params(&self) -> Vec<&Param<T>> {
        match self {
            Linear::Dense(l) => l.params(),
            Linear::BlockDiag(l) => l.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Linear::Dense(l) => l.params_mut(),
            Linear::BlockDiag(l) => l.params_mut(),
        }
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        match self {
            Linear::Dense(l) => l.forward(tape, x),
            Linear::BlockDiag(l) => l.forward(tape, x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counter::count_macs;
    use crate::layers::{eval, init::reinitialize, InitScheme};
    use crate::tensor::matmul;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l1 = ParityLayout::new(1, 1);
        let mut l = BlockDiagLinear::<f64>::new("l", l1, l1, true, &mut rng).unwrap();
        l.w_inv.value = Tensor::from_f64([1, 1], &[2.0]).unwrap();
        l.w_equi.value = Tensor::from_f64([1, 1], &[3.0]).unwrap();
        l.bias.as_mut().unwrap().value = Tensor::zeros([1]).unwrap();
        let y = eval(&l, &Tensor::from_f64([1, 2], &[1.0, 4.0]).unwrap()).unwrap();
        assert_eq!(y.to_f64_vec(), vec![2.0, 12.0]);
        let y = eval(&l, &Tensor::from_f64([1, 2], &[1.0, -4.0]).unwrap()).unwrap();
        assert_eq!(y.to_f64_vec(), vec![2.0, -12.0]);
    }

    #[test]
    fn matches_padded_dense_and_halves_macs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut l = Linear::<f64>::new("l", 16, 16, true, true, &mut rng).unwrap();
        reinitialize(&mut l, InitScheme::Verification, &mut rng);
        let Linear::BlockDiag(bd) = &l else { unreachable!() };
        let x = Tensor::<f64>::randn([5, 16], &mut rng).unwrap();
        let (y, macs) = count_macs(|| eval(&l, &x).unwrap());
        let mut oracle = matmul(&x, &bd.to_dense().unwrap()).unwrap();
        let b = bd.dense_bias().unwrap();
        for row in oracle.data_mut().chunks_mut(16) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += *bv;
            }
        }
        assert!(y.max_abs_diff(&oracle).unwrap() < 1e-12);
        assert_eq!(macs.matmul, 5 * 16 * 16 / 2);
        let dense = Linear::<f64>::new("d", 16, 16, true, false, &mut rng).unwrap();
        assert_eq!(2 * l.num_params(), dense.num_params());
    }
}
