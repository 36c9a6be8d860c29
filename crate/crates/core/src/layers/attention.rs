use rand::Rng;

use super::{join, Linear, Module};
use crate::autodiff::{Param, Parameterized, Tape, Var};
use crate::error::{Error, Result};
use crate::symmetry::ParityLayout;
use crate::tensor::Scalar;

/// Multi-head self-attention with separate query/key/value/output maps.
///
/// In the equivariant variant head `h` reads the invariant channels
/// `[h·dₕ/2, (h+1)·dₕ/2)` together with the matching slice of the sign-flip
/// half, so its scores `q₁·k₁ + q₋₁·k₋₁` are unchanged by the flop.
#[derive(Debug, Clone)]
pub struct Attention<T: Scalar> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub heads: usize,
    pub layout: Option<ParityLayout>,
}

impl<T: Scalar> Attention<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, d: usize, heads: usize, equivariant: bool, rng: &mut R) -> Result<Self> {
        let split = if equivariant { 2 * heads } else { heads };
        if heads == 0 || d % split != 0 {
            return Err(Error::Config(format!(
                "width {d} cannot be split into {heads} heads{}",
                if equivariant { " with equal parity halves" } else { "" }
            )));
        }
        let layout = if equivariant {
            Some(ParityLayout::balanced(d)?)
        } else {
            None
        };
        Ok(Self {
            q: Linear::new(&join(name, "q"), d, d, true, equivariant, rng)?,
            k: Linear::new(&join(name, "k"), d, d, true, equivariant, rng)?,
            v: Linear::new(&join(name, "v"), d, d, true, equivariant, rng)?,
            o: Linear::new(&join(name, "o"), d, d, true, equivariant, rng)?,
            heads,
            layout,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    pub fn width(&self) -> usize {
        match &self.q {
            Linear::Dense(l) => l.out_features(),
            Linear::BlockDiag(l) => l.out_layout.total(),
        }
    }

    /// Column ranges of `x` owned by head `h`.
    fn head_ranges(&self, h: usize) -> Vec<(usize, usize)> {
        let dh = self.head_dim();
        match self.layout {
            None => vec![(h * dh, (h + 1) * dh)],
            Some(l) => {
                let half = dh / 2;
                vec![
                    (h * half, (h + 1) * half),
                    (l.n_inv + h * half, l.n_inv + (h + 1) * half),
                ]
            }
        }
    }

    fn head_slice(&self, tape: &Tape<T>, x: Var, h: usize) -> Result<Var> {
        let parts = self
            .head_ranges(h)
            .into_iter()
            .map(|(a, b)| tape.cols(x, a, b))
            .collect::<Result<Vec<_>>>()?;
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat_cols(&parts)
        }
    }
}

impl<T: Scalar> Parameterized<T> for Attention<T> {
    fn params(&self) -> Vec<&Param<T>> {
        [&self.q, &self.k, &self.v, &self.o]
            .into_iter()
            .flat_map(|l| l.params())
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let Self { q, k, v, o, .. } = self;
        [q, k, v, o].into_iter().flat_map(|l| l.params_mut()).collect()
    }
}

impl<T: Scalar> Module<T> for Attention<T> {
    fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let q = self.q.forward(tape, x)?;
        let k = self.k.forward(tape, x)?;
        let v = self.v.forward(tape, x)?;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut inv_parts = Vec::with_capacity(self.heads);
        let mut equi_parts = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = self.head_slice(tape, q, h)?;
            let kh = self.head_slice(tape, k, h)?;
            let vh = self.head_slice(tape, v, h)?;
            let scores = tape.scale(tape.matmul_t(qh, kh)?, scale);
            let weights = tape.softmax_rows(scores)?;
            let out = tape.matmul(weights, vh)?;
            if self.layout.is_some() {
                inv_parts.push(tape.cols(out, 0, dh / 2)?);
                equi_parts.push(tape.cols(out, dh / 2, dh)?);
            } else {
                inv_parts.push(out);
            }
        }
        inv_parts.extend(equi_parts);
        let merged = if inv_parts.len() == 1 {
            inv_parts[0]
        } else {
            tape.concat_cols(&inv_parts)?
        };
        self.o.forward(tape, merged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{eval, reinitialize, InitScheme};
    use crate::tensor::{matmul, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_token_is_value_then_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut att = Attention::<f64>::new("a", 8, 2, true, &mut rng).unwrap();
        reinitialize(&mut att, InitScheme::Verification, &mut rng);
        let x = Tensor::<f64>::randn([1, 8], &mut rng).unwrap();
        let y = eval(&att, &x).unwrap();
        let vo = eval(&att.o, &eval(&att.v, &x).unwrap()).unwrap();
        assert!(y.max_abs_diff(&vo).unwrap() < 1e-12);
    }

    #[test]
    fn head_partition_pairs_parities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let att = Attention::<f64>::new("a", 8, 2, true, &mut rng).unwrap();
        assert_eq!(att.head_ranges(1), vec![(2, 4), (6, 8)]);
        assert!(Attention::<f64>::new("a", 6, 2, true, &mut rng).is_err());
        assert!(Attention::<f64>::new("a", 6, 2, false, &mut rng).is_ok());
    }

    #[test]
    fn scores_cancel_signs() {
        let q = Tensor::<f64>::from_f64([1, 2], &[1.0, 2.0]).unwrap();
        let k = Tensor::<f64>::from_f64([2, 1], &[3.0, 4.0]).unwrap();
        assert_eq!(matmul(&q, &k).unwrap().data()[0], 11.0);
        let qf = Tensor::<f64>::from_f64([1, 2], &[1.0, -2.0]).unwrap();
        let kf = Tensor::<f64>::from_f64([2, 1], &[3.0, -4.0]).unwrap();
        assert_eq!(matmul(&qf, &kf).unwrap().data()[0], 11.0);
    }
}
