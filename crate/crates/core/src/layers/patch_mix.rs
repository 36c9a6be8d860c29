use std::f64::consts::FRAC_1_SQRT_2;

use rand::Rng;

use super::{join, new_param, Module};
use crate::autodiff::{Param, ParamKind, Parameterized, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::symmetry::{ParityLayout, PatchParityTensors};
use crate::tensor::{matmul, Scalar, Tensor};

/// Linear mixing along the token axis of a `tokens×d` map: `y = W·x + b`.
///
/// The parity variant works on the column-pair butterfly of an `N×N` grid:
/// `W_even` mixes the mirror-even halves, `W_odd` the mirror-odd halves, and
/// the bias only reaches mirror-even rows of invariant channels.
#[derive(Debug, Clone)]
pub enum PatchMix<T: Scalar> {
    Dense {
        weight: Param<T>,
        bias: Param<T>,
    },
    Parity {
        w_even: Param<T>,
        w_odd: Param<T>,
        bias: Param<T>,
        grid: usize,
        layout: ParityLayout,
    },
}

impl<T: Scalar> PatchMix<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, grid: usize, d: usize, equivariant: bool, rng: &mut R) -> Result<Self> {
        let t = grid * grid;
        if !equivariant {
            return Ok(PatchMix::Dense {
                weight: new_param(join(name, "weight"), ParamKind::Weight { fan_in: t }, &[t, t], rng)?,
                bias: new_param(join(name, "bias"), ParamKind::Bias, &[t], rng)?,
            });
        }
        if grid % 2 != 0 {
            return Err(Error::Unsupported(format!(
                "parity patch mixing needs an even grid width, got {grid}"
            )));
        }
        let h = t / 2;
        Ok(PatchMix::Parity {
            w_even: new_param(join(name, "w_even"), ParamKind::Weight { fan_in: h }, &[h, h], rng)?,
            w_odd: new_param(join(name, "w_odd"), ParamKind::Weight { fan_in: h }, &[h, h], rng)?,
            bias: new_param(join(name, "bias"), ParamKind::Bias, &[h], rng)?,
            grid,
            layout: ParityLayout::balanced(d)?,
        })
    }

    /// Grid rows feeding the butterfly: `(left, right)` token indices of
    /// every column pair in row-major pair order.
    fn pair_rows(grid: usize) -> (Vec<usize>, Vec<usize>) {
        let half = grid / 2;
        let mut left = Vec::with_capacity(grid * half);
        let mut right = Vec::with_capacity(grid * half);
        for i in 0..grid {
            for j in 0..half {
                left.push(i * grid + j);
                right.push(i * grid + grid - 1 - j);
            }
        }
        (left, right)
    }
}

impl<T: Scalar> Parameterized<T> for PatchMix<T> {
    fn params(&self) -> Vec<&Param<T>> {
        match self {
            PatchMix::Dense { weight, bias } => vec![weight, bias],
            PatchMix::Parity {
                w_even, w_odd, bias, ..
            } => vec![w_even, w_odd, bias],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            PatchMix::Dense { weight, bias } => vec![weight, bias],
            PatchMix::Parity {
                w_even, w_odd, bias, ..
            } => vec![w_even, w_odd, bias],
        }
    }
}

impl<T: Scalar> Module<T> for PatchMix<T> {
    fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        match self {
            PatchMix::Dense { weight, bias } => {
                let y = tape.matmul(tape.param(weight), x)?;
                tape.add_col(y, tape.param(bias))
            }
            PatchMix::Parity {
                w_even,
                w_odd,
                bias,
                grid,
                layout,
            } => {
                let s = tape.shape(x);
                if s.len() != 2 || s[0] != grid * grid {
                    return Err(shape_err!("patch mixing expects {}×d tokens, got {s:?}", grid * grid));
                }
                layout.expect_width(s[1])?;
                let d = s[1];
                let (left, right) = Self::pair_rows(*grid);
                let a = tape.gather_rows(x, &left)?;
                let b = tape.gather_rows(x, &right)?;
                let even = tape.scale(tape.add(a, b)?, FRAC_1_SQRT_2);
                let odd = tape.scale(tape.sub(a, b)?, FRAC_1_SQRT_2);
                let even = tape.matmul(tape.param(w_even), even)?;
                let odd = tape.matmul(tape.param(w_odd), odd)?;
                let even_inv = tape.add_col(tape.cols(even, 0, layout.n_inv)?, tape.param(bias))?;
                let even = tape.concat_cols(&[even_inv, tape.cols(even, layout.n_inv, d)?])?;
                let a = tape.scale(tape.add(even, odd)?, FRAC_1_SQRT_2);
                let b = tape.scale(tape.sub(even, odd)?, FRAC_1_SQRT_2);
                let stacked = tape.concat_rows(&[a, b])?;
                let n_half = left.len();
                let mut order = vec![0; 2 * n_half];
                for (p, (&l, &r)) in left.iter().zip(&right).enumerate() {
                    order[l] = p;
                    order[r] = n_half + p;
                }
                tape.gather_rows(stacked, &order)
            }
        }
    }
}

/// Token mixing applied directly to the four parity tensors: `w_even` acts
/// on the mirror-even pair, `w_odd` on the mirror-odd pair.
pub fn resmlp_patch_mix<T: Scalar>(
    x: &PatchParityTensors<T>,
    w_even: &Tensor<T>,
    w_odd: &Tensor<T>,
) -> Result<PatchParityTensors<T>> {
    let rows = x.pp.shape()[0];
    for w in [w_even, w_odd] {
        if w.shape() != [rows, rows] {
            return Err(shape_err!("mixing matrix {:?} for {rows} patch pairs", w.shape()));
        }
    }
    Ok(PatchParityTensors {
        pp: matmul(w_even, &x.pp)?,
        pm: matmul(w_odd, &x.pm)?,
        mp: matmul(w_even, &x.mp)?,
        mm: matmul(w_odd, &x.mm)?,
        grid: x.grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counter::count_macs;
    use crate::layers::{eval, reinitialize, InitScheme};
    use crate::symmetry::{patch_parity_forward, patch_parity_inverse};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weights_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn([16, 4], &mut rng).unwrap();
        let p = patch_parity_forward(&x, &ParityLayout::new(2, 2), 4).unwrap();
        let id = Tensor::eye(8).unwrap();
        assert_eq!(resmlp_patch_mix(&p, &id, &id).unwrap(), p);
    }

    #[test]
    fn layer_matches_parity_tensor_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mix = PatchMix::<f64>::new("mix", 4, 6, true, &mut rng).unwrap();
        reinitialize(&mut mix, InitScheme::Verification, &mut rng);
        let PatchMix::Parity {
            w_even, w_odd, bias, ..
        } = &mix
        else {
            unreachable!()
        };
        let x = Tensor::<f64>::randn([16, 6], &mut rng).unwrap();
        let (y, macs) = count_macs(|| eval(&mix, &x).unwrap());
        assert_eq!(macs.matmul, 2 * 8 * 8 * 6);
        let layout = ParityLayout::new(3, 3);
        let mut p = resmlp_patch_mix(
            &patch_parity_forward(&x, &layout, 4).unwrap(),
            &w_even.value,
            &w_odd.value,
        )
        .unwrap();
        for r in 0..8 {
            for c in 0..3 {
                let v = p.pp.at(&[r, c]) + bias.value.data()[r];
                p.pp.set(&[r, c], v);
            }
        }
        let oracle = patch_parity_inverse(&p).unwrap();
        assert!(y.max_abs_diff(&oracle).unwrap() < 1e-12);
    }

    #[test]
    fn half_the_dense_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = PatchMix::<f64>::new("m", 4, 8, true, &mut rng).unwrap();
        let d = PatchMix::<f64>::new("m", 4, 8, false, &mut rng).unwrap();
        assert_eq!(2 * e.num_params(), d.num_params());
    }
}
