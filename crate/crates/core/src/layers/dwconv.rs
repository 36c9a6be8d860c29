use rand::Rng;

use super::{add_leading_shift, join, new_param, Module};
use crate::autodiff::{Param, ParamKind, Parameterized, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::symmetry::{FilterParity, ParityLayout};
use crate::tensor::{Conv2dSpec, Scalar};

pub const DWCONV_KERNEL: usize = 7;

/// Filter parity of every channel, with its index into the symmetric or
/// antisymmetric bank. Invariant channels alternate symmetric/antisymmetric
/// by local index; sign-flip channels alternate antisymmetric/symmetric.
pub fn parity_assignment(layout: &ParityLayout) -> Result<Vec<(FilterParity, usize)>> {
    if !layout.is_balanced() || layout.n_inv % 2 != 0 {
        return Err(Error::Unsupported(format!(
            "parity depthwise convolution needs equal halves of even size, got {}+{}",
            layout.n_inv, layout.n_equi
        )));
    }
    let (mut n_sym, mut n_anti) = (0, 0);
    let mut out = Vec::with_capacity(layout.total());
    for c in 0..layout.total() {
        let local = if c < layout.n_inv { c } else { c - layout.n_inv };
        let symmetric = (local % 2 == 0) == (c < layout.n_inv);
        if symmetric {
            out.push((FilterParity::Symmetric, n_sym));
            n_sym += 1;
        } else {
            out.push((FilterParity::Antisymmetric, n_anti));
            n_anti += 1;
        }
    }
    Ok(out)
}

/// Output gather restoring invariant-first order: invariant channel `i`
/// (odd) swaps with sign-flip channel `n_inv + i − 1`. An involution.
pub fn parity_permutation(layout: &ParityLayout) -> Result<Vec<usize>> {
    parity_assignment(layout)?;
    let h = layout.n_inv;
    let mut perm: Vec<usize> = (0..layout.total()).collect();
    for i in (1..h).step_by(2) {
        perm.swap(i, h + i - 1);
    }
    Ok(perm)
}

/// Depthwise `7×7` same-padded convolution over a `tokens×d` map laid out on
/// a `rows×cols` grid.
#[derive(Debug, Clone)]
pub enum DepthwiseConv<T: Scalar> {
    Dense {
        filters: Param<T>,
        bias: Param<T>,
        grid: (usize, usize),
    },
    Parity {
        sym: Param<T>,
        anti: Param<T>,
        bias: Param<T>,
        grid: (usize, usize),
        order: Vec<(FilterParity, usize)>,
        perm: Vec<usize>,
    },
}

impl<T: Scalar> DepthwiseConv<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        d: usize,
        grid: (usize, usize),
        equivariant: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let k = DWCONV_KERNEL;
        let fan_in = k * k;
        if !equivariant {
            return Ok(DepthwiseConv::Dense {
                filters: new_param(join(name, "filters"), ParamKind::Weight { fan_in }, &[d, 1, k, k], rng)?,
                bias: new_param(join(name, "bias"), ParamKind::Bias, &[d], rng)?,
                grid,
            });
        }
        let layout = ParityLayout::balanced(d)?;
        let order = parity_assignment(&layout)?;
        let perm = parity_permutation(&layout)?;
        let h = layout.n_inv;
        Ok(DepthwiseConv::Parity {
            sym: new_param(
                join(name, "sym"),
                ParamKind::Weight { fan_in },
                &[h, 1, k, k.div_ceil(2)],
                rng,
            )?,
            anti: new_param(join(name, "anti"), ParamKind::Weight { fan_in }, &[h, 1, k, k / 2], rng)?,
            bias: new_param(join(name, "bias"), ParamKind::Bias, &[h], rng)?,
            grid,
            order,
            perm,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        match self {
            DepthwiseConv::Dense { grid, .. } | DepthwiseConv::Parity { grid, .. } => *grid,
        }
    }
}

impl<T: Scalar> Parameterized<T> for DepthwiseConv<T> {
    fn params(&self) -> Vec<&Param<T>> {
        match self {
            DepthwiseConv::Dense { filters, bias, .. } => vec![filters, bias],
            DepthwiseConv::Parity { sym, anti, bias, .. } => vec![sym, anti, bias],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            DepthwiseConv::Dense { filters, bias, .. } => vec![filters, bias],
            DepthwiseConv::Parity { sym, anti, bias, .. } => vec![sym, anti, bias],
        }
    }
}

impl<T: Scalar> Module<T> for DepthwiseConv<T> {
    fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let (rows, cols) = self.grid();
        let s = tape.shape(x);
        if s.len() != 2 || s[0] != rows * cols {
            return Err(shape_err!("depthwise conv expects {}×d tokens, got {s:?}", rows * cols));
        }
        let d = s[1];
        let maps = tape.reshape(tape.transpose(x)?, &[d, rows, cols])?;
        let spec = Conv2dSpec::new(1, DWCONV_KERNEL / 2, true);
        let (filters, bias, perm) = match self {
            DepthwiseConv::Dense { filters, bias, .. } => (tape.param(filters), bias, None),
            DepthwiseConv::Parity {
                sym,
                anti,
                bias,
                order,
                perm,
                ..
            } => {
                let f = tape.mirror_assemble(Some(tape.param(sym)), Some(tape.param(anti)), order, DWCONV_KERNEL)?;
                (f, bias, Some(perm))
            }
        };
        let y = tape.conv2d(maps, filters, spec)?;
        let mut y = tape.reshape(y, &[d, rows * cols])?;
        if let Some(perm) = perm {
            y = tape.gather_rows(y, perm)?;
        }
        let y = tape.transpose(y)?;
        add_leading_shift(tape, y, tape.param(bias), d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counter::count_macs;
    use crate::layers::{eval, reinitialize, InitScheme};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn assignment_balances_banks() {
        let layout = ParityLayout::new(4, 4);
        let a = parity_assignment(&layout).unwrap();
        let kinds: Vec<FilterParity> = a.iter().map(|p| p.0).collect();
        use FilterParity::*;
        assert_eq!(
            kinds,
            vec![
                Symmetric,
                Antisymmetric,
                Symmetric,
                Antisymmetric,
                Antisymmetric,
                Symmetric,
                Antisymmetric,
                Symmetric
            ]
        );
        let perm = parity_permutation(&layout).unwrap();
        assert_eq!(perm, vec![0, 4, 2, 6, 1, 5, 3, 7]);
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(perm[p], i);
        }
        assert!(parity_assignment(&ParityLayout::new(3, 3)).is_err());
    }

    #[test]
    fn half_parameters_full_macs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut e = DepthwiseConv::<f64>::new("dw", 8, (4, 4), true, &mut rng).unwrap();
        let d = DepthwiseConv::<f64>::new("dw", 8, (4, 4), false, &mut rng).unwrap();
        assert_eq!(2 * e.num_params(), d.num_params());
        reinitialize(&mut e, InitScheme::Verification, &mut rng);
        let x = Tensor::<f64>::randn([16, 8], &mut rng).unwrap();
        let (_, macs) = count_macs(|| eval(&e, &x).unwrap());
        assert_eq!(macs.conv, (8 * 16 * 49) as u64);
    }
}
