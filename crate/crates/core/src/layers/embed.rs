use rand::Rng;

use super::{join, new_param, Module};
use crate::autodiff::{Param, ParamKind, Parameterized, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::symmetry::{FilterParity, ParityLayout, TokenAction};
use crate::tensor::{Conv2dSpec, Scalar, Tensor};

/// Non-overlapping `P×P` patches to `tokens×F` features.
///
/// The equivariant variant stores only the left `P/2` columns of every
/// filter. Its first `F/2` filters are mirror-symmetric and feed invariant
/// channels; the last `F/2` are antisymmetric and feed sign-flip channels.
/// It runs by folding each patch onto its left half (`x[j] ± x[P−1−j]`) and
/// correlating with the stored halves at stride `(P, P/2)`.
#[derive(Debug, Clone)]
pub enum PatchEmbed<T: Scalar> {
    Dense {
        filters: Param<T>,
        bias: Param<T>,
        patch: usize,
    },
    Equivariant {
        sym: Param<T>,
        anti: Param<T>,
        bias: Param<T>,
        patch: usize,
    },
}

impl<T: Scalar> PatchEmbed<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        features: usize,
        patch: usize,
        equivariant: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_channels * patch * patch;
        if !equivariant {
            return Ok(PatchEmbed::Dense {
                filters: new_param(
                    join(name, "filters"),
                    ParamKind::Weight { fan_in },
                    &[features, in_channels, patch, patch],
                    rng,
                )?,
                bias: new_param(join(name, "bias"), ParamKind::Bias, &[features], rng)?,
                patch,
            });
        }
        if patch % 2 != 0 {
            return Err(Error::Unsupported(format!(
                "mirror-constrained patch embedding needs an even patch size, got {patch}"
            )));
        }
        let half = ParityLayout::balanced(features)?.n_inv;
        let shape = [half, in_channels, patch, patch / 2];
        Ok(PatchEmbed::Equivariant {
            sym: new_param(join(name, "sym"), ParamKind::Weight { fan_in }, &shape, rng)?,
            anti: new_param(join(name, "anti"), ParamKind::Weight { fan_in }, &shape, rng)?,
            bias: new_param(join(name, "bias"), ParamKind::Bias, &[half], rng)?,
            patch,
        })
    }

    pub fn patch(&self) -> usize {
        match self {
            PatchEmbed::Dense { patch, .. } | PatchEmbed::Equivariant { patch, .. } => *patch,
        }
    }

    pub fn features(&self) -> usize {
        match self {
            PatchEmbed::Dense { filters, .. } => filters.value.shape()[0],
            PatchEmbed::Equivariant { sym, .. } => 2 * sym.value.shape()[0],
        }
    }

    pub fn is_equivariant(&self) -> bool {
        matches!(self, PatchEmbed::Equivariant { .. })
    }

    /// Patch-grid extents for an `H×W` image.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let p = self.patch();
        if h % p != 0 || w % p != 0 {
            return Err(shape_err!("image {h}×{w} is not divisible into {p}×{p} patches"));
        }
        Ok((h / p, w / p))
    }

    /// Token permutation of the flop on this embedding's output.
    pub fn token_action(&self, h: usize, w: usize) -> Result<TokenAction> {
        let (gh, gw) = self.grid(h, w)?;
        Ok(TokenAction::grid_flop(0, gh, gw))
    }

    fn assemble(&self, tape: &Tape<T>) -> Result<(Var, Var)> {
        match self {
            PatchEmbed::Dense { filters, bias, .. } => Ok((tape.param(filters), tape.param(bias))),
            PatchEmbed::Equivariant { sym, anti, bias, patch } => {
                let half = sym.value.shape()[0];
                let order: Vec<(FilterParity, usize)> = (0..half)
                    .map(|i| (FilterParity::Symmetric, i))
                    .chain((0..half).map(|i| (FilterParity::Antisymmetric, i)))
                    .collect();
                let filters = tape.mirror_assemble(Some(tape.param(sym)), Some(tape.param(anti)), &order, *patch)?;
                Ok((filters, tape.param(bias)))
            }
        }
    }

    /// Full `F×C×P×P` filter bank implied by the free parameters.
    pub fn materialized_filters(&self) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let (f, _) = self.assemble(&tape)?;
        let out = tape.value(f).clone();
        Ok(out)
    }

    /// Reference path: one strided correlation with the materialised bank.
    pub fn forward_materialized(&self, tape: &Tape<T>, img: Var) -> Result<Var> {
        let (filters, bias) = self.assemble(tape)?;
        let p = self.patch();
        let maps = tape.conv2d(img, filters, Conv2dSpec::new(p, 0, false))?;
        let tokens = to_tokens(tape, maps)?;
        let width = self.features();
        super::add_leading_shift(tape, tokens, bias, width)
    }
}

/// `F×H×W` maps to `(H·W)×F` tokens.
fn to_tokens<T: Scalar>(tape: &Tape<T>, maps: Var) -> Result<Var> {
    let s = tape.shape(maps);
    let flat = tape.reshape(maps, &[s[0], s[1] * s[2]])?;
    tape.transpose(flat)
}

impl<T: Scalar> Parameterized<T> for PatchEmbed<T> {
    fn params(&self) -> Vec<&Param<T>> {
        match self {
            PatchEmbed::Dense { filters, bias, .. } => vec![filters, bias],
            PatchEmbed::Equivariant { sym, anti, bias, .. } => vec![sym, anti, bias],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            PatchEmbed::Dense { filters, bias, .. } => vec![filters, bias],
            PatchEmbed::Equivariant { sym, anti, bias, .. } => vec![sym, anti, bias],
        }
    }
}

impl<T: Scalar> Module<T> for PatchEmbed<T> {
    fn forward(&self, tape: &Tape<T>, img: Var) -> Result<Var> {
        let s = tape.shape(img);
        if s.len() != 3 {
            return Err(shape_err!("patch embedding expects C×H×W, got {s:?}"));
        }
        self.grid(s[1], s[2])?;
        match self {
            PatchEmbed::Dense { .. } => self.forward_materialized(tape, img),
            PatchEmbed::Equivariant { sym, anti, bias, patch } => {
                let spec = Conv2dSpec {
                    stride: (*patch, patch / 2),
                    padding: (0, 0),
                    depthwise: false,
                };
                let plus = tape.mirror_fold(img, *patch, 1.0)?;
                let minus = tape.mirror_fold(img, *patch, -1.0)?;
                let inv = tape.conv2d(plus, tape.param(sym), spec)?;
                let equi = tape.conv2d(minus, tape.param(anti), spec)?;
                let inv = tape.add_row(to_tokens(tape, inv)?, tape.param(bias))?;
                let equi = to_tokens(tape, equi)?;
                tape.concat_cols(&[inv, equi])
            }
        }
    }
}

/// Learnable positional table added to patch tokens. The mirrored variant
/// stores the left half of the grid; the right half is its reflection,
/// negated on sign-flip channels.
#[derive(Debug, Clone)]
pub enum PosEmbed<T: Scalar> {
    Dense {
        table: Param<T>,
    },
    Mirrored {
        half: Param<T>,
        rows: usize,
        cols: usize,
        layout: ParityLayout,
    },
}

impl<T: Scalar> PosEmbed<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        rows: usize,
        cols: usize,
        d: usize,
        equivariant: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if !equivariant {
            return Ok(PosEmbed::Dense {
                table: new_param(join(name, "table"), ParamKind::Embedding, &[rows * cols, d], rng)?,
            });
        }
        if cols % 2 != 0 {
            return Err(Error::Unsupported(format!(
                "mirrored positional embedding needs an even grid width, got {cols}"
            )));
        }
        Ok(PosEmbed::Mirrored {
            half: new_param(join(name, "half"), ParamKind::Embedding, &[rows * cols / 2, d], rng)?,
            rows,
            cols,
            layout: ParityLayout::balanced(d)?,
        })
    }

    /// The full `tokens×d` table.
    pub fn table(&self, tape: &Tape<T>) -> Result<Var> {
        match self {
            PosEmbed::Dense { table } => Ok(tape.param(table)),
            PosEmbed::Mirrored {
                half,
                rows,
                cols,
                layout,
            } => {
                let h = tape.param(half);
                let signs = Tensor::new(
                    [layout.total()],
                    layout
                        .signs(crate::symmetry::GroupElement::Flop)
                        .into_iter()
                        .map(T::from_f64)
                        .collect(),
                )?;
                let reflected = tape.mul_row(h, tape.constant(signs))?;
                let stacked = tape.concat_rows(&[h, reflected])?;
                let n_half = rows * cols / 2;
                let hc = cols / 2;
                let mut order = Vec::with_capacity(rows * cols);
                for i in 0..*rows {
                    for j in 0..*cols {
                        order.push(if j < hc {
                            i * hc + j
                        } else {
                            n_half + i * hc + (cols - 1 - j)
                        });
                    }
                }
                tape.gather_rows(stacked, &order)
            }
        }
    }
}

impl<T: Scalar> Parameterized<T> for PosEmbed<T> {
    fn params(&self) -> Vec<&Param<T>> {
        match self {
            PosEmbed::Dense { table } => vec![table],
            PosEmbed::Mirrored { half, .. } => vec![half],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            PosEmbed::Dense { table } => vec![table],
            PosEmbed::Mirrored { half, .. } => vec![half],
        }
    }
}

impl<T: Scalar> Module<T> for PosEmbed<T> {
    fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let table = self.table(tape)?;
        tape.add(x, table)
    }
}

/// Classification token. In the equivariant variant only the invariant half
/// is stored; the sign-flip half is the constant zero.
#[derive(Debug, Clone)]
pub struct ClassToken<T: Scalar> {
    pub token: Param<T>,
    pub width: usize,
}

impl<T: Scalar> ClassToken<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, d: usize, equivariant: bool, rng: &mut R) -> Result<Self> {
        let stored = if equivariant {
            ParityLayout::balanced(d)?.n_inv
        } else {
            d
        };
        Ok(Self {
            token: new_param(join(name, "token"), ParamKind::Embedding, &[stored], rng)?,
            width: d,
        })
    }

    /// The token as a `1×d` row.
    pub fn row(&self, tape: &Tape<T>) -> Result<Var> {
        let n = self.token.numel();
        let row = tape.reshape(tape.param(&self.token), &[1, n])?;
        if n == self.width {
            return Ok(row);
        }
        let zeros = tape.constant(Tensor::zeros([1, self.width - n])?);
        tape.concat_cols(&[row, zeros])
    }
}

impl<T: Scalar> Parameterized<T> for ClassToken<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.token]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.token]
    }
}

impl<T: Scalar> Module<T> for ClassToken<T> {
    /// Prepends the token to `x`.
    fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let row = self.row(tape)?;
        tape.concat_rows(&[row, x])
    }
}
