//! The flopping group `{identity, flop}` and its actions on images, token
//! grids and parity-split channel axes.

mod check;
mod isotypical;
mod patch_parity;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

pub use check::{check_equivariance, CheckOptions, CheckReport};
pub use isotypical::{isotypical_decompose, IsotypicalDecomposition, DEFAULT_INVOLUTION_EPS};
pub use patch_parity::{patch_parity_forward, patch_parity_inverse, PatchParityTensors};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupElement {
    Identity,
    Flop,
}

impl GroupElement {
    pub const ALL: [GroupElement; 2] = [GroupElement::Identity, GroupElement::Flop];

    pub fn compose(self, other: Self) -> Self {
        if self == other {
            GroupElement::Identity
        } else {
            GroupElement::Flop
        }
    }

    pub fn inverse(self) -> Self {
        self
    }
}

/// Mirror parity of a filter along its width axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterParity {
    Symmetric,
    Antisymmetric,
}

/// Channel axis split into invariant channels `[0, n_inv)` followed by
/// sign-flip channels `[n_inv, n_inv + n_equi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParityLayout {
    pub n_inv: usize,
    pub n_equi: usize,
}

impl ParityLayout {
    pub fn new(n_inv: usize, n_equi: usize) -> Self {
        Self { n_inv, n_equi }
    }

    /// Even split of `d` channels.
    pub fn balanced(d: usize) -> Result<Self> {
        if d % 2 != 0 {
            return Err(crate::Error::Unsupported(format!(
                "a balanced parity layout needs an even width, got {d}"
            )));
        }
        Ok(Self::new(d / 2, d / 2))
    }

    /// Every channel invariant.
    pub fn invariant(d: usize) -> Self {
        Self::new(d, 0)
    }

    pub fn total(&self) -> usize {
        self.n_inv + self.n_equi
    }

    pub fn is_balanced(&self) -> bool {
        self.n_inv == self.n_equi
    }

    /// Diagonal of the channel action of `g`.
    pub fn signs(&self, g: GroupElement) -> Vec<f64> {
        let neg = match g {
            GroupElement::Identity => 1.0,
            GroupElement::Flop => -1.0,
        };
        std::iter::repeat_n(1.0, self.n_inv)
            .chain(std::iter::repeat_n(neg, self.n_equi))
            .collect()
    }

    pub fn expect_width(&self, d: usize) -> Result<()> {
        if d != self.total() {
            return Err(shape_err!(
                "channel extent {d} does not match layout {}+{}",
                self.n_inv,
                self.n_equi
            ));
        }
        Ok(())
    }
}

/// Token permutation induced by flopping a patch grid, with an optional
/// prefix of fixed tokens (e.g. a classification token).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAction {
    pub permutation: Vec<usize>,
    pub fixed_tokens: Vec<usize>,
}

impl TokenAction {
    pub fn identity(n: usize) -> Self {
        Self {
            permutation: (0..n).collect(),
            fixed_tokens: (0..n).collect(),
        }
    }

    /// `prefix` fixed tokens followed by a row-major `rows×cols` grid whose
    /// position `(i, j)` is exchanged with `(i, cols − 1 − j)`.
    pub fn grid_flop(prefix: usize, rows: usize, cols: usize) -> Self {
        let mut permutation: Vec<usize> = (0..prefix).collect();
        for i in 0..rows {
            for j in 0..cols {
                permutation.push(prefix + i * cols + (cols - 1 - j));
            }
        }
        let fixed_tokens = permutation
            .iter()
            .enumerate()
            .filter(|(t, &p)| *t == p)
            .map(|(t, _)| t)
            .collect();
        Self {
            permutation,
            fixed_tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }

    pub fn is_involution(&self) -> bool {
        self.permutation
            .iter()
            .enumerate()
            .all(|(t, &p)| p < self.len() && self.permutation[p] == t)
    }
}

/// How the flop acts on a tensor flowing through a network boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Representation {
    /// Flop acts as the identity (invariant outputs such as logits).
    Trivial,
    /// `C×H×W` map: width reversal, then channel signs (all channels
    /// invariant when `layout` is `None`, as for raw images).
    Spatial { layout: Option<ParityLayout> },
    /// `tokens×d` features: token permutation, then channel signs.
    Tokens { action: TokenAction, layout: ParityLayout },
}

impl Representation {
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>, g: GroupElement) -> Result<Tensor<T>> {
        match self {
            Representation::Trivial => Ok(x.clone()),
            Representation::Spatial { layout } => {
                let flopped = match g {
                    GroupElement::Identity => x.clone(),
                    GroupElement::Flop => flop_image(x)?,
                };
                match layout {
                    None => Ok(flopped),
                    Some(layout) => {
                        layout.expect_width(x.shape()[0])?;
                        let signs = layout.signs(g);
                        let plane = x.shape()[1] * x.shape()[2];
                        let mut out = flopped;
                        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
                            if signs[c] < 0.0 {
                                chunk.iter_mut().for_each(|v| *v = -*v);
                            }
                        }
                        Ok(out)
                    }
                }
            }
            Representation::Tokens { action, layout } => apply_representation(x, g, action, layout),
        }
    }
}

/// Reverses the width axis of a `C×H×W` tensor.
pub fn flop_image<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    if img.rank() != 3 {
        return Err(shape_err!("flop_image expects C×H×W, got {:?}", img.shape()));
    }
    let w = img.shape()[2];
    let mut out = img.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    Ok(out)
}

/// Action of `g` on `tokens×d` features: rows permuted by `action`, sign-flip
/// channels negated.
pub fn apply_representation<T: Scalar>(
    x: &Tensor<T>,
    g: GroupElement,
    action: &TokenAction,
    layout: &ParityLayout,
) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(shape_err!("token features must be tokens×d, got {:?}", x.shape()));
    }
    let (t, d) = (x.shape()[0], x.shape()[1]);
    if t != action.len() {
        return Err(shape_err!("{t} tokens but the action permutes {}", action.len()));
    }
    layout.expect_width(d)?;
    if g == GroupElement::Identity {
        return Ok(x.clone());
    }
    let src = x.data();
    let mut out = Vec::with_capacity(t * d);
    for &p in &action.permutation {
        let row = &src[p * d..(p + 1) * d];
        out.extend_from_slice(&row[..layout.n_inv]);
        out.extend(row[layout.n_inv..].iter().map(|&v| -v));
    }
    Tensor::new([t, d], out)
}
