//! Flop-equivariant layers and their unconstrained counterparts.
//!
//! Channels follow one global convention: invariant channels first, sign-flip
//! channels second. Every layer exists as a baseline and an equivariant
//! variant behind the same call signature.

mod attention;
mod correlation;
mod dump;
mod dwconv;
mod embed;
pub mod init;
mod linear;
mod norm;
mod patch_mix;
mod pointwise;

use rand::Rng;

use crate::autodiff::{Param, ParamKind, Parameterized, Tape, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

pub use attention::Attention;
pub use correlation::{naive_correlation_1d, reduced_symmetric_correlation_1d, CorrelationCounts};
pub use dump::{dump_params, DumpManifest};
pub use dwconv::{parity_assignment, parity_permutation, DepthwiseConv, DWCONV_KERNEL};
pub use embed::{ClassToken, PatchEmbed, PosEmbed};
pub use init::{reinitialize, InitScheme};
pub use linear::{BlockDiagLinear, DenseLinear, Linear};
pub use norm::{Affine, LayerNorm, LayerScale, LAYER_SCALE_INIT, LN_EPS};
pub use patch_mix::{resmlp_patch_mix, PatchMix};
pub use pointwise::Pointwise;

/// A differentiable map recorded on a tape.
pub trait Module<T: Scalar>: Parameterized<T> {
    fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var>;
}

/// Runs a module on a gradient-free tape.
pub fn eval<T: Scalar, M: Module<T> + ?Sized>(m: &M, x: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    let v = tape.constant(x.clone());
    let y = m.forward(&tape, v)?;
    let out = tape.value(y).clone();
    Ok(out)
}

pub(crate) fn new_param<T: Scalar, R: Rng + ?Sized>(
    name: impl Into<String>,
    kind: ParamKind,
    shape: &[usize],
    rng: &mut R,
) -> Result<Param<T>> {
    let value = init::init_tensor(shape, kind, InitScheme::Training, rng)?;
    Ok(Param::new(name, kind, value))
}

/// Adds `shift` to the first `shift.len()` columns of `y`, leaving the rest.
pub(crate) fn add_leading_shift<T: Scalar>(tape: &Tape<T>, y: Var, shift: Var, width: usize) -> Result<Var> {
    let n = tape.shape(shift)[0];
    if n == width {
        return tape.add_row(y, shift);
    }
    let head = tape.cols(y, 0, n)?;
    let head = tape.add_row(head, shift)?;
    let tail = tape.cols(y, n, width)?;
    tape.concat_cols(&[head, tail])
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
