use rand::Rng;

use crate::autodiff::{Activation, Param, Parameterized, Tape, Var};
use crate::error::Result;
use crate::layers::{
    Affine, Attention, DepthwiseConv, LayerNorm, LayerScale, Linear, Module, PatchMix, Pointwise, LAYER_SCALE_INIT,
    LN_EPS,
};
use crate::symmetry::ParityLayout;
use crate::tensor::Scalar;

fn layout_for(width: usize, equivariant: bool) -> Result<Option<ParityLayout>> {
    equivariant.then(|| ParityLayout::balanced(width)).transpose()
}

/// Position-wise two-layer perceptron with a GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp<T: Scalar> {
    pub fc1: Linear<T>,
    pub act: Pointwise,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, d: usize, hidden: usize, equivariant: bool, rng: &mut R) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&format!("{name}.fc1"), d, hidden, true, equivariant, rng)?,
            act: Pointwise::new(Activation::Gelu, layout_for(hidden, equivariant)?)?,
            fc2: Linear::new(&format!("{name}.fc2"), hidden, d, true, equivariant, rng)?,
        })
    }
}

impl<T: Scalar> Parameterized<T> for Mlp<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.fc1.params_mut();
        v.extend(self.fc2.params_mut());
        v
    }
}

impl<T: Scalar> Module<T> for Mlp<T> {
    fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = self.act.forward(tape, h)?;
        self.fc2.forward(tape, h)
    }
}

/// `x + LS(mix(Aff(x)))`, then `x + LS(MLP(Aff(x)))`.
#[derive(Debug, Clone)]
pub struct ResMlpBlock<T: Scalar> {
    pub aff1: Affine<T>,
    pub mix: PatchMix<T>,
    pub ls1: LayerScale<T>,
    pub aff2: Affine<T>,
    pub mlp: Mlp<T>,
    pub ls2: LayerScale<T>,
}

/// `x + LS(MSA(LN(x)))`, then `x + LS(MLP(LN(x)))`.
#[derive(Debug, Clone)]
pub struct VitBlock<T: Scalar> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ls1: LayerScale<T>,
    pub ln2: LayerNorm<T>,
    pub mlp: Mlp<T>,
    pub ls2: LayerScale<T>,
}

/// `x + LN(DwConv7×7(x))`, then `x + LS(Conv1×1(GELU(Conv1×1(x))))`.
#[derive(Debug, Clone)]
pub struct ConvNextBlock<T: Scalar> {
    pub dw: DepthwiseConv<T>,
    pub ln: LayerNorm<T>,
    pub mlp: Mlp<T>,
    pub ls: LayerScale<T>,
}

#[derive(Debug, Clone)]
pub enum Block<T: Scalar> {
    ResMlp(ResMlpBlock<T>),
    Vit(VitBlock<T>),
    ConvNext(ConvNextBlock<T>),
}

pub(crate) struct BlockSpec {
    pub width: usize,
    pub hidden: usize,
    pub grid: usize,
    pub heads: usize,
    pub equivariant: bool,
}

impl<T: Scalar> ResMlpBlock<T> {
    pub(crate) fn new<R: Rng + ?Sized>(name: &str, s: &BlockSpec, rng: &mut R) -> Result<Self> {
        let layout = layout_for(s.width, s.equivariant)?;
        Ok(Self {
            aff1: Affine::new(&format!("{name}.aff1"), s.width, layout, rng)?,
            mix: PatchMix::new(&format!("{name}.mix"), s.grid, s.width, s.equivariant, rng)?,
            ls1: LayerScale::new(&format!("{name}.ls1"), s.width, LAYER_SCALE_INIT, rng)?,
            aff2: Affine::new(&format!("{name}.aff2"), s.width, layout, rng)?,
            mlp: Mlp::new(&format!("{name}.mlp"), s.width, s.hidden, s.equivariant, rng)?,
            ls2: LayerScale::new(&format!("{name}.ls2"), s.width, LAYER_SCALE_INIT, rng)?,
        })
    }
}

impl<T: Scalar> VitBlock<T> {
    pub(crate) fn new<R: Rng + ?Sized>(name: &str, s: &BlockSpec, rng: &mut R) -> Result<Self> {
        let layout = layout_for(s.width, s.equivariant)?;
        Ok(Self {
            ln1: LayerNorm::new(&format!("{name}.ln1"), s.width, layout, LN_EPS, rng)?,
            attn: Attention::new(&format!("{name}.attn"), s.width, s.heads, s.equivariant, rng)?,
            ls1: LayerScale::new(&format!("{name}.ls1"), s.width, LAYER_SCALE_INIT, rng)?,
            ln2: LayerNorm::new(&format!("{name}.ln2"), s.width, layout, LN_EPS, rng)?,
            mlp: Mlp::new(&format!("{name}.mlp"), s.width, s.hidden, s.equivariant, rng)?,
            ls2: LayerScale::new(&format!("{name}.ls2"), s.width, LAYER_SCALE_INIT, rng)?,
        })
    }
}

impl<T: Scalar> ConvNextBlock<T> {
    pub(crate) fn new<R: Rng + ?Sized>(name: &str, s: &BlockSpec, rng: &mut R) -> Result<Self> {
        let layout = layout_for(s.width, s.equivariant)?;
        Ok(Self {
            dw: DepthwiseConv::new(&format!("{name}.dw"), s.width, (s.grid, s.grid), s.equivariant, rng)?,
            ln: LayerNorm::new(&format!("{name}.ln"), s.width, layout, LN_EPS, rng)?,
            mlp: Mlp::new(&format!("{name}.mlp"), s.width, s.hidden, s.equivariant, rng)?,
            ls: LayerScale::new(&format!("{name}.ls"), s.width, LAYER_SCALE_INIT, rng)?,
        })
    }
}

fn residual<T: Scalar>(tape: &Tape<T>, x: Var, branch: impl FnOnce(Var) -> Result<Var>) -> Result<Var> {
    let b = branch(x)?;
    tape.add(x, b)
}

impl<T: Scalar> Parameterized<T> for Block<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        match self {
            Block::ResMlp(b) => {
                v.extend(b.aff1.params());
                v.extend(b.mix.params());
                v.extend(b.ls1.params());
                v.extend(b.aff2.params());
                v.extend(b.mlp.params());
                v.extend(b.ls2.params());
            }
            Block::Vit(b) => {
                v.extend(b.ln1.params());
                v.extend(b.attn.params());
                v.extend(b.ls1.params());
                v.extend(b.ln2.params());
                v.extend(b.mlp.params());
                v.extend(b.ls2.params());
            }
            Block::ConvNext(b) => {
                v.extend(b.dw.params());
                v.extend(b.ln.params());
                v.extend(b.mlp.params());
                v.extend(b.ls.params());
            }
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        match self {
            Block::ResMlp(b) => {
                v.extend(b.aff1.params_mut());
                v.extend(b.mix.params_mut());
                v.extend(b.ls1.params_mut());
                v.extend(b.aff2.params_mut());
                v.extend(b.mlp.params_mut());
                v.extend(b.ls2.params_mut());
            }
            Block::Vit(b) => {
                v.extend(b.ln1.params_mut());
                v.extend(b.attn.params_mut());
                v.extend(b.ls1.params_mut());
                v.extend(b.ln2.params_mut());
                v.extend(b.mlp.params_mut());
                v.extend(b.ls2.params_mut());
            }
            Block::ConvNext(b) => {
                v.extend(b.dw.params_mut());
                v.extend(b.ln.params_mut());
                v.extend(b.mlp.params_mut());
                v.extend(b.ls.params_mut());
            }
        }
        v
    }
}

impl<T: Scalar> Module<T> for Block<T> {
    fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        match self {
            Block::ResMlp(b) => {
                let x = residual(tape, x, |x| {
                    let h = b.aff1.forward(tape, x)?;
                    let h = b.mix.forward(tape, h)?;
                    b.ls1.forward(tape, h)
                })?;
                residual(tape, x, |x| {
                    let h = b.aff2.forward(tape, x)?;
                    let h = b.mlp.forward(tape, h)?;
                    b.ls2.forward(tape, h)
                })
            }
            Block::Vit(b) => {
                let x = residual(tape, x, |x| {
                    let h = b.ln1.forward(tape, x)?;
                    let h = b.attn.forward(tape, h)?;
                    b.ls1.forward(tape, h)
                })?;
                residual(tape, x, |x| {
                    let h = b.ln2.forward(tape, x)?;
                    let h = b.mlp.forward(tape, h)?;
                    b.ls2.forward(tape, h)
                })
            }
            Block::ConvNext(b) => {
                let x = residual(tape, x, |x| {
                    let h = b.dw.forward(tape, x)?;
                    b.ln.forward(tape, h)
                })?;
                residual(tape, x, |x| {
                    let h = b.mlp.forward(tape, x)?;
                    b.ls.forward(tape, h)
                })
            }
        }
    }
}
