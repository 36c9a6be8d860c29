use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::{Block, BlockSpec, ConvNextBlock, ResMlpBlock, VitBlock};
use super::config::{Family, ModelConfig};
use crate::autodiff::{Param, Parameterized, Tape, Var};
use crate::error::{shape_err, Result};
use crate::layers::{
    reinitialize, Affine, ClassToken, DenseLinear, InitScheme, LayerNorm, Module, PatchEmbed, PosEmbed, LN_EPS,
};
use crate::symmetry::{ParityLayout, Representation, TokenAction};
use crate::tensor::{Scalar, Tensor};

pub const IN_CHANNELS: usize = 3;

/// Patch embedding, positional table and classification token.
#[derive(Debug, Clone)]
pub struct Stem<T: Scalar> {
    pub embed: PatchEmbed<T>,
    pub pos: Option<PosEmbed<T>>,
    pub cls: Option<ClassToken<T>>,
}

impl<T: Scalar> Parameterized<T> for Stem<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.embed.params();
        v.extend(self.pos.params());
        v.extend(self.cls.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.embed.params_mut();
        v.extend(self.pos.params_mut());
        v.extend(self.cls.params_mut());
        v
    }
}

impl<T: Scalar> Module<T> for Stem<T> {
    fn forward(&self, tape: &Tape<T>, img: Var) -> Result<Var> {
        let mut x = self.embed.forward(tape, img)?;
        if let Some(pos) = &self.pos {
            x = pos.forward(tape, x)?;
        }
        if let Some(cls) = &self.cls {
            x = cls.forward(tape, x)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub enum HeadNorm<T: Scalar> {
    /// Final affine over tokens, then mean pooling.
    AffineThenPool(Affine<T>),
    /// Final normalisation over tokens, then the classification token.
    NormThenClassToken(LayerNorm<T>),
    /// Mean pooling, then normalisation.
    PoolThenNorm(LayerNorm<T>),
}

/// Pooling, normalisation and the linear classifier. When `invariant_only`
/// the classifier sees just the invariant half of the pooled features.
#[derive(Debug, Clone)]
pub struct Head<T: Scalar> {
    pub norm: HeadNorm<T>,
    pub linear: DenseLinear<T>,
    pub invariant_only: bool,
}

impl<T: Scalar> Parameterized<T> for Head<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = match &self.norm {
            HeadNorm::AffineThenPool(a) => a.params(),
            HeadNorm::NormThenClassToken(n) | HeadNorm::PoolThenNorm(n) => n.params(),
        };
        v.extend(self.linear.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = match &mut self.norm {
            HeadNorm::AffineThenPool(a) => a.params_mut(),
            HeadNorm::NormThenClassToken(n) | HeadNorm::PoolThenNorm(n) => n.params_mut(),
        };
        v.extend(self.linear.params_mut());
        v
    }
}

impl<T: Scalar> Module<T> for Head<T> {
    /// `tokens×d` features to a `num_classes` logit vector.
    fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let d = tape.shape(x)[1];
        let pooled = match &self.norm {
            HeadNorm::AffineThenPool(a) => {
                let y = a.forward(tape, x)?;
                tape.reshape(tape.mean_rows(y)?, &[1, d])?
            }
            HeadNorm::NormThenClassToken(n) => {
                let y = n.forward(tape, x)?;
                tape.gather_rows(y, &[0])?
            }
            HeadNorm::PoolThenNorm(n) => {
                let p = tape.reshape(tape.mean_rows(x)?, &[1, d])?;
                n.forward(tape, p)?
            }
        };
        let features = if self.invariant_only {
            tape.cols(pooled, 0, d / 2)?
        } else {
            pooled
        };
        let logits = self.linear.forward(tape, features)?;
        let classes = self.linear.out_features();
        tape.reshape(logits, &[classes])
    }
}

/// Patch embedding, residual blocks and classifier.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub stem: Stem<T>,
    pub blocks: Vec<Block<T>>,
    pub head: Head<T>,
}

/// Builds `cfg` with training-time initialisation drawn from `seed`.
pub fn build_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, g) = (cfg.width, cfg.grid());
    let stem_eq = cfg.stem_equivariant();
    let is_vit = cfg.family == Family::Vit;
    let stem = Stem {
        embed: PatchEmbed::new("stem.embed", IN_CHANNELS, d, cfg.patch, stem_eq, &mut rng)?,
        pos: if is_vit {
            Some(PosEmbed::new("stem.pos", g, g, d, stem_eq, &mut rng)?)
        } else {
            None
        },
        cls: if is_vit {
            Some(ClassToken::new("stem.cls", d, stem_eq, &mut rng)?)
        } else {
            None
        },
    };
    let mut blocks = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let spec = BlockSpec {
            width: d,
            hidden: cfg.hidden(),
            grid: g,
            heads: cfg.heads,
            equivariant: i < cfg.equivariant_blocks(),
        };
        let name = format!("blocks.{i}");
        blocks.push(match cfg.family {
            Family::Resmlp => Block::ResMlp(ResMlpBlock::new(&name, &spec, &mut rng)?),
            Family::Vit => Block::Vit(VitBlock::new(&name, &spec, &mut rng)?),
            Family::ConvnextIso => Block::ConvNext(ConvNextBlock::new(&name, &spec, &mut rng)?),
        });
    }
    let head_eq = cfg.head_equivariant();
    let layout = if head_eq {
        Some(ParityLayout::balanced(d)?)
    } else {
        None
    };
    let norm = match cfg.family {
        Family::Resmlp => HeadNorm::AffineThenPool(Affine::new("head.norm", d, layout, &mut rng)?),
        Family::Vit => HeadNorm::NormThenClassToken(LayerNorm::new("head.norm", d, layout, LN_EPS, &mut rng)?),
        Family::ConvnextIso => HeadNorm::PoolThenNorm(LayerNorm::new("head.norm", d, layout, LN_EPS, &mut rng)?),
    };
    let head_in = if head_eq { d / 2 } else { d };
    let head = Head {
        norm,
        linear: DenseLinear::new("head.linear", head_in, cfg.num_classes, true, &mut rng)?,
        invariant_only: head_eq,
    };
    Ok(Model {
        cfg: cfg.clone(),
        stem,
        blocks,
        head,
    })
}

impl<T: Scalar> Parameterized<T> for Model<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.stem.params();
        v.extend(self.blocks.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.stem.params_mut();
        v.extend(self.blocks.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}

impl<T: Scalar> Module<T> for Model<T> {
    fn forward(&self, tape: &Tape<T>, img: Var) -> Result<Var> {
        let x = self.forward_until(tape, img, self.blocks.len())?;
        self.head.forward(tape, x)
    }
}

impl<T: Scalar> Model<T> {
    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let s = self.cfg.image_size;
        if shape != [IN_CHANNELS, s, s] {
            return Err(shape_err!("model expects a {IN_CHANNELS}×{s}×{s} image, got {shape:?}"));
        }
        Ok(())
    }

    /// Token features after the stem (`boundary = 0`) or after block
    /// `boundary − 1`.
    pub fn forward_until(&self, tape: &Tape<T>, img: Var, boundary: usize) -> Result<Var> {
        self.check_image(&tape.shape(img))?;
        if boundary > self.blocks.len() {
            return Err(shape_err!("boundary {boundary} beyond {} blocks", self.blocks.len()));
        }
        let mut x = self.stem.forward(tape, img)?;
        for b in &self.blocks[..boundary] {
            x = b.forward(tape, x)?;
        }
        Ok(x)
    }

    pub fn logits(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        crate::layers::eval(self, img)
    }

    pub fn features(&self, img: &Tensor<T>, boundary: usize) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let x = tape.constant(img.clone());
        let y = self.forward_until(&tape, x, boundary)?;
        let out = tape.value(y).clone();
        Ok(out)
    }

    /// Token permutation of the flop on block features.
    pub fn token_action(&self) -> TokenAction {
        let g = self.cfg.grid();
        let prefix = usize::from(self.stem.cls.is_some());
        TokenAction::grid_flop(prefix, g, g)
    }

    /// Declared action on the features at `boundary`, or `None` once an
    /// unconstrained block has been applied.
    pub fn boundary_representation(&self, boundary: usize) -> Result<Option<Representation>> {
        if !self.cfg.stem_equivariant() || boundary > self.cfg.equivariant_blocks() {
            return Ok(None);
        }
        Ok(Some(Representation::Tokens {
            action: self.token_action(),
            layout: ParityLayout::balanced(self.cfg.width)?,
        }))
    }

    /// `Trivial` when the logits are guaranteed flop-invariant.
    pub fn output_representation(&self) -> Option<Representation> {
        self.cfg.head_equivariant().then_some(Representation::Trivial)
    }

    /// Redraws all parameters at unit scale (see [`InitScheme::Verification`]).
    pub fn randomize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        reinitialize(self, InitScheme::Verification, &mut rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::config::Variant;

    #[test]
    fn hybrid_splits_blocks() {
        let cfg = ModelConfig {
            depth: 12,
            ..ModelConfig::named(Family::Vit, "XT", Variant::Hybrid).unwrap()
        };
        let m = build_model::<f32>(&cfg, 0).unwrap();
        let eq: Vec<bool> = m
            .blocks
            .iter()
            .map(|b| match b {
                Block::Vit(v) => v.ln1.layout.is_some(),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(eq, [vec![true; 6], vec![false; 6]].concat());
        assert!(m.boundary_representation(6).unwrap().is_some());
        assert!(m.boundary_representation(7).unwrap().is_none());
        assert!(m.output_representation().is_none());
    }

    #[test]
    fn tiny_resmlp_smoke() {
        let cfg = ModelConfig {
            family: Family::Resmlp,
            depth: 2,
            width: 8,
            patch: 4,
            image_size: 8,
            heads: 0,
            mlp_ratio: 4.0,
            num_classes: 5,
            variant: Variant::Equivariant,
        };
        let m = build_model::<f32>(&cfg, 0).unwrap();
        let img = Tensor::zeros([3, 8, 8]).unwrap();
        assert_eq!(m.logits(&img).unwrap().shape(), &[5]);
        assert!(m.logits(&Tensor::zeros([3, 8, 4]).unwrap()).is_err());
    }
}
