//! Per-layer cost walk shared by the FLOP and parameter counters. It mirrors
//! the module structure produced by `build_model` without allocating any
//! tensors.

use crate::layers::DWCONV_KERNEL;
use crate::models::{Family, ModelConfig, IN_CHANNELS};

/// Elementwise FLOPs per element for each non-product operation.
pub mod per_element {
    pub const BIAS: u64 = 1;
    pub const RESIDUAL: u64 = 1;
    pub const LAYER_SCALE: u64 = 1;
    pub const LAYER_NORM: u64 = 8;
    pub const GELU: u64 = 6;
    /// Extra cost of the sum/difference butterflies around an equivariant
    /// activation.
    pub const BUTTERFLY_PAIR: u64 = 4;
    pub const SOFTMAX: u64 = 5;
    pub const POOL: u64 = 1;
    pub const POS_EMBED: u64 = 1;
    /// One butterfly (sum or difference, then `1/√2`) over the token pairs.
    pub const PARITY_TRANSFORM: u64 = 2;
    pub const MIRROR_FOLD: u64 = 1;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub params: u64,
    pub macs: u64,
    pub elementwise: u64,
}

struct Walk {
    out: Vec<LayerCost>,
}

impl Walk {
    fn push(&mut self, name: String, kind: &'static str, params: u64, macs: u64, elementwise: u64) {
        self.out.push(LayerCost {
            name,
            kind,
            params,
            macs,
            elementwise,
        });
    }

    /// Dense or block-diagonal linear with bias on `tokens` rows.
    fn linear(&mut self, name: String, tokens: u64, c: u64, d: u64, eq: bool) {
        let div = if eq { 2 } else { 1 };
        self.push(
            name,
            "linear",
            c * d / div + d / div,
            tokens * c * d / div,
            tokens * d / div * per_element::BIAS,
        );
    }

    fn layer_norm(&mut self, name: String, tokens: u64, d: u64, eq: bool) {
        let shift = if eq { d / 2 } else { d };
        self.push(name, "layer_norm", d + shift, 0, tokens * d * per_element::LAYER_NORM);
    }

    fn affine(&mut self, name: String, tokens: u64, d: u64, eq: bool) {
        // Scale on every channel, shift on the invariant half when constrained.
        let shift = if eq { d / 2 } else { d };
        self.push(name, "affine", d + shift, 0, tokens * (d + shift));
    }

    fn layer_scale(&mut self, name: String, tokens: u64, d: u64) {
        self.push(name, "layer_scale", d, 0, tokens * d * per_element::LAYER_SCALE);
    }

    fn residual(&mut self, name: String, tokens: u64, d: u64) {
        self.push(name, "residual", 0, 0, tokens * d * per_element::RESIDUAL);
    }

    fn mlp(&mut self, name: &str, tokens: u64, d: u64, hidden: u64, eq: bool) {
        self.linear(format!("{name}.fc1"), tokens, d, hidden, eq);
        let act = per_element::GELU + if eq { per_element::BUTTERFLY_PAIR } else { 0 };
        self.push(format!("{name}.act"), "activation", 0, 0, tokens * hidden * act);
        self.linear(format!("{name}.fc2"), tokens, hidden, d, eq);
    }
}

/// Every layer of `cfg` with its free parameters, MACs and elementwise
/// FLOPs for one image.
pub(crate) fn layer_costs(cfg: &ModelConfig) -> Vec<LayerCost> {
    let mut w = Walk { out: Vec::new() };
    let (d, p) = (cfg.width as u64, cfg.patch as u64);
    let g = cfg.grid() as u64;
    let patches = g * g;
    let tokens = cfg.tokens() as u64;
    let hidden = cfg.hidden() as u64;
    let c = IN_CHANNELS as u64;
    let s = cfg.image_size as u64;
    let k = DWCONV_KERNEL as u64;
    let stem_eq = cfg.stem_equivariant();

    let div = if stem_eq { 2 } else { 1 };
    let fold = if stem_eq {
        c * s * s * per_element::MIRROR_FOLD
    } else {
        0
    };
    w.push(
        "stem.embed".into(),
        "patch_embed",
        d * c * p * p / div + d / div,
        patches * d * c * p * p / div,
        patches * d / div * per_element::BIAS + fold,
    );
    if cfg.family == Family::Vit {
        w.push(
            "stem.pos".into(),
            "pos_embed",
            patches * d / div,
            0,
            patches * d * per_element::POS_EMBED,
        );
        w.push("stem.cls".into(), "class_token", d / div, 0, 0);
    }

    for i in 0..cfg.depth {
        let eq = i < cfg.equivariant_blocks();
        let n = format!("blocks.{i}");
        match cfg.family {
            Family::Resmlp => {
                w.affine(format!("{n}.aff1"), tokens, d, eq);
                if eq {
                    let half = tokens / 2;
                    w.push(
                        format!("{n}.mix"),
                        "patch_mix",
                        2 * half * half + half,
                        tokens * tokens * d / 2,
                        2 * tokens * d * per_element::PARITY_TRANSFORM + half * (d / 2) * per_element::BIAS,
                    );
                } else {
                    w.push(
                        format!("{n}.mix"),
                        "patch_mix",
                        tokens * tokens + tokens,
                        tokens * tokens * d,
                        tokens * d * per_element::BIAS,
                    );
                }
                w.layer_scale(format!("{n}.ls1"), tokens, d);
                w.residual(format!("{n}.res1"), tokens, d);
                w.affine(format!("{n}.aff2"), tokens, d, eq);
                w.mlp(&format!("{n}.mlp"), tokens, d, hidden, eq);
                w.layer_scale(format!("{n}.ls2"), tokens, d);
                w.residual(format!("{n}.res2"), tokens, d);
            }
            Family::Vit => {
                let heads = cfg.heads as u64;
                w.layer_norm(format!("{n}.ln1"), tokens, d, eq);
                for proj in ["q", "k", "v"] {
                    w.linear(format!("{n}.attn.{proj}"), tokens, d, d, eq);
                }
                w.push(
                    format!("{n}.attn.core"),
                    "attention",
                    0,
                    2 * tokens * tokens * d,
                    heads * tokens * tokens * per_element::SOFTMAX,
                );
                w.linear(format!("{n}.attn.o"), tokens, d, d, eq);
                w.layer_scale(format!("{n}.ls1"), tokens, d);
                w.residual(format!("{n}.res1"), tokens, d);
                w.layer_norm(format!("{n}.ln2"), tokens, d, eq);
                w.mlp(&format!("{n}.mlp"), tokens, d, hidden, eq);
                w.layer_scale(format!("{n}.ls2"), tokens, d);
                w.residual(format!("{n}.res2"), tokens, d);
            }
            Family::ConvnextIso => {
                let (params, bias) = if eq {
                    // Symmetric and antisymmetric banks of d/2 filters each:
                    // k·⌈k/2⌉ and k·⌊k/2⌋ free taps.
                    ((d / 2) * k * k.div_ceil(2) + (d / 2) * k * (k / 2) + d / 2, d / 2)
                } else {
                    (d * k * k + d, d)
                };
                w.push(
                    format!("{n}.dw"),
                    "depthwise_conv",
                    params,
                    tokens * d * k * k,
                    tokens * bias * per_element::BIAS,
                );
                w.layer_norm(format!("{n}.ln"), tokens, d, eq);
                w.residual(format!("{n}.res1"), tokens, d);
                w.mlp(&format!("{n}.mlp"), tokens, d, hidden, eq);
                w.layer_scale(format!("{n}.ls"), tokens, d);
                w.residual(format!("{n}.res2"), tokens, d);
            }
        }
    }

    let head_eq = cfg.head_equivariant();
    match cfg.family {
        Family::Resmlp => {
            w.affine("head.norm".into(), tokens, d, head_eq);
            w.push("head.pool".into(), "pool", 0, 0, tokens * d * per_element::POOL);
        }
        Family::Vit => w.layer_norm("head.norm".into(), tokens, d, head_eq),
        Family::ConvnextIso => {
            w.push("head.pool".into(), "pool", 0, 0, tokens * d * per_element::POOL);
            w.layer_norm("head.norm".into(), 1, d, head_eq);
        }
    }
    let head_in = if head_eq { d / 2 } else { d };
    let classes = cfg.num_classes as u64;
    w.push(
        "head.linear".into(),
        "linear",
        head_in * classes + classes,
        head_in * classes,
        classes * per_element::BIAS,
    );
    w.out
}
