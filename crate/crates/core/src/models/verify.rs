//! Sampled equivariance checks over every constrained layer and over built
//! models, at the seams where each declares a representation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Variant};
use super::model::{build_model, Model, IN_CHANNELS};
use crate::autodiff::{Activation, Param, ParamKind, Parameterized};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::layers::{
    eval, reinitialize, Affine, Attention, ClassToken, DepthwiseConv, InitScheme, LayerNorm, LayerScale, Linear,
    Module, PatchEmbed, PatchMix, Pointwise, PosEmbed, LN_EPS,
};
use crate::symmetry::{
    check_equivariance, flop_image, CheckOptions, CheckReport, ParityLayout, Representation, TokenAction,
};
use crate::tensor::Tensor;

/// Channel width used by the layer suite.
pub const SUITE_WIDTH: usize = 8;
/// Side of the token grid used by the layer suite.
pub const SUITE_GRID: usize = 4;

fn tokens(prefix: usize, grid: usize, d: usize) -> Result<Representation> {
    Ok(Representation::Tokens {
        action: TokenAction::grid_flop(prefix, grid, grid),
        layout: ParityLayout::balanced(d)?,
    })
}

fn check_module<M: Module<f32>>(
    name: &str,
    m: &mut M,
    shape: &[usize],
    in_rep: &Representation,
    out_rep: &Representation,
    opts: CheckOptions,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    reinitialize(m, InitScheme::Verification, &mut rng);
    check_equivariance(name, |x| eval(&*m, x), shape, in_rep, out_rep, opts)
}

/// Checks each equivariant layer in f32 on a 4×4 token grid of width 8,
/// parameters redrawn at unit scale.
pub fn layer_suite(opts: CheckOptions) -> Result<Vec<CheckReport>> {
    let (d, g) = (SUITE_WIDTH, SUITE_GRID);
    let t = g * g;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let rep = tokens(0, g, d)?;
    let rep_cls = tokens(1, g, d)?;
    let wide = tokens(0, g, 3 * d / 2)?;
    let mut out = Vec::new();

    let mut sq = Linear::<f32>::new("linear", d, d, true, true, &mut rng)?;
    out.push(check_module(
        "block_diag_linear d→d",
        &mut sq,
        &[t, d],
        &rep,
        &rep,
        opts,
    )?);
    let mut rect = Linear::<f32>::new("linear", d, 3 * d / 2, true, true, &mut rng)?;
    out.push(check_module(
        "block_diag_linear d→1.5d",
        &mut rect,
        &[t, d],
        &rep,
        &wide,
        opts,
    )?);
    let layout = Some(ParityLayout::balanced(d)?);
    for act in [Activation::Gelu, Activation::Relu] {
        let mut p = Pointwise::new(act, layout)?;
        out.push(check_module(
            &format!("pointwise {act:?}"),
            &mut p,
            &[t, d],
            &rep,
            &rep,
            opts,
        )?);
    }
    let mut ln = LayerNorm::<f32>::new("ln", d, layout, LN_EPS, &mut rng)?;
    out.push(check_module("layer_norm", &mut ln, &[t, d], &rep, &rep, opts)?);
    let mut aff = Affine::<f32>::new("aff", d, layout, &mut rng)?;
    out.push(check_module("affine", &mut aff, &[t, d], &rep, &rep, opts)?);
    let mut ls = LayerScale::<f32>::new("ls", d, 1.0, &mut rng)?;
    out.push(check_module("layer_scale", &mut ls, &[t, d], &rep, &rep, opts)?);
    let mut attn = Attention::<f32>::new("attn", d, 2, true, &mut rng)?;
    out.push(check_module(
        "attention (cls + grid tokens)",
        &mut attn,
        &[t + 1, d],
        &rep_cls,
        &rep_cls,
        opts,
    )?);
    let patch = 4;
    let mut embed = PatchEmbed::<f32>::new("embed", IN_CHANNELS, d, patch, true, &mut rng)?;
    let img = [IN_CHANNELS, g * patch, g * patch];
    out.push(check_module(
        "patch_embed",
        &mut embed,
        &img,
        &Representation::Spatial { layout: None },
        &rep,
        opts,
    )?);
    let mut pos = PosEmbed::<f32>::new("pos", g, g, d, true, &mut rng)?;
    out.push(check_module("pos_embed", &mut pos, &[t, d], &rep, &rep, opts)?);
    let mut cls = ClassToken::<f32>::new("cls", d, true, &mut rng)?;
    out.push(check_module("class_token", &mut cls, &[t, d], &rep, &rep_cls, opts)?);
    let mut mix = PatchMix::<f32>::new("mix", g, d, true, &mut rng)?;
    out.push(check_module("resmlp_patch_mix", &mut mix, &[t, d], &rep, &rep, opts)?);
    let mut dw = DepthwiseConv::<f32>::new("dw", d, (g, g), true, &mut rng)?;
    out.push(check_module(
        "depthwise_parity_conv",
        &mut dw,
        &[t, d],
        &rep,
        &rep,
        opts,
    )?);
    Ok(out)
}

/// Checks the stem, each equivariant block and (for fully equivariant
/// models) the logits of `cfg`, parameters redrawn at unit scale.
pub fn model_suite(cfg: &ModelConfig, opts: CheckOptions) -> Result<Vec<CheckReport>> {
    if cfg.variant == Variant::Baseline {
        return Err(Error::Usage(format!(
            "{} baseline declares no equivariance to check",
            cfg.family
        )));
    }
    let mut model = build_model::<f32>(cfg, opts.seed)?;
    model.randomize(opts.seed);
    let model = model;
    let s = cfg.image_size;
    let img_shape = [IN_CHANNELS, s, s];
    let img_rep = Representation::Spatial { layout: None };
    let feat_shape = [cfg.tokens(), cfg.width];
    let prefix = format!("{}/{}", cfg.family, cfg.variant);
    let rep_at = |b: usize| -> Result<Representation> {
        model
            .boundary_representation(b)?
            .ok_or_else(|| Error::Usage(format!("boundary {b} carries no declared action")))
    };
    let mut out = vec![check_equivariance(
        &format!("{prefix} stem"),
        |x| model.features(x, 0),
        &img_shape,
        &img_rep,
        &rep_at(0)?,
        opts,
    )?];
    for (i, block) in model.blocks.iter().take(cfg.equivariant_blocks()).enumerate() {
        out.push(check_equivariance(
            &format!("{prefix} block {i}"),
            |x| eval(block, x),
            &feat_shape,
            &rep_at(i)?,
            &rep_at(i + 1)?,
            opts,
        )?);
    }
    let k = cfg.equivariant_blocks();
    out.push(check_equivariance(
        &format!("{prefix} features after block {}", k.saturating_sub(1)),
        |x| model.features(x, k),
        &img_shape,
        &img_rep,
        &rep_at(k)?,
        opts,
    )?);
    if let Some(rep) = model.output_representation() {
        out.push(end_to_end(&model, opts, &rep)?);
    }
    Ok(out)
}

fn end_to_end(model: &Model<f32>, opts: CheckOptions, out_rep: &Representation) -> Result<CheckReport> {
    let s = model.cfg.image_size;
    check_equivariance(
        &format!("{}/{} logits", model.cfg.family, model.cfg.variant),
        |x| model.logits(x),
        &[IN_CHANNELS, s, s],
        &Representation::Spatial { layout: None },
        out_rep,
        opts,
    )
}

/// Samples the logit invariance of `cfg` at unit-scale weights. Reported for
/// any variant; only equivariant ones are expected to pass.
pub fn logit_invariance(cfg: &ModelConfig, opts: CheckOptions) -> Result<CheckReport> {
    let mut model = build_model::<f32>(cfg, opts.seed)?;
    model.randomize(opts.seed);
    end_to_end(&model, opts, &Representation::Trivial)
}

/// `max|logits(x) − logits(flop x)| / max(1, max|logits(x)|)` over `probes`.
pub fn invariance_gap(model: &Model<f32>, probes: &[Tensor<f32>]) -> Result<f64> {
    let mut worst = 0.0f64;
    for x in probes {
        let a = model.logits(x)?;
        let b = model.logits(&flop_image(x)?)?;
        worst = worst.max(a.max_abs_diff(&b)? / a.max_abs().max(1.0));
    }
    Ok(worst)
}

/// A layer together with its input as a parameter, so one check covers the
/// gradients of both.
struct Probe<M> {
    layer: M,
    input: Param<f64>,
    weights: Tensor<f64>,
}

impl<M: Parameterized<f64>> Parameterized<f64> for Probe<M> {
    fn params(&self) -> Vec<&Param<f64>> {
        let mut v = self.layer.params();
        v.push(&self.input);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        let mut v = self.layer.params_mut();
        v.push(&mut self.input);
        v
    }
}

fn probe_check<M: Module<f64>>(
    name: &str,
    mut layer: M,
    shape: &[usize],
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    reinitialize(&mut layer, InitScheme::Verification, &mut rng);
    let input = Tensor::<f64>::randn(shape, &mut rng)?;
    let out_shape = eval(&layer, &input)?.shape().to_vec();
    let weights = Tensor::<f64>::randn(out_shape, &mut rng)?;
    let mut probe = Probe {
        layer,
        input: Param::new("input", ParamKind::Embedding, input),
        weights,
    };
    grad_check(
        name,
        &mut probe,
        |p, tape| {
            let x = tape.param(&p.input);
            let y = p.layer.forward(tape, x)?;
            tape.weighted_sum(y, &p.weights)
        },
        opts,
    )
}

/// Central-difference checks of every layer, baseline and equivariant, in
/// f64 with respect to both parameters and input.
pub fn layer_gradient_suite(opts: GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let (d, g) = (SUITE_WIDTH, SUITE_GRID);
    let t = g * g;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();
    for eq in [false, true] {
        let tag = if eq { "equivariant" } else { "baseline" };
        let layout = if eq { Some(ParityLayout::balanced(d)?) } else { None };
        let n = |s: &str| format!("{s} ({tag})");
        out.push(probe_check(
            &n("linear"),
            Linear::<f64>::new("fc", d, 3 * d / 2, true, eq, &mut rng)?,
            &[t, d],
            opts,
        )?);
        out.push(probe_check(
            &n("pointwise gelu"),
            Pointwise::new(Activation::Gelu, layout)?,
            &[t, d],
            opts,
        )?);
        out.push(probe_check(
            &n("layer_norm"),
            LayerNorm::<f64>::new("ln", d, layout, LN_EPS, &mut rng)?,
            &[t, d],
            opts,
        )?);
        out.push(probe_check(
            &n("affine"),
            Affine::<f64>::new("aff", d, layout, &mut rng)?,
            &[t, d],
            opts,
        )?);
        out.push(probe_check(
            &n("attention"),
            Attention::<f64>::new("attn", d, 2, eq, &mut rng)?,
            &[t + 1, d],
            opts,
        )?);
        let patch = 4;
        out.push(probe_check(
            &n("patch_embed"),
            PatchEmbed::<f64>::new("embed", IN_CHANNELS, d, patch, eq, &mut rng)?,
            &[IN_CHANNELS, g * patch, g * patch],
            opts,
        )?);
        out.push(probe_check(
            &n("pos_embed"),
            PosEmbed::<f64>::new("pos", g, g, d, eq, &mut rng)?,
            &[t, d],
            opts,
        )?);
        out.push(probe_check(
            &n("class_token"),
            ClassToken::<f64>::new("cls", d, eq, &mut rng)?,
            &[t, d],
            opts,
        )?);
        out.push(probe_check(
            &n("patch_mix"),
            PatchMix::<f64>::new("mix", g, d, eq, &mut rng)?,
            &[t, d],
            opts,
        )?);
        out.push(probe_check(
            &n("depthwise_conv"),
            DepthwiseConv::<f64>::new("dw", d, (g, g), eq, &mut rng)?,
            &[t, d],
            opts,
        )?);
    }
    out.push(probe_check(
        "layer_scale",
        LayerScale::<f64>::new("ls", d, 1.0, &mut rng)?,
        &[t, d],
        opts,
    )?);
    Ok(out)
}

/// Central-difference check of the cross-entropy gradient of a whole model
/// in f64, parameters redrawn at unit scale.
pub fn model_gradient_check(cfg: &ModelConfig, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut model = build_model::<f64>(cfg, opts.seed)?;
    model.randomize(opts.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x1ab);
    let s = cfg.image_size;
    let img = Tensor::<f64>::randn([IN_CHANNELS, s, s], &mut rng)?;
    let label = opts.seed as usize % cfg.num_classes;
    grad_check(
        &format!("{}/{} model", cfg.family, cfg.variant),
        &mut model,
        |m, tape| {
            let x = tape.constant(img.clone());
            let logits = m.forward(tape, x)?;
            tape.cross_entropy(logits, label)
        },
        opts,
    )
}
