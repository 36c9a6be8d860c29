//! Desk-scale training on a synthetic mirror-invariant classification task.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{Family, ModelConfig, Variant};
use super::model::{build_model, Model, IN_CHANNELS};
use super::verify::invariance_gap;
use crate::autodiff::{Parameterized, Tape};
use crate::error::{Error, Result};
use crate::layers::{reinitialize, InitScheme, Module};
use crate::symmetry::flop_image;
use crate::tensor::Tensor;

pub const DEMO_IMAGE_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainDemoOptions {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub classes: usize,
    /// Standard deviation of the per-pixel noise added to each sample.
    pub noise: f64,
    pub held_out_per_class: usize,
    pub probes: usize,
    pub seed: u64,
    pub init: InitScheme,
}

impl Default for TrainDemoOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 16,
            classes: 4,
            noise: 0.1,
            held_out_per_class: 25,
            probes: 4,
            seed: 0,
            init: InitScheme::Verification,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub config: ModelConfig,
    pub options: TrainDemoOptions,
    /// Mean mini-batch loss per step.
    pub loss_curve: Vec<f64>,
    pub initial_accuracy: f64,
    /// Held-out accuracy after the last step.
    pub accuracy: f64,
    /// Largest relative logit gap between probe images and their flops,
    /// measured before training and after every step.
    pub max_invariance_gap: f64,
    /// First step whose loss was not finite; training stops there.
    pub diverged_at: Option<usize>,
}

impl TrainingReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_curve.last().copied()
    }
}

/// `K` random prototypes; a sample is a prototype or its flop plus noise,
/// labelled by the prototype.
#[derive(Debug, Clone)]
pub struct MirrorTask {
    prototypes: Vec<Tensor<f32>>,
    noise: Normal<f64>,
}

impl MirrorTask {
    pub fn new<R: Rng + ?Sized>(classes: usize, image_size: usize, noise: f64, rng: &mut R) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Usage(format!("need at least 2 classes, got {classes}")));
        }
        let noise = Normal::new(0.0, noise).map_err(|e| Error::Usage(format!("noise level: {e}")))?;
        let prototypes = (0..classes)
            .map(|_| Tensor::randn([IN_CHANNELS, image_size, image_size], rng))
            .collect::<Result<_>>()?;
        Ok(Self { prototypes, noise })
    }

    pub fn classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, label: usize, rng: &mut R) -> Result<Tensor<f32>> {
        let proto = &self.prototypes[label];
        let mut x = if rng.random::<bool>() {
            flop_image(proto)?
        } else {
            proto.clone()
        };
        for v in x.data_mut() {
            *v += self.noise.sample(rng) as f32;
        }
        Ok(x)
    }

    /// `per_class` samples of every class, in class order.
    pub fn balanced<R: Rng + ?Sized>(&self, per_class: usize, rng: &mut R) -> Result<Vec<(Tensor<f32>, usize)>> {
        let mut out = Vec::with_capacity(per_class * self.classes());
        for label in 0..self.classes() {
            for _ in 0..per_class {
                out.push((self.sample(label, rng)?, label));
            }
        }
        Ok(out)
    }
}

/// Configuration trained by [`train_demo`]: the XT equivariant ViT on
/// 16×16 images.
pub fn demo_config(classes: usize) -> Result<ModelConfig> {
    let cfg = ModelConfig {
        image_size: DEMO_IMAGE_SIZE,
        num_classes: classes,
        ..ModelConfig::named(Family::Vit, "XT", Variant::Equivariant)?
    };
    cfg.validate()?;
    Ok(cfg)
}

fn argmax(v: &Tensor<f32>) -> usize {
    let d = v.data();
    (0..d.len()).fold(0, |best, i| if d[i] > d[best] { i } else { best })
}

pub fn accuracy(model: &Model<f32>, data: &[(Tensor<f32>, usize)]) -> Result<f64> {
    let mut hits = 0usize;
    for (x, y) in data {
        hits += usize::from(argmax(&model.logits(x)?) == *y);
    }
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// Trains the demo model with momentum SGD on cross-entropy.
pub fn train_demo(opts: &TrainDemoOptions) -> Result<TrainingReport> {
    let cfg = demo_config(opts.classes)?;
    train_model(&cfg, opts)
}

/// Trains an arbitrary small configuration on the mirror task.
pub fn train_model(cfg: &ModelConfig, opts: &TrainDemoOptions) -> Result<TrainingReport> {
    if cfg.depth > 2 || cfg.width > 32 {
        return Err(Error::Usage(format!(
            "training demo is limited to ≤2 blocks of width ≤32, got depth {} width {}",
            cfg.depth, cfg.width
        )));
    }
    if opts.batch_size == 0 || !(opts.lr.is_finite() && opts.lr > 0.0) {
        return Err(Error::Usage("batch size and learning rate must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let task = MirrorTask::new(opts.classes, cfg.image_size, opts.noise, &mut rng)?;
    let held_out = task.balanced(opts.held_out_per_class, &mut rng)?;
    let probes = (0..opts.probes)
        .map(|_| Tensor::randn([IN_CHANNELS, cfg.image_size, cfg.image_size], &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut model = build_model::<f32>(cfg, opts.seed)?;
    if opts.init == InitScheme::Verification {
        reinitialize(&mut model, InitScheme::Verification, &mut rng);
    }
    // A zero classifier predicts class 0 everywhere, so untrained accuracy on
    // the balanced held-out set is exactly 1/K.
    for p in model.head.linear.params_mut() {
        p.value = p.value.map(|_| 0.0);
    }
    let mut velocity: Vec<Tensor<f32>> = model.params().iter().map(|p| p.value.map(|_| 0.0)).collect();
    let labels: Vec<usize> = (0..task.classes()).collect();

    let initial_accuracy = accuracy(&model, &held_out)?;
    let mut max_gap = invariance_gap(&model, &probes)?;
    let mut loss_curve = Vec::with_capacity(opts.steps);
    let mut diverged_at = None;
    for step in 0..opts.steps {
        let tape = Tape::new();
        let mut total = None;
        for _ in 0..opts.batch_size {
            let &label = labels.choose(&mut rng).expect("at least two classes");
            let x = tape.constant(task.sample(label, &mut rng)?);
            let logits = model.forward(&tape, x)?;
            let l = tape.cross_entropy(logits, label)?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let loss = tape.scale(total.expect("non-empty batch"), 1.0 / opts.batch_size as f64);
        let loss_value = f64::from(tape.value(loss).item()?);
        loss_curve.push(loss_value);
        if !loss_value.is_finite() {
            diverged_at = Some(step);
            break;
        }
        let grads = tape.backward(loss)?;
        let (lr, mu) = (opts.lr as f32, opts.momentum as f32);
        for (p, v) in model.params_mut().into_iter().zip(&mut velocity) {
            let g = grads.get(p);
            for ((vi, &gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(p.value.data_mut()) {
                *vi = mu * *vi + gi;
                *wi -= lr * *vi;
            }
        }
        max_gap = max_gap.max(invariance_gap(&model, &probes)?);
    }
    Ok(TrainingReport {
        config: cfg.clone(),
        options: opts.clone(),
        loss_curve,
        initial_accuracy,
        accuracy: accuracy(&model, &held_out)?,
        max_invariance_gap: max_gap,
        diverged_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_steps_is_chance_level() {
        let opts = TrainDemoOptions {
            steps: 0,
            ..Default::default()
        };
        let r = train_demo(&opts).unwrap();
        assert!(r.loss_curve.is_empty());
        assert_eq!(r.accuracy, r.initial_accuracy);
        assert_eq!(r.accuracy, 0.25);
        assert!(r.max_invariance_gap <= 1e-4);
    }

    #[test]
    fn noiseless_two_class_task_is_solved() {
        let opts = TrainDemoOptions {
            steps: 60,
            classes: 2,
            noise: 0.0,
            ..Default::default()
        };
        let r = train_demo(&opts).unwrap();
        assert_eq!(r.accuracy, 1.0, "{:?}", r.loss_curve.last());
        assert!(r.max_invariance_gap <= 1e-4);
    }

    #[test]
    fn samples_keep_their_label_under_flop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let task = MirrorTask::new(3, 8, 0.0, &mut rng).unwrap();
        let set = task.balanced(4, &mut rng).unwrap();
        for (x, y) in set {
            let p = &task.prototypes[y];
            assert!(x == *p || x == flop_image(p).unwrap());
        }
    }

    #[test]
    fn oversized_config_rejected() {
        let cfg = ModelConfig::named(Family::Vit, "S", Variant::Equivariant).unwrap();
        assert!(matches!(
            train_model(&cfg, &TrainDemoOptions::default()),
            Err(Error::Usage(_))
        ));
    }
}
