use std::path::Path;

use rand::SeedableRng;
use serde::Serialize;

use flopeq::models::{build_model, layer_suite, logit_invariance, model_suite, ModelConfig, Variant, IN_CHANNELS};
use flopeq::symmetry::{flop_image, CheckOptions, CheckReport};
use flopeq::tensor::{write_eqt, Tensor};

use crate::Outcome;

#[derive(Debug, Serialize)]
struct CheckLine {
    #[serde(flatten)]
    report: CheckReport,
    /// Informational: the architecture does not constrain this map.
    expected_fail: bool,
}

#[derive(Debug, Serialize)]
struct VerifyOutput {
    config: ModelConfig,
    checks: Vec<CheckLine>,
    passed: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    dumped: Vec<String>,
}

pub(crate) fn run(cfg: &ModelConfig, opts: CheckOptions, dump: Option<&Path>) -> flopeq::Result<Outcome> {
    let mut checks: Vec<CheckLine> = layer_suite(opts)?
        .into_iter()
        .map(|report| CheckLine {
            report,
            expected_fail: false,
        })
        .collect();
    if cfg.variant != Variant::Baseline {
        checks.extend(model_suite(cfg, opts)?.into_iter().map(|report| CheckLine {
            report,
            expected_fail: false,
        }));
    }
    if cfg.variant != Variant::Equivariant {
        checks.push(CheckLine {
            report: logit_invariance(cfg, opts)?,
            expected_fail: true,
        });
    }
    let passed = checks.iter().all(|c| c.expected_fail || c.report.passed);
    let dumped = match dump {
        Some(dir) => dump_features(cfg, opts.seed, dir)?,
        None => Vec::new(),
    };

    let mut text = String::new();
    for c in &checks {
        text += &c.report.summary();
        if c.expected_fail {
            text += "  (informational: unconstrained, expected to fail)";
        }
        text.push('\n');
    }
    for f in &dumped {
        text += &format!("wrote {f}\n");
    }
    text += if passed {
        "all checks passed\n"
    } else {
        "CHECK FAILED\n"
    };
    let out = VerifyOutput {
        config: cfg.clone(),
        checks,
        passed,
        dumped,
    };
    let mut outcome = Outcome::ok(text, &out)?;
    outcome.passed = passed;
    Ok(outcome)
}

/// Features at every block boundary plus logits, for one seeded probe image
/// and its flop, at unit-scale weights.
fn dump_features(cfg: &ModelConfig, seed: u64, dir: &Path) -> flopeq::Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut model = build_model::<f32>(cfg, seed)?;
    model.randomize(seed);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let img = Tensor::<f32>::randn([IN_CHANNELS, cfg.image_size, cfg.image_size], &mut rng)?;
    let flopped = flop_image(&img)?;
    let mut written = Vec::new();
    let mut save = |name: String, t: &Tensor<f32>| -> flopeq::Result<()> {
        let path = dir.join(format!("{name}.eqt"));
        write_eqt(t, &path)?;
        written.push(path.display().to_string());
        Ok(())
    };
    save("input".into(), &img)?;
    save("input_flop".into(), &flopped)?;
    for k in 0..=cfg.depth {
        save(format!("features_{k}"), &model.features(&img, k)?)?;
        save(format!("features_{k}_flop"), &model.features(&flopped, k)?)?;
    }
    save("logits".into(), &model.logits(&img)?)?;
    save("logits_flop".into(), &model.logits(&flopped)?)?;
    Ok(written)
}
