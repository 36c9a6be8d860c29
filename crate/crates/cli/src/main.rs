use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use flopeq::accounting::{bench_blockdiag, count_flops, count_params, render_table, table_rows, BenchOptions};
use flopeq::models::{train_demo, ModelConfig, TrainDemoOptions};
use flopeq::Error;

mod verify;

/// Flop-equivariant layers: verification, complexity accounting and demos.
#[derive(Debug, Parser)]
#[command(name = "flopeq", version)]
struct Cli {
    /// Emit machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// resmlp | vit | convnext_iso
    #[arg(long)]
    family: String,
    /// XT, or a published size (T|S|B|L|H where defined)
    #[arg(long)]
    size: String,
    /// baseline | equivariant | hybrid
    #[arg(long)]
    variant: String,
}

impl ModelArgs {
    fn config(&self) -> flopeq::Result<ModelConfig> {
        ModelConfig::named(self.family.parse()?, &self.size, self.variant.parse()?)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sampled equivariance checks per layer and end to end.
    Verify {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 32)]
        samples: usize,
        /// Write boundary features of one probe image and its flop as EQT1 files.
        #[arg(long)]
        dump_features: Option<PathBuf>,
    },
    /// Analytic FLOPs for one image.
    Flops {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Free parameter counts.
    Params {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Params and FLOPs of every published architecture with ratios.
    Table {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dense versus block-diagonal matrix product timing.
    Bench {
        #[arg(long, default_value_t = 2048)]
        dim: usize,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        /// Use the multi-threaded matrix product.
        #[arg(long)]
        parallel: bool,
    },
    /// Train the tiny equivariant ViT on the synthetic mirror task.
    TrainDemo {
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
    },
}

/// Outcome of a subcommand: rendered output and whether every check passed.
pub(crate) struct Outcome {
    text: String,
    json: serde_json::Value,
    passed: bool,
}

impl Outcome {
    pub(crate) fn ok<S: Serialize>(text: String, value: &S) -> flopeq::Result<Self> {
        Ok(Self {
            text,
            json: serde_json::to_value(value)?,
            passed: true,
        })
    }
}

fn run(cli: &Cli) -> flopeq::Result<Outcome> {
    match &cli.command {
        Command::Verify {
            model,
            image_size,
            tol,
            samples,
            dump_features,
        } => {
            let mut cfg = model.config()?;
            if let Some(s) = image_size {
                cfg.image_size = *s;
                cfg.validate()?;
            }
            let opts = flopeq::symmetry::CheckOptions {
                n_samples: *samples,
                tol: *tol,
                seed: cli.seed,
            };
            verify::run(&cfg, opts, dump_features.as_deref())
        }
        Command::Flops { model } => {
            let r = count_flops(&model.config()?)?;
            Outcome::ok(r.to_text(), &r)
        }
        Command::Params { model } => {
            let r = count_params(&model.config()?)?;
            Outcome::ok(r.to_text(), &r)
        }
        Command::Table { .. } => {
            let rows = table_rows()?;
            Outcome::ok(render_table(&rows), &rows)
        }
        Command::Bench {
            dim,
            batch,
            iters,
            warmup,
            parallel,
        } => {
            let r = bench_blockdiag(BenchOptions {
                d: *dim,
                batch: *batch,
                iters: *iters,
                warmup: *warmup,
                seed: cli.seed,
                parallel: *parallel,
            })?;
            Outcome::ok(r.to_text(), &r)
        }
        Command::TrainDemo {
            steps,
            lr,
            classes,
            noise,
        } => {
            let opts = TrainDemoOptions {
                steps: *steps,
                lr: *lr,
                classes: *classes,
                noise: *noise,
                seed: cli.seed,
                ..Default::default()
            };
            let r = train_demo(&opts)?;
            let mut text = String::new();
            let curve = &r.loss_curve;
            let stride = (curve.len() / 10).max(1);
            for (i, l) in curve.iter().enumerate() {
                if i % stride == 0 || i + 1 == curve.len() {
                    text += &format!("step {:>5}  loss {l:.6}\n", i + 1);
                }
            }
            text += &format!(
                "held-out accuracy {:.4} (untrained {:.4}, chance {:.4})\nmax logit-invariance gap {:.3e}\n",
                r.accuracy,
                r.initial_accuracy,
                1.0 / *classes as f64,
                r.max_invariance_gap
            );
            if let Some(step) = r.diverged_at {
                text += &format!("DIVERGED at step {}\n", step + 1);
            }
            let passed = r.diverged_at.is_none() && r.max_invariance_gap <= 1e-4;
            let mut out = Outcome::ok(text, &r)?;
            out.passed = passed;
            Ok(out)
        }
    }
}

fn emit(text: &str, out: Option<&Path>) -> flopeq::Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text).map_err(|e| Error::Usage(format!("cannot write {}: {e}", path.display())))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out_path = match &cli.command {
        Command::Table { out } => out.as_deref(),
        _ => None,
    };
    let result = run(&cli).and_then(|o| {
        let body = if cli.json {
            let mut s = serde_json::to_string_pretty(&o.json)?;
            s.push('\n');
            s
        } else {
            o.text
        };
        emit(&body, out_path)?;
        Ok(o.passed)
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Usage(_) | Error::Io(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use flopeq::models::Variant;

    #[test]
    fn model_args_parse_to_config() {
        let cli = Cli::try_parse_from([
            "flopeq",
            "flops",
            "--family",
            "vit",
            "--size",
            "B",
            "--variant",
            "hybrid",
        ])
        .unwrap();
        let Command::Flops { model } = cli.command else {
            unreachable!()
        };
        assert_eq!(model.config().unwrap().variant, Variant::Hybrid);
        assert!(Cli::try_parse_from(["flopeq", "flops", "--family", "vit", "--size", "B"]).is_err());
    }
}
