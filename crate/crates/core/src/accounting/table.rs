use serde::{Deserialize, Serialize};

use super::{count_flops, count_params};
use crate::error::{Error, Result};
use crate::models::{published_configs, ModelConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub label: String,
    pub size: String,
    pub config: ModelConfig,
    pub params: u64,
    pub flops: u64,
    /// Relative to the baseline of the same architecture (1.0 for it).
    pub param_ratio: f64,
    pub flop_ratio: f64,
}

/// Params, FLOPs and ratios against the matching baseline for each
/// `(size, config)`. Every constrained config needs its baseline in the
/// list.
pub fn ratio_table(configs: &[(String, ModelConfig)]) -> Result<Vec<RatioRow>> {
    let mut rows = Vec::with_capacity(configs.len());
    for (size, cfg) in configs {
        let base_cfg = cfg.with_variant(Variant::Baseline);
        let paired = configs.iter().any(|(s, c)| s == size && *c == base_cfg);
        if !paired {
            return Err(Error::Usage(format!(
                "{} has no baseline counterpart in the list",
                cfg.label(size)
            )));
        }
        let (params, flops) = (count_params(cfg)?.total, count_flops(cfg)?.total_flops);
        let (bp, bf) = (count_params(&base_cfg)?.total, count_flops(&base_cfg)?.total_flops);
        rows.push(RatioRow {
            label: cfg.label(size),
            size: size.clone(),
            config: cfg.clone(),
            params,
            flops,
            param_ratio: params as f64 / bp as f64,
            flop_ratio: flops as f64 / bf as f64,
        });
    }
    Ok(rows)
}

/// Rows for every published architecture and variant.
pub fn table_rows() -> Result<Vec<RatioRow>> {
    ratio_table(&published_configs())
}

/// Aligned plain-text table with params in millions and FLOPs in billions.
pub fn render_table(rows: &[RatioRow]) -> String {
    let mut s = format!(
        "{:<22} {:>12} {:>14} {:>11} {:>11}\n",
        "model", "params (M)", "FLOPs/img (G)", "param ratio", "FLOP ratio"
    );
    for r in rows {
        s += &format!(
            "{:<22} {:>12.2} {:>14.2} {:>11.3} {:>11.3}\n",
            r.label,
            r.params as f64 / 1e6,
            r.flops as f64 / 1e9,
            r.param_ratio,
            r.flop_ratio
        );
    }
    s
}
