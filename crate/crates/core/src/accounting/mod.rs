//! Analytic FLOP and parameter counts, ratio tables and the block-diagonal
//! matmul benchmark.

mod bench;
mod costs;
mod table;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::layers::DWCONV_KERNEL;
use crate::models::{Family, ModelConfig};

pub use bench::{bench_blockdiag, BenchOptions, BenchReport};
pub use costs::per_element;
pub use table::{ratio_table, render_table, table_rows, RatioRow};

/// Counting rules, repeated verbatim in every report.
pub const FLOP_CONVENTION: &str = "1 multiply-accumulate = 1 FLOP; elementwise add/mul = 1 FLOP per element \
(bias, residual, LayerScale, positional add, pooling, mirror fold); Affine = 2/element (1.5 when the shift \
is restricted to invariant channels); LayerNorm = 8/element; GELU = 6/element (+4 for the equivariant \
butterflies); softmax = 5 per attention score; token-pair parity transform = 2/element; convolutions count \
every tap including zero padding; depthwise 7x7 counted at 49 MACs per output";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopEntry {
    pub name: String,
    pub kind: String,
    pub macs: u64,
    pub elementwise: u64,
    pub flops: u64,
}

/// Multiplications a depthwise layer would need if its mirrored taps were
/// pre-summed (symmetric) or pre-differenced (antisymmetric) along the
/// width, as in the reduced 1D correlation. Not included in the totals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FurtherReduction {
    pub description: String,
    /// Depthwise multiplications as counted in the totals.
    pub mults_counted: u64,
    /// Multiplications with mirrored taps folded.
    pub mults_reduced: u64,
    /// Additions spent folding mirrored input taps.
    pub fold_adds: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub config: ModelConfig,
    pub convention: String,
    pub entries: Vec<FlopEntry>,
    pub total_macs: u64,
    pub total_elementwise: u64,
    pub total_flops: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub further_reduction: Option<FurtherReduction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub free_params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub config: ModelConfig,
    pub entries: Vec<ParamEntry>,
    pub total: u64,
}

/// Analytic FLOPs of one forward pass at `cfg.image_size`.
pub fn count_flops(cfg: &ModelConfig) -> Result<FlopReport> {
    cfg.validate()?;
    let entries: Vec<FlopEntry> = costs::layer_costs(cfg)
        .into_iter()
        .map(|c| FlopEntry {
            name: c.name,
            kind: c.kind.to_string(),
            macs: c.macs,
            elementwise: c.elementwise,
            flops: c.macs + c.elementwise,
        })
        .collect();
    let total_macs = entries.iter().map(|e| e.macs).sum();
    let total_elementwise = entries.iter().map(|e| e.elementwise).sum();
    Ok(FlopReport {
        config: cfg.clone(),
        convention: FLOP_CONVENTION.to_string(),
        total_flops: total_macs + total_elementwise,
        total_macs,
        total_elementwise,
        further_reduction: further_reduction(cfg),
        entries,
    })
}

fn further_reduction(cfg: &ModelConfig) -> Option<FurtherReduction> {
    if cfg.family != Family::ConvnextIso || cfg.equivariant_blocks() == 0 {
        return None;
    }
    let k = DWCONV_KERNEL as u64;
    let outputs_per_bank = cfg.tokens() as u64 * cfg.width as u64 / 2 * cfg.equivariant_blocks() as u64;
    // Per output: k rows, each ⌈k/2⌉ (symmetric) or ⌊k/2⌋ (antisymmetric)
    // multiplications after ⌊k/2⌋ folding additions.
    Some(FurtherReduction {
        description: "depthwise parity filters evaluated with mirrored taps folded along the width".into(),
        mults_counted: 2 * outputs_per_bank * k * k,
        mults_reduced: outputs_per_bank * k * (k.div_ceil(2) + k / 2),
        fold_adds: 2 * outputs_per_bank * k * (k / 2),
    })
}

/// Free parameters per layer; constrained layers count only their free
/// coefficients.
pub fn count_params(cfg: &ModelConfig) -> Result<ParamReport> {
    cfg.validate()?;
    let entries: Vec<ParamEntry> = costs::layer_costs(cfg)
        .into_iter()
        .filter(|c| c.params > 0)
        .map(|c| ParamEntry {
            name: c.name,
            free_params: c.params,
        })
        .collect();
    Ok(ParamReport {
        config: cfg.clone(),
        total: entries.iter().map(|e| e.free_params).sum(),
        entries,
    })
}

impl FlopReport {
    pub fn gflops(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# convention: {}\n", self.convention);
        s += &format!(
            "{:<28} {:<16} {:>16} {:>14} {:>16}\n",
            "layer", "kind", "macs", "elementwise", "flops"
        );
        for e in &self.entries {
            s += &format!(
                "{:<28} {:<16} {:>16} {:>14} {:>16}\n",
                e.name, e.kind, e.macs, e.elementwise, e.flops
            );
        }
        s += &format!(
            "{:<28} {:<16} {:>16} {:>14} {:>16}\ntotal: {:.2}e9 FLOPs\n",
            "total",
            "",
            self.total_macs,
            self.total_elementwise,
            self.total_flops,
            self.gflops()
        );
        if let Some(r) = &self.further_reduction {
            s += &format!(
                "potential further reduction (not included): {}: {} -> {} multiplications, {} fold additions\n",
                r.description, r.mults_counted, r.mults_reduced, r.fold_adds
            );
        }
        s
    }
}

impl ParamReport {
    pub fn millions(&self) -> f64 {
        self.total as f64 / 1e6
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<28} {:>14}\n", "layer", "free_params");
        for e in &self.entries {
            s += &format!("{:<28} {:>14}\n", e.name, e.free_params);
        }
        s + &format!(
            "{:<28} {:>14}\ntotal: {:.2}e6 parameters\n",
            "total",
            self.total,
            self.millions()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Variant;

    #[test]
    fn totals_are_entry_sums() {
        let cfg = ModelConfig::named(Family::Vit, "S", Variant::Equivariant).unwrap();
        let r = count_flops(&cfg).unwrap();
        assert_eq!(r.total_flops, r.entries.iter().map(|e| e.flops).sum::<u64>());
        let p = count_params(&cfg).unwrap();
        assert_eq!(p.total, p.entries.iter().map(|e| e.free_params).sum::<u64>());
    }

    #[test]
    fn block_diagonal_linears_cost_half() {
        let base = count_flops(&ModelConfig::named(Family::Resmlp, "S", Variant::Baseline).unwrap()).unwrap();
        let eq = count_flops(&ModelConfig::named(Family::Resmlp, "S", Variant::Equivariant).unwrap()).unwrap();
        for (b, e) in base.entries.iter().zip(&eq.entries) {
            assert_eq!(b.name, e.name);
            if b.kind == "linear" && !b.name.starts_with("head") {
                assert_eq!(2 * e.macs, b.macs, "{}", b.name);
            }
        }
    }

    #[test]
    fn further_reduction_only_for_constrained_convnext() {
        let cfg = ModelConfig::named(Family::ConvnextIso, "B", Variant::Equivariant).unwrap();
        let r = count_flops(&cfg).unwrap().further_reduction.unwrap();
        // 24.5 multiplications per output on average instead of 49.
        assert_eq!(2 * r.mults_reduced, r.mults_counted);
        assert!(count_flops(&cfg.with_variant(Variant::Baseline))
            .unwrap()
            .further_reduction
            .is_none());
    }
}
