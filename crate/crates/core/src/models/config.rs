use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Resmlp,
    Vit,
    ConvnextIso,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Equivariant,
    /// Equivariant stem and first half of the blocks, unconstrained rest.
    Hybrid,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Resmlp, Family::Vit, Family::ConvnextIso];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Resmlp => "resmlp",
            Family::Vit => "vit",
            Family::ConvnextIso => "convnext_iso",
        }
    }
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Equivariant => "equivariant",
            Variant::Hybrid => "hybrid",
        }
    }

    /// Row label prefix: `E(…)` / `H(…)`.
    pub fn prefix(self) -> &'static str {
        match self {
            Variant::Baseline => "",
            Variant::Equivariant => "E",
            Variant::Hybrid => "H",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resmlp" => Ok(Family::Resmlp),
            "vit" => Ok(Family::Vit),
            "convnext_iso" | "convnext" => Ok(Family::ConvnextIso),
            _ => Err(Error::Config(format!("unknown family {s:?} (resmlp|vit|convnext_iso)"))),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "equivariant" => Ok(Variant::Equivariant),
            "hybrid" => Ok(Variant::Hybrid),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?} (baseline|equivariant|hybrid)"
            ))),
        }
    }
}

fn default_mlp_ratio() -> f64 {
    4.0
}

/// Architecture description driving builders and counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub depth: usize,
    pub width: usize,
    pub patch: usize,
    pub image_size: usize,
    /// Attention heads; unused (0) outside ViT.
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub variant: Variant,
}

pub const IMAGENET_IMAGE_SIZE: usize = 224;
pub const IMAGENET_NUM_CLASSES: usize = 1000;
pub const XT_NUM_CLASSES: usize = 10;

fn vit_heads(family: Family, size: &str) -> usize {
    match (family, size) {
        (Family::Vit, "S") => 6,
        (Family::Vit, "B") => 12,
        (Family::Vit, "L" | "H") => 16,
        _ => 0,
    }
}

/// Size names per family with `(depth, width)`.
const SIZES: &[(Family, &str, usize, usize)] = &[
    (Family::Resmlp, "T", 12, 384),
    (Family::Resmlp, "S", 24, 384),
    (Family::Resmlp, "B", 24, 768),
    (Family::Resmlp, "L", 24, 1280),
    (Family::Vit, "S", 12, 384),
    (Family::Vit, "B", 12, 768),
    (Family::Vit, "L", 24, 1024),
    (Family::Vit, "H", 32, 1280),
    (Family::ConvnextIso, "S", 18, 384),
    (Family::ConvnextIso, "B", 18, 768),
    (Family::ConvnextIso, "L", 36, 1024),
];

impl ModelConfig {
    /// A named size: the published tiers at 224×224, or the desk-scale `XT`
    /// tier (depth 2, width 16, patch 8, 32×32 images).
    pub fn named(family: Family, size: &str, variant: Variant) -> Result<Self> {
        let cfg = if size == "XT" {
            ModelConfig {
                family,
                depth: 2,
                width: 16,
                patch: 8,
                image_size: 32,
                heads: if family == Family::Vit { 2 } else { 0 },
                mlp_ratio: 4.0,
                num_classes: XT_NUM_CLASSES,
                variant,
            }
        } else {
            let &(_, _, depth, width) = SIZES
                .iter()
                .find(|(f, s, _, _)| *f == family && *s == size)
                .ok_or_else(|| {
                    let known: Vec<&str> = SIZES.iter().filter(|e| e.0 == family).map(|e| e.1).collect();
                    Error::Config(format!("unknown {family} size {size:?}; known: XT {}", known.join(" ")))
                })?;
            ModelConfig {
                family,
                depth,
                width,
                patch: if family == Family::Vit && size == "H" { 14 } else { 16 },
                image_size: IMAGENET_IMAGE_SIZE,
                heads: vit_heads(family, size),
                mlp_ratio: 4.0,
                num_classes: IMAGENET_NUM_CLASSES,
                variant,
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Display name such as `E(ResMLP-B24)`.
    pub fn label(&self, size: &str) -> String {
        let arch = match self.family {
            Family::Resmlp => format!("ResMLP-{size}{}", self.depth),
            Family::Vit => format!("ViT-{size}"),
            Family::ConvnextIso => format!("ConvNeXt-{size} iso"),
        };
        match self.variant {
            Variant::Baseline => arch,
            v => format!("{}({arch})", v.prefix()),
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + usize::from(self.family == Family::Vit)
    }

    pub fn hidden(&self) -> usize {
        (self.width as f64 * self.mlp_ratio).round() as usize
    }

    /// Number of leading blocks built equivariantly.
    pub fn equivariant_blocks(&self) -> usize {
        match self.variant {
            Variant::Baseline => 0,
            Variant::Equivariant => self.depth,
            Variant::Hybrid => self.depth / 2,
        }
    }

    pub fn stem_equivariant(&self) -> bool {
        self.variant != Variant::Baseline
    }

    /// Whether the classifier reads only invariant features.
    pub fn head_equivariant(&self) -> bool {
        self.variant == Variant::Equivariant
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.width == 0 || self.patch == 0 || self.num_classes == 0 {
            return fail(format!(
                "depth, width, patch and num_classes must be positive: {self:?}"
            ));
        }
        if self.image_size % self.patch != 0 {
            return fail(format!(
                "image {} is not a multiple of patch {}",
                self.image_size, self.patch
            ));
        }
        if self.grid() % 2 != 0 {
            return fail(format!("patch grid {} must be even", self.grid()));
        }
        let hidden = self.width as f64 * self.mlp_ratio;
        if !(self.mlp_ratio > 0.0) || (hidden - hidden.round()).abs() > 1e-9 {
            return fail(format!(
                "mlp_ratio {} gives a non-integral hidden width",
                self.mlp_ratio
            ));
        }
        if self.variant == Variant::Hybrid && self.family != Family::Vit {
            return fail("hybrid variant is only defined for vit".into());
        }
        let constrained = self.variant != Variant::Baseline;
        if constrained {
            if self.width % 2 != 0 || self.hidden() % 2 != 0 {
                return fail(format!(
                    "equivariant widths must be even (width {}, hidden {})",
                    self.width,
                    self.hidden()
                ));
            }
            if self.patch % 2 != 0 {
                return fail(format!(
                    "equivariant patch embedding needs an even patch, got {}",
                    self.patch
                ));
            }
            if self.family == Family::ConvnextIso && self.width % 4 != 0 {
                return fail(format!(
                    "equivariant convnext width must be a multiple of 4, got {}",
                    self.width
                ));
            }
        }
        match self.family {
            Family::Vit => {
                let split = if constrained { 2 * self.heads } else { self.heads };
                if self.heads == 0 || self.width % split != 0 {
                    return fail(format!(
                        "width {} cannot be split into {} heads",
                        self.width, self.heads
                    ));
                }
            }
            _ if self.heads != 0 => return fail(format!("{} takes no attention heads", self.family)),
            _ => {}
        }
        Ok(())
    }
}

/// Every published architecture in each applicable variant, with its size
/// name.
pub fn published_configs() -> Vec<(String, ModelConfig)> {
    let mut out = Vec::new();
    for &(family, size, _, _) in SIZES {
        let mut variants = vec![Variant::Baseline, Variant::Equivariant];
        if family == Family::Vit {
            variants.push(Variant::Hybrid);
        }
        for v in variants {
            let cfg = ModelConfig::named(family, size, v).expect("published sizes are valid");
            out.push((size.to_string(), cfg));
        }
    }
    out
}

/// Size names known for a family, smallest first, `XT` excluded.
pub fn size_names(family: Family) -> Vec<&'static str> {
    SIZES.iter().filter(|e| e.0 == family).map(|e| e.1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_entries() {
        let h = ModelConfig::named(Family::Vit, "H", Variant::Baseline).unwrap();
        assert_eq!((h.depth, h.width, h.patch, h.heads), (32, 1280, 14, 16));
        let t = ModelConfig::named(Family::Resmlp, "T", Variant::Baseline).unwrap();
        assert_eq!((t.depth, t.width), (12, 384));
        let l = ModelConfig::named(Family::ConvnextIso, "L", Variant::Baseline).unwrap();
        assert_eq!((l.depth, l.width), (36, 1024));
        assert_eq!(published_configs().len(), 26);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(ModelConfig::named(Family::Resmlp, "H", Variant::Baseline).is_err());
        assert!(ModelConfig::named(Family::Resmlp, "B", Variant::Hybrid).is_err());
        let mut c = ModelConfig::named(Family::Vit, "XT", Variant::Equivariant).unwrap();
        c.width = 15;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_rejects_unknown_fields() {
        let c = ModelConfig::named(Family::Vit, "XT", Variant::Equivariant).unwrap();
        let s = serde_json::to_string(&c).unwrap();
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        let mut v: serde_json::Value = serde_json::from_str(&s).unwrap();
        v["dropout"] = serde_json::json!(0.1);
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
    }

    #[test]
    fn labels() {
        let c = ModelConfig::named(Family::Resmlp, "B", Variant::Equivariant).unwrap();
        assert_eq!(c.label("B"), "E(ResMLP-B24)");
        let c = ModelConfig::named(Family::ConvnextIso, "B", Variant::Baseline).unwrap();
        assert_eq!(c.label("B"), "ConvNeXt-B iso");
    }
}
