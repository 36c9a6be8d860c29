use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Parameterized;
use crate::error::Result;
use crate::symmetry::ParityLayout;
use crate::tensor::{write_eqt, Scalar};

/// JSON sidecar written next to a layer's parameter dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub layer_name: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub layouts: Vec<ParityLayout>,
    /// Parameter name to shape; each tensor lives in `<name>.eqt`.
    pub shapes: BTreeMap<String, Vec<usize>>,
}

/// Writes every parameter of `layer` as an EQT1 file in `dir` plus a
/// `<layer_name>.json` manifest.
pub fn dump_params<T: Scalar, M: Parameterized<T> + ?Sized>(
    layer: &M,
    layer_name: &str,
    kind: &str,
    layouts: &[ParityLayout],
    dir: impl AsRef<Path>,
) -> Result<DumpManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut shapes = BTreeMap::new();
    for p in layer.params() {
        write_eqt(&p.value, dir.join(format!("{}.eqt", p.name())))?;
        shapes.insert(p.name().to_string(), p.value.shape().to_vec());
    }
    let manifest = DumpManifest {
        layer_name: layer_name.to_string(),
        kind: kind.to_string(),
        layouts: layouts.to_vec(),
        shapes,
    };
    fs::write(
        dir.join(format!("{layer_name}.json")),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Linear;
    use crate::tensor::read_eqt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::<f32>::new("fc", 4, 6, true, true, &mut rng).unwrap();
        let m = dump_params(
            &l,
            "fc",
            "block_diag_linear",
            &[ParityLayout::new(2, 2), ParityLayout::new(3, 3)],
            dir.path(),
        )
        .unwrap();
        assert_eq!(m.shapes["fc.w_inv"], vec![2, 3]);
        let back: Vec<f32> = read_eqt::<f32>(dir.path().join("fc.w_equi.eqt")).unwrap().into_data();
        let Linear::BlockDiag(bd) = &l else { unreachable!() };
        assert_eq!(back, bd.w_equi.value.data());
        let json: DumpManifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join("fc.json")).unwrap()).unwrap();
        assert_eq!(json, m);
    }
}
