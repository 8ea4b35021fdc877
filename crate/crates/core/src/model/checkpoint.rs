use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TransformerModel, Vocab};
use crate::error::{Error, Result};
use crate::numerics::container;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    config: ModelConfig,
    vocab: Vocab,
}

impl TransformerModel {
    /// Writes the parameters to `path` and the config plus vocabulary to
    /// `path` with a `.json` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: BTreeMap<_, _> = self
            .params()
            .iter()
            .map(|(k, v)| (k.clone(), (**v).clone()))
            .collect();
        container::save(path, &tensors)?;
        let side = Sidecar {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
        };
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensors = container::load(path)?;
        let side_path = path.with_extension("json");
        if !side_path.exists() {
            return Err(Error::MissingArtifact(side_path));
        }
        let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(&side_path)?)?;
        TransformerModel::from_params(side.config, side.vocab, tensors)
    }
}

#[cfg(test)]
mod tests {
    use crate::model::tests::tiny;
    use crate::model::TransformerModel;

    #[test]
    fn checkpoint_round_trip_preserves_logits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sfct");
        let m = tiny();
        m.save(&path).unwrap();
        let back = TransformerModel::load(&path).unwrap();
        let toks = [0, 1, 2, 3];
        assert_eq!(m.forward(&toks).unwrap().logits(), back.forward(&toks).unwrap().logits());
        assert!(TransformerModel::load(&dir.path().join("nope.sfct")).is_err());
    }
}
