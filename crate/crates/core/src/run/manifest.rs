use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RunConfig;
use crate::error::{Error, Result};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance written beside every stage's outputs. Paths are relative to
/// the run directory. Identical manifests mean identical outputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub toolkit_version: String,
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Hash of the config's canonical JSON form, so formatting and comments in
/// the source document do not matter. The output directory is left out:
/// it names where a run lives, not what it computes.
pub fn config_hash(cfg: &RunConfig) -> String {
    let mut cfg = cfg.clone();
    cfg.output_dir = Default::default();
    sha256_hex(serde_json::to_string(&cfg).expect("config serialises").as_bytes())
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Manifest {
            command: command.to_string(),
            toolkit_version: TOOLKIT_VERSION.to_string(),
            config_sha256: config_hash(cfg),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn hash_into(map: &mut BTreeMap<String, String>, root: &Path, path: &Path) -> Result<()> {
        let key = path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/");
        map.insert(key, sha256_file(path)?);
        Ok(())
    }

    pub fn input(&mut self, root: &Path, path: &Path) -> Result<()> {
        Self::hash_into(&mut self.inputs, root, path)
    }

    pub fn output(&mut self, root: &Path, path: &Path) -> Result<()> {
        Self::hash_into(&mut self.outputs, root, path)
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn config_hash_tracks_content_only() {
        let a = RunConfig::default();
        let b = RunConfig::from_toml("# comment\n[model]\nd_model = 32\n").unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        let mut c = a.clone();
        c.stimuli.grammar_seed = 1;
        assert_ne!(config_hash(&a), config_hash(&c));
        let mut d = a.clone();
        d.output_dir = "elsewhere".into();
        assert_eq!(config_hash(&a), config_hash(&d));
    }

    #[test]
    fn manifest_records_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("sub").join("x.txt");
        std::fs::create_dir_all(f.parent().unwrap()).unwrap();
        std::fs::write(&f, b"abc").unwrap();
        let mut m = Manifest::new("test", &RunConfig::default());
        m.output(dir.path(), &f).unwrap();
        assert_eq!(m.outputs["sub/x.txt"], sha256_hex(b"abc"));
        assert!(matches!(m.input(dir.path(), &dir.path().join("nope")), Err(Error::MissingArtifact(_))));
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert_eq!(Manifest::load(&p).unwrap(), m);
    }
}
