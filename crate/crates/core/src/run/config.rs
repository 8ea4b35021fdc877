use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::{IgRule, Method};
use crate::circuits::FreeSiteRule;
use crate::error::{Error, Result};
use crate::model::{LmTrainConfig, MetricMode, ModelConfig, PositionSelector, SubmoduleId};
use crate::probe::ProbeTrainConfig;
use crate::sae::SaeTrainConfig;
use crate::stimuli::{Condition, Structure};

/// Everything a pipeline run depends on. Every field has a default, so an
/// empty document is a valid config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub stimuli: StimuliConfig,
    pub model: ArchConfig,
    pub lm: LmTrainConfig,
    pub sae: SaeConfig,
    pub attribution: AttributionConfig,
    pub circuit: CircuitConfig,
    pub intervention: InterventionConfig,
    pub probe: ProbeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StimuliConfig {
    pub grammar_seed: u64,
    /// Sentences in the training corpus and treebank.
    pub n_sentences: usize,
    /// Items per garden-path structure, each in three conditions.
    pub n_per_structure: usize,
    pub stimulus_seed: u64,
}

impl Default for StimuliConfig {
    fn default() -> Self {
        StimuliConfig {
            grammar_seed: 0,
            n_sentences: 8000,
            n_per_structure: 24,
            stimulus_seed: 0,
        }
    }
}

/// Model architecture; the vocabulary size comes from the grammar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub max_seq_len: usize,
    pub rng_seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            n_layers: 3,
            d_model: 32,
            n_heads: 4,
            d_mlp: 128,
            max_seq_len: 16,
            rng_seed: 0,
        }
    }
}

impl ArchConfig {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_mlp: self.d_mlp,
            vocab_size,
            max_seq_len: self.max_seq_len,
            rng_seed: self.rng_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeConfig {
    /// Spliced sites; the embedding and every residual when absent.
    pub sites: Option<Vec<SubmoduleId>>,
    /// Corpus sentences whose activations train the SAEs.
    pub n_sentences: usize,
    pub train: SaeTrainConfig,
}

impl Default for SaeConfig {
    fn default() -> Self {
        SaeConfig {
            sites: None,
            n_sentences: 3000,
            train: SaeTrainConfig {
                d_features: 256,
                steps: 3000,
                sparsity_weight: 0.2,
                ..SaeTrainConfig::default()
            },
        }
    }
}

impl SaeConfig {
    pub fn sites(&self, n_layers: usize) -> Vec<SubmoduleId> {
        match &self.sites {
            Some(s) => {
                let mut s = s.clone();
                s.sort();
                s.dedup();
                s
            }
            None => {
                let mut s = vec![SubmoduleId::EMBEDDING];
                s.extend((0..n_layers).map(SubmoduleId::residual));
                s
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionConfig {
    pub method: Method,
    pub k: usize,
    pub rule: IgRule,
    /// Stimuli attributed over: one structure in one condition.
    pub structure: Structure,
    pub condition: Condition,
    pub metric: MetricMode,
    /// Score edges between consecutive spliced sites.
    pub edges: bool,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            method: Method::AtpIg,
            k: 10,
            rule: IgRule::Literal,
            structure: Structure::Npz,
            condition: Condition::Ambiguous,
            metric: MetricMode::ProbDiff,
            edges: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CircuitConfig {
    pub node_threshold: f64,
    pub edge_threshold: f64,
    pub free_sites: FreeSiteRule,
    /// Node thresholds of the faithfulness sweep.
    pub sweep: Vec<f64>,
    pub denominator_floor: f64,
}

impl Default for CircuitConfig {
    fn default() -> Self {
        CircuitConfig {
            node_threshold: 0.01,
            edge_threshold: 0.001,
            free_sites: FreeSiteRule::FirstBlock,
            sweep: vec![0.1, 0.03, 0.01, 0.003, 0.001, 0.0],
            denominator_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterventionConfig {
    pub structure: Structure,
    pub condition: Condition,
    /// Position whose features are ranked and clamped.
    pub position: PositionSelector,
    /// Most metric-promoting features, clamped to 0.
    pub n_promoting: usize,
    /// Most metric-opposing features, clamped high.
    pub n_opposing: usize,
    /// High clamp; each SAE's scaled default when absent.
    pub high_clamp: Option<f64>,
    pub n_control_seeds: usize,
    pub control_seed: u64,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        InterventionConfig {
            structure: Structure::Npz,
            condition: Condition::Ambiguous,
            position: PositionSelector::FinalNoun,
            n_promoting: 4,
            n_opposing: 0,
            high_clamp: None,
            n_control_seeds: 20,
            control_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// Blocks whose residual output is probed; every block when absent.
    pub layers: Option<Vec<usize>>,
    /// Treebank sentences from the start of the corpus used for training.
    pub n_train: usize,
    /// Held-out sentences from the end of the corpus.
    pub n_test: usize,
    pub baseline_seed: u64,
    /// Attribution method ranking features by their effect on a probe.
    pub recall_method: Method,
    pub train: ProbeTrainConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            layers: None,
            n_train: 3000,
            n_test: 1000,
            baseline_seed: 0,
            recall_method: Method::Atp,
            train: ProbeTrainConfig {
                epochs: 10,
                ..ProbeTrainConfig::default()
            },
        }
    }
}

impl ProbeConfig {
    pub fn sites(&self, n_layers: usize) -> Vec<SubmoduleId> {
        let layers: Vec<usize> = self.layers.clone().unwrap_or_else(|| (0..n_layers).collect());
        let mut s: Vec<SubmoduleId> = layers.into_iter().map(SubmoduleId::residual).collect();
        s.sort();
        s.dedup();
        s
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs/toy"),
            stimuli: StimuliConfig::default(),
            model: ArchConfig::default(),
            lm: LmTrainConfig {
                epochs: 3,
                ..LmTrainConfig::default()
            },
            sae: SaeConfig::default(),
            attribution: AttributionConfig::default(),
            circuit: CircuitConfig::default(),
            intervention: InterventionConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML document, rejecting unknown keys. Unknown keys and
    /// validation failures are reported together.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let mut unknown = Vec::new();
        let cfg: RunConfig = serde_ignored::deserialize(de, |path| unknown.push(format!("unknown key `{path}`")))
            .map_err(|e| Error::Config(vec![e.to_string()]))?;
        let mut errs = unknown;
        errs.extend(cfg.validate());
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Every problem found, not only the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let s = &self.stimuli;
        if s.n_sentences == 0 {
            errs.push("stimuli.n_sentences must be at least 1".into());
        }
        if s.n_per_structure == 0 {
            errs.push("stimuli.n_per_structure must be at least 1".into());
        }
        let m = &self.model;
        for (name, v) in [
            ("n_layers", m.n_layers),
            ("d_model", m.d_model),
            ("n_heads", m.n_heads),
            ("d_mlp", m.d_mlp),
            ("max_seq_len", m.max_seq_len),
        ] {
            if v == 0 {
                errs.push(format!("model.{name} must be at least 1"));
            }
        }
        if m.n_heads > 0 && !m.d_model.is_multiple_of(m.n_heads) {
            errs.push(format!("model.d_model ({}) must be divisible by model.n_heads ({})", m.d_model, m.n_heads));
        }
        if m.max_seq_len < 16 {
            errs.push("model.max_seq_len must be at least 16 to fit the toy grammar's sentences".into());
        }
        errs.extend(self.lm.validate());
        errs.extend(self.sae.train.validate(m.d_model));
        if self.sae.n_sentences == 0 || self.sae.n_sentences > s.n_sentences {
            errs.push(format!("sae.n_sentences must lie in 1..={}", s.n_sentences));
        }
        for site in self.sae.sites(m.n_layers) {
            if let Err(e) = site.validate(m.n_layers) {
                errs.push(format!("sae.sites: {e}"));
            }
        }
        if self.sae.sites.as_ref().is_some_and(|v| v.is_empty()) {
            errs.push("sae.sites must not be empty".into());
        }
        let a = &self.attribution;
        if a.method == Method::AtpIg && a.k == 0 {
            errs.push("attribution.k must be at least 1".into());
        }
        if a.edges && a.method == Method::Exact {
            errs.push("attribution.edges needs method atp or atp_ig".into());
        }
        let c = &self.circuit;
        for (name, v) in [("node_threshold", c.node_threshold), ("edge_threshold", c.edge_threshold)] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("circuit.{name} must be finite and nonnegative"));
            }
        }
        if c.sweep.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            errs.push("circuit.sweep thresholds must be finite and nonnegative".into());
        }
        if !(c.denominator_floor > 0.0) {
            errs.push("circuit.denominator_floor must be positive".into());
        }
        let i = &self.intervention;
        if i.n_promoting + i.n_opposing == 0 {
            errs.push("intervention needs n_promoting or n_opposing above 0".into());
        }
        if i.high_clamp.is_some_and(|v| !(v >= 0.0 && v.is_finite())) {
            errs.push("intervention.high_clamp must be finite and nonnegative".into());
        }
        if matches!(i.position, PositionSelector::All) {
            errs.push("intervention.position must name a single position".into());
        }
        let p = &self.probe;
        errs.extend(p.train.validate());
        if p.n_train == 0 || p.n_test == 0 || p.n_train + p.n_test > s.n_sentences {
            errs.push(format!(
                "probe.n_train and probe.n_test must be positive and sum to at most {}",
                s.n_sentences
            ));
        }
        if let Some(layers) = &p.layers {
            if layers.is_empty() {
                errs.push("probe.layers must not be empty".into());
            }
            for l in layers {
                if *l >= m.n_layers {
                    errs.push(format!("probe.layers: block {l} is beyond the model's {} layers", m.n_layers));
                }
            }
        }
        errs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_the_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
        assert!(RunConfig::default().validate().is_empty());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn every_error_is_listed() {
        let text = r#"
            colour = "blue"
            [model]
            d_model = 30
            n_heads = 4
            [lm]
            epochs = 0
            speed = 3
            [sae]
            sites = ["resid.7"]
            [probe]
            layers = [5]
        "#;
        let Err(Error::Config(errs)) = RunConfig::from_toml(text) else {
            panic!("expected config errors");
        };
        let joined = errs.join("\n");
        for needle in ["`colour`", "`lm.speed`", "divisible", "lm.epochs", "resid.7", "block 5"] {
            assert!(joined.contains(needle), "missing {needle} in\n{joined}");
        }
        assert!(errs.len() >= 6);
    }

    #[test]
    fn type_errors_are_config_errors() {
        assert!(matches!(RunConfig::from_toml("[model]\nd_model = \"big\""), Err(Error::Config(_))));
        assert!(matches!(RunConfig::load(Path::new("/nonexistent/run.toml")), Err(Error::MissingArtifact(_))));
    }
}
