use std::collections::BTreeMap;
use std::sync::Arc;

use super::SaeSet;
use crate::error::{Error, Result};
use crate::model::{ActivationEdit, Example, ResolvedEdits, Splice, SubmoduleId, Trace, TransformerModel};
use crate::numerics::Tensor;

/// Clean activations, features and reconstructions of one site.
#[derive(Clone, Debug)]
pub struct CleanSite {
    pub x: Arc<Tensor>,
    pub f: Tensor,
    pub xhat: Arc<Tensor>,
}

/// Per-site state of an unedited run, used to hold the reconstruction
/// residual fixed while features are edited.
#[derive(Clone, Debug)]
pub struct CleanRun {
    pub tokens: Vec<usize>,
    pub logits: Tensor,
    sites: BTreeMap<SubmoduleId, CleanSite>,
}

impl CleanRun {
    pub fn compute(model: &TransformerModel, saes: &SaeSet, tokens: &[usize]) -> Result<Self> {
        let trace = model.forward(tokens)?;
        let mut sites = BTreeMap::new();
        for (id, sae) in saes.iter() {
            let x = trace.activation(id)?.clone();
            let f = sae.encode(&x)?;
            let xhat = sae.decode(&f)?;
            sites.insert(
                *id,
                CleanSite {
                    x: Arc::new(x),
                    f,
                    xhat: Arc::new(xhat),
                },
            );
        }
        Ok(CleanRun {
            tokens: tokens.to_vec(),
            logits: trace.logits().clone(),
            sites,
        })
    }

    pub fn site(&self, id: &SubmoduleId) -> Result<&CleanSite> {
        self.sites
            .get(id)
            .ok_or_else(|| Error::invalid(format!("no clean state for {id}")))
    }

    /// Clean features `[len, d_features]` at a site.
    pub fn features(&self, id: &SubmoduleId) -> Result<&Tensor> {
        Ok(&self.site(id)?.f)
    }
}

/// A model with SAEs spliced in at some of its sites.
///
/// Each spliced site outputs `x̂ + ε` where `ε = x - x̂` is taken from the clean
/// run, so the unedited spliced model reproduces the plain model exactly
/// while feature edits act through the decoder.
#[derive(Clone, Copy)]
pub struct SplicedModel<'a> {
    pub model: &'a TransformerModel,
    pub saes: &'a SaeSet,
}

impl<'a> SplicedModel<'a> {
    pub fn new(model: &'a TransformerModel, saes: &'a SaeSet) -> Result<Self> {
        for (id, sae) in saes.iter() {
            id.validate(model.config.n_layers)?;
            if sae.d_model() != model.config.d_model {
                return Err(Error::invalid(format!(
                    "SAE at {id} has width {}, model has {}",
                    sae.d_model(),
                    model.config.d_model
                )));
            }
        }
        Ok(SplicedModel { model, saes })
    }

    pub fn clean(&self, tokens: &[usize]) -> Result<CleanRun> {
        CleanRun::compute(self.model, self.saes, tokens)
    }

    pub fn resolve(&self, example: &Example, edits: &[ActivationEdit]) -> Result<ResolvedEdits> {
        ResolvedEdits::resolve(
            edits,
            &example.annotations,
            example.tokens.len(),
            self.model.config.n_layers,
            self.model.config.d_model,
            |s| self.saes.d_features(s),
        )
    }

    /// Spliced forward pass with resolved edits against a precomputed clean run.
    pub fn trace(&self, clean: &CleanRun, edits: &ResolvedEdits) -> Result<Trace> {
        self.model.build(
            &clean.tokens,
            Some(Splice {
                saes: self.saes,
                clean,
            }),
            edits,
        )
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<Trace> {
        let clean = self.clean(tokens)?;
        self.trace(&clean, &ResolvedEdits::default())
    }

    pub fn forward_with_edits(&self, example: &Example, edits: &[ActivationEdit]) -> Result<Trace> {
        let resolved = self.resolve(example, edits)?;
        let clean = self.clean(&example.tokens)?;
        self.trace(&clean, &resolved)
    }

    pub fn d_features(&self, site: &SubmoduleId) -> Result<usize> {
        self.saes
            .d_features(site)
            .ok_or_else(|| Error::invalid(format!("no SAE attached at {site}")))
    }
}
