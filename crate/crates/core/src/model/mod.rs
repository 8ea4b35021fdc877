//! A small pre-norm transformer whose activations can be captured, replaced
//! and spliced with sparse autoencoders during the forward pass.

mod checkpoint;
mod metric;
mod site;
mod tokenizer;
mod train;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use metric::{MetricMode, MetricSpec};
pub use site::{
    ActivationEdit, Annotations, EditMode, EditValue, Example, Layer, PositionSelector, ResolvedEdits,
    SiteEdits, SiteKind, SubmoduleId,
};
pub use tokenizer::{Vocab, BOS};
pub use train::{mean_cross_entropy, train_lm, unigram_cross_entropy, LmTrainConfig, LmTrainReport};

use crate::error::{Error, Result};
use crate::numerics::{randn, rng, Tape, Tensor, Var};
use crate::sae::{CleanRun, SaeSet};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rng_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_mlp: 512,
            vocab_size: 64,
            max_seq_len: 32,
            rng_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                errs.push(format!("model.{name} must be at least 1"));
            }
        }
        if self.n_heads > 0 && !self.d_model.is_multiple_of(self.n_heads) {
            errs.push(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Activations recorded at one site.
#[derive(Clone, Copy, Debug)]
pub struct SiteTrace {
    /// The activation as computed by the model (before any splice or edit).
    pub input: Var,
    /// SAE features after feature edits, when an SAE is attached.
    pub features: Option<Var>,
    /// What flows downstream.
    pub output: Var,
}

/// A recorded forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub tape: Tape,
    pub tokens: Vec<usize>,
    pub logits: Var,
    pub sites: BTreeMap<SubmoduleId, SiteTrace>,
    pub params: BTreeMap<String, Var>,
}

impl Trace {
    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }

    pub fn site(&self, id: &SubmoduleId) -> Result<&SiteTrace> {
        self.sites
            .get(id)
            .ok_or_else(|| Error::invalid(format!("site {id} not recorded")))
    }

    /// Value at a site (post splice and edits).
    pub fn activation(&self, id: &SubmoduleId) -> Result<&Tensor> {
        Ok(self.tape.value(self.site(id)?.output))
    }

    pub fn features(&self, id: &SubmoduleId) -> Result<&Tensor> {
        let var = self
            .site(id)?
            .features
            .ok_or_else(|| Error::invalid(format!("no SAE at {id}")))?;
        Ok(self.tape.value(var))
    }
}

/// Clean-run state needed to splice SAEs into a forward pass.
#[derive(Clone, Copy)]
pub(crate) struct Splice<'a> {
    pub saes: &'a SaeSet,
    pub clean: &'a CleanRun,
}

#[derive(Clone, Debug)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    params: BTreeMap<String, Arc<Tensor>>,
}

fn block_param(l: usize, name: &str) -> String {
    format!("blocks.{l}.{name}")
}

impl TransformerModel {
    /// Randomly initialised model.
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::invalid(format!(
                "vocabulary has {} words, config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut r = rng(config.rng_seed);
        let (d, m, v) = (config.d_model, config.d_mlp, config.vocab_size);
        let mut p = BTreeMap::new();
        let std_d = 1.0 / (d as f64).sqrt();
        let std_out = std_d / (2.0 * config.n_layers as f64).sqrt();
        p.insert("embed.tok".to_string(), randn(&mut r, &[v, d], 0.5));
        p.insert("embed.pos".to_string(), randn(&mut r, &[config.max_seq_len, d], 0.1));
        for l in 0..config.n_layers {
            p.insert(block_param(l, "ln1.g"), Tensor::full(&[d], 1.0));
            p.insert(block_param(l, "ln1.b"), Tensor::zeros(&[d]));
            for w in ["wq", "wk", "wv"] {
                p.insert(block_param(l, &format!("attn.{w}")), randn(&mut r, &[d, d], std_d));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                p.insert(block_param(l, &format!("attn.{b}")), Tensor::zeros(&[d]));
            }
            p.insert(block_param(l, "attn.wo"), randn(&mut r, &[d, d], std_out));
            p.insert(block_param(l, "ln2.g"), Tensor::full(&[d], 1.0));
            p.insert(block_param(l, "ln2.b"), Tensor::zeros(&[d]));
            p.insert(block_param(l, "mlp.w_in"), randn(&mut r, &[d, m], std_d));
            p.insert(block_param(l, "mlp.b_in"), Tensor::zeros(&[m]));
            p.insert(
                block_param(l, "mlp.w_out"),
                randn(&mut r, &[m, d], std_out * (d as f64 / m as f64).sqrt()),
            );
            p.insert(block_param(l, "mlp.b_out"), Tensor::zeros(&[d]));
        }
        p.insert("ln_f.g".to_string(), Tensor::full(&[d], 1.0));
        p.insert("ln_f.b".to_string(), Tensor::zeros(&[d]));
        p.insert("unembed.w".to_string(), randn(&mut r, &[d, v], std_d));
        p.insert("unembed.b".to_string(), Tensor::zeros(&[v]));
        Ok(TransformerModel {
            config,
            vocab,
            params: p.into_iter().map(|(k, t)| (k, Arc::new(t))).collect(),
        })
    }

    /// Model with the given parameters; every expected tensor must be present with its shape.
    pub fn from_params(config: ModelConfig, vocab: Vocab, params: BTreeMap<String, Tensor>) -> Result<Self> {
        let template = TransformerModel::new(config.clone(), vocab.clone())?;
        let mut out = BTreeMap::new();
        for (name, t) in &template.params {
            let given = params
                .get(name)
                .ok_or_else(|| Error::Container(format!("missing parameter `{name}`")))?;
            if given.shape() != t.shape() {
                return Err(Error::Container(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    given.shape(),
                    t.shape()
                )));
            }
            out.insert(name.clone(), Arc::new(given.clone()));
        }
        Ok(TransformerModel {
            config,
            vocab,
            params: out,
        })
    }

    pub fn params(&self) -> &BTreeMap<String, Arc<Tensor>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    pub(crate) fn set_params(&mut self, params: BTreeMap<String, Arc<Tensor>>) {
        self.params = params;
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        for &id in tokens {
            if id >= self.config.vocab_size {
                return Err(Error::OutOfVocabulary {
                    id,
                    vocab_size: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Plain forward pass recording every site.
    pub fn forward(&self, tokens: &[usize]) -> Result<Trace> {
        self.build(tokens, None, &ResolvedEdits::default())
    }

    /// Forward pass with edits. Feature edits need `saes`; when given, every
    /// site with an SAE is spliced.
    pub fn forward_with_edits(
        &self,
        tokens: &[usize],
        annotations: &Annotations,
        edits: &[ActivationEdit],
        saes: Option<&SaeSet>,
    ) -> Result<Trace> {
        let resolved = ResolvedEdits::resolve(
            edits,
            annotations,
            tokens.len(),
            self.config.n_layers,
            self.config.d_model,
            |s| saes.and_then(|set| set.d_features(s)),
        )?;
        match saes {
            Some(saes) if !saes.is_empty() => {
                let clean = CleanRun::compute(self, saes, tokens)?;
                self.build(tokens, Some(Splice { saes, clean: &clean }), &resolved)
            }
            _ => self.build(tokens, None, &resolved),
        }
    }

    /// Metric on the final (or configured) position of a plain forward pass.
    pub fn next_token_metric(&self, tokens: &[usize], metric: &MetricSpec) -> Result<f64> {
        let mut trace = self.forward(tokens)?;
        let m = metric.build(&mut trace)?;
        trace.tape.value(m).item()
    }

    pub(crate) fn build(&self, tokens: &[usize], splice: Option<Splice<'_>>, edits: &ResolvedEdits) -> Result<Trace> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let t = tokens.len();
        let mut tape = Tape::new();
        let mut pv = BTreeMap::new();
        for (name, value) in &self.params {
            pv.insert(name.clone(), tape.constant_shared(value.clone()));
        }
        let p = |name: &str| pv[name];
        let mut sites = BTreeMap::new();

        let tok = tape.gather(p("embed.tok"), tokens.to_vec())?;
        let pos = tape.gather(p("embed.pos"), (0..t).collect())?;
        let x0 = tape.add(tok, pos)?;
        let mut x = hook(&mut tape, &mut sites, SubmoduleId::EMBEDDING, x0, splice, edits, cfg.d_model)?;

        for l in 0..cfg.n_layers {
            let bp = |n: &str| pv[&block_param(l, n)];
            let h = tape.layer_norm(x, bp("ln1.g"), bp("ln1.b"), LN_EPS)?;
            let q = tape.linear(h, bp("attn.wq"), bp("attn.bq"))?;
            let k = tape.linear(h, bp("attn.wk"), bp("attn.bk"))?;
            let v = tape.linear(h, bp("attn.wv"), bp("attn.bv"))?;
            let a = tape.causal_attention(q, k, v, cfg.n_heads)?;
            let attn = tape.linear(a, bp("attn.wo"), bp("attn.bo"))?;
            let attn = hook(&mut tape, &mut sites, SubmoduleId::attn(l), attn, splice, edits, cfg.d_model)?;
            let mid = tape.add(x, attn)?;
            let h2 = tape.layer_norm(mid, bp("ln2.g"), bp("ln2.b"), LN_EPS)?;
            let hid = tape.linear(h2, bp("mlp.w_in"), bp("mlp.b_in"))?;
            let hid = tape.gelu(hid)?;
            let mlp = tape.linear(hid, bp("mlp.w_out"), bp("mlp.b_out"))?;
            let mlp = hook(&mut tape, &mut sites, SubmoduleId::mlp(l), mlp, splice, edits, cfg.d_model)?;
            let out = tape.add(mid, mlp)?;
            x = hook(&mut tape, &mut sites, SubmoduleId::residual(l), out, splice, edits, cfg.d_model)?;
        }
        let hf = tape.layer_norm(x, p("ln_f.g"), p("ln_f.b"), LN_EPS)?;
        let logits = tape.linear(hf, p("unembed.w"), p("unembed.b"))?;
        tape.watch("logits", logits);
        Ok(Trace {
            tape,
            tokens: tokens.to_vec(),
            logits,
            sites,
            params: pv,
        })
    }
}

/// Records a site, splicing its SAE and applying edits.
fn hook(
    tape: &mut Tape,
    sites: &mut BTreeMap<SubmoduleId, SiteTrace>,
    id: SubmoduleId,
    x: Var,
    splice: Option<Splice<'_>>,
    edits: &ResolvedEdits,
    d_model: usize,
) -> Result<Var> {
    let site_edits = edits.site(&id);
    let sae = splice.and_then(|s| s.saes.get(&id).map(|sae| (sae, s.clean.site(&id))));
    let mut features = None;
    let mut out = x;
    match sae {
        Some((sae, clean)) => {
            let clean = clean?;
            let centered = tape.constant_shared(sae.neg_b_dec.clone());
            let centered = tape.add_row(x, centered)?;
            let w_enc = tape.constant_shared(sae.w_enc.clone());
            let b_enc = tape.constant_shared(sae.b_enc.clone());
            let pre = tape.linear(centered, w_enc, b_enc)?;
            let mut f = tape.relu(pre)?;
            if let Some(e) = site_edits.filter(|e| !e.features.is_empty()) {
                let (idx, vals) = e.features.iter().map(|(k, v)| (*k, *v)).unzip();
                f = tape.override_elements(f, idx, vals)?;
            }
            let w_dec = tape.constant_shared(sae.w_dec.clone());
            let b_dec = tape.constant_shared(sae.b_dec.clone());
            let xhat = tape.linear(f, w_dec, b_dec)?;
            let x_clean = tape.constant_shared(clean.x.clone());
            let xhat_clean = tape.constant_shared(clean.xhat.clone());
            let delta = tape.sub(xhat, xhat_clean)?;
            out = tape.add(x_clean, delta)?;
            features = Some(f);
            tape.watch(&format!("{id}.features"), f);
        }
        None => {
            if site_edits.is_some_and(|e| !e.features.is_empty()) {
                return Err(Error::invalid(format!("feature edit at {id} without an attached SAE")));
            }
        }
    }
    if let Some(e) = site_edits.filter(|e| !e.raw.is_empty()) {
        let len = tape.value(out).numel();
        if let Some((&k, _)) = e.raw.iter().next_back().filter(|(k, _)| **k >= len) {
            return Err(Error::invalid(format!("raw edit index {k} outside {id} of size {len} (width {d_model})")));
        }
        let (idx, vals) = e.raw.iter().map(|(k, v)| (*k, *v)).unzip();
        out = tape.override_elements(out, idx, vals)?;
    }
    tape.watch(&id.to_string(), out);
    sites.insert(
        id,
        SiteTrace {
            input: x,
            features,
            output: out,
        },
    );
    Ok(out)
}
