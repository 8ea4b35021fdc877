#![allow(dead_code)]

use gpmech::model::{Example, ModelConfig, SubmoduleId, TransformerModel, Vocab};
use gpmech::sae::{SaeParams, SaeSet};

pub fn small_model(n_layers: usize, seed: u64) -> TransformerModel {
    let cfg = ModelConfig {
        n_layers,
        d_model: 8,
        n_heads: 2,
        d_mlp: 16,
        vocab_size: 12,
        max_seq_len: 10,
        rng_seed: seed,
    };
    TransformerModel::new(cfg, Vocab::synthetic(12)).unwrap()
}

/// Random SAEs of width `4·d_model` at the given sites.
pub fn random_saes(model: &TransformerModel, sites: &[SubmoduleId], seed: u64) -> SaeSet {
    let d = model.config.d_model;
    let mut set = SaeSet::new();
    for (i, s) in sites.iter().enumerate() {
        set.insert(SaeParams::random(*s, d, 4 * d, seed + i as u64)).unwrap();
    }
    set
}

pub fn example(tokens: &[usize], verb: usize, final_noun: usize) -> Example {
    let mut ex = Example::new(tokens.to_vec());
    ex.annotations.verb = Some(verb);
    ex.annotations.final_noun = Some(final_noun);
    ex
}
