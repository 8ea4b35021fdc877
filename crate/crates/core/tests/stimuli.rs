use std::collections::BTreeMap;

use gpmech::model::{ModelConfig, TransformerModel};
use gpmech::numerics::Tensor;
use gpmech::stimuli::{
    behavioral_eval, default_templates, generate_corpus, generate_stimuli, treebank_to_string, Condition,
    GrammarSpec, Stimulus,
};

/// Expected number of words of each lexical category per sentence, by
/// recursion over the grammar's expansions.
fn expected_counts(g: &GrammarSpec, sym: &str, memo: &mut BTreeMap<String, BTreeMap<String, f64>>) -> BTreeMap<String, f64> {
    if let Some(m) = memo.get(sym) {
        return m.clone();
    }
    let mut out = BTreeMap::new();
    if let Some(prods) = g.rules.get(sym) {
        for p in prods {
            for c in &p.rhs {
                for (k, v) in expected_counts(g, c, memo) {
                    *out.entry(k).or_insert(0.0) += p.p * v;
                }
            }
        }
    } else if g.lexicon.contains_key(sym) {
        out.insert(sym.to_string(), 1.0);
    }
    memo.insert(sym.to_string(), out.clone());
    out
}

#[test]
fn verb_class_frequencies_follow_the_grammar() {
    let g = GrammarSpec::toy(11);
    let corpus = generate_corpus(&g, 100_000).unwrap();
    let expected = expected_counts(&g, &g.start, &mut BTreeMap::new());
    let mut category_of = BTreeMap::new();
    for (cat, words) in &g.lexicon {
        for w in words {
            category_of.insert(w.as_str(), cat.as_str());
        }
    }
    let mut observed: BTreeMap<&str, f64> = BTreeMap::new();
    for t in &corpus {
        for w in &t.tokens {
            if let Some(c) = category_of.get(w.as_str()) {
                *observed.entry(c).or_default() += 1.0;
            }
        }
    }
    for cat in ["VT", "VI", "VA", "VS", "VB", "VM", "VPAST", "VPP"] {
        let e = expected[cat];
        let o = observed[cat] / corpus.len() as f64;
        assert!((o - e).abs() <= 0.1 * e, "{cat}: observed {o}, expected {e}");
    }
}

#[test]
fn corpus_is_byte_identical_on_rerun() {
    let g = GrammarSpec::toy(3);
    let a = treebank_to_string(&generate_corpus(&g, 500).unwrap());
    let b = treebank_to_string(&generate_corpus(&g, 500).unwrap());
    assert_eq!(a, b);
}

fn uniform_model(g: &GrammarSpec) -> TransformerModel {
    let vocab = g.vocab();
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_mlp: 16,
        vocab_size: vocab.len(),
        max_seq_len: 16,
        rng_seed: 0,
    };
    let base = TransformerModel::new(cfg.clone(), vocab.clone()).unwrap();
    let mut params: BTreeMap<String, Tensor> = base.params().iter().map(|(k, v)| (k.clone(), (**v).clone())).collect();
    for name in ["unembed.w", "unembed.b"] {
        let shape = params[name].shape().to_vec();
        params.insert(name.into(), Tensor::zeros(&shape));
    }
    TransformerModel::from_params(cfg, vocab, params).unwrap()
}

#[test]
fn uniform_head_gives_zero_difference() {
    let g = GrammarSpec::toy(0);
    let model = uniform_model(&g);
    let stim = generate_stimuli(&default_templates(&g).unwrap(), &g, 4, 0).unwrap();
    for r in behavioral_eval(&model, &stim).unwrap() {
        assert_eq!(r.mean_diff, 0.0);
        assert!((r.mean_p_gp - 1.0 / model.vocab.len() as f64).abs() < 1e-15);
    }
}

#[test]
fn duplicating_stimuli_keeps_means_and_shrinks_the_error() {
    let g = GrammarSpec::toy(0);
    let vocab = g.vocab();
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_mlp: 16,
        vocab_size: vocab.len(),
        max_seq_len: 16,
        rng_seed: 5,
    };
    let model = TransformerModel::new(cfg, vocab).unwrap();
    let stim: Vec<Stimulus> = generate_stimuli(&default_templates(&g).unwrap(), &g, 10, 0)
        .unwrap()
        .into_iter()
        .filter(|s| s.condition == Condition::Ambiguous)
        .collect();
    let doubled: Vec<Stimulus> = stim.iter().chain(&stim).cloned().collect();
    let a = behavioral_eval(&model, &stim).unwrap();
    let b = behavioral_eval(&model, &doubled).unwrap();
    for (x, y) in a.iter().zip(&b) {
        let n = x.n as f64;
        assert!((x.mean_diff - y.mean_diff).abs() < 1e-15);
        // SE' = SE * sqrt((n - 1) / (2n - 1)), which tends to SE / sqrt(2).
        let want = x.sem_diff * ((n - 1.0) / (2.0 * n - 1.0)).sqrt();
        assert!((y.sem_diff - want).abs() < 1e-12 * want.max(1e-12));
    }
}

#[test]
fn unknown_words_are_rejected() {
    let g = GrammarSpec::toy(0);
    let model = uniform_model(&g);
    let mut stim = generate_stimuli(&default_templates(&g).unwrap(), &g, 1, 0).unwrap();
    stim[0].words[1] = "zebra".into();
    assert!(behavioral_eval(&model, &stim).is_err());
}
