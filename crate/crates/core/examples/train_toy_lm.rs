//! Trains a small transformer on the toy grammar and prints the behavioural
//! garden-path table.

use std::time::Instant;

use gpmech::model::{mean_cross_entropy, train_lm, unigram_cross_entropy, LmTrainConfig, ModelConfig, TransformerModel};
use gpmech::stimuli::{
    behavior_to_tsv, behavioral_eval, default_templates, generate_corpus, generate_stimuli, garden_path_ordering,
    GrammarSpec, Structure,
};

fn main() -> gpmech::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let n_sentences = args.first().copied().unwrap_or(4000);
    let epochs = args.get(1).copied().unwrap_or(2);
    let d_model = args.get(2).copied().unwrap_or(32);
    let grammar = GrammarSpec::toy(0);
    let vocab = grammar.vocab();
    let trees = generate_corpus(&grammar, n_sentences + 500)?;
    let corpus: Vec<Vec<usize>> = trees
        .iter()
        .map(|t| vocab.encode_words(&t.tokens))
        .collect::<gpmech::Result<_>>()?;
    let (train, heldout) = corpus.split_at(n_sentences);
    let cfg = ModelConfig {
        n_layers: 3,
        d_model,
        n_heads: 4,
        d_mlp: 4 * d_model,
        vocab_size: vocab.len(),
        max_seq_len: 16,
        rng_seed: 0,
    };
    let model = TransformerModel::new(cfg, vocab)?;
    let start = Instant::now();
    let (model, report) = train_lm(
        &model,
        train,
        &LmTrainConfig {
            epochs,
            ..LmTrainConfig::default()
        },
    )?;
    println!("trained {} steps in {:.1?}: {:?}", report.steps, start.elapsed(), report.epoch_loss);
    println!(
        "held-out CE {:.4} vs unigram {:.4}",
        mean_cross_entropy(&model, heldout)?,
        unigram_cross_entropy(train, heldout, model.vocab.len())
    );
    let stimuli = generate_stimuli(&default_templates(&grammar)?, &grammar, 24, 0)?;
    let rows = behavioral_eval(&model, &stimuli)?;
    print!("{}", behavior_to_tsv(&rows));
    for s in Structure::ALL {
        if let Some((ok, up, low)) = garden_path_ordering(&rows, s, 2.0) {
            println!("{s}: ordered={ok} gaps={up:.1}se,{low:.1}se");
        }
    }
    Ok(())
}
