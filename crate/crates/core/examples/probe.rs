//! Trains parse-action probes on the language model's residual stream,
//! decodes held-out trees with them, and reads the attach-versus-continue
//! preference at the ambiguous noun of each garden-path structure.
//!
//! `cargo run --release --example probe -- [run_dir]`

mod support;

use gpmech::model::{MetricMode, TransformerModel};
use gpmech::probe::{eval_probe, oracle_actions, probe_reading, random_baseline, train_probe};
use gpmech::run::Pipeline;
use gpmech::stimuli::{read_stimuli, read_treebank, Condition, Structure};

fn main() -> gpmech::Result<()> {
    let pipe = support::pipeline();
    support::ensure(&pipe, &["gen-grammar", "train-lm"])?;
    let (layout, cfg) = (&pipe.layout, &pipe.cfg.probe);
    let model = TransformerModel::load(&layout.lm())?;
    let trees = read_treebank(&layout.treebank())?;
    let example = &trees[0];
    let actions: Vec<String> = oracle_actions(example)?.iter().map(|a| a.to_string()).collect();
    println!("{}\n  {}", example.tokens.join(" "), actions.join(" "));

    let (train, test) = (&trees[..cfg.n_train], &trees[trees.len() - cfg.n_test..]);
    let stimuli = read_stimuli(&layout.stimuli())?;
    for site in cfg.sites(model.config.n_layers) {
        let probe = train_probe(&model, train, site, &cfg.train)?;
        let ev = eval_probe(&probe, &model, test)?;
        let rb = random_baseline(&model, test, site, cfg.baseline_seed)?;
        println!(
            "{site}: action accuracy {:.3}, UAS {:.3} (random {:.3})",
            ev.action_accuracy, ev.uas, rb.uas
        );
        for structure in Structure::ALL {
            let (data, _) = Pipeline::dataset(&model.vocab, &stimuli, structure, Condition::Ambiguous, MetricMode::ProbDiff)?;
            let mut mean = [0.0; 3];
            for ex in &data {
                let p = probe_reading(&model, &probe, ex)?;
                for k in 0..3 {
                    mean[k] += p[k] / data.len() as f64;
                }
            }
            println!("    {structure} ambiguous: attach {:.3}, continue {:.3}", mean[1], mean[2]);
        }
    }
    Ok(())
}
