//! Scores every SAE feature's indirect effect on the NP/Z garden-path
//! metric three ways and compares the rankings against exact patching.
//!
//! `cargo run --release --example attribute -- [run_dir]`

mod support;

use std::collections::{BTreeMap, BTreeSet};

use gpmech::attribution::{node_scores, AttributionScore, FeatureCoord, MetricMode, Method, ScoreOptions};
use gpmech::model::TransformerModel;
use gpmech::run::Pipeline;
use gpmech::sae::{SaeParams, SaeSet, SplicedModel};
use gpmech::stimuli::{read_stimuli, Condition, Structure};

fn top(scores: &[AttributionScore], k: usize) -> Vec<FeatureCoord> {
    let mut s: Vec<&AttributionScore> = scores.iter().collect();
    s.sort_by(|a, b| b.score.abs().total_cmp(&a.score.abs()).then(a.coord.cmp(&b.coord)));
    s.iter().take(k).map(|x| x.coord).collect()
}

fn main() -> gpmech::Result<()> {
    let pipe = support::pipeline();
    support::ensure(&pipe, &support::SPLICED)?;
    let layout = &pipe.layout;
    let model = TransformerModel::load(&layout.lm())?;
    let mut saes = SaeSet::new();
    for site in pipe.cfg.sae.sites(model.config.n_layers) {
        saes.insert(SaeParams::load(&layout.sae(site))?)?;
    }
    let sm = SplicedModel::new(&model, &saes)?;
    let stimuli = read_stimuli(&layout.stimuli())?;
    let (data, metric) = Pipeline::dataset(&model.vocab, &stimuli, Structure::Npz, Condition::Ambiguous, MetricMode::ProbDiff)?;
    println!("{} ambiguous NP/Z stimuli, metric {:?}", data.len(), metric.mode);

    let run = |m: Method| node_scores(&sm, &metric, &data, &ScoreOptions::new(m));
    let exact = run(Method::Exact)?;
    let truth: BTreeMap<FeatureCoord, f64> = exact.iter().map(|s| (s.coord, s.score)).collect();
    let reference: BTreeSet<FeatureCoord> = top(&exact, 50).into_iter().collect();
    for method in [Method::Atp, Method::AtpIg] {
        let est = run(method)?;
        let hits = top(&est, 50).iter().filter(|c| reference.contains(c)).count();
        let mae = top(&exact, 100)
            .iter()
            .map(|c| {
                let e = est.iter().find(|s| s.coord == *c).map_or(0.0, |s| s.score);
                (e - truth[c]).abs()
            })
            .sum::<f64>()
            / 100.0;
        println!("{method:?}: top-50 overlap with exact {hits}/50, top-100 MAE {mae:.5}");
    }
    println!("strongest features by exact effect:");
    for c in top(&exact, 10) {
        println!("  {c}  {:+.4}", truth[&c]);
    }
    Ok(())
}
