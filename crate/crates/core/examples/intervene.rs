//! Switches off the features that most push an ambiguous NP/Z prefix toward
//! the garden-path reading and compares the shift with random controls.
//!
//! `cargo run --release --example intervene -- [run_dir]`

mod support;

use gpmech::attribution::{read_scores, MetricMode};
use gpmech::interventions::{attributed_plan, run_intervention};
use gpmech::model::{PositionSelector, TransformerModel};
use gpmech::run::Pipeline;
use gpmech::sae::{SaeParams, SaeSet, SplicedModel};
use gpmech::stimuli::read_stimuli;

fn main() -> gpmech::Result<()> {
    let pipe = support::pipeline();
    support::ensure(&pipe, &support::SPLICED)?;
    support::ensure(&pipe, &["attribute"])?;
    let (layout, cfg) = (&pipe.layout, &pipe.cfg.intervention);
    let model = TransformerModel::load(&layout.lm())?;
    let mut saes = SaeSet::new();
    for site in pipe.cfg.sae.sites(model.config.n_layers) {
        saes.insert(SaeParams::load(&layout.sae(site))?)?;
    }
    let sm = SplicedModel::new(&model, &saes)?;
    let stimuli = read_stimuli(&layout.stimuli())?;
    let (data, metric) = Pipeline::dataset(&model.vocab, &stimuli, cfg.structure, cfg.condition, MetricMode::ProbDiff)?;
    let scores = read_scores(&layout.scores())?;

    let ex = &data[0];
    let pos = PositionSelector::Absolute(cfg.position.resolve(&ex.annotations, ex.tokens.len())?[0]);
    let seeds: Vec<u64> = (0..20).collect();
    for (n_promoting, n_opposing) in [(4, 0), (4, 4), (8, 0)] {
        let plan = attributed_plan(&scores, n_promoting, n_opposing, pos, &saes)?;
        let r = run_intervention(&sm, &plan, &data, &metric, &seeds)?;
        println!(
            "off {n_promoting}, high {n_opposing}: m {:+.3} -> {:+.3}, effect {:+.3}, mean |control| {:.4}, ratio {:.1}",
            r.baseline.mean_m,
            r.intervention.mean_m,
            r.effect,
            r.mean_abs_control_effect,
            r.ratio()
        );
        for g in &plan.groups {
            let members: Vec<String> = g.members.iter().map(|c| c.to_string()).collect();
            println!("    {} @ {:.2}: {}", g.label, g.clamp_value, members.join(", "));
        }
    }
    Ok(())
}
