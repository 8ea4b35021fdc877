//! Extracts a feature circuit from stored attribution scores and measures
//! how much of the full model's behavior it keeps across thresholds.
//!
//! `cargo run --release --example circuit -- [run_dir]`

mod support;

use gpmech::attribution::{read_edges, read_scores, MetricMode};
use gpmech::circuits::{extract_circuit, faithfulness, faithfulness_sweep, FaithfulnessOptions};
use gpmech::model::TransformerModel;
use gpmech::run::Pipeline;
use gpmech::sae::{SaeParams, SaeSet, SplicedModel};
use gpmech::stimuli::read_stimuli;

fn main() -> gpmech::Result<()> {
    let pipe = support::pipeline();
    support::ensure(&pipe, &support::SPLICED)?;
    support::ensure(&pipe, &["attribute"])?;
    let (layout, cfg) = (&pipe.layout, &pipe.cfg);
    let model = TransformerModel::load(&layout.lm())?;
    let mut saes = SaeSet::new();
    for site in cfg.sae.sites(model.config.n_layers) {
        saes.insert(SaeParams::load(&layout.sae(site))?)?;
    }
    let sm = SplicedModel::new(&model, &saes)?;
    let nodes = read_scores(&layout.scores())?;
    let edges = read_edges(&layout.edges())?;
    let free = cfg.circuit.free_sites.sites(model.config.n_layers);
    let circuit = extract_circuit(&nodes, &edges, cfg.circuit.node_threshold, cfg.circuit.edge_threshold)?
        .with_free_sites(free.clone());
    println!(
        "circuit at node threshold {}: {} nodes, {} edges",
        cfg.circuit.node_threshold,
        circuit.nodes.len(),
        circuit.edges.len()
    );

    let stimuli = read_stimuli(&layout.stimuli())?;
    let a = &cfg.attribution;
    let (data, metric) = Pipeline::dataset(&model.vocab, &stimuli, a.structure, a.condition, MetricMode::LogitDiff)?;
    let opts = FaithfulnessOptions {
        denominator_floor: cfg.circuit.denominator_floor,
    };
    let r = faithfulness(&sm, &circuit, &data, &metric, &opts)?;
    println!("faithfulness {:.4}", r.faithfulness);
    for p in faithfulness_sweep(&sm, &nodes, &edges, &cfg.circuit.sweep, &free, &data, &metric, &opts)? {
        println!("  threshold {:<7} nodes {:5}  F {:.4}", p.node_threshold, p.n_nodes, p.faithfulness);
    }
    Ok(())
}
