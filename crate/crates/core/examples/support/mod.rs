//! Shared setup for the examples: a run directory whose early stages are
//! computed on first use and reused afterwards.

#![allow(dead_code)]

use std::path::PathBuf;

use gpmech::run::{MetricChoice, Pipeline, RunConfig};

/// Pipeline rooted at the first command-line argument, or `runs/example`.
/// Training budgets are trimmed so a cold start takes a few minutes.
pub fn pipeline() -> Pipeline {
    let root = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "runs/example".into());
    let mut cfg = RunConfig {
        output_dir: root,
        ..RunConfig::default()
    };
    cfg.lm.epochs = 2;
    cfg.sae.train.steps = 1500;
    cfg.probe.n_train = 1500;
    cfg.probe.train.epochs = 5;
    Pipeline::new(cfg)
}

/// Runs each named stage whose manifest is missing.
pub fn ensure(pipe: &Pipeline, stages: &[&str]) -> gpmech::Result<()> {
    for &s in stages {
        if pipe.layout.manifest(s).exists() {
            continue;
        }
        eprintln!("running {s}");
        match s {
            "gen-grammar" => pipe.gen_grammar(),
            "train-lm" => pipe.train_lm(),
            "collect-acts" => pipe.collect_acts(),
            "train-sae" => pipe.train_sae(),
            "attribute" => pipe.attribute(MetricChoice::Tokens),
            "extract-circuit" => pipe.extract_circuit(None),
            "probe-train" => pipe.probe_train(),
            other => panic!("no setup for stage {other}"),
        }?;
    }
    Ok(())
}

pub const SPLICED: [&str; 4] = ["gen-grammar", "train-lm", "collect-acts", "train-sae"];
