use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gpmech::attribution::Method;
use gpmech::run::{MetricChoice, Pipeline, RunConfig};
use gpmech::{Error, Result};

#[derive(Parser)]
#[command(name = "gpmech", version, about = "Garden-path circuit analysis of small transformer language models")]
struct Cli {
    /// TOML run config; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Caps the worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Exact,
    Atp,
    AtpIg,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Tokens,
    LinearTest,
}

#[derive(Subcommand)]
enum Command {
    /// Write the grammar, corpus, treebank and stimuli.
    GenGrammar,
    /// Train the language model on the corpus.
    TrainLm,
    /// Record activations at every SAE site.
    CollectActs,
    /// Train one SAE per site.
    TrainSae,
    /// Next-token probabilities on the stimuli.
    Behavioral,
    /// Node and edge attribution scores.
    Attribute {
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long, value_enum, default_value = "tokens")]
        metric: MetricArg,
    },
    /// Threshold scores into a circuit.
    ExtractCircuit {
        #[arg(long)]
        node_threshold: Option<f64>,
        #[arg(long)]
        edge_threshold: Option<f64>,
        /// Circuit path; `circuit.json` in the run directory by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Faithfulness of a circuit and the threshold sweep.
    Faithfulness {
        #[arg(long)]
        circuit: Option<PathBuf>,
    },
    /// Clamp attributed features against random controls.
    Intervene,
    /// Train one parse-action probe per layer.
    ProbeTrain,
    /// Held-out probe accuracy and attachment scores.
    ProbeEval,
    /// Probe action distributions on the stimuli.
    ProbeReading,
    /// IoU of two circuits, or probe-feature recall of the main circuit.
    CompareCircuits {
        #[arg(long, requires = "b")]
        a: Option<PathBuf>,
        #[arg(long, requires = "a")]
        b: Option<PathBuf>,
        /// Match features regardless of position.
        #[arg(long)]
        ignore_position: bool,
    },
    /// Markdown summary of the run directory.
    Report,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = cli.output_dir {
        cfg.output_dir = d;
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(vec![format!("--threads: {e}")]))?;
    }
    match &cli.command {
        Command::Attribute { method, metric } => {
            if let Some(m) = method {
                cfg.attribution.method = match m {
                    MethodArg::Exact => Method::Exact,
                    MethodArg::Atp => Method::Atp,
                    MethodArg::AtpIg => Method::AtpIg,
                }
            }
            // The linear test scores one site, so there are no edges.
            if matches!(metric, MetricArg::LinearTest) {
                cfg.attribution.edges = false;
            }
        }
        Command::ExtractCircuit {
            node_threshold,
            edge_threshold,
            ..
        } => {
            if let Some(t) = node_threshold {
                cfg.circuit.node_threshold = *t;
            }
            if let Some(t) = edge_threshold {
                cfg.circuit.edge_threshold = *t;
            }
        }
        _ => {}
    }
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let p = Pipeline::new(cfg);
    match cli.command {
        Command::GenGrammar => p.gen_grammar(),
        Command::TrainLm => p.train_lm(),
        Command::CollectActs => p.collect_acts(),
        Command::TrainSae => p.train_sae(),
        Command::Behavioral => p.behavioral(),
        Command::Attribute { metric, .. } => p.attribute(match metric {
            MetricArg::Tokens => MetricChoice::Tokens,
            MetricArg::LinearTest => MetricChoice::LinearTest,
        }),
        Command::ExtractCircuit { out, .. } => p.extract_circuit(out.as_deref()),
        Command::Faithfulness { circuit } => p.faithfulness(circuit.as_deref()),
        Command::Intervene => p.intervene(),
        Command::ProbeTrain => p.probe_train(),
        Command::ProbeEval => p.probe_eval(),
        Command::ProbeReading => p.probe_reading(),
        Command::CompareCircuits { a, b, ignore_position } => {
            let pair = a.as_deref().zip(b.as_deref());
            p.compare_circuits(pair, !ignore_position)
        }
        Command::Report => p.report(),
    }?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gpmech: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
