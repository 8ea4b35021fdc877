use std::fmt::Write as _;
use std::path::Path;

use super::pipeline::{FaithfulnessOutput, InterventionOutput, LmSummary, Pipeline};
use super::Manifest;
use crate::error::Result;
use crate::sae::SaeMetrics;

fn tsv_table(text: &str) -> String {
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let cells: Vec<&str> = line.split('\t').collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
        if i == 0 {
            let _ = writeln!(out, "|{}", "---|".repeat(cells.len()));
        }
    }
    out
}

fn read(pipe: &Pipeline, m: &mut Manifest, path: &Path) -> Result<Option<String>> {
    if !path.exists() {
        return Ok(None);
    }
    m.input(&pipe.layout.root, path)?;
    Ok(Some(std::fs::read_to_string(path)?))
}

/// Markdown summary of whichever artifacts the run directory holds.
pub(crate) fn render(pipe: &Pipeline, m: &mut Manifest) -> Result<String> {
    let l = &pipe.layout;
    let mut s = String::from("# Run report\n\n");
    let _ = writeln!(s, "Config hash `{}`.\n", m.config_sha256);

    if let Some(t) = read(pipe, m, &l.lm_report())? {
        let r: LmSummary = serde_json::from_str(&t)?;
        let _ = writeln!(
            s,
            "## Language model\n\nHeld-out cross-entropy {:.4} nats against a unigram baseline of {:.4} ({} training, {} held-out sentences).\n",
            r.heldout_cross_entropy, r.unigram_cross_entropy, r.n_train, r.n_heldout
        );
    }

    let mut sae_rows = String::new();
    for site in pipe.cfg.sae.sites(pipe.cfg.model.n_layers) {
        if let Some(t) = read(pipe, m, &l.sae_metrics(site))? {
            let r: SaeMetrics = serde_json::from_str(&t)?;
            let _ = writeln!(
                sae_rows,
                "| {site} | {:.2} | {:.4} | {:.3} |",
                r.mean_l0, r.variance_explained, r.top_decile_activation
            );
        }
    }
    if !sae_rows.is_empty() {
        s.push_str("## Sparse autoencoders\n\n| site | L0 | variance explained | top-decile activation |\n|---|---|---|---|\n");
        s.push_str(&sae_rows);
        s.push('\n');
    }

    if let Some(t) = read(pipe, m, &l.behavior())? {
        s.push_str("## Behaviour\n\n");
        s.push_str(&tsv_table(&t));
        s.push('\n');
    }

    if let Some(t) = read(pipe, m, &l.faithfulness())? {
        let f: FaithfulnessOutput = serde_json::from_str(&t)?;
        let _ = writeln!(
            s,
            "## Circuit\n\n`{}` keeps {} nodes. Faithfulness {:.4} over {} stimuli.\n",
            f.circuit, f.n_nodes, f.report.faithfulness, f.report.per_example.len()
        );
        s.push_str("| node threshold | nodes | faithfulness |\n|---|---|---|\n");
        for p in &f.sweep {
            let _ = writeln!(s, "| {} | {} | {:.4} |", p.node_threshold, p.n_nodes, p.faithfulness);
        }
        s.push('\n');
    }

    if let Some(t) = read(pipe, m, &l.intervention())? {
        let i: InterventionOutput = serde_json::from_str(&t)?;
        let _ = writeln!(
            s,
            "## Intervention\n\nMetric shift {:.4} under the edit against a mean control shift of {:.4}, ratio {:.2}, sign flipped: {}.\n",
            i.report.effect,
            i.report.mean_abs_control_effect,
            i.ratio,
            i.sign_flipped
        );
    }

    for (title, path) in [
        ("Probe accuracy", l.probe_eval()),
        ("Probe readings", l.probe_reading()),
        ("Probe-feature recall", l.probe_recall()),
    ] {
        if let Some(t) = read(pipe, m, &path)? {
            let _ = writeln!(s, "## {title}\n");
            s.push_str(&tsv_table(&t));
            s.push('\n');
        }
    }
    Ok(s)
}
