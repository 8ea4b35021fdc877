use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{extract_circuit, Circuit};
use crate::attribution::{AttributionScore, EdgeScore};
use crate::error::{Error, Result};
use crate::model::{Example, MetricMode, MetricSpec, ResolvedEdits, SubmoduleId};
use crate::sae::SplicedModel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessOptions {
    /// Examples with `|m(M) - m(∅)|` below this are excluded.
    pub denominator_floor: f64,
}

impl Default for FaithfulnessOptions {
    fn default() -> Self {
        FaithfulnessOptions {
            denominator_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub faithfulness: f64,
    /// `(m(C), m(∅), m(M))` per example.
    pub per_example: Vec<[f64; 3]>,
    /// Indices of examples whose denominator fell below the floor.
    pub excluded: Vec<usize>,
}

/// Zero-ablates every feature at every non-free spliced site and position,
/// except the `(site, position, feature)` triples in `keep`.
fn ablation(sm: &SplicedModel<'_>, free: &[SubmoduleId], len: usize, keep: &BTreeSet<(SubmoduleId, usize, usize)>) -> Result<ResolvedEdits> {
    let mut edits = ResolvedEdits::default();
    for (site, sae) in sm.saes.iter() {
        if free.contains(site) {
            continue;
        }
        let width = sae.d_features();
        for pos in 0..len {
            for feat in 0..width {
                if !keep.contains(&(*site, pos, feat)) {
                    edits.set_feature(*site, pos, feat, width, 0.0)?;
                }
            }
        }
    }
    Ok(edits)
}

/// Mean over the dataset of `(m(C) - m(∅)) / (m(M) - m(∅))`, where `m(C)`
/// keeps only circuit and free-site features, `m(∅)` only free-site
/// features, and `m(M)` is the unablated spliced model.
pub fn faithfulness(
    sm: &SplicedModel<'_>,
    circuit: &Circuit,
    dataset: &[Example],
    metric: &MetricSpec,
    opts: &FaithfulnessOptions,
) -> Result<FaithfulnessReport> {
    if metric.mode != MetricMode::LogitDiff {
        return Err(Error::invalid("faithfulness is defined on the logit difference"));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let free = &circuit.metadata.free_sites;
    let per_example: Vec<[f64; 3]> = dataset
        .par_iter()
        .map(|ex| {
            let len = ex.tokens.len();
            let mut keep = BTreeSet::new();
            for n in &circuit.nodes {
                sm.d_features(&n.coord.site)?;
                let Ok(positions) = n.coord.position.resolve(&ex.annotations, len) else {
                    continue;
                };
                for p in positions {
                    keep.insert((n.coord.site, p, n.coord.feature));
                }
            }
            let clean = sm.clean(&ex.tokens)?;
            let run = |edits: &ResolvedEdits| -> Result<f64> {
                let mut t = sm.trace(&clean, edits)?;
                let m = metric.build(&mut t)?;
                t.tape.value(m).item()
            };
            let full = run(&ResolvedEdits::default())?;
            let empty = run(&ablation(sm, free, len, &BTreeSet::new())?)?;
            let circ = run(&ablation(sm, free, len, &keep)?)?;
            Ok([circ, empty, full])
        })
        .collect::<Result<_>>()?;
    let mut ratios = Vec::new();
    let mut excluded = Vec::new();
    for (i, [c, e, f]) in per_example.iter().enumerate() {
        let den = f - e;
        if den.abs() < opts.denominator_floor {
            excluded.push(i);
        } else {
            ratios.push((c - e) / den);
        }
    }
    if ratios.is_empty() {
        return Err(Error::Numerical("every example fell below the faithfulness denominator floor".into()));
    }
    let faithfulness = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok(FaithfulnessReport {
        faithfulness,
        per_example,
        excluded,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub node_threshold: f64,
    pub n_nodes: usize,
    pub faithfulness: f64,
}

/// Faithfulness of circuits extracted at each node threshold, in the order given.
#[allow(clippy::too_many_arguments)]
pub fn faithfulness_sweep(
    sm: &SplicedModel<'_>,
    nodes: &[AttributionScore],
    edges: &[EdgeScore],
    thresholds: &[f64],
    free_sites: &[SubmoduleId],
    dataset: &[Example],
    metric: &MetricSpec,
    opts: &FaithfulnessOptions,
) -> Result<Vec<SweepPoint>> {
    thresholds
        .iter()
        .map(|&t| {
            let c = extract_circuit(nodes, edges, t, 0.0)?.with_free_sites(free_sites.to_vec());
            let r = faithfulness(sm, &c, dataset, metric, opts)?;
            Ok(SweepPoint {
                node_threshold: t,
                n_nodes: c.nodes.len(),
                faithfulness: r.faithfulness,
            })
        })
        .collect()
}
