use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Condition, Stimulus, Structure};
use crate::error::Result;
use crate::model::TransformerModel;
use crate::numerics::{kernels::softmax, mean_sem};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorRow {
    pub structure: Structure,
    pub condition: Condition,
    pub n: usize,
    pub mean_p_gp: f64,
    pub mean_p_nongp: f64,
    pub mean_diff: f64,
    pub sem_diff: f64,
}

/// `(p(gp_token), p(nongp_token))` after the last word.
pub fn stimulus_probabilities(model: &TransformerModel, s: &Stimulus) -> Result<(f64, f64)> {
    let tokens = model.vocab.encode_words(&s.words)?;
    let gp = model.vocab.id(&s.gp_token)?;
    let non = model.vocab.id(&s.nongp_token)?;
    let trace = model.forward(&tokens)?;
    let p = softmax(trace.logits().row(tokens.len() - 1));
    Ok((p[gp], p[non]))
}

/// Per structure and condition means of `p(GP)`, `p(non-GP)` and their
/// difference, with the standard error of the difference.
pub fn behavioral_eval(model: &TransformerModel, stimuli: &[Stimulus]) -> Result<Vec<BehaviorRow>> {
    let probs: Vec<(f64, f64)> = stimuli
        .par_iter()
        .map(|s| stimulus_probabilities(model, s))
        .collect::<Result<_>>()?;
    let mut groups: BTreeMap<(Structure, Condition), Vec<(f64, f64)>> = BTreeMap::new();
    for (s, p) in stimuli.iter().zip(probs) {
        groups.entry((s.structure, s.condition)).or_default().push(p);
    }
    Ok(groups
        .into_iter()
        .map(|((structure, condition), ps)| {
            let gp: Vec<f64> = ps.iter().map(|p| p.0).collect();
            let non: Vec<f64> = ps.iter().map(|p| p.1).collect();
            let diff: Vec<f64> = ps.iter().map(|p| p.0 - p.1).collect();
            let (mean_diff, sem_diff) = mean_sem(&diff);
            BehaviorRow {
                structure,
                condition,
                n: ps.len(),
                mean_p_gp: mean_sem(&gp).0,
                mean_p_nongp: mean_sem(&non).0,
                mean_diff,
                sem_diff,
            }
        })
        .collect())
}

pub fn behavior_to_tsv(rows: &[BehaviorRow]) -> String {
    let mut s = String::from("structure\tcondition\tn\tmean_p_gp\tmean_p_nongp\tmean_diff\tsem_diff\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{:.9}\t{:.9}\t{:.9}\t{:.9}",
            r.structure, r.condition, r.n, r.mean_p_gp, r.mean_p_nongp, r.mean_diff, r.sem_diff
        );
    }
    s
}

/// Whether `gp > ambiguous > non_gp` holds for `structure` with each gap
/// larger than `z` standard errors of the difference of means. Returns the
/// two gaps in units of their standard errors.
pub fn garden_path_ordering(rows: &[BehaviorRow], structure: Structure, z: f64) -> Option<(bool, f64, f64)> {
    let get = |c| rows.iter().find(|r| r.structure == structure && r.condition == c);
    let (a, g, n) = (get(Condition::Ambiguous)?, get(Condition::Gp)?, get(Condition::NonGp)?);
    let gap = |hi: &BehaviorRow, lo: &BehaviorRow| {
        let se = (hi.sem_diff.powi(2) + lo.sem_diff.powi(2)).sqrt();
        (hi.mean_diff - lo.mean_diff) / se
    };
    let (upper, lower) = (gap(g, a), gap(a, n));
    Some((upper > z && lower > z, upper, lower))
}
