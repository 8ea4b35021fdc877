use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::FeatureCoord;
use crate::error::Result;
use crate::model::{ActivationEdit, Example};
use crate::sae::SplicedModel;

/// A labelled set of feature coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeGroup {
    pub label: String,
    pub members: Vec<FeatureCoord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupActivation {
    pub label: String,
    pub mean_activation: f64,
    pub fraction_active: f64,
    /// Number of (feature, example, position) observations.
    pub n_pairs: usize,
}

/// Mean activation and fraction active of each group's features at their
/// resolved positions, after applying `edits`. Positions that do not resolve
/// on an example are skipped.
pub fn feature_activation_stats(
    sm: &SplicedModel<'_>,
    dataset: &[Example],
    groups: &[NodeGroup],
    edits: &[ActivationEdit],
) -> Result<Vec<GroupActivation>> {
    let per_example: Vec<Vec<Vec<f64>>> = dataset
        .par_iter()
        .map(|ex| {
            let trace = sm.forward_with_edits(ex, edits)?;
            groups
                .iter()
                .map(|g| {
                    let mut vals = Vec::new();
                    for c in &g.members {
                        let width = sm.d_features(&c.site)?;
                        let f = trace.features(&c.site)?;
                        let Ok(positions) = c.position.resolve(&ex.annotations, ex.tokens.len()) else {
                            continue;
                        };
                        vals.extend(positions.iter().map(|p| f.data()[p * width + c.feature]));
                    }
                    Ok(vals)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(groups
        .iter()
        .enumerate()
        .map(|(gi, g)| {
            let vals: Vec<f64> = per_example.iter().flat_map(|e| e[gi].iter().copied()).collect();
            let n = vals.len();
            let (mean, frac) = if n == 0 {
                (0.0, 0.0)
            } else {
                (
                    vals.iter().sum::<f64>() / n as f64,
                    vals.iter().filter(|v| **v > 0.0).count() as f64 / n as f64,
                )
            };
            GroupActivation {
                label: g.label.clone(),
                mean_activation: mean,
                fraction_active: frac,
                n_pairs: n,
            }
        })
        .collect())
}
