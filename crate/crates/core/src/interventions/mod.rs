//! Grouped feature clamping with matched random controls.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionScore, FeatureCoord};
use crate::error::{Error, Result};
use crate::model::{ActivationEdit, Example, MetricSpec, PositionSelector, SubmoduleId};
use crate::numerics::{kernels::softmax, mean_sem, rng};
use crate::sae::{SaeParams, SaeSet, SplicedModel};

/// Clamp for a high-activation intervention at an SAE whose mean top-decile
/// activation is 1.
pub const DEFAULT_HIGH_CLAMP: f64 = 2.0;

/// `DEFAULT_HIGH_CLAMP` rescaled to the SAE's activation scale.
pub fn default_clamp(sae: &SaeParams) -> f64 {
    DEFAULT_HIGH_CLAMP * sae.meta.top_decile_activation
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub label: String,
    pub members: Vec<FeatureCoord>,
    pub clamp_value: f64,
}

impl FeatureGroup {
    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::invalid(format!("group {} has no members", self.label)));
        }
        if !(self.clamp_value.is_finite() && self.clamp_value >= 0.0) {
            return Err(Error::invalid(format!(
                "group {} clamp {} must be finite and nonnegative",
                self.label, self.clamp_value
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InterventionPlan {
    pub groups: Vec<FeatureGroup>,
    #[serde(default)]
    pub control_seed: u64,
}

impl InterventionPlan {
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<FeatureCoord, f64> = BTreeMap::new();
        for g in &self.groups {
            g.validate()?;
            for c in &g.members {
                if let Some(prev) = seen.insert(*c, g.clamp_value) {
                    if prev != g.clamp_value {
                        return Err(Error::ConflictingEdits(format!("{c} clamped to {prev} and {}", g.clamp_value)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn edits(&self) -> Vec<ActivationEdit> {
        self.groups
            .iter()
            .flat_map(|g| {
                g.members
                    .iter()
                    .map(|c| ActivationEdit::set_feature(c.site, c.position, c.feature, g.clamp_value))
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.members.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Same group sizes, clamps and positions as `plan`, with features redrawn
/// uniformly without replacement at the same sites, never reusing a feature
/// of the original plan.
pub fn make_random_control(plan: &InterventionPlan, saes: &SaeSet, seed: u64) -> Result<InterventionPlan> {
    plan.validate()?;
    let mut rng = rng(seed);
    let original: BTreeSet<(SubmoduleId, usize)> =
        plan.groups.iter().flat_map(|g| g.members.iter().map(|c| c.key())).collect();
    let mut demand: BTreeMap<SubmoduleId, usize> = BTreeMap::new();
    for g in &plan.groups {
        for c in &g.members {
            *demand.entry(c.site).or_default() += 1;
        }
    }
    let mut pools: BTreeMap<SubmoduleId, Vec<usize>> = BTreeMap::new();
    for (site, need) in demand {
        let width = saes
            .d_features(&site)
            .ok_or_else(|| Error::invalid(format!("no SAE attached at {site}")))?;
        let candidates: Vec<usize> = (0..width).filter(|f| !original.contains(&(site, *f))).collect();
        if candidates.len() < need {
            return Err(Error::invalid(format!(
                "{site} has {} features outside the plan, control needs {need}",
                candidates.len()
            )));
        }
        let mut drawn: Vec<usize> = sample(&mut rng, candidates.len(), need)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        drawn.reverse();
        pools.insert(site, drawn);
    }
    let groups = plan
        .groups
        .iter()
        .map(|g| FeatureGroup {
            label: format!("random_{}", g.label),
            clamp_value: g.clamp_value,
            members: g
                .members
                .iter()
                .map(|c| FeatureCoord::new(c.site, pools.get_mut(&c.site).and_then(Vec::pop).expect("drawn"), c.position))
                .collect(),
        })
        .collect();
    Ok(InterventionPlan {
        groups,
        control_seed: seed,
    })
}

/// The `n` most positive and `n` most negative scores whose position equals
/// `position`, as `(promoting, opposing)` coordinates.
pub fn top_signed(scores: &[AttributionScore], n: usize, position: PositionSelector) -> (Vec<FeatureCoord>, Vec<FeatureCoord>) {
    let mut at: Vec<&AttributionScore> = scores.iter().filter(|s| s.coord.position == position).collect();
    at.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.coord.cmp(&b.coord)));
    let pos = at.iter().filter(|s| s.score > 0.0).take(n).map(|s| s.coord).collect();
    let neg = at.iter().rev().filter(|s| s.score < 0.0).take(n).map(|s| s.coord).collect();
    (pos, neg)
}

/// Switches off the `n_promoting` features most promoting the metric's
/// positive side and clamps the `n_opposing` most opposing ones high, per
/// site at the default clamp.
pub fn attributed_plan(
    scores: &[AttributionScore],
    n_promoting: usize,
    n_opposing: usize,
    position: PositionSelector,
    saes: &SaeSet,
) -> Result<InterventionPlan> {
    let (mut pro, mut anti) = top_signed(scores, n_promoting.max(n_opposing), position);
    pro.truncate(n_promoting);
    anti.truncate(n_opposing);
    let mut groups = Vec::new();
    if !pro.is_empty() {
        groups.push(FeatureGroup {
            label: "promoting_off".into(),
            members: pro,
            clamp_value: 0.0,
        });
    }
    let mut by_site: BTreeMap<SubmoduleId, Vec<FeatureCoord>> = BTreeMap::new();
    for c in anti {
        by_site.entry(c.site).or_default().push(c);
    }
    for (site, members) in by_site {
        let sae = saes
            .get(&site)
            .ok_or_else(|| Error::invalid(format!("no SAE attached at {site}")))?;
        groups.push(FeatureGroup {
            label: format!("opposing_high@{site}"),
            members,
            clamp_value: default_clamp(sae),
        });
    }
    let plan = InterventionPlan {
        groups,
        control_seed: 0,
    };
    plan.validate()?;
    Ok(plan)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub label: String,
    pub mean_p_positive: f64,
    pub mean_p_negative: f64,
    pub mean_m: f64,
    pub sem_m: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub baseline: ConditionResult,
    pub intervention: ConditionResult,
    pub controls: Vec<ConditionResult>,
    /// Stimuli whose positions did not resolve, excluded from every condition.
    pub skipped: Vec<usize>,
    /// `mean_m(intervention) - mean_m(baseline)`.
    pub effect: f64,
    /// Mean over controls of `|mean_m(control) - mean_m(baseline)|`.
    pub mean_abs_control_effect: f64,
}

impl InterventionReport {
    /// `|effect| / mean_abs_control_effect`; infinite when controls do nothing.
    pub fn ratio(&self) -> f64 {
        self.effect.abs() / self.mean_abs_control_effect
    }

    pub fn sign_flipped(&self) -> bool {
        self.baseline.mean_m * self.intervention.mean_m < 0.0
    }
}

/// `(p_positive, p_negative, m)` for one stimulus under `edits`.
fn evaluate(sm: &SplicedModel<'_>, metric: &MetricSpec, ex: &Example, edits: &[ActivationEdit]) -> Result<[f64; 3]> {
    let mut trace = sm.forward_with_edits(ex, edits)?;
    let len = ex.tokens.len();
    let pos = metric.position.unwrap_or(len - 1);
    let p = softmax(trace.logits().row(pos));
    let mass = |ids: &[usize]| ids.iter().map(|&i| p[i]).sum::<f64>();
    let (pp, pn) = (mass(&metric.positive), mass(&metric.negative));
    let m = metric.build(&mut trace)?;
    Ok([pp, pn, trace.tape.value(m).item()?])
}

fn condition(sm: &SplicedModel<'_>, metric: &MetricSpec, stimuli: &[&Example], label: &str, edits: &[ActivationEdit]) -> Result<ConditionResult> {
    let rows: Vec<[f64; 3]> = stimuli
        .par_iter()
        .map(|ex| evaluate(sm, metric, ex, edits))
        .collect::<Result<_>>()?;
    let col = |i: usize| rows.iter().map(|r| r[i]).collect::<Vec<_>>();
    let (mean_m, sem_m) = mean_sem(&col(2));
    Ok(ConditionResult {
        label: label.to_string(),
        mean_p_positive: mean_sem(&col(0)).0,
        mean_p_negative: mean_sem(&col(1)).0,
        mean_m,
        sem_m,
        n: rows.len(),
    })
}

/// Baseline, `plan`, and one random control per seed over `stimuli`.
pub fn run_intervention(
    sm: &SplicedModel<'_>,
    plan: &InterventionPlan,
    stimuli: &[Example],
    metric: &MetricSpec,
    control_seeds: &[u64],
) -> Result<InterventionReport> {
    plan.validate()?;
    metric.validate(sm.model.config.vocab_size)?;
    let controls: Vec<InterventionPlan> = control_seeds
        .iter()
        .map(|&s| make_random_control(plan, sm.saes, s))
        .collect::<Result<_>>()?;
    let edits = plan.edits();
    let mut skipped = Vec::new();
    let mut kept = Vec::new();
    for (i, ex) in stimuli.iter().enumerate() {
        match sm.resolve(ex, &edits) {
            Ok(_) => kept.push(ex),
            Err(Error::InvalidArgument(_)) => skipped.push(i),
            Err(e) => return Err(e),
        }
    }
    if kept.is_empty() {
        return Err(Error::invalid("no stimulus resolved the plan's positions"));
    }
    let baseline = condition(sm, metric, &kept, "baseline", &[])?;
    let intervention = condition(sm, metric, &kept, "intervention", &edits)?;
    let controls: Vec<ConditionResult> = controls
        .iter()
        .map(|c| condition(sm, metric, &kept, &format!("control_{}", c.control_seed), &c.edits()))
        .collect::<Result<_>>()?;
    let effect = intervention.mean_m - baseline.mean_m;
    let mean_abs_control_effect = if controls.is_empty() {
        0.0
    } else {
        controls.iter().map(|c| (c.mean_m - baseline.mean_m).abs()).sum::<f64>() / controls.len() as f64
    };
    Ok(InterventionReport {
        baseline,
        intervention,
        controls,
        skipped,
        effect,
        mean_abs_control_effect,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny;

    fn saes(model: &crate::model::TransformerModel) -> SaeSet {
        let mut s = SaeSet::new();
        s.insert(SaeParams::random(SubmoduleId::residual(0), model.config.d_model, 16, 1)).unwrap();
        s
    }

    fn plan() -> InterventionPlan {
        let site = SubmoduleId::residual(0);
        InterventionPlan {
            groups: vec![
                FeatureGroup {
                    label: "a".into(),
                    members: (0..3).map(|f| FeatureCoord::new(site, f, PositionSelector::FinalNoun)).collect(),
                    clamp_value: 0.0,
                },
                FeatureGroup {
                    label: "b".into(),
                    members: vec![FeatureCoord::new(site, 9, PositionSelector::Verb)],
                    clamp_value: 2.0,
                },
            ],
            control_seed: 0,
        }
    }

    #[test]
    fn controls_match_shape_and_avoid_originals() {
        let m = tiny();
        let s = saes(&m);
        let p = plan();
        let c = make_random_control(&p, &s, 5).unwrap();
        assert_eq!(c, make_random_control(&p, &s, 5).unwrap());
        let orig: BTreeSet<_> = p.groups.iter().flat_map(|g| g.members.iter().map(|c| c.key())).collect();
        let mut drawn = BTreeSet::new();
        for (g, h) in p.groups.iter().zip(&c.groups) {
            assert_eq!(g.members.len(), h.members.len());
            assert_eq!(g.clamp_value, h.clamp_value);
            for (a, b) in g.members.iter().zip(&h.members) {
                assert_eq!((a.site, a.position), (b.site, b.position));
                assert!(!orig.contains(&b.key()));
                assert!(drawn.insert(b.key()));
            }
        }
    }

    #[test]
    fn control_needs_enough_features() {
        let m = tiny();
        let s = saes(&m);
        let site = SubmoduleId::residual(0);
        let big = InterventionPlan {
            groups: vec![FeatureGroup {
                label: "all".into(),
                members: (0..9).map(|f| FeatureCoord::new(site, f, PositionSelector::All)).collect(),
                clamp_value: 0.0,
            }],
            control_seed: 0,
        };
        assert!(make_random_control(&big, &s, 0).is_err());
    }

    #[test]
    fn plans_reject_conflicts_and_negative_clamps() {
        let mut p = plan();
        let first = p.groups[0].members[0];
        p.groups[1].members.push(first);
        assert!(matches!(p.validate(), Err(Error::ConflictingEdits(_))));
        let mut p = plan();
        p.groups[0].clamp_value = -1.0;
        assert!(p.validate().is_err());
        let mut p = plan();
        p.groups[0].members.clear();
        assert!(p.validate().is_err());
    }

    #[test]
    fn top_signed_splits_by_sign() {
        let site = SubmoduleId::residual(0);
        let mk = |f, s| AttributionScore {
            coord: FeatureCoord::new(site, f, PositionSelector::FinalNoun),
            score: s,
            method: crate::attribution::Method::Atp,
            n_examples: 1,
        };
        let scores = vec![mk(0, 0.5), mk(1, -0.7), mk(2, 0.9), mk(3, -0.1), mk(4, 0.0)];
        let (pos, neg) = top_signed(&scores, 1, PositionSelector::FinalNoun);
        assert_eq!(pos[0].feature, 2);
        assert_eq!(neg[0].feature, 1);
        let (pos, neg) = top_signed(&scores, 5, PositionSelector::FinalNoun);
        assert_eq!((pos.len(), neg.len()), (2, 2));
    }

    #[test]
    fn attributed_plan_splits_off_and_high_groups() {
        let m = tiny();
        let site = SubmoduleId::residual(0);
        let mut sae = SaeParams::random(site, m.config.d_model, 16, 1);
        sae.meta.top_decile_activation = 3.0;
        let mut s = SaeSet::new();
        s.insert(sae).unwrap();
        let mk = |f, sc, pos| AttributionScore {
            coord: FeatureCoord::new(site, f, pos),
            score: sc,
            method: crate::attribution::Method::Atp,
            n_examples: 1,
        };
        let fin = PositionSelector::FinalNoun;
        let scores = vec![
            mk(0, 0.5, fin),
            mk(1, -0.7, fin),
            mk(2, 0.9, fin),
            mk(3, -0.1, fin),
            mk(4, 5.0, PositionSelector::Verb),
        ];
        let p = attributed_plan(&scores, 2, 1, fin, &s).unwrap();
        assert_eq!(p.groups.len(), 2);
        assert_eq!(p.groups[0].clamp_value, 0.0);
        assert_eq!(p.groups[0].members.iter().map(|c| c.feature).collect::<Vec<_>>(), vec![2, 0]);
        assert_eq!(p.groups[1].members.iter().map(|c| c.feature).collect::<Vec<_>>(), vec![1]);
        assert_eq!(p.groups[1].clamp_value, 6.0);

        let off_only = attributed_plan(&scores, 4, 0, fin, &s).unwrap();
        assert_eq!(off_only.groups.len(), 1);
        assert_eq!(off_only.len(), 2);
        assert!(attributed_plan(&scores, 1, 1, fin, &SaeSet::new()).is_err());
    }
}
