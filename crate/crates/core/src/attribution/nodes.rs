use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Objective;
use crate::error::{Error, Result};
use crate::model::{Example, PositionSelector, ResolvedEdits, SubmoduleId};
use crate::sae::{CleanRun, SplicedModel};

/// One SAE feature at one site and position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureCoord {
    pub site: SubmoduleId,
    pub feature: usize,
    pub position: PositionSelector,
}

impl FeatureCoord {
    pub fn new(site: SubmoduleId, feature: usize, position: PositionSelector) -> Self {
        FeatureCoord {
            site,
            feature,
            position,
        }
    }

    /// Identity ignoring position.
    pub fn key(&self) -> (SubmoduleId, usize) {
        (self.site, self.feature)
    }
}

impl fmt::Display for FeatureCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}@{}", self.site, self.feature, self.position)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    Atp,
    AtpIg,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Exact => "exact",
            Method::Atp => "atp",
            Method::AtpIg => "atp_ig",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Method::Exact),
            "atp" => Ok(Method::Atp),
            "atp_ig" | "atp-ig" => Ok(Method::AtpIg),
            _ => Err(Error::invalid(format!("unknown attribution method `{s}`"))),
        }
    }
}

/// How the path gradients of integrated gradients are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IgRule {
    /// `(1/K) Σ_{k=0..K} g(k/K)`: all `K + 1` gradients, each weighted `1/K`.
    #[default]
    Literal,
    /// Trapezoid rule: endpoints weighted `1/(2K)`, interior points `1/K`.
    Trapezoid,
}

impl IgRule {
    /// Weight of the `k`-th of `K + 1` path gradients.
    pub fn weight(self, k: usize, steps: usize) -> f64 {
        let base = 1.0 / steps as f64;
        match self {
            IgRule::Literal => base,
            IgRule::Trapezoid if k == 0 || k == steps => base / 2.0,
            IgRule::Trapezoid => base,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Scores per absolute position; every example must share length and annotations.
    PerPosition,
    /// Scores summed over all positions of each example.
    SumPositions,
    /// Scores at the positions picked by each selector.
    Selected(Vec<PositionSelector>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub method: Method,
    /// Number of integration intervals for `AtpIg`.
    pub k: usize,
    pub rule: IgRule,
    pub aggregation: Aggregation,
    /// Sites to score; every spliced site when `None`.
    pub sites: Option<Vec<SubmoduleId>>,
}

impl ScoreOptions {
    pub fn new(method: Method) -> Self {
        ScoreOptions {
            method,
            k: 10,
            rule: IgRule::Literal,
            aggregation: Aggregation::PerPosition,
            sites: None,
        }
    }

    pub fn with_aggregation(mut self, aggregation: Aggregation) -> Self {
        self.aggregation = aggregation;
        self
    }

    pub fn with_sites(mut self, sites: Vec<SubmoduleId>) -> Self {
        self.sites = Some(sites);
        self
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_rule(mut self, rule: IgRule) -> Self {
        self.rule = rule;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionScore {
    #[serde(flatten)]
    pub coord: FeatureCoord,
    pub score: f64,
    pub method: Method,
    pub n_examples: usize,
}

/// Absolute (site, position, feature) key used inside one example.
pub(crate) type AbsKey = (SubmoduleId, usize, usize);

fn check_coord(sm: &SplicedModel<'_>, ex: &Example, site: &SubmoduleId, position: usize, feature: usize) -> Result<()> {
    let width = sm.d_features(site)?;
    if feature >= width {
        return Err(Error::invalid(format!("feature {feature} outside {width} features at {site}")));
    }
    if position >= ex.tokens.len() {
        return Err(Error::invalid(format!(
            "position {position} outside sequence of {}",
            ex.tokens.len()
        )));
    }
    Ok(())
}

fn metric_with_feature(
    sm: &SplicedModel<'_>,
    obj: &dyn Objective,
    ex: &Example,
    clean: &CleanRun,
    key: AbsKey,
    value: f64,
    want_grad: bool,
) -> Result<(f64, f64)> {
    let (site, pos, feat) = key;
    let width = sm.d_features(&site)?;
    let mut edits = ResolvedEdits::default();
    edits.set_feature(site, pos, feat, width, value)?;
    let mut trace = sm.trace(clean, &edits)?;
    let m = obj.build(&mut trace, ex)?;
    let value = trace.tape.value(m).item()?;
    if !want_grad {
        return Ok((value, 0.0));
    }
    let f = trace.site(&site)?.features.expect("spliced site");
    let g = trace.tape.gradient(m, &[f])?;
    Ok((value, g[0].data()[pos * width + feat]))
}

/// `m(clean) - m(feature zeroed)` for one feature at one absolute position.
pub fn exact_ie(
    sm: &SplicedModel<'_>,
    obj: &dyn Objective,
    ex: &Example,
    site: SubmoduleId,
    position: usize,
    feature: usize,
) -> Result<f64> {
    check_coord(sm, ex, &site, position, feature)?;
    let clean = sm.clean(&ex.tokens)?;
    let a = clean.features(&site)?.data()[position * sm.d_features(&site)? + feature];
    if a == 0.0 {
        return Ok(0.0);
    }
    let mut base = sm.trace(&clean, &ResolvedEdits::default())?;
    let m = obj.build(&mut base, ex)?;
    let m0 = base.tape.value(m).item()?;
    let (m1, _) = metric_with_feature(sm, obj, ex, &clean, (site, position, feature), 0.0, false)?;
    Ok(m0 - m1)
}

/// `a · ∂m/∂a` at the clean run.
pub fn atp(
    sm: &SplicedModel<'_>,
    obj: &dyn Objective,
    ex: &Example,
    site: SubmoduleId,
    position: usize,
    feature: usize,
) -> Result<f64> {
    check_coord(sm, ex, &site, position, feature)?;
    let clean = sm.clean(&ex.tokens)?;
    let width = sm.d_features(&site)?;
    let a = clean.features(&site)?.data()[position * width + feature];
    let mut base = sm.trace(&clean, &ResolvedEdits::default())?;
    let m = obj.build(&mut base, ex)?;
    let f = base.site(&site)?.features.expect("spliced site");
    let g = base.tape.gradient(m, &[f])?;
    Ok(a * g[0].data()[position * width + feature])
}

/// Weighted mean of `∂m/∂a` along the path from `0` to the clean value `a`,
/// with the feature overridden to `(k/K)·a` in a separate pass per point.
/// `clean_grad` is the gradient at `k = K`, which equals the clean run.
#[allow(clippy::too_many_arguments)]
pub(crate) fn path_gradient_at(
    sm: &SplicedModel<'_>,
    obj: &dyn Objective,
    ex: &Example,
    clean: &CleanRun,
    key: AbsKey,
    a: f64,
    clean_grad: f64,
    k: usize,
    rule: IgRule,
) -> Result<f64> {
    let mut total = 0.0;
    for step in 0..=k {
        let g = if step == k {
            clean_grad
        } else {
            let alpha = step as f64 / k as f64;
            metric_with_feature(sm, obj, ex, clean, key, alpha * a, true)?.1
        };
        total += rule.weight(step, k) * g;
    }
    Ok(total)
}

/// Integrated-gradients estimate of the effect of zeroing one feature.
#[allow(clippy::too_many_arguments)]
pub fn atp_ig(
    sm: &SplicedModel<'_>,
    obj: &dyn Objective,
    ex: &Example,
    site: SubmoduleId,
    position: usize,
    feature: usize,
    k: usize,
    rule: IgRule,
) -> Result<f64> {
    check_coord(sm, ex, &site, position, feature)?;
    if k == 0 {
        return Err(Error::invalid("integrated gradients need K >= 1"));
    }
    let clean = sm.clean(&ex.tokens)?;
    let width = sm.d_features(&site)?;
    let a = clean.features(&site)?.data()[position * width + feature];
    let mut base = sm.trace(&clean, &ResolvedEdits::default())?;
    let m = obj.build(&mut base, ex)?;
    let f = base.site(&site)?.features.expect("spliced site");
    let g = base.tape.gradient(m, &[f])?[0].data()[position * width + feature];
    let avg = path_gradient_at(sm, obj, ex, &clean, (site, position, feature), a, g, k, rule)?;
    Ok(a * avg)
}

/// Per-example scores of every active feature at the given sites and
/// positions, each with the gradient factor behind it (the clean gradient
/// for AtP, the path average for AtP-IG, zero for exact). Inactive features
/// score exactly zero and are omitted.
pub(crate) fn example_scores(
    sm: &SplicedModel<'_>,
    obj: &dyn Objective,
    ex: &Example,
    opts: &ScoreOptions,
    sites: &[SubmoduleId],
    positions: &[usize],
) -> Result<BTreeMap<AbsKey, (f64, f64)>> {
    if opts.method == Method::AtpIg && opts.k == 0 {
        return Err(Error::invalid("integrated gradients need K >= 1"));
    }
    let clean = sm.clean(&ex.tokens)?;
    let mut base = sm.trace(&clean, &ResolvedEdits::default())?;
    let m = obj.build(&mut base, ex)?;
    let m0 = base.tape.value(m).item()?;
    let grads = if opts.method == Method::Exact {
        Vec::new()
    } else {
        let vars: Vec<_> = sites
            .iter()
            .map(|s| Ok(base.site(s)?.features.expect("spliced site")))
            .collect::<Result<_>>()?;
        base.tape.gradient(m, &vars)?
    };
    let mut out = BTreeMap::new();
    for (si, site) in sites.iter().enumerate() {
        let width = sm.d_features(site)?;
        let f = clean.features(site)?;
        for &pos in positions {
            for feat in 0..width {
                let a = f.data()[pos * width + feat];
                if a == 0.0 {
                    continue;
                }
                let key = (*site, pos, feat);
                let (score, g) = match opts.method {
                    Method::Exact => (m0 - metric_with_feature(sm, obj, ex, &clean, key, 0.0, false)?.0, 0.0),
                    Method::Atp => {
                        let g = grads[si].data()[pos * width + feat];
                        (a * g, g)
                    }
                    Method::AtpIg => {
                        let g = grads[si].data()[pos * width + feat];
                        let avg = path_gradient_at(sm, obj, ex, &clean, key, a, g, opts.k, opts.rule)?;
                        (a * avg, avg)
                    }
                };
                if !score.is_finite() {
                    return Err(Error::Numerical(format!("non-finite score at {site}/{feat}@{pos}")));
                }
                out.insert(key, (score, g));
            }
        }
    }
    Ok(out)
}

pub(crate) fn selected_sites(sm: &SplicedModel<'_>, opts: &ScoreOptions) -> Result<Vec<SubmoduleId>> {
    match &opts.sites {
        None => Ok(sm.saes.sites().collect()),
        Some(list) => {
            for s in list {
                sm.d_features(s)?;
            }
            let mut l = list.clone();
            l.sort();
            l.dedup();
            Ok(l)
        }
    }
}

/// Checks that every example has the same length and annotations.
pub fn check_aligned(dataset: &[Example]) -> Result<()> {
    if let Some(first) = dataset.first() {
        for (i, ex) in dataset.iter().enumerate() {
            if ex.tokens.len() != first.tokens.len() || ex.annotations != first.annotations {
                return Err(Error::Misaligned(format!(
                    "example {i} differs in length or annotated positions from example 0"
                )));
            }
        }
    }
    Ok(())
}

/// Positions scored in one example, each with the selector it is reported under.
pub(crate) fn example_positions(ex: &Example, agg: &Aggregation) -> Result<Vec<(usize, PositionSelector)>> {
    let len = ex.tokens.len();
    Ok(match agg {
        Aggregation::PerPosition => (0..len).map(|p| (p, PositionSelector::Absolute(p))).collect(),
        Aggregation::SumPositions => (0..len).map(|p| (p, PositionSelector::All)).collect(),
        Aggregation::Selected(sel) => {
            let mut out = Vec::new();
            for s in sel {
                for p in s.resolve(&ex.annotations, len)? {
                    out.push((p, *s));
                }
            }
            out
        }
    })
}

/// Sum in sorted order, so the result does not depend on example order.
pub(crate) fn order_free_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Sorts by score descending, then coordinate ascending.
pub fn sort_scores(scores: &mut [AttributionScore]) {
    scores.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.coord.cmp(&b.coord)));
}

/// Distinct absolute positions among `positions`.
pub(crate) fn absolute_positions(positions: &[(usize, PositionSelector)]) -> Vec<usize> {
    let mut p: Vec<usize> = positions.iter().map(|(p, _)| *p).collect();
    p.sort();
    p.dedup();
    p
}

/// Folds raw per-position scores into the coordinates they are reported under.
pub(crate) fn label_scores(
    raw: &BTreeMap<AbsKey, (f64, f64)>,
    positions: &[(usize, PositionSelector)],
) -> BTreeMap<FeatureCoord, f64> {
    let mut out: BTreeMap<FeatureCoord, f64> = BTreeMap::new();
    for (&(site, pos, feat), &(score, _)) in raw {
        for (p, sel) in positions {
            if *p == pos {
                *out.entry(FeatureCoord::new(site, feat, *sel)).or_default() += score;
            }
        }
    }
    out
}

pub(crate) fn check_dataset(dataset: &[Example], opts: &ScoreOptions) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    if opts.aggregation == Aggregation::PerPosition {
        check_aligned(dataset)?;
    }
    Ok(())
}

/// Mean over examples of every coordinate at `sites`, zeros included, sorted.
pub(crate) fn aggregate_nodes(
    sm: &SplicedModel<'_>,
    dataset: &[Example],
    opts: &ScoreOptions,
    sites: &[SubmoduleId],
    per_example: &[BTreeMap<FeatureCoord, f64>],
) -> Result<Vec<AttributionScore>> {
    let mut totals: BTreeMap<FeatureCoord, Vec<f64>> = BTreeMap::new();
    let labels: Vec<PositionSelector> = match &opts.aggregation {
        Aggregation::PerPosition => (0..dataset[0].tokens.len()).map(PositionSelector::Absolute).collect(),
        Aggregation::SumPositions => vec![PositionSelector::All],
        Aggregation::Selected(sel) => {
            let mut s = sel.clone();
            s.sort();
            s.dedup();
            s
        }
    };
    for site in sites {
        for feat in 0..sm.d_features(site)? {
            for sel in &labels {
                totals.insert(FeatureCoord::new(*site, feat, *sel), Vec::new());
            }
        }
    }
    for ex_scores in per_example {
        for (coord, s) in ex_scores {
            totals.get_mut(coord).expect("coordinate enumerated").push(*s);
        }
    }
    let n = dataset.len();
    let mut out: Vec<AttributionScore> = totals
        .into_iter()
        .map(|(coord, values)| AttributionScore {
            coord,
            score: order_free_sum(values) / n as f64,
            method: opts.method,
            n_examples: n,
        })
        .collect();
    sort_scores(&mut out);
    Ok(out)
}

/// Mean per-example scores for every feature at every scored site and
/// position, zeros included.
pub fn node_scores(
    sm: &SplicedModel<'_>,
    obj: &dyn Objective,
    dataset: &[Example],
    opts: &ScoreOptions,
) -> Result<Vec<AttributionScore>> {
    check_dataset(dataset, opts)?;
    let sites = selected_sites(sm, opts)?;
    let per_example: Vec<BTreeMap<FeatureCoord, f64>> = dataset
        .par_iter()
        .map(|ex| {
            let positions = example_positions(ex, &opts.aggregation)?;
            let raw = example_scores(sm, obj, ex, opts, &sites, &absolute_positions(&positions))?;
            Ok(label_scores(&raw, &positions))
        })
        .collect::<Result<_>>()?;
    aggregate_nodes(sm, dataset, opts, &sites, &per_example)
}
