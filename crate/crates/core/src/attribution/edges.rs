use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::nodes::{
    absolute_positions, aggregate_nodes, check_dataset, example_positions, example_scores, label_scores, order_free_sum,
    path_gradient_at, selected_sites, AttributionScore, FeatureCoord, Method, ScoreOptions,
};
use super::Objective;
use crate::error::{Error, Result};
use crate::model::{Example, PositionSelector, ResolvedEdits, SubmoduleId, Trace};
use crate::numerics::{Tape, Var};
use crate::sae::SplicedModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeScore {
    pub src: FeatureCoord,
    pub dst: FeatureCoord,
    pub score: f64,
    pub method: Method,
    pub n_examples: usize,
}

/// For each downstream element `d` with nonzero `g[d]`, the products
/// `g[d] · ∂f_d[d]/∂f_u[u] · f_u[u]` over upstream elements `u`, one backward
/// pass per `d`. Returns `(d, u, contribution)` triples with nonzero value.
pub fn edge_contributions(tape: &mut Tape, fu: Var, fd: Var, g: &[f64]) -> Result<Vec<(usize, usize, f64)>> {
    let a_u = tape.value(fu).data().to_vec();
    let n_d = tape.value(fd).numel();
    if g.len() != n_d {
        return Err(Error::invalid("downstream gradient does not match downstream node"));
    }
    let mut out = Vec::new();
    for (d, &gd) in g.iter().enumerate() {
        if gd == 0.0 || tape.value(fd).data()[d] == 0.0 {
            continue;
        }
        let e = tape.element(fd, d)?;
        let jac = tape.gradient(e, &[fu])?;
        for (u, (&j, &a)) in jac[0].data().iter().zip(&a_u).enumerate() {
            let c = gd * j * a;
            if c != 0.0 {
                out.push((d, u, c));
            }
        }
    }
    Ok(out)
}

type EdgeMap = BTreeMap<(FeatureCoord, FeatureCoord), f64>;

fn check_pair(upstream: SubmoduleId, downstream: SubmoduleId, method: Method) -> Result<()> {
    if upstream >= downstream {
        return Err(Error::invalid(format!(
            "upstream site {upstream} is not earlier than downstream site {downstream}"
        )));
    }
    if method == Method::Exact {
        return Err(Error::invalid("edge scores are only defined for atp and atp_ig"));
    }
    Ok(())
}

/// Edges of one example between one site pair on a clean trace, with
/// `grad(d)` the gradient factor of downstream element `d`, or `None` to
/// skip it.
fn example_edges(
    sm: &SplicedModel<'_>,
    trace: &mut Trace,
    upstream: SubmoduleId,
    downstream: SubmoduleId,
    positions: &[(usize, PositionSelector)],
    mut grad: impl FnMut(usize, usize, f64) -> Result<Option<f64>>,
    out: &mut EdgeMap,
) -> Result<()> {
    let wu = sm.d_features(&upstream)?;
    let wd = sm.d_features(&downstream)?;
    let selected = |p: usize| positions.iter().filter(move |(q, _)| *q == p).map(|(_, s)| *s);
    let fu = trace.site(&upstream)?.features.expect("spliced site");
    let fd = trace.site(&downstream)?.features.expect("spliced site");
    let a_d = trace.tape.value(fd).data().to_vec();
    let mut g = vec![0.0; a_d.len()];
    for (d, gd) in g.iter_mut().enumerate() {
        if a_d[d] != 0.0 && selected(d / wd).next().is_some() {
            *gd = grad(d / wd, d % wd, a_d[d])?.unwrap_or(0.0);
        }
    }
    for (d, u, c) in edge_contributions(&mut trace.tape, fu, fd, &g)? {
        for su in selected(u / wu) {
            for sd in selected(d / wd) {
                let src = FeatureCoord::new(upstream, u % wu, su);
                let dst = FeatureCoord::new(downstream, d % wd, sd);
                *out.entry((src, dst)).or_default() += c;
            }
        }
    }
    Ok(())
}

fn aggregate_edges(per_example: Vec<EdgeMap>, method: Method, n: usize) -> Vec<EdgeScore> {
    let mut totals: BTreeMap<(FeatureCoord, FeatureCoord), Vec<f64>> = BTreeMap::new();
    for ex in per_example {
        for (k, v) in ex {
            totals.entry(k).or_default().push(v);
        }
    }
    let mut out: Vec<EdgeScore> = totals
        .into_iter()
        .map(|((src, dst), values)| EdgeScore {
            src,
            dst,
            score: order_free_sum(values) / n as f64,
            method,
            n_examples: n,
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.src.cmp(&b.src))
            .then(a.dst.cmp(&b.dst))
    });
    out
}

/// Linearised effect of each upstream feature on the metric through each
/// downstream feature, averaged over the dataset. Only nonzero edges are
/// returned, sorted by score descending.
///
/// With `Method::AtpIg` the downstream gradient is replaced by its average
/// along the integration path of that downstream feature.
pub fn edge_scores(
    sm: &SplicedModel<'_>,
    obj: &dyn Objective,
    dataset: &[Example],
    upstream: SubmoduleId,
    downstream: SubmoduleId,
    opts: &ScoreOptions,
) -> Result<Vec<EdgeScore>> {
    check_pair(upstream, downstream, opts.method)?;
    check_dataset(dataset, opts)?;
    sm.d_features(&upstream)?;
    sm.d_features(&downstream)?;
    let per_example: Vec<EdgeMap> = dataset
        .par_iter()
        .map(|ex| {
            let positions = example_positions(ex, &opts.aggregation)?;
            let clean = sm.clean(&ex.tokens)?;
            let mut trace = sm.trace(&clean, &ResolvedEdits::default())?;
            let m = obj.build(&mut trace, ex)?;
            let fd = trace.site(&downstream)?.features.expect("spliced site");
            let g0 = trace.tape.gradient(m, &[fd])?.remove(0).into_data();
            let wd = sm.d_features(&downstream)?;
            let mut out = EdgeMap::new();
            example_edges(
                sm,
                &mut trace,
                upstream,
                downstream,
                &positions,
                |pos, feat, a| {
                    let gd = g0[pos * wd + feat];
                    Ok(Some(match opts.method {
                        Method::AtpIg => {
                            path_gradient_at(sm, obj, ex, &clean, (downstream, pos, feat), a, gd, opts.k, opts.rule)?
                        }
                        _ => gd,
                    }))
                },
                &mut out,
            )?;
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(aggregate_edges(per_example, opts.method, dataset.len()))
}

/// Node scores and edge scores between each `(upstream, downstream)` pair
/// from one pass per example. Equal to `node_scores` plus `edge_scores` for
/// every pair, but the gradient factor of each downstream feature is
/// computed once and shared by its node score and its edges.
pub fn node_and_edge_scores(
    sm: &SplicedModel<'_>,
    obj: &dyn Objective,
    dataset: &[Example],
    opts: &ScoreOptions,
    pairs: &[(SubmoduleId, SubmoduleId)],
) -> Result<(Vec<AttributionScore>, Vec<EdgeScore>)> {
    check_dataset(dataset, opts)?;
    let mut sites = selected_sites(sm, opts)?;
    for &(u, d) in pairs {
        check_pair(u, d, opts.method)?;
        for s in [u, d] {
            sm.d_features(&s)?;
            if !sites.contains(&s) {
                sites.push(s);
            }
        }
    }
    sites.sort();
    let scored = selected_sites(sm, opts)?;
    let per_example: Vec<(BTreeMap<FeatureCoord, f64>, EdgeMap)> = dataset
        .par_iter()
        .map(|ex| {
            let positions = example_positions(ex, &opts.aggregation)?;
            let raw = example_scores(sm, obj, ex, opts, &sites, &absolute_positions(&positions))?;
            let mut nodes = label_scores(&raw, &positions);
            nodes.retain(|c, _| scored.contains(&c.site));
            let mut edges = EdgeMap::new();
            if !pairs.is_empty() {
                let clean = sm.clean(&ex.tokens)?;
                let mut trace = sm.trace(&clean, &ResolvedEdits::default())?;
                for &(u, d) in pairs {
                    example_edges(
                        sm,
                        &mut trace,
                        u,
                        d,
                        &positions,
                        |pos, feat, _| Ok(raw.get(&(d, pos, feat)).map(|&(_, g)| g)),
                        &mut edges,
                    )?;
                }
            }
            Ok((nodes, edges))
        })
        .collect::<Result<_>>()?;
    let (node_maps, edge_maps): (Vec<_>, Vec<_>) = per_example.into_iter().unzip();
    let nodes = aggregate_nodes(sm, dataset, opts, &scored, &node_maps)?;
    Ok((nodes, aggregate_edges(edge_maps, opts.method, dataset.len())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn linear_chain_edge_is_product_of_factors() {
        // d = 2u, m = 3 Σ d  =>  edge(u -> d) = 6 a_u
        let mut tape = Tape::new();
        let u = tape.input("u", Tensor::vector(vec![0.5, 0.0, 2.0]));
        let d = tape.scale(u, 2.0).unwrap();
        let g = vec![3.0; 3];
        let edges = edge_contributions(&mut tape, u, d, &g).unwrap();
        assert_eq!(edges, vec![(0, 0, 3.0), (2, 2, 12.0)]);
    }
}
