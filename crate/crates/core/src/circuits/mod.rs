//! Thresholded feature circuits and the measurements made on them.

mod faithfulness;
mod stats;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionScore, EdgeScore, FeatureCoord, Method};
use crate::error::{Error, Result};
use crate::model::{Layer, SiteKind, SubmoduleId};

pub use faithfulness::{faithfulness, faithfulness_sweep, FaithfulnessOptions, FaithfulnessReport, SweepPoint};
pub use stats::{feature_activation_stats, GroupActivation, NodeGroup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitNode {
    #[serde(flatten)]
    pub coord: FeatureCoord,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitEdge {
    pub src: FeatureCoord,
    pub dst: FeatureCoord,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitMetadata {
    pub metric: String,
    pub dataset: String,
    pub method: Option<Method>,
    pub node_threshold: f64,
    pub edge_threshold: f64,
    pub free_sites: Vec<SubmoduleId>,
}

/// Nodes sorted by coordinate, edges by `(src, dst)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub metadata: CircuitMetadata,
    pub nodes: Vec<CircuitNode>,
    pub edges: Vec<CircuitEdge>,
}

/// Which early layers keep their features during faithfulness evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreeSiteRule {
    /// Embedding and block 0.
    #[default]
    FirstBlock,
    /// Embedding and the first `ceil(n_layers / 4)` blocks.
    Quarter,
    None,
}

impl FreeSiteRule {
    pub fn sites(self, n_layers: usize) -> Vec<SubmoduleId> {
        let blocks = match self {
            FreeSiteRule::None => return Vec::new(),
            FreeSiteRule::FirstBlock => 1.min(n_layers),
            FreeSiteRule::Quarter => n_layers.div_ceil(4),
        };
        let mut out = vec![SubmoduleId::EMBEDDING];
        for l in 0..blocks {
            for kind in [SiteKind::AttnOut, SiteKind::MlpOut, SiteKind::Residual] {
                out.push(SubmoduleId {
                    layer: Layer::Block(l),
                    kind,
                });
            }
        }
        out.sort();
        out
    }
}

fn single_method<'a>(methods: impl Iterator<Item = &'a Method>) -> Result<Option<Method>> {
    let mut seen: Option<Method> = None;
    for m in methods {
        match seen {
            None => seen = Some(*m),
            Some(s) if s != *m => return Err(Error::MixedMethods(format!("{s} and {m}"))),
            _ => {}
        }
    }
    Ok(seen)
}

/// Keeps nodes with `|score| >= node_threshold` and edges with
/// `|score| >= edge_threshold` whose endpoints both survived.
pub fn extract_circuit(
    nodes: &[AttributionScore],
    edges: &[EdgeScore],
    node_threshold: f64,
    edge_threshold: f64,
) -> Result<Circuit> {
    if !(node_threshold >= 0.0 && edge_threshold >= 0.0) {
        return Err(Error::invalid("thresholds must be nonnegative"));
    }
    let method = single_method(nodes.iter().map(|n| &n.method).chain(edges.iter().map(|e| &e.method)))?;
    let mut kept: Vec<CircuitNode> = nodes
        .iter()
        .filter(|n| n.score.abs() >= node_threshold)
        .map(|n| CircuitNode {
            coord: n.coord,
            score: n.score,
        })
        .collect();
    kept.sort_by_key(|n| n.coord);
    kept.dedup_by(|a, b| a.coord == b.coord);
    let ids: BTreeSet<FeatureCoord> = kept.iter().map(|n| n.coord).collect();
    let mut kept_edges: Vec<CircuitEdge> = edges
        .iter()
        .filter(|e| e.score.abs() >= edge_threshold && ids.contains(&e.src) && ids.contains(&e.dst))
        .map(|e| CircuitEdge {
            src: e.src,
            dst: e.dst,
            score: e.score,
        })
        .collect();
    kept_edges.sort_by_key(|e| (e.src, e.dst));
    Ok(Circuit {
        metadata: CircuitMetadata {
            metric: String::new(),
            dataset: String::new(),
            method,
            node_threshold,
            edge_threshold,
            free_sites: Vec::new(),
        },
        nodes: kept,
        edges: kept_edges,
    })
}

impl Circuit {
    pub fn with_free_sites(mut self, mut sites: Vec<SubmoduleId>) -> Self {
        sites.sort();
        sites.dedup();
        self.metadata.free_sites = sites;
        self
    }

    pub fn with_provenance(mut self, metric: impl Into<String>, dataset: impl Into<String>) -> Self {
        self.metadata.metric = metric.into();
        self.metadata.dataset = dataset.into();
        self
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn coords(&self) -> BTreeSet<FeatureCoord> {
        self.nodes.iter().map(|n| n.coord).collect()
    }

    /// `(site, feature)` pairs, position dropped.
    pub fn features(&self) -> BTreeSet<(SubmoduleId, usize)> {
        self.nodes.iter().map(|n| n.coord.key()).collect()
    }

    pub fn is_free(&self, site: &SubmoduleId) -> bool {
        self.metadata.free_sites.contains(site)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Graphviz rendering, red for negative scores and blue for positive.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph circuit {\n  rankdir=BT;\n");
        for n in &self.nodes {
            let color = if n.score < 0.0 { "red" } else { "blue" };
            let _ = writeln!(s, "  \"{}\" [color={color}, label=\"{}\\n{:.3}\"];", n.coord, n.coord, n.score);
        }
        for e in &self.edges {
            let _ = writeln!(s, "  \"{}\" -> \"{}\" [label=\"{:.3}\"];", e.src, e.dst, e.score);
        }
        s.push_str("}\n");
        s
    }
}

/// Overlap of two node sets; `both_empty` flags the degenerate `0/0` case,
/// which is reported as 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Iou {
    pub value: f64,
    pub both_empty: bool,
}

/// Intersection over union of the circuits' nodes, by `(site, feature)` or,
/// with `match_position`, by full coordinate.
pub fn circuit_iou(c1: &Circuit, c2: &Circuit, match_position: bool) -> Iou {
    let (inter, union) = if match_position {
        let (a, b) = (c1.coords(), c2.coords());
        (a.intersection(&b).count(), a.union(&b).count())
    } else {
        let (a, b) = (c1.features(), c2.features());
        (a.intersection(&b).count(), a.union(&b).count())
    };
    if union == 0 {
        return Iou {
            value: 0.0,
            both_empty: true,
        };
    }
    Iou {
        value: inter as f64 / union as f64,
        both_empty: false,
    }
}

/// `|reference ∩ candidate| / |reference|`.
pub fn feature_recall<T: Ord>(reference: &BTreeSet<T>, candidate: &BTreeSet<T>) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("recall needs a nonempty reference set"));
    }
    Ok(reference.intersection(candidate).count() as f64 / reference.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PositionSelector;
    use proptest::prelude::*;

    fn score(feature: usize, score: f64, method: Method) -> AttributionScore {
        AttributionScore {
            coord: FeatureCoord::new(SubmoduleId::residual(0), feature, PositionSelector::All),
            score,
            method,
            n_examples: 1,
        }
    }

    fn edge(src: usize, dst: usize, score: f64) -> EdgeScore {
        EdgeScore {
            src: FeatureCoord::new(SubmoduleId::residual(0), src, PositionSelector::All),
            dst: FeatureCoord::new(SubmoduleId::residual(1), dst, PositionSelector::All),
            score,
            method: Method::Atp,
            n_examples: 1,
        }
    }

    #[test]
    fn thresholds_keep_both_signs_and_drop_dangling_edges() {
        let nodes = vec![score(0, 0.5, Method::Atp), score(1, -0.3, Method::Atp), score(2, 0.05, Method::Atp)];
        let mut nodes = nodes;
        nodes.push(AttributionScore {
            coord: FeatureCoord::new(SubmoduleId::residual(1), 7, PositionSelector::All),
            ..score(0, 0.2, Method::Atp)
        });
        let edges = vec![edge(0, 7, 0.01), edge(2, 7, 0.5), edge(1, 7, 0.0001)];
        let c = extract_circuit(&nodes, &edges, 0.1, 0.001).unwrap();
        assert_eq!(c.nodes.len(), 3);
        assert_eq!(c.edges.len(), 1);
        assert_eq!(c.edges[0].src.feature, 0);
        assert!(extract_circuit(&nodes, &edges, 10.0, 0.0).unwrap().is_empty());
        let all = extract_circuit(&nodes, &edges, 0.0, 0.0).unwrap();
        assert_eq!((all.nodes.len(), all.edges.len()), (4, 3));
    }

    #[test]
    fn mixed_methods_are_rejected() {
        let nodes = vec![score(0, 0.5, Method::Atp), score(1, 0.5, Method::AtpIg)];
        assert!(matches!(extract_circuit(&nodes, &[], 0.0, 0.0), Err(Error::MixedMethods(_))));
    }

    #[test]
    fn iou_and_recall_edge_cases() {
        let nodes = vec![score(0, 1.0, Method::Atp), score(1, 1.0, Method::Atp)];
        let c = extract_circuit(&nodes, &[], 0.0, 0.0).unwrap();
        let empty = extract_circuit(&nodes, &[], 5.0, 0.0).unwrap();
        assert_eq!(circuit_iou(&c, &c, false).value, 1.0);
        assert_eq!(circuit_iou(&c, &empty, true).value, 0.0);
        let both = circuit_iou(&empty, &empty, false);
        assert!(both.both_empty && both.value == 0.0);
        let other = extract_circuit(&[score(5, 1.0, Method::Atp)], &[], 0.0, 0.0).unwrap();
        assert_eq!(circuit_iou(&c, &other, false).value, 0.0);
        assert_eq!(feature_recall(&c.features(), &c.features()).unwrap(), 1.0);
        assert_eq!(feature_recall(&c.features(), &other.features()).unwrap(), 0.0);
        assert!(feature_recall(&empty.features(), &c.features()).is_err());
    }

    #[test]
    fn free_site_rules() {
        assert_eq!(FreeSiteRule::FirstBlock.sites(3).len(), 4);
        assert_eq!(FreeSiteRule::Quarter.sites(8).len(), 7);
        assert!(FreeSiteRule::None.sites(3).is_empty());
    }

    #[test]
    fn circuit_file_round_trips() {
        let nodes = vec![score(0, 1.0, Method::Atp), score(3, -0.25, Method::Atp)];
        let c = extract_circuit(&nodes, &[], 0.0, 0.0)
            .unwrap()
            .with_free_sites(FreeSiteRule::FirstBlock.sites(2))
            .with_provenance("logit_diff", "npz");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        c.save(&p).unwrap();
        assert_eq!(Circuit::load(&p).unwrap(), c);
        assert!(c.to_dot().contains("->") || c.edges.is_empty());
    }

    proptest! {
        #[test]
        fn raising_the_threshold_never_adds_nodes(
            scores in prop::collection::vec(-2.0f64..2.0, 1..40),
            t1 in 0.0f64..2.0,
            t2 in 0.0f64..2.0,
        ) {
            let nodes: Vec<_> = scores.iter().enumerate().map(|(i, s)| score(i, *s, Method::AtpIg)).collect();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = extract_circuit(&nodes, &[], lo, 0.0).unwrap().coords();
            let b = extract_circuit(&nodes, &[], hi, 0.0).unwrap().coords();
            prop_assert!(b.is_subset(&a));
        }

        #[test]
        fn iou_is_symmetric(a in prop::collection::btree_set(0usize..20, 0..10), b in prop::collection::btree_set(0usize..20, 0..10)) {
            let mk = |s: &BTreeSet<usize>| {
                let n: Vec<_> = s.iter().map(|&i| score(i, 1.0, Method::Atp)).collect();
                extract_circuit(&n, &[], 0.0, 0.0).unwrap()
            };
            let (ca, cb) = (mk(&a), mk(&b));
            prop_assert_eq!(circuit_iou(&ca, &cb, false), circuit_iou(&cb, &ca, false));
        }
    }
}
