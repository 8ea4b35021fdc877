//! Attribution of a scalar metric to SAE features and feature-to-feature edges.

mod edges;
mod io;
mod nodes;
mod objective;

pub use edges::{edge_contributions, edge_scores, node_and_edge_scores, EdgeScore};
pub use io::{edges_from_tsv, edges_to_tsv, read_edges, read_scores, scores_from_tsv, scores_to_tsv, EDGE_HEADER, SCORE_HEADER};
pub use nodes::{
    atp, atp_ig, check_aligned, exact_ie, node_scores, sort_scores, Aggregation, AttributionScore, FeatureCoord,
    IgRule, Method, ScoreOptions,
};
pub use objective::{FeatureMetric, FeatureTerm, Objective};
pub use crate::model::{MetricMode, MetricSpec};
