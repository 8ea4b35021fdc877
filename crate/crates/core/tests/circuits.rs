mod common;

use common::{example, random_saes, small_model};
use gpmech::attribution::{node_scores, Aggregation, FeatureCoord, Method, MetricMode, MetricSpec, ScoreOptions};
use gpmech::circuits::{
    extract_circuit, faithfulness, faithfulness_sweep, feature_activation_stats, FaithfulnessOptions, FreeSiteRule,
    NodeGroup,
};
use gpmech::model::{ActivationEdit, Example, PositionSelector, SubmoduleId};
use gpmech::sae::{SaeParams, SaeSet, SplicedModel};

fn data() -> Vec<Example> {
    vec![
        example(&[0, 3, 5, 2, 7, 4], 2, 4),
        example(&[0, 6, 1, 8, 9, 2], 2, 4),
        example(&[0, 10, 11, 3, 4, 5, 6], 2, 5),
    ]
}

fn sites() -> Vec<SubmoduleId> {
    vec![SubmoduleId::EMBEDDING, SubmoduleId::residual(0), SubmoduleId::residual(1)]
}

#[test]
fn faithfulness_endpoints() {
    let model = small_model(2, 11);
    let saes = random_saes(&model, &sites(), 100);
    let sm = SplicedModel::new(&model, &saes).unwrap();
    let metric = MetricSpec::new(MetricMode::LogitDiff, vec![1], vec![2]);
    let opts = ScoreOptions::new(Method::Atp).with_aggregation(Aggregation::SumPositions);
    let scores = node_scores(&sm, &metric, &data(), &opts).unwrap();
    let opts = FaithfulnessOptions::default();

    let full = extract_circuit(&scores, &[], 0.0, 0.0).unwrap();
    let f = faithfulness(&sm, &full, &data(), &metric, &opts).unwrap();
    assert!((f.faithfulness - 1.0).abs() < 1e-6, "{}", f.faithfulness);

    let empty = extract_circuit(&scores, &[], f64::INFINITY, 0.0).unwrap();
    let f = faithfulness(&sm, &empty, &data(), &metric, &opts).unwrap();
    assert!(f.faithfulness.abs() < 1e-6, "{}", f.faithfulness);

    let free = empty.clone().with_free_sites(FreeSiteRule::FirstBlock.sites(2));
    let f = faithfulness(&sm, &free, &data(), &metric, &opts).unwrap();
    assert!(f.faithfulness.abs() < 1e-6);

    let prob = metric.with_mode(MetricMode::ProbDiff);
    assert!(faithfulness(&sm, &full, &data(), &prob, &opts).is_err());

    let sweep = faithfulness_sweep(&sm, &scores, &[], &[f64::INFINITY, 0.0], &[], &data(), &metric, &opts).unwrap();
    assert_eq!(sweep[0].n_nodes, 0);
    assert!((sweep[1].faithfulness - 1.0).abs() < 1e-6);
}

#[test]
fn activation_stats_on_controlled_inputs() {
    let model = small_model(1, 12);
    let site = SubmoduleId::residual(0);
    let base = SaeParams::random(site, model.config.d_model, 16, 110);
    let mut b_e = base.b_e().clone();
    b_e.data_mut()[3] = -1e6;
    let mut saes = SaeSet::new();
    saes.insert(SaeParams::from_weights(site, &base.w_e(), &b_e, &base.w_d(), base.b_d()).unwrap()).unwrap();
    let sm = SplicedModel::new(&model, &saes).unwrap();
    let data = data();
    let silent = 3;
    let coord = FeatureCoord::new(site, silent, PositionSelector::FinalNoun);
    let group = NodeGroup {
        label: "silent".into(),
        members: vec![coord],
    };
    let stats = feature_activation_stats(&sm, &data, std::slice::from_ref(&group), &[]).unwrap();
    assert_eq!((stats[0].mean_activation, stats[0].fraction_active), (0.0, 0.0));
    assert_eq!(stats[0].n_pairs, data.len());

    let clamp = ActivationEdit::set_feature(site, PositionSelector::FinalNoun, silent, 1.75);
    let stats = feature_activation_stats(&sm, &data, &[group], &[clamp]).unwrap();
    assert!((stats[0].mean_activation - 1.75).abs() < 1e-15);
    assert_eq!(stats[0].fraction_active, 1.0);
}
