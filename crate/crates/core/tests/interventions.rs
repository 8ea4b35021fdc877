mod common;

use common::{example, random_saes, small_model};
use gpmech::attribution::{FeatureCoord, MetricMode, MetricSpec};
use gpmech::interventions::{run_intervention, FeatureGroup, InterventionPlan};
use gpmech::model::{ActivationEdit, Example, PositionSelector, SubmoduleId};
use gpmech::sae::SplicedModel;

fn stimuli() -> Vec<Example> {
    vec![
        example(&[0, 3, 5, 2, 7, 4], 2, 4),
        example(&[0, 6, 1, 8, 9, 2], 2, 4),
        example(&[0, 10, 11, 3, 4, 5, 6], 3, 5),
    ]
}

fn metric() -> MetricSpec {
    MetricSpec::new(MetricMode::ProbDiff, vec![1], vec![2])
}

#[test]
fn empty_plan_matches_baseline() {
    let model = small_model(2, 21);
    let saes = random_saes(&model, &[SubmoduleId::residual(0)], 200);
    let sm = SplicedModel::new(&model, &saes).unwrap();
    let r = run_intervention(&sm, &InterventionPlan::default(), &stimuli(), &metric(), &[]).unwrap();
    assert_eq!(r.baseline.mean_m, r.intervention.mean_m);
    assert_eq!(r.effect, 0.0);
}

#[test]
fn zeroing_inactive_features_changes_nothing() {
    let model = small_model(2, 22);
    let site = SubmoduleId::residual(1);
    let saes = random_saes(&model, &[site], 210);
    let sm = SplicedModel::new(&model, &saes).unwrap();
    let width = sm.d_features(&site).unwrap();
    let data = stimuli();
    let inactive: Vec<usize> = (0..width)
        .filter(|&f| {
            data.iter().all(|ex| {
                let c = sm.clean(&ex.tokens).unwrap();
                c.features(&site).unwrap().data()[ex.annotations.final_noun.unwrap() * width + f] == 0.0
            })
        })
        .collect();
    assert!(!inactive.is_empty());
    let plan = InterventionPlan {
        groups: vec![FeatureGroup {
            label: "quiet".into(),
            members: inactive
                .iter()
                .map(|&f| FeatureCoord::new(site, f, PositionSelector::FinalNoun))
                .collect(),
            clamp_value: 0.0,
        }],
        control_seed: 0,
    };
    let r = run_intervention(&sm, &plan, &data, &metric(), &[]).unwrap();
    assert!((r.baseline.mean_m - r.intervention.mean_m).abs() < 1e-12);
}

#[test]
fn clamping_to_the_clean_value_is_bit_identical() {
    let model = small_model(2, 23);
    let site = SubmoduleId::residual(0);
    let saes = random_saes(&model, &[site], 220);
    let sm = SplicedModel::new(&model, &saes).unwrap();
    let ex = &stimuli()[0];
    let width = sm.d_features(&site).unwrap();
    let clean = sm.clean(&ex.tokens).unwrap();
    let f = clean.features(&site).unwrap();
    let edits: Vec<ActivationEdit> = (0..ex.tokens.len())
        .flat_map(|p| (0..width).map(move |i| (p, i)))
        .map(|(p, i)| ActivationEdit::set_feature(site, PositionSelector::Absolute(p), i, f.data()[p * width + i]))
        .collect();
    let base = sm.forward(&ex.tokens).unwrap();
    let edited = sm.forward_with_edits(ex, &edits).unwrap();
    assert_eq!(base.logits().data(), edited.logits().data());
}

#[test]
fn clamps_only_affect_later_positions() {
    let model = small_model(2, 24);
    let site = SubmoduleId::residual(0);
    let saes = random_saes(&model, &[site], 230);
    let sm = SplicedModel::new(&model, &saes).unwrap();
    let ex = &stimuli()[0];
    let p = 3;
    let edits = [ActivationEdit::set_feature(site, PositionSelector::Absolute(p), 5, 4.0)];
    let base = sm.forward(&ex.tokens).unwrap();
    let edited = sm.forward_with_edits(ex, &edits).unwrap();
    let v = model.config.vocab_size;
    assert_eq!(&base.logits().data()[..p * v], &edited.logits().data()[..p * v]);
    assert_ne!(&base.logits().data()[p * v..], &edited.logits().data()[p * v..]);
}

#[test]
fn reports_are_deterministic_and_skip_unresolvable_stimuli() {
    let model = small_model(2, 25);
    let site = SubmoduleId::residual(1);
    let saes = random_saes(&model, &[site], 240);
    let sm = SplicedModel::new(&model, &saes).unwrap();
    let plan = InterventionPlan {
        groups: vec![FeatureGroup {
            label: "g".into(),
            members: (0..4).map(|f| FeatureCoord::new(site, f, PositionSelector::FinalNoun)).collect(),
            clamp_value: 1.5,
        }],
        control_seed: 0,
    };
    let mut data = stimuli();
    data.push(Example::new(vec![0, 1, 2]));
    let a = run_intervention(&sm, &plan, &data, &metric(), &[1, 2, 3]).unwrap();
    let b = run_intervention(&sm, &plan, &data, &metric(), &[1, 2, 3]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.skipped, vec![3]);
    assert_eq!(a.baseline.n, 3);
    assert_eq!(a.controls.len(), 3);
}
