mod common;

use common::small_model;
use gpmech::model::{ActivationEdit, Example, PositionSelector, SubmoduleId};
use gpmech::numerics::{randn, rng, Tensor};
use gpmech::sae::{
    mean_max_cosine, planted_dictionary, train_sae, SaeParams, SaeSet, SaeTrainConfig, SplicedModel,
};
use gpmech::Error;
use proptest::prelude::*;

const SITE: SubmoduleId = SubmoduleId::EMBEDDING;

/// Random SAE with a nonzero decoder bias.
fn sae(d: usize, f: usize, seed: u64) -> SaeParams {
    let base = SaeParams::random(SITE, d, f, seed);
    let b_d = randn(&mut rng(seed + 1), &[d], 0.3);
    SaeParams::from_weights(SITE, &base.w_e(), base.b_e(), &base.w_d(), &b_d).unwrap()
}

fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    randn(&mut rng(seed), &[rows, cols], 1.0)
}

proptest! {
    #[test]
    fn features_are_non_negative(seed in any::<u64>(), n in 1usize..6) {
        let s = sae(6, 18, seed);
        let f = s.encode(&matrix(n, 6, seed ^ 7)).unwrap();
        prop_assert!(f.data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn decode_is_affine(seed in any::<u64>()) {
        let s = sae(5, 12, seed);
        let f1 = s.encode(&matrix(3, 5, seed ^ 1)).unwrap();
        let f2 = s.encode(&matrix(3, 5, seed ^ 2)).unwrap();
        let sum = Tensor::new(vec![3, 12], f1.data().iter().zip(f2.data()).map(|(a, b)| a + b).collect()).unwrap();
        let (d12, d1, d2, d0) = (
            s.decode(&sum).unwrap(),
            s.decode(&f1).unwrap(),
            s.decode(&f2).unwrap(),
            s.decode(&Tensor::zeros(&[3, 12])).unwrap(),
        );
        for i in 0..15 {
            let r = d12.data()[i] - d1.data()[i] - d2.data()[i] + d0.data()[i];
            prop_assert!(r.abs() < 1e-12);
        }
    }

    #[test]
    fn encode_matches_a_straight_line_reimplementation(seed in any::<u64>()) {
        let s = sae(4, 9, seed);
        let x = matrix(2, 4, seed ^ 3);
        let f = s.encode(&x).unwrap();
        let (w_e, b_e, b_d) = (s.w_e(), s.b_e(), s.b_d());
        for n in 0..2 {
            for j in 0..9 {
                let pre = b_e.data()[j] + (0..4).map(|i| w_e.row(j)[i] * (x.row(n)[i] - b_d.data()[i])).sum::<f64>();
                prop_assert!((f.row(n)[j] - pre.max(0.0)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn bias_centred_input_and_zero_features() {
    let s = sae(4, 8, 3);
    let w_e = s.w_e();
    let zero_be = SaeParams::from_weights(SITE, &w_e, &Tensor::zeros(&[8]), &s.w_d(), s.b_d()).unwrap();
    let x = Tensor::new(vec![1, 4], s.b_d().data().to_vec()).unwrap();
    assert!(zero_be.encode(&x).unwrap().data().iter().all(|v| *v == 0.0));
    let xhat = s.decode(&Tensor::zeros(&[1, 8])).unwrap();
    assert_eq!(xhat.data(), s.b_d().data());
}

#[test]
fn identity_slice_copies_positive_entries() {
    let mut w_e = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        w_e.row_mut(i)[i] = 1.0;
    }
    let s = SaeParams::from_weights(SITE, &w_e, &Tensor::zeros(&[4]), &w_e, &Tensor::zeros(&[4])).unwrap();
    let f = s.encode(&Tensor::new(vec![1, 4], vec![0.0, 2.5, -1.0, 0.0]).unwrap()).unwrap();
    assert_eq!(f.data(), &[0.0, 2.5, 0.0, 0.0]);
}

#[test]
fn wrong_widths_are_rejected() {
    let s = sae(4, 8, 1);
    assert!(s.encode(&Tensor::zeros(&[1, 5])).is_err());
    assert!(s.decode(&Tensor::zeros(&[1, 7])).is_err());
    let mut set = SaeSet::new();
    set.insert(s.clone()).unwrap();
    assert!(set.insert(s).is_err());
}

fn spliced_setup() -> (gpmech::model::TransformerModel, SaeSet) {
    let model = small_model(2, 5);
    let mut set = SaeSet::new();
    for (i, site) in [SubmoduleId::EMBEDDING, SubmoduleId::residual(0), SubmoduleId::mlp(1)].into_iter().enumerate() {
        let base = SaeParams::random(site, 8, 24, 40 + i as u64);
        let b_d = randn(&mut rng(50 + i as u64), &[8], 0.2);
        set.insert(SaeParams::from_weights(site, &base.w_e(), base.b_e(), &base.w_d(), &b_d).unwrap()).unwrap();
    }
    (model, set)
}

const TOKENS: [usize; 6] = [0, 4, 7, 1, 9, 3];

#[test]
fn unedited_splice_reproduces_plain_logits() {
    let (model, saes) = spliced_setup();
    let sm = SplicedModel::new(&model, &saes).unwrap();
    let plain = model.forward(&TOKENS).unwrap();
    let spliced = sm.forward(&TOKENS).unwrap();
    assert!(plain.logits().max_abs_diff(spliced.logits()) <= 1e-12);
}

#[test]
fn zeroing_features_leaves_bias_plus_residual() {
    let (model, saes) = spliced_setup();
    let sm = SplicedModel::new(&model, &saes).unwrap();
    let site = SubmoduleId::residual(0);
    let sae = saes.get(&site).unwrap();
    let clean = sm.clean(&TOKENS).unwrap();
    let cs = clean.site(&site).unwrap();
    let ex = Example::new(TOKENS.to_vec());
    let edits: Vec<ActivationEdit> = (0..24)
        .map(|j| ActivationEdit::set_feature(site, PositionSelector::Absolute(2), j, 0.0))
        .collect();
    let t = sm.forward_with_edits(&ex, &edits).unwrap();
    let out = t.activation(&site).unwrap();
    for i in 0..8 {
        let eps = cs.x.row(2)[i] - cs.xhat.row(2)[i];
        assert!((out.row(2)[i] - (sae.b_d().data()[i] + eps)).abs() < 1e-12);
    }
    // Other positions are untouched.
    assert!((out.row(1)[0] - cs.x.row(1)[0]).abs() < 1e-12);
}

#[test]
fn zeroing_one_active_feature_subtracts_its_decoder_direction() {
    let (model, saes) = spliced_setup();
    let sm = SplicedModel::new(&model, &saes).unwrap();
    let site = SubmoduleId::residual(0);
    let clean = sm.clean(&TOKENS).unwrap();
    let f = clean.features(&site).unwrap();
    let (feat, a) = f.row(3).iter().enumerate().find(|(_, v)| **v > 0.0).map(|(j, v)| (j, *v)).unwrap();
    let ex = Example::new(TOKENS.to_vec());
    let t = sm
        .forward_with_edits(&ex, &[ActivationEdit::set_feature(site, PositionSelector::Absolute(3), feat, 0.0)])
        .unwrap();
    let dir = saes.get(&site).unwrap().decoder_direction(feat);
    let x = &clean.site(&site).unwrap().x;
    for i in 0..8 {
        let delta = t.activation(&site).unwrap().row(3)[i] - x.row(3)[i];
        assert!((delta + a * dir[i]).abs() < 1e-12);
    }
}

#[test]
fn unregularised_square_autoencoder_reconstructs() {
    let data = matrix(2000, 6, 9);
    let cfg = SaeTrainConfig {
        d_features: 6,
        sparsity_weight: 0.0,
        steps: 3000,
        batch_size: 128,
        lr: 3e-3,
        resample_dead: true,
        ..SaeTrainConfig::default()
    };
    let (_, m) = train_sae(&data, SITE, &cfg).unwrap();
    assert!(m.variance_explained > 0.99, "{m:?}");
}

#[test]
fn stronger_sparsity_never_raises_l0() {
    let p = planted_dictionary(16, 48, 3, 3000, 1).unwrap();
    let mut last = f64::INFINITY;
    for lambda in [0.01, 0.05, 0.2] {
        let cfg = SaeTrainConfig {
            d_features: 48,
            sparsity_weight: lambda,
            steps: 600,
            ..SaeTrainConfig::default()
        };
        let (_, m) = train_sae(&p.data, SITE, &cfg).unwrap();
        assert!(m.mean_l0 <= last, "λ {lambda}: L0 {} after {last}", m.mean_l0);
        last = m.mean_l0;
    }
}

#[test]
fn planted_dictionary_is_recovered_at_small_scale() {
    let p = planted_dictionary(16, 32, 2, 8000, 3).unwrap();
    let cfg = SaeTrainConfig {
        d_features: 32,
        sparsity_weight: 0.5,
        steps: 5000,
        ..SaeTrainConfig::default()
    };
    let (sae, _) = train_sae(&p.data, SITE, &cfg).unwrap();
    let m = mean_max_cosine(&sae, &p.dictionary).unwrap();
    assert!(m > 0.9, "{m}");
    assert!(matches!(planted_dictionary(4, 3, 4, 10, 0), Err(Error::InvalidArgument(_))));
}
