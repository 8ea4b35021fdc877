use gpmech::model::SubmoduleId;
use gpmech::numerics::{randn, rng};
use gpmech::probe::{attaching_action, decode, oracle_actions, oracle_states, replay, Action, ActionProbe, DepTree};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Fills `heads` for the span `lo..=hi` as one subtree hanging off `parent`.
fn subtree(r: &mut ChaCha8Rng, lo: usize, hi: usize, parent: usize, heads: &mut [usize]) {
    let root = r.random_range(lo..=hi);
    heads[root - 1] = parent;
    for (a, b) in [(lo, root.saturating_sub(1)), (root + 1, hi)] {
        let mut start = a;
        while start <= b && b >= 1 {
            let end = r.random_range(start..=b);
            subtree(r, start, end, root, heads);
            start = end + 1;
        }
    }
}

fn projective_tree(n: usize, seed: u64) -> DepTree {
    let mut r = rng(seed);
    let mut heads = vec![0; n];
    subtree(&mut r, 1, n, 0, &mut heads);
    DepTree::new((1..=n).map(|i| format!("w{i}")).collect(), heads).unwrap()
}

proptest! {
    #[test]
    fn oracle_round_trips_projective_trees(n in 1usize..14, seed in any::<u64>()) {
        let t = projective_tree(n, seed);
        t.check_projective().unwrap();
        let actions = oracle_actions(&t).unwrap();
        prop_assert_eq!(actions.len(), 2 * n - 1);
        prop_assert_eq!(actions.iter().filter(|a| **a == Action::Gen).count(), n);
        prop_assert_eq!(replay(n, &actions).unwrap(), t.heads.clone());
        for (state, a) in oracle_states(&t).unwrap() {
            prop_assert!(state.is_legal(a));
        }
    }

    #[test]
    fn greedy_decoding_stays_legal_and_yields_a_tree(n in 1usize..14, seed in any::<u64>()) {
        let mut r = rng(seed);
        let heads = decode(n, |state| {
            assert!(!state.is_terminal());
            Ok([r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])
        });
        let heads = heads.unwrap().unwrap();
        let t = DepTree::new((0..n).map(|i| i.to_string()).collect(), heads).unwrap();
        t.check_projective().unwrap();
    }

    #[test]
    fn probe_distributions_sum_to_one(seed in any::<u64>(), scale in 0.01f64..20.0) {
        let site = SubmoduleId::residual(1);
        let mut p = ActionProbe::zeros(site, 4, 6);
        for (i, name) in ["mlp.w", "mlp.b", "action.e", "action.b"].into_iter().enumerate() {
            let shape = p.param(name).shape().to_vec();
            *p.param_mut(name) = randn(&mut rng(seed.wrapping_add(i as u64)), &shape, scale);
        }
        let h = randn(&mut rng(seed ^ 9), &[8], 1.0);
        let d = p.distribution(site, &h.data()[..4], &h.data()[4..]).unwrap();
        prop_assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.distribution(SubmoduleId::residual(0), &h.data()[..4], &h.data()[4..]).is_err());
    }
}

#[test]
fn decoding_a_policy_that_always_prefers_illegal_actions_still_finishes() {
    // Arcs score highest even on an empty stack; only GEN is legal there.
    let heads = decode(5, |_| Ok([2.0, 1.0, -5.0])).unwrap().unwrap();
    assert_eq!(heads.iter().filter(|h| **h == 0).count(), 1);
}

#[test]
fn crossing_arcs_are_rejected_by_the_oracle() {
    let t = DepTree::new(["a", "b", "c", "d"].map(String::from).to_vec(), vec![0, 1, 1, 3]).unwrap();
    assert!(t.check_projective().is_ok());
    let crossing = DepTree::new(["a", "b", "c", "d"].map(String::from).to_vec(), vec![3, 0, 2, 2]).unwrap();
    assert!(crossing.crossing_arcs().is_some());
    assert!(oracle_actions(&crossing).is_err());
}

#[test]
fn malformed_trees_are_rejected() {
    let w = |n: usize| (0..n).map(|i| i.to_string()).collect::<Vec<_>>();
    assert!(DepTree::new(w(2), vec![0, 0]).is_err());
    assert!(DepTree::new(w(2), vec![2, 1]).is_err());
    assert!(DepTree::new(w(2), vec![0, 3]).is_err());
    assert!(DepTree::new(w(0), vec![]).is_err());
}

#[test]
fn the_object_attaches_by_right_arc() {
    assert_eq!(attaching_action(), Action::RightArc);
}
