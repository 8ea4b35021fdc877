use std::fmt;

use serde::{Deserialize, Serialize};

use super::DepTree;
use crate::error::{Error, Result};

/// Arc-standard actions with `s1` the top of the stack and `s2` below it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    /// Arc `s1 -> s2`, pops `s2`.
    LeftArc,
    /// Arc `s2 -> s1`, pops `s1`.
    RightArc,
    /// Generates the next token onto the stack.
    Gen,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::LeftArc, Action::RightArc, Action::Gen];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Action {
        Action::ALL[i]
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::LeftArc => "LEFT_ARC",
            Action::RightArc => "RIGHT_ARC",
            Action::Gen => "GEN",
        })
    }
}

/// Stack of subtree roots, the count of generated tokens, and the heads
/// assigned so far. Token indices are 1-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParserState {
    pub stack: Vec<usize>,
    pub generated: usize,
    pub n: usize,
    pub heads: Vec<Option<usize>>,
}

impl ParserState {
    pub fn new(n: usize) -> Self {
        ParserState {
            stack: Vec::new(),
            generated: 0,
            n,
            heads: vec![None; n],
        }
    }

    /// `(s1, s2)` when the stack holds at least two subtrees.
    pub fn top_two(&self) -> Option<(usize, usize)> {
        let k = self.stack.len();
        (k >= 2).then(|| (self.stack[k - 1], self.stack[k - 2]))
    }

    pub fn is_legal(&self, a: Action) -> bool {
        match a {
            Action::Gen => self.generated < self.n,
            Action::LeftArc | Action::RightArc => self.stack.len() >= 2,
        }
    }

    pub fn legal(&self) -> [bool; 3] {
        Action::ALL.map(|a| self.is_legal(a))
    }

    pub fn is_terminal(&self) -> bool {
        self.generated == self.n && self.stack.len() <= 1
    }

    pub fn apply(&mut self, a: Action) -> Result<()> {
        if !self.is_legal(a) {
            return Err(Error::invalid(format!("{a} is illegal with stack {:?}", self.stack)));
        }
        match a {
            Action::Gen => {
                self.generated += 1;
                self.stack.push(self.generated);
            }
            Action::LeftArc => {
                let s1 = self.stack.pop().expect("legal");
                let s2 = self.stack.pop().expect("legal");
                self.heads[s2 - 1] = Some(s1);
                self.stack.push(s1);
            }
            Action::RightArc => {
                let s1 = self.stack.pop().expect("legal");
                let s2 = *self.stack.last().expect("legal");
                self.heads[s1 - 1] = Some(s2);
            }
        }
        Ok(())
    }

    /// Heads with the remaining stack bottom as root.
    pub fn finish(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.unwrap_or(0)).collect()
    }
}

/// The gold action sequence: reduce as soon as the gold tree allows,
/// right arcs only once the dependent has collected all its own dependents.
pub fn oracle_actions(tree: &DepTree) -> Result<Vec<Action>> {
    tree.validate()?;
    tree.check_projective()?;
    let n = tree.len();
    let mut pending = vec![0usize; n + 1];
    for &h in &tree.heads {
        pending[h] += 1;
    }
    let mut state = ParserState::new(n);
    let mut out = Vec::with_capacity(2 * n);
    while !state.is_terminal() {
        let a = match state.top_two() {
            Some((s1, s2)) if tree.heads[s2 - 1] == s1 => Action::LeftArc,
            Some((s1, s2)) if tree.heads[s1 - 1] == s2 && pending[s1] == 0 => Action::RightArc,
            _ => Action::Gen,
        };
        if !state.is_legal(a) {
            return Err(Error::invalid("oracle reached a dead end"));
        }
        if let Some((s1, s2)) = state.top_two() {
            match a {
                Action::LeftArc => pending[s1] -= 1,
                Action::RightArc => pending[s2] -= 1,
                Action::Gen => {}
            }
        }
        state.apply(a)?;
        out.push(a);
    }
    Ok(out)
}

/// Replays `actions` over `n` tokens and returns the heads.
pub fn replay(n: usize, actions: &[Action]) -> Result<Vec<usize>> {
    let mut state = ParserState::new(n);
    for &a in actions {
        state.apply(a)?;
    }
    if !state.is_terminal() {
        return Err(Error::invalid("actions leave the parse unfinished"));
    }
    Ok(state.finish())
}

/// Every state the oracle passes through, with the action taken there.
pub fn oracle_states(tree: &DepTree) -> Result<Vec<(ParserState, Action)>> {
    let actions = oracle_actions(tree)?;
    let mut state = ParserState::new(tree.len());
    let mut out = Vec::with_capacity(actions.len());
    for a in actions {
        out.push((state.clone(), a));
        state.apply(a)?;
    }
    Ok(out)
}

/// Greedy decoding: at each state the highest-scoring legal action.
/// Returns `None` if the policy stalls on a state with no legal action.
pub fn decode(n: usize, mut policy: impl FnMut(&ParserState) -> Result<[f64; 3]>) -> Result<Option<Vec<usize>>> {
    let mut state = ParserState::new(n);
    while !state.is_terminal() {
        let legal = state.legal();
        if !legal.iter().any(|&l| l) {
            return Ok(None);
        }
        let a = if legal.iter().filter(|&&l| l).count() == 1 {
            Action::from_index(legal.iter().position(|&l| l).expect("one legal"))
        } else {
            let scores = policy(&state)?;
            let best = (0..3)
                .filter(|&i| legal[i])
                .max_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(j.cmp(&i)))
                .expect("legal action");
            Action::from_index(best)
        };
        state.apply(a)?;
    }
    Ok(Some(state.finish()))
}

/// The action that makes the noun on top of the stack a dependent of the
/// verb just below it, read off the oracle for `the dog found the cat .`.
pub fn attaching_action() -> Action {
    let words = ["the", "dog", "found", "the", "cat", "."];
    let tree = DepTree {
        tokens: words.iter().map(|s| s.to_string()).collect(),
        heads: vec![2, 3, 0, 5, 3, 3],
    };
    let states = oracle_states(&tree).expect("projective");
    states
        .iter()
        .find(|(s, _)| s.top_two() == Some((5, 3)))
        .map(|(_, a)| *a)
        .expect("the oracle reaches the verb-noun state")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stimuli::{generate_corpus, GrammarSpec};

    fn tree(heads: &[usize]) -> DepTree {
        DepTree {
            tokens: (0..heads.len()).map(|i| format!("w{i}")).collect(),
            heads: heads.to_vec(),
        }
    }

    #[test]
    fn single_token_is_one_gen() {
        assert_eq!(oracle_actions(&tree(&[0])).unwrap(), vec![Action::Gen]);
    }

    #[test]
    fn two_tokens_second_heads_first() {
        // Reference machine: GEN, GEN, then s1 = 2 heads s2 = 1.
        let mut s = ParserState::new(2);
        s.apply(Action::Gen).unwrap();
        s.apply(Action::Gen).unwrap();
        s.apply(Action::LeftArc).unwrap();
        assert_eq!(s.finish(), vec![2, 0]);
        assert_eq!(
            oracle_actions(&tree(&[2, 0])).unwrap(),
            vec![Action::Gen, Action::Gen, Action::LeftArc]
        );
    }

    #[test]
    fn verb_noun_attachment_is_a_right_arc() {
        assert_eq!(attaching_action(), Action::RightArc);
    }

    #[test]
    fn oracle_round_trips_the_treebank() {
        let corpus = generate_corpus(&GrammarSpec::toy(9), 3000).unwrap();
        for t in &corpus {
            let actions = oracle_actions(t).unwrap();
            assert_eq!(actions.len(), 2 * t.len() - 1);
            assert_eq!(replay(t.len(), &actions).unwrap(), t.heads);
        }
    }

    #[test]
    fn non_projective_trees_are_rejected_with_the_crossing_pair() {
        let err = oracle_actions(&tree(&[3, 4, 0, 3])).unwrap_err();
        assert!(matches!(err, Error::NonProjective(..)));
    }

    #[test]
    fn decoder_with_the_oracle_policy_is_exact() {
        let t = tree(&[2, 3, 0, 5, 3, 3]);
        let states = oracle_states(&t).unwrap();
        let heads = decode(t.len(), |s| {
            let a = states.iter().find(|(g, _)| g == s).map(|(_, a)| *a).unwrap();
            let mut p = [0.0; 3];
            p[a.index()] = 1.0;
            Ok(p)
        })
        .unwrap()
        .unwrap();
        assert_eq!(heads, t.heads);
    }

    #[test]
    fn illegal_actions_are_refused() {
        let mut s = ParserState::new(1);
        assert!(s.apply(Action::LeftArc).is_err());
        s.apply(Action::Gen).unwrap();
        assert!(s.apply(Action::Gen).is_err());
    }
}
