use serde::{Deserialize, Serialize};

use super::{Trace, Vocab};
use crate::error::{Error, Result};
use crate::numerics::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    ProbDiff,
    LogitDiff,
}

/// Difference between positive and negative next-token mass at one position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub mode: MetricMode,
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
    /// Evaluation position; the last token when `None`.
    #[serde(default)]
    pub position: Option<usize>,
}

impl MetricSpec {
    pub fn new(mode: MetricMode, positive: Vec<usize>, negative: Vec<usize>) -> Self {
        MetricSpec {
            mode,
            positive,
            negative,
            position: None,
        }
    }

    pub fn from_words(vocab: &Vocab, mode: MetricMode, positive: &[&str], negative: &[&str]) -> Result<Self> {
        let ids = |ws: &[&str]| ws.iter().map(|w| vocab.id(w)).collect::<Result<Vec<_>>>();
        Ok(MetricSpec::new(mode, ids(positive)?, ids(negative)?))
    }

    pub fn with_mode(&self, mode: MetricMode) -> Self {
        MetricSpec { mode, ..self.clone() }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.positive.is_empty() || self.negative.is_empty() {
            return Err(Error::invalid("metric token sets must be nonempty"));
        }
        if let Some(&id) = self.positive.iter().chain(&self.negative).find(|&&id| id >= vocab_size) {
            return Err(Error::OutOfVocabulary { id, vocab_size });
        }
        if let Some(id) = self.positive.iter().find(|id| self.negative.contains(id)) {
            return Err(Error::invalid(format!("token {id} is in both metric token sets")));
        }
        Ok(())
    }

    /// Records the metric on `trace`'s tape and returns its scalar node.
    pub fn build(&self, trace: &mut Trace) -> Result<Var> {
        let (len, vocab_size) = trace.logits().dims2()?;
        self.validate(vocab_size)?;
        let pos = self.position.unwrap_or(len - 1);
        if pos >= len {
            return Err(Error::invalid(format!("metric position {pos} outside length {len}")));
        }
        let tape = &mut trace.tape;
        let mut row = tape.gather(trace.logits, vec![pos])?;
        if self.mode == MetricMode::ProbDiff {
            row = tape.softmax_rows(row)?;
        }
        let a = tape.pick(row, self.positive.clone())?;
        let a = tape.sum_all(a)?;
        let b = tape.pick(row, self.negative.clone())?;
        let b = tape.sum_all(b)?;
        tape.sub(a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny;
    use crate::numerics::kernels::softmax;

    #[test]
    fn overlapping_sets_are_rejected() {
        let m = tiny();
        let spec = MetricSpec::new(MetricMode::ProbDiff, vec![3, 4], vec![5, 4]);
        assert!(m.next_token_metric(&[0, 1, 2], &spec).is_err());
    }

    #[test]
    fn matches_direct_softmax() {
        let m = tiny();
        let toks = [0, 5, 2, 8];
        let spec = MetricSpec::new(MetricMode::ProbDiff, vec![3], vec![7, 1]);
        let got = m.next_token_metric(&toks, &spec).unwrap();
        let logits = m.forward(&toks).unwrap().logits().clone();
        let p = softmax(logits.row(3));
        assert!((got - (p[3] - p[7] - p[1])).abs() < 1e-15);
        let spec = spec.with_mode(MetricMode::LogitDiff);
        let got = m.next_token_metric(&toks, &spec).unwrap();
        let l = logits.row(3);
        assert!((got - (l[3] - (l[7] + l[1]))).abs() < 1e-12);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let m = tiny();
        let spec = MetricSpec::new(MetricMode::ProbDiff, vec![], vec![1]);
        assert!(m.next_token_metric(&[0, 1], &spec).is_err());
    }
}
