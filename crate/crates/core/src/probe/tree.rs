use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dependency tree over `tokens`; `heads[i]` is the 1-based index of
/// token `i`'s head, or 0 for the root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepTree {
    pub tokens: Vec<String>,
    pub heads: Vec<usize>,
}

impl DepTree {
    pub fn new(tokens: Vec<String>, heads: Vec<usize>) -> Result<Self> {
        let t = DepTree { tokens, heads };
        t.validate()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Arcs as `(head, dependent)` pairs over 1-based indices.
    pub fn arcs(&self) -> Vec<(usize, usize)> {
        self.heads.iter().enumerate().map(|(i, &h)| (h, i + 1)).collect()
    }

    /// Checks a single root and acyclicity.
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if self.heads.len() != n {
            return Err(Error::invalid(format!("{} heads for {n} tokens", self.heads.len())));
        }
        if n == 0 {
            return Err(Error::invalid("empty tree"));
        }
        if let Some(&h) = self.heads.iter().find(|&&h| h > n) {
            return Err(Error::invalid(format!("head {h} outside 1..={n}")));
        }
        let roots = self.heads.iter().filter(|&&h| h == 0).count();
        if roots != 1 {
            return Err(Error::invalid(format!("tree has {roots} roots")));
        }
        for start in 1..=n {
            let mut node = start;
            for _ in 0..=n {
                node = self.heads[node - 1];
                if node == 0 {
                    break;
                }
            }
            if node != 0 {
                return Err(Error::invalid(format!("cycle through token {start}")));
            }
        }
        Ok(())
    }

    /// The first pair of crossing arcs, as `((h1, d1), (h2, d2))`.
    pub fn crossing_arcs(&self) -> Option<((usize, usize), (usize, usize))> {
        let arcs: Vec<(usize, usize)> = self.arcs().into_iter().filter(|(h, _)| *h != 0).collect();
        for (i, &a) in arcs.iter().enumerate() {
            let (l1, r1) = (a.0.min(a.1), a.0.max(a.1));
            for &b in &arcs[i + 1..] {
                let (l2, r2) = (b.0.min(b.1), b.0.max(b.1));
                if (l1 < l2 && l2 < r1 && r1 < r2) || (l2 < l1 && l1 < r2 && r2 < r1) {
                    return Some((a, b));
                }
            }
        }
        // An arc spanning the root is also non-projective.
        let root = self.heads.iter().position(|&h| h == 0)? + 1;
        arcs.iter()
            .find(|(h, d)| h.min(d) < &root && &root < h.max(d))
            .map(|&a| (a, (0, root)))
    }

    pub fn check_projective(&self) -> Result<()> {
        match self.crossing_arcs() {
            None => Ok(()),
            Some((a, b)) => Err(Error::NonProjective(a, b)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(heads: &[usize]) -> DepTree {
        DepTree {
            tokens: (0..heads.len()).map(|i| format!("w{i}")).collect(),
            heads: heads.to_vec(),
        }
    }

    #[test]
    fn validation() {
        assert!(tree(&[2, 0, 2]).validate().is_ok());
        assert!(tree(&[0, 0]).validate().is_err());
        assert!(tree(&[2, 1, 0]).validate().is_err());
        assert!(tree(&[4]).validate().is_err());
    }

    #[test]
    fn projectivity() {
        assert!(tree(&[2, 0, 2]).check_projective().is_ok());
        // 1<-3 and 2<-4 cross
        let t = tree(&[3, 4, 0, 3]);
        assert!(matches!(t.check_projective(), Err(Error::NonProjective(..))));
        // 1 -> 3 spans the root at 2
        let t = tree(&[0, 1, 1]);
        assert!(t.check_projective().is_ok());
        let t = tree(&[3, 0, 2]);
        assert!(t.check_projective().is_err());
    }
}
