use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Vocab;
use crate::numerics::rng;
use crate::probe::DepTree;

/// One weighted expansion; `head` indexes the child whose head word heads
/// the whole constituent. Every other child's head attaches to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Production {
    pub p: f64,
    pub rhs: Vec<String>,
    pub head: usize,
}

/// A head-annotated PCFG. Symbols that are neither rules nor lexical
/// categories are literal words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrammarSpec {
    pub start: String,
    pub rules: BTreeMap<String, Vec<Production>>,
    pub lexicon: BTreeMap<String, Vec<String>>,
    pub rng_seed: u64,
}

fn prod(p: f64, rhs: &[&str], head: usize) -> Production {
    Production {
        p,
        rhs: rhs.iter().map(|s| s.to_string()).collect(),
        head,
    }
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|s| s.to_string()).collect()
}

impl GrammarSpec {
    /// The toy language: subordinate-clause frames with and without objects,
    /// object and sentential complements, and reduced relatives.
    pub fn toy(rng_seed: u64) -> Self {
        let mut rules = BTreeMap::new();
        rules.insert(
            "S".into(),
            vec![
                prod(0.5, &["MAIN", "."], 0),
                prod(0.25, &["SUBO", ",", "MAIN", "."], 2),
                prod(0.25, &["SUBZ", "MAIN", "."], 1),
            ],
        );
        rules.insert(
            "SUBO".into(),
            vec![
                prod(0.5, &["SUBORD", "NP", "VT", "NP"], 2),
                prod(0.5, &["SUBORD", "NP", "VA", "NP"], 2),
            ],
        );
        rules.insert(
            "SUBZ".into(),
            vec![prod(0.6, &["SUBORD", "NP", "VI"], 2), prod(0.4, &["SUBORD", "NP", "VA"], 2)],
        );
        rules.insert(
            "MAIN".into(),
            vec![
                prod(0.30, &["NP", "was", "ADJ"], 2),
                prod(0.08, &["NP", "VI"], 1),
                prod(0.12, &["NP", "VT", "NP"], 1),
                prod(0.08, &["NP", "VA", "NP"], 1),
                prod(0.05, &["NP", "VA"], 1),
                prod(0.08, &["NP", "VS", "SC"], 1),
                prod(0.04, &["NP", "VB", "NP"], 1),
                prod(0.06, &["NP", "VB", "SC"], 1),
                prod(0.07, &["NPRR", "was", "ADJ"], 2),
                prod(0.06, &["NP", "VM", "NP"], 1),
                prod(0.06, &["NP", "VPAST", "NP"], 1),
            ],
        );
        rules.insert("SC".into(), vec![prod(1.0, &["NP", "was", "ADJ"], 2)]);
        rules.insert("NP".into(), vec![prod(1.0, &["DET", "N"], 1)]);
        rules.insert("NPRR".into(), vec![prod(1.0, &["DET", "N", "RR"], 1)]);
        rules.insert(
            "RR".into(),
            vec![prod(0.5, &["VPP", "NP"], 0), prod(0.5, &["VM", "NP"], 0)],
        );
        let mut lexicon = BTreeMap::new();
        lexicon.insert(
            "N".into(),
            words(&[
                "senator", "bill", "dog", "cat", "teacher", "student", "doctor", "patient", "king", "queen", "farmer",
                "horse",
            ]),
        );
        lexicon.insert("ADJ".into(), words(&["happy", "late", "old", "tired", "famous"]));
        lexicon.insert("DET".into(), words(&["the", "a"]));
        lexicon.insert("SUBORD".into(), words(&["after", "while", "when"]));
        lexicon.insert("VT".into(), words(&["praised", "hit", "liked", "found"]));
        lexicon.insert("VI".into(), words(&["slept", "arrived", "laughed", "fell"]));
        lexicon.insert("VA".into(), words(&["attacked", "watched", "left", "visited"]));
        lexicon.insert("VS".into(), words(&["hoped", "claimed", "thought"]));
        lexicon.insert("VB".into(), words(&["knew", "noticed", "forgot"]));
        lexicon.insert("VM".into(), words(&["raced", "walked", "pushed"]));
        lexicon.insert("VPAST".into(), words(&["ate", "drove", "took"]));
        lexicon.insert("VPP".into(), words(&["eaten", "driven", "taken"]));
        GrammarSpec {
            start: "S".into(),
            rules,
            lexicon,
            rng_seed,
        }
    }

    fn is_literal(&self, s: &str) -> bool {
        !self.rules.contains_key(s) && !self.lexicon.contains_key(s)
    }

    pub fn category(&self, name: &str) -> Result<&[String]> {
        self.lexicon
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("no lexical category {name}")))
    }

    /// Lists every problem found.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !self.rules.contains_key(&self.start) {
            errs.push(format!("start symbol {} has no rules", self.start));
        }
        for (lhs, prods) in &self.rules {
            if prods.is_empty() {
                errs.push(format!("{lhs} has no productions"));
            }
            let total: f64 = prods.iter().map(|p| p.p).sum();
            if (total - 1.0).abs() > 1e-9 {
                errs.push(format!("probabilities of {lhs} sum to {total}"));
            }
            for p in prods {
                if !(p.p >= 0.0) {
                    errs.push(format!("{lhs} has a negative probability"));
                }
                if p.head >= p.rhs.len() {
                    errs.push(format!("{lhs} -> {:?} has head {} out of range", p.rhs, p.head));
                }
            }
        }
        for (cat, ws) in &self.lexicon {
            if ws.is_empty() {
                errs.push(format!("category {cat} is empty"));
            }
        }
        if let Some(cycle) = self.find_cycle() {
            errs.push(format!("recursive nonterminal {cycle}"));
        }
        errs
    }

    fn find_cycle(&self) -> Option<String> {
        fn visit<'a>(g: &'a GrammarSpec, s: &'a str, path: &mut Vec<&'a str>, done: &mut BTreeSet<&'a str>) -> Option<String> {
            if path.contains(&s) {
                return Some(s.to_string());
            }
            if done.contains(s) {
                return None;
            }
            path.push(s);
            for p in g.rules.get(s).into_iter().flatten() {
                for c in &p.rhs {
                    if g.rules.contains_key(c) {
                        if let Some(r) = visit(g, c, path, done) {
                            return Some(r);
                        }
                    }
                }
            }
            path.pop();
            done.insert(s);
            None
        }
        let mut done = BTreeSet::new();
        self.rules
            .keys()
            .find_map(|k| visit(self, k, &mut Vec::new(), &mut done))
    }

    /// Every word the grammar can emit, categories in name order then literals.
    pub fn words(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut seen = BTreeSet::new();
        for ws in self.lexicon.values() {
            for w in ws {
                if seen.insert(w.clone()) {
                    out.push(w.clone());
                }
            }
        }
        let mut lits = BTreeSet::new();
        for prods in self.rules.values() {
            for p in prods {
                for s in &p.rhs {
                    if self.is_literal(s) && !seen.contains(s) {
                        lits.insert(s.clone());
                    }
                }
            }
        }
        out.extend(lits);
        out
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.words())
    }

    fn expand(&self, sym: &str, rng: &mut impl Rng, words: &mut Vec<String>, heads: &mut Vec<usize>) -> usize {
        if let Some(prods) = self.rules.get(sym) {
            let r: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = &prods[prods.len() - 1];
            for p in prods {
                acc += p.p;
                if r < acc {
                    chosen = p;
                    break;
                }
            }
            let child_heads: Vec<usize> = chosen
                .rhs
                .iter()
                .map(|c| self.expand(c, rng, words, heads))
                .collect();
            let h = child_heads[chosen.head];
            for (i, &c) in child_heads.iter().enumerate() {
                if i != chosen.head {
                    heads[c - 1] = h;
                }
            }
            h
        } else {
            let w = match self.lexicon.get(sym) {
                Some(ws) => ws[rng.random_range(0..ws.len())].clone(),
                None => sym.to_string(),
            };
            words.push(w);
            heads.push(0);
            words.len()
        }
    }

    /// One sentence with its gold tree.
    pub fn sample(&self, rng: &mut impl Rng) -> DepTree {
        let mut words = Vec::new();
        let mut heads = Vec::new();
        self.expand(&self.start, rng, &mut words, &mut heads);
        DepTree { tokens: words, heads }
    }
}

/// `n` sentences with gold trees, determined by the grammar's seed.
pub fn generate_corpus(grammar: &GrammarSpec, n: usize) -> Result<Vec<DepTree>> {
    let errs = grammar.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut rng = rng(grammar.rng_seed);
    Ok((0..n).map(|_| grammar.sample(&mut rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_grammar_is_well_formed() {
        let g = GrammarSpec::toy(0);
        assert!(g.validate().is_empty(), "{:?}", g.validate());
        assert!(g.vocab().len() <= 64);
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut g = GrammarSpec::toy(0);
        g.rules.get_mut("SUBZ").unwrap()[0].p = 0.7;
        g.rules.get_mut("NP").unwrap()[0].head = 5;
        g.rules.insert("X".into(), vec![prod(1.0, &["X"], 0)]);
        assert_eq!(g.validate().len(), 3);
        assert!(generate_corpus(&g, 1).is_err());
    }

    #[test]
    fn sentences_are_projective_trees() {
        let g = GrammarSpec::toy(4);
        let corpus = generate_corpus(&g, 2000).unwrap();
        for t in &corpus {
            t.validate().unwrap();
            t.check_projective().unwrap();
            assert!(t.len() <= 15);
        }
        assert!(generate_corpus(&g, 0).unwrap().is_empty());
        assert_eq!(corpus, generate_corpus(&g, 2000).unwrap());
    }
}
