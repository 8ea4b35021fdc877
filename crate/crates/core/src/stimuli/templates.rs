use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::GrammarSpec;
use crate::error::{Error, Result};
use crate::model::{Annotations, Example, MetricMode, MetricSpec, Vocab};
use crate::numerics::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Structure {
    #[serde(rename = "NPZ")]
    Npz,
    #[serde(rename = "NPS")]
    Nps,
    #[serde(rename = "MVRR")]
    Mvrr,
}

impl Structure {
    pub const ALL: [Structure; 3] = [Structure::Npz, Structure::Nps, Structure::Mvrr];
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Structure::Npz => "NPZ",
            Structure::Nps => "NPS",
            Structure::Mvrr => "MVRR",
        })
    }
}

impl FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace(['/', '_'], "").as_str() {
            "NPZ" => Ok(Structure::Npz),
            "NPS" => Ok(Structure::Nps),
            "MVRR" => Ok(Structure::Mvrr),
            _ => Err(Error::invalid(format!("unknown structure {s}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Ambiguous,
    Gp,
    NonGp,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Ambiguous, Condition::Gp, Condition::NonGp];
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Ambiguous => "ambiguous",
            Condition::Gp => "gp",
            Condition::NonGp => "non_gp",
        })
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ambiguous" => Ok(Condition::Ambiguous),
            "gp" => Ok(Condition::Gp),
            "non_gp" => Ok(Condition::NonGp),
            _ => Err(Error::invalid(format!("unknown condition {s}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbTriple {
    pub ambiguous: String,
    pub gp: String,
    pub non_gp: String,
}

impl VerbTriple {
    pub fn get(&self, c: Condition) -> &str {
        match c {
            Condition::Ambiguous => &self.ambiguous,
            Condition::Gp => &self.gp,
            Condition::NonGp => &self.non_gp,
        }
    }
}

/// A frame whose slots are `{SUB}`, `{N1}`, `{N2}` and `{V}`. Verb and noun
/// indices are word positions in the instantiated frame.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GardenPathTemplate {
    pub structure: Structure,
    pub frame: Vec<String>,
    pub verbs: VerbTriple,
    pub gp_token: String,
    pub nongp_token: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stimulus {
    pub structure: Structure,
    pub condition: Condition,
    pub words: Vec<String>,
    pub verb_index: usize,
    pub noun_index: usize,
    pub gp_token: String,
    pub nongp_token: String,
}

impl Stimulus {
    pub fn text(&self) -> String {
        self.words.join(" ")
    }

    /// Token ids with BOS, annotations shifted past it.
    pub fn to_example(&self, vocab: &Vocab) -> Result<Example> {
        let tokens = vocab.encode_words(&self.words)?;
        Ok(Example {
            tokens,
            annotations: Annotations {
                verb: Some(self.verb_index + 1),
                final_noun: Some(self.noun_index + 1),
            },
        })
    }

    /// `gp_token - nongp_token` at the last position.
    pub fn metric(&self, vocab: &Vocab, mode: MetricMode) -> Result<MetricSpec> {
        MetricSpec::from_words(vocab, mode, &[self.gp_token.as_str()], &[self.nongp_token.as_str()])
    }
}

fn triples(g: &GrammarSpec, cats: [&str; 3]) -> Result<Vec<VerbTriple>> {
    let [a, b, c] = [g.category(cats[0])?, g.category(cats[1])?, g.category(cats[2])?];
    Ok(a.iter()
        .zip(b)
        .zip(c)
        .map(|((a, b), c)| VerbTriple {
            ambiguous: a.clone(),
            gp: b.clone(),
            non_gp: c.clone(),
        })
        .collect())
}

/// NP/Z frames pair an ambitransitive verb with transitive and intransitive
/// variants; NP/S pair object-or-clause verbs with object-only and
/// clause-only ones; MV/RR pair ambiguous forms with past and participle.
pub fn default_templates(g: &GrammarSpec) -> Result<Vec<GardenPathTemplate>> {
    let sub = ["{SUB}", "the", "{N1}", "{V}", "the", "{N2}"];
    let main = ["the", "{N1}", "{V}", "the", "{N2}"];
    let mut out = Vec::new();
    for (structure, frame, cats, gp) in [
        (Structure::Npz, &sub[..], ["VA", "VT", "VI"], ","),
        (Structure::Nps, &main[..], ["VB", "VT", "VS"], "."),
        (Structure::Mvrr, &main[..], ["VM", "VPAST", "VPP"], "."),
    ] {
        for verbs in triples(g, cats)? {
            out.push(GardenPathTemplate {
                structure,
                frame: frame.iter().map(|s| s.to_string()).collect(),
                verbs,
                gp_token: gp.into(),
                nongp_token: "was".into(),
            });
        }
    }
    Ok(out)
}

impl GardenPathTemplate {
    fn fill(&self, sub: &str, n1: &str, n2: &str, c: Condition) -> Result<Stimulus> {
        let mut words = Vec::new();
        let (mut verb_index, mut noun_index) = (None, None);
        for slot in &self.frame {
            match slot.as_str() {
                "{SUB}" => words.push(sub.to_string()),
                "{N1}" => words.push(n1.to_string()),
                "{N2}" => {
                    noun_index = Some(words.len());
                    words.push(n2.to_string());
                }
                "{V}" => {
                    let v: Vec<&str> = self.verbs.get(c).split_whitespace().collect();
                    verb_index = Some(words.len() + v.len() - 1);
                    words.extend(v.iter().map(|s| s.to_string()));
                }
                w => words.push(w.to_string()),
            }
        }
        let (Some(verb_index), Some(noun_index)) = (verb_index, noun_index) else {
            return Err(Error::invalid("template frame needs {V} and {N2} slots"));
        };
        Ok(Stimulus {
            structure: self.structure,
            condition: c,
            words,
            verb_index,
            noun_index,
            gp_token: self.gp_token.clone(),
            nongp_token: self.nongp_token.clone(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.gp_token == self.nongp_token {
            return Err(Error::invalid("gp and non-gp tokens must differ"));
        }
        let counts: Vec<usize> = Condition::ALL
            .iter()
            .map(|c| self.verbs.get(*c).split_whitespace().count())
            .collect();
        if counts.iter().any(|&n| n != counts[0]) || counts[0] == 0 {
            return Err(Error::invalid(format!(
                "verb triple {:?} has unequal token counts {counts:?}",
                self.verbs
            )));
        }
        Ok(())
    }
}

/// `n_per_structure` items for every structure with templates, each emitted
/// as its ambiguous, gp and non_gp variants. Items cycle through the
/// structure's templates and a seeded order of distinct noun pairs.
pub fn generate_stimuli(
    templates: &[GardenPathTemplate],
    grammar: &GrammarSpec,
    n_per_structure: usize,
    seed: u64,
) -> Result<Vec<Stimulus>> {
    for t in templates {
        t.validate()?;
    }
    let nouns = grammar.category("N")?;
    let subs = grammar.category("SUBORD")?;
    let mut pairs: Vec<(usize, usize)> = (0..nouns.len())
        .flat_map(|a| (0..nouns.len()).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::invalid("stimuli need at least two nouns"));
    }
    pairs.shuffle(&mut rng(seed));
    let mut out = Vec::new();
    for s in Structure::ALL {
        let ts: Vec<&GardenPathTemplate> = templates.iter().filter(|t| t.structure == s).collect();
        if ts.is_empty() {
            continue;
        }
        for i in 0..n_per_structure {
            let t = ts[i % ts.len()];
            let (a, b) = pairs[(i / ts.len() + i * 7) % pairs.len()];
            let sub = &subs[i % subs.len()];
            let items: Vec<Stimulus> = Condition::ALL
                .iter()
                .map(|c| t.fill(sub, &nouns[a], &nouns[b], *c))
                .collect::<Result<_>>()?;
            debug_assert!(items.iter().all(|x| x.words.len() == items[0].words.len()));
            out.extend(items);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_differ_only_at_the_verb() {
        let g = GrammarSpec::toy(0);
        let ts = default_templates(&g).unwrap();
        let stim = generate_stimuli(&ts, &g, 24, 1).unwrap();
        assert_eq!(stim.len(), 3 * 3 * 24);
        for item in stim.chunks(3) {
            let len = item[0].words.len();
            for s in item {
                assert_eq!(s.words.len(), len);
                assert_eq!((s.verb_index, s.noun_index), (item[0].verb_index, item[0].noun_index));
                for (i, (a, b)) in s.words.iter().zip(&item[0].words).enumerate() {
                    assert!(a == b || i == s.verb_index);
                }
            }
        }
        let npz = &stim[0];
        assert_eq!(npz.structure, Structure::Npz);
        assert_eq!((npz.gp_token.as_str(), npz.nongp_token.as_str()), (",", "was"));
        assert!(g.category("VA").unwrap().contains(&npz.words[npz.verb_index]));
        assert!(g.category("VT").unwrap().contains(&stim[1].words[3]));
        assert!(g.category("VI").unwrap().contains(&stim[2].words[3]));
        let nps = stim.iter().find(|s| s.structure == Structure::Nps).unwrap();
        assert_eq!(nps.gp_token, ".");
        assert_eq!(stim, generate_stimuli(&ts, &g, 24, 1).unwrap());
    }

    #[test]
    fn unequal_verb_triples_are_rejected() {
        let g = GrammarSpec::toy(0);
        let mut ts = default_templates(&g).unwrap();
        ts[0].verbs.gp = "did find".into();
        assert!(generate_stimuli(&ts, &g, 3, 0).is_err());
    }

    #[test]
    fn examples_carry_shifted_annotations() {
        let g = GrammarSpec::toy(0);
        let vocab = g.vocab();
        let s = &generate_stimuli(&default_templates(&g).unwrap(), &g, 1, 0).unwrap()[0];
        let ex = s.to_example(&vocab).unwrap();
        assert_eq!(ex.tokens.len(), s.words.len() + 1);
        assert_eq!(vocab.word(ex.tokens[ex.annotations.verb.unwrap()]).unwrap(), s.words[s.verb_index]);
    }
}
