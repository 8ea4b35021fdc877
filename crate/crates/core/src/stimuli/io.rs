use std::fmt::Write as _;
use std::path::Path;

use super::{Condition, Stimulus, Structure};
use crate::error::{Error, Result};
use crate::probe::DepTree;

pub const STIMULUS_HEADER: &str = "structure\tcondition\ttext\tverb_index\tnoun_index\tgp_token\tnongp_token";

pub fn stimuli_to_tsv(stimuli: &[Stimulus]) -> String {
    let mut s = String::from(STIMULUS_HEADER);
    s.push('\n');
    for x in stimuli {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            x.structure,
            x.condition,
            x.text(),
            x.verb_index,
            x.noun_index,
            x.gp_token,
            x.nongp_token
        );
    }
    s
}

pub fn stimuli_from_tsv(text: &str) -> Result<Vec<Stimulus>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == STIMULUS_HEADER => {}
        _ => return Err(Error::invalid("stimulus file lacks the expected header")),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = |what: &str| Error::invalid(format!("stimulus line {}: {what}", i + 2));
        if cols.len() != 7 {
            return Err(bad("expected 7 columns"));
        }
        let words: Vec<String> = cols[2].split_whitespace().map(str::to_string).collect();
        let idx = |c: &str| c.parse::<usize>().map_err(|_| bad("bad index"));
        let s = Stimulus {
            structure: cols[0].parse::<Structure>()?,
            condition: cols[1].parse::<Condition>()?,
            verb_index: idx(cols[3])?,
            noun_index: idx(cols[4])?,
            gp_token: cols[5].to_string(),
            nongp_token: cols[6].to_string(),
            words,
        };
        if s.verb_index >= s.words.len() || s.noun_index >= s.words.len() {
            return Err(bad("index outside sentence"));
        }
        out.push(s);
    }
    Ok(out)
}

pub fn write_stimuli(path: &Path, stimuli: &[Stimulus]) -> Result<()> {
    std::fs::write(path, stimuli_to_tsv(stimuli))?;
    Ok(())
}

pub fn read_stimuli(path: &Path) -> Result<Vec<Stimulus>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    stimuli_from_tsv(&std::fs::read_to_string(path)?)
}

/// One `index form head` line per token, blank line between sentences.
pub fn treebank_to_string(trees: &[DepTree]) -> String {
    let mut s = String::new();
    for t in trees {
        for (i, (w, h)) in t.tokens.iter().zip(&t.heads).enumerate() {
            let _ = writeln!(s, "{}\t{w}\t{h}", i + 1);
        }
        s.push('\n');
    }
    s
}

pub fn treebank_from_str(text: &str) -> Result<Vec<DepTree>> {
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut heads = Vec::new();
    let mut flush = |tokens: &mut Vec<String>, heads: &mut Vec<usize>| -> Result<()> {
        if !tokens.is_empty() {
            out.push(DepTree::new(std::mem::take(tokens), std::mem::take(heads))?);
        }
        Ok(())
    };
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            flush(&mut tokens, &mut heads)?;
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = || Error::invalid(format!("treebank line {}: expected index, form, head", n + 1));
        if cols.len() < 3 {
            return Err(bad());
        }
        let index: usize = cols[0].parse().map_err(|_| bad())?;
        if index != tokens.len() + 1 {
            return Err(bad());
        }
        tokens.push(cols[1].to_string());
        heads.push(cols[2].parse().map_err(|_| bad())?);
    }
    flush(&mut tokens, &mut heads)?;
    Ok(out)
}

pub fn write_treebank(path: &Path, trees: &[DepTree]) -> Result<()> {
    std::fs::write(path, treebank_to_string(trees))?;
    Ok(())
}

pub fn read_treebank(path: &Path) -> Result<Vec<DepTree>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    treebank_from_str(&std::fs::read_to_string(path)?)
}

/// Plain text, one sentence per line.
pub fn corpus_to_string(trees: &[DepTree]) -> String {
    let mut s = String::new();
    for t in trees {
        s.push_str(&t.tokens.join(" "));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stimuli::{default_templates, generate_corpus, generate_stimuli, GrammarSpec};

    #[test]
    fn stimuli_round_trip() {
        let g = GrammarSpec::toy(0);
        let s = generate_stimuli(&default_templates(&g).unwrap(), &g, 5, 2).unwrap();
        assert_eq!(stimuli_from_tsv(&stimuli_to_tsv(&s)).unwrap(), s);
        assert!(stimuli_from_tsv("nope\n").is_err());
    }

    #[test]
    fn treebank_round_trip() {
        let g = GrammarSpec::toy(1);
        let c = generate_corpus(&g, 50).unwrap();
        assert_eq!(treebank_from_str(&treebank_to_string(&c)).unwrap(), c);
        assert_eq!(corpus_to_string(&c).lines().count(), 50);
    }
}
