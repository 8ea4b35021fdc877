use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::parser::{attaching_action, decode, oracle_states, Action};
use super::DepTree;
use crate::attribution::Objective;
use crate::error::{Error, Result};
use crate::model::{Example, SiteKind, SubmoduleId, Trace, TransformerModel};
use crate::numerics::optim::Adam;
use crate::numerics::{container, kernels::softmax, randn, rng, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeTrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub rng_seed: u64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        ProbeTrainConfig {
            hidden: 128,
            epochs: 30,
            batch_size: 128,
            lr: 1e-3,
            rng_seed: 0,
        }
    }
}

impl ProbeTrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [("hidden", self.hidden), ("epochs", self.epochs), ("batch_size", self.batch_size)] {
            if v == 0 {
                errs.push(format!("probe.train.{name} must be at least 1"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push("probe.train.lr must be positive".into());
        }
        errs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeEpoch {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeMeta {
    /// Residual site the probe reads.
    pub site: SubmoduleId,
    pub d_model: usize,
    pub hidden: usize,
    pub n_states: usize,
    pub train_log: Vec<ProbeEpoch>,
}

/// `P(a) ∝ exp(e_aᵀ relu(W [h1; h2] + c) + b_a)` over the three actions,
/// where `h1` and `h2` represent the top two stack subtrees.
#[derive(Clone, Debug)]
pub struct ActionProbe {
    pub meta: ProbeMeta,
    params: BTreeMap<String, Tensor>,
}

const NAMES: [&str; 4] = ["mlp.w", "mlp.b", "action.e", "action.b"];

impl ActionProbe {
    pub fn zeros(site: SubmoduleId, d_model: usize, hidden: usize) -> Self {
        let mut params = BTreeMap::new();
        params.insert("mlp.w".into(), Tensor::zeros(&[2 * d_model, hidden]));
        params.insert("mlp.b".into(), Tensor::zeros(&[hidden]));
        params.insert("action.e".into(), Tensor::zeros(&[hidden, 3]));
        params.insert("action.b".into(), Tensor::zeros(&[3]));
        ActionProbe {
            meta: ProbeMeta {
                site,
                d_model,
                hidden,
                n_states: 0,
                train_log: Vec::new(),
            },
            params,
        }
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        self.params.get_mut(name).expect("probe parameter")
    }

    /// Action logits `[B, 3]` for rows of `h1` and `h2` on `tape`, with the
    /// probe's parameters bound to `vars` in `NAMES` order.
    fn logits_with(tape: &mut Tape, vars: &[Var; 4], h1: Var, h2: Var) -> Result<Var> {
        let x = tape.concat_cols(h1, h2)?;
        let h = tape.linear(x, vars[0], vars[1])?;
        let h = tape.relu(h)?;
        tape.linear(h, vars[2], vars[3])
    }

    /// Action logits with the parameters recorded as constants.
    pub fn build(&self, tape: &mut Tape, h1: Var, h2: Var) -> Result<Var> {
        let vars = NAMES.map(|n| tape.constant(self.params[n].clone()));
        Self::logits_with(tape, &vars, h1, h2)
    }

    /// Distribution over `[LEFT_ARC, RIGHT_ARC, GEN]`; `site` must be the
    /// probe's own.
    pub fn distribution(&self, site: SubmoduleId, h1: &[f64], h2: &[f64]) -> Result<[f64; 3]> {
        if site != self.meta.site {
            return Err(Error::invalid(format!(
                "probe reads {}, representations come from {site}",
                self.meta.site
            )));
        }
        let d = self.meta.d_model;
        if h1.len() != d || h2.len() != d {
            return Err(Error::invalid(format!("representations must have width {d}")));
        }
        let mut x = h1.to_vec();
        x.extend_from_slice(h2);
        let (w, c, e, b) = (&self.params["mlp.w"], &self.params["mlp.b"], &self.params["action.e"], &self.params["action.b"]);
        let hdim = self.meta.hidden;
        let mut hid = c.data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (h, &wv) in hid.iter_mut().zip(&w.data()[i * hdim..(i + 1) * hdim]) {
                    *h += xi * wv;
                }
            }
        }
        let mut logits = b.data().to_vec();
        for (j, &h) in hid.iter().enumerate() {
            if h > 0.0 {
                for (a, l) in logits.iter_mut().enumerate() {
                    *l += h * e.data()[j * 3 + a];
                }
            }
        }
        let p = softmax(&logits);
        Ok([p[0], p[1], p[2]])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::save(path, &self.params)?;
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let params = container::load(path)?;
        let side = path.with_extension("json");
        if !side.exists() {
            return Err(Error::MissingArtifact(side));
        }
        let meta: ProbeMeta = serde_json::from_str(&std::fs::read_to_string(side)?)?;
        let d = meta.d_model;
        let shapes: [(&str, Vec<usize>); 4] = [
            ("mlp.w", vec![2 * d, meta.hidden]),
            ("mlp.b", vec![meta.hidden]),
            ("action.e", vec![meta.hidden, 3]),
            ("action.b", vec![3]),
        ];
        for (name, shape) in shapes {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(Error::Container(format!("probe parameter {name} missing or misshapen"))),
            }
        }
        Ok(ActionProbe { meta, params })
    }
}

fn check_site(model: &TransformerModel, site: SubmoduleId) -> Result<()> {
    site.validate(model.config.n_layers)?;
    if site.kind != SiteKind::Residual {
        return Err(Error::invalid(format!("probes read residual sites, not {site}")));
    }
    Ok(())
}

/// Residual representations `[len + 1, d]` of `words` with BOS at row 0.
pub fn hidden_states(model: &TransformerModel, words: &[String], site: SubmoduleId) -> Result<Tensor> {
    let tokens = model.vocab.encode_words(words)?;
    Ok(model.forward(&tokens)?.activation(&site)?.clone())
}

/// `(h1 rows, h2 rows, oracle actions)` for every oracle state with at
/// least two stack items. Word `i` (1-based) is read at row `i`.
fn probe_dataset(model: &TransformerModel, trees: &[DepTree], site: SubmoduleId) -> Result<(Vec<f64>, Vec<f64>, Vec<usize>)> {
    let parts: Vec<(Vec<f64>, Vec<f64>, Vec<usize>)> = trees
        .par_iter()
        .map(|t| {
            let h = hidden_states(model, &t.tokens, site)?;
            let (mut a, mut b, mut y) = (Vec::new(), Vec::new(), Vec::new());
            for (state, action) in oracle_states(t)? {
                if let Some((s1, s2)) = state.top_two() {
                    a.extend_from_slice(h.row(s1));
                    b.extend_from_slice(h.row(s2));
                    y.push(action.index());
                }
            }
            Ok((a, b, y))
        })
        .collect::<Result<_>>()?;
    let (mut h1, mut h2, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for (a, b, c) in parts {
        h1.extend(a);
        h2.extend(b);
        y.extend(c);
    }
    Ok((h1, h2, y))
}

/// Trains a probe on the oracle states of `trees` at the residual `site`.
pub fn train_probe(model: &TransformerModel, trees: &[DepTree], site: SubmoduleId, cfg: &ProbeTrainConfig) -> Result<ActionProbe> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if trees.is_empty() {
        return Err(Error::invalid("empty treebank"));
    }
    check_site(model, site)?;
    let d = model.config.d_model;
    let (h1, h2, y) = probe_dataset(model, trees, site)?;
    let n = y.len();
    if n == 0 {
        return Err(Error::invalid("treebank has no states with two stack items"));
    }
    let mut rng = rng(cfg.rng_seed);
    let mut probe = ActionProbe::zeros(site, d, cfg.hidden);
    *probe.param_mut("mlp.w") = randn(&mut rng, &[2 * d, cfg.hidden], (1.0 / (2 * d) as f64).sqrt());
    *probe.param_mut("action.e") = randn(&mut rng, &[cfg.hidden, 3], (1.0 / cfg.hidden as f64).sqrt());
    let mut adams: Vec<Adam> = NAMES.iter().map(|k| Adam::new(probe.params[*k].numel())).collect();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let rows = |src: &[f64]| {
                let mut out = Vec::with_capacity(batch.len() * d);
                for &i in batch {
                    out.extend_from_slice(&src[i * d..(i + 1) * d]);
                }
                Tensor::new(vec![batch.len(), d], out)
            };
            let targets: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let mut tape = Tape::new();
            let vars = NAMES.map(|k| tape.input(k, probe.params[k].clone()));
            let a = tape.constant(rows(&h1)?);
            let b = tape.constant(rows(&h2)?);
            let logits = ActionProbe::logits_with(&mut tape, &vars, a, b)?;
            let loss = tape.cross_entropy(logits, targets.clone())?;
            let lv = tape.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::Numerical(format!("probe loss became {lv}")));
            }
            for (r, &t) in targets.iter().enumerate() {
                let row = &tape.value(logits).data()[r * 3..r * 3 + 3];
                let arg = (0..3).max_by(|&i, &j| row[i].total_cmp(&row[j])).expect("3 actions");
                correct += (arg == t) as usize;
            }
            total += lv * batch.len() as f64;
            let grads = tape.gradient(loss, &vars)?;
            for ((k, g), adam) in NAMES.iter().zip(&grads).zip(&mut adams) {
                adam.step(probe.param_mut(k).data_mut(), g.data(), cfg.lr);
            }
        }
        probe.meta.train_log.push(ProbeEpoch {
            loss: total / n as f64,
            accuracy: correct as f64 / n as f64,
        });
    }
    probe.meta.n_states = n;
    Ok(probe)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeEval {
    pub uas: f64,
    pub uuas: f64,
    pub action_accuracy: f64,
    pub n_sentences: usize,
    pub n_tokens: usize,
    /// Sentences the decoder could not finish.
    pub failures: usize,
}

fn attachment_scores(gold: &[usize], pred: &[usize]) -> (usize, usize) {
    let undirected: BTreeSet<(usize, usize)> = gold
        .iter()
        .enumerate()
        .map(|(i, &h)| ((i + 1).min(h), (i + 1).max(h)))
        .collect();
    let directed = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    let undirected_hits = pred
        .iter()
        .enumerate()
        .filter(|(i, &h)| undirected.contains(&((i + 1).min(h), (i + 1).max(h))))
        .count();
    (directed, undirected_hits)
}

/// Scores a state policy `(s1 row, s2 row) -> scores` by greedy decoding
/// and by argmax accuracy on the gold states.
fn evaluate_policy<F>(model: &TransformerModel, trees: &[DepTree], site: SubmoduleId, policy: F) -> Result<ProbeEval>
where
    F: Fn(usize, &[f64], &[f64]) -> Result<[f64; 3]> + Sync,
{
    let per: Vec<(usize, usize, usize, usize, usize, bool)> = trees
        .par_iter()
        .enumerate()
        .map(|(ti, t)| {
            let h = hidden_states(model, &t.tokens, site)?;
            let mut calls = 0usize;
            let pred = decode(t.len(), |s| {
                let (s1, s2) = s.top_two().expect("decoder asks only with two stack items");
                calls += 1;
                policy(ti * 1000 + calls, h.row(s1), h.row(s2))
            })?;
            let (mut states, mut hits) = (0, 0);
            for (k, (state, action)) in oracle_states(t)?.into_iter().enumerate() {
                if let Some((s1, s2)) = state.top_two() {
                    let p = policy(ti * 1000 + 500 + k, h.row(s1), h.row(s2))?;
                    let arg = (0..3).max_by(|&i, &j| p[i].total_cmp(&p[j]).then(j.cmp(&i))).expect("3");
                    states += 1;
                    hits += (arg == action.index()) as usize;
                }
            }
            Ok(match pred {
                Some(p) => {
                    let (dir, und) = attachment_scores(&t.heads, &p);
                    (dir, und, t.len(), states, hits, false)
                }
                None => (0, 0, t.len(), states, hits, true),
            })
        })
        .collect::<Result<_>>()?;
    let sum = |f: fn(&(usize, usize, usize, usize, usize, bool)) -> usize| per.iter().map(f).sum::<usize>();
    let tokens = sum(|p| p.2);
    let states = sum(|p| p.3);
    Ok(ProbeEval {
        uas: sum(|p| p.0) as f64 / tokens.max(1) as f64,
        uuas: sum(|p| p.1) as f64 / tokens.max(1) as f64,
        action_accuracy: sum(|p| p.4) as f64 / states.max(1) as f64,
        n_sentences: trees.len(),
        n_tokens: tokens,
        failures: per.iter().filter(|p| p.5).count(),
    })
}

/// UAS and UUAS of greedy decoding with the probe, and its action accuracy
/// on the gold states.
pub fn eval_probe(probe: &ActionProbe, model: &TransformerModel, trees: &[DepTree]) -> Result<ProbeEval> {
    check_site(model, probe.meta.site)?;
    let site = probe.meta.site;
    evaluate_policy(model, trees, site, |_, h1, h2| probe.distribution(site, h1, h2))
}

/// The same measurements with actions drawn uniformly at random.
pub fn random_baseline(model: &TransformerModel, trees: &[DepTree], site: SubmoduleId, seed: u64) -> Result<ProbeEval> {
    check_site(model, site)?;
    evaluate_policy(model, trees, site, |k, _, _| {
        let mut r = rng(seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        Ok([r.random(), r.random(), r.random()])
    })
}

/// Probe distribution at the state whose top two subtrees are headed by the
/// example's final noun (top) and verb (below).
pub fn probe_reading(model: &TransformerModel, probe: &ActionProbe, example: &Example) -> Result<[f64; 3]> {
    let (verb, noun) = match (example.annotations.verb, example.annotations.final_noun) {
        (Some(v), Some(n)) => (v, n),
        _ => return Err(Error::invalid("probe readings need verb and final-noun annotations")),
    };
    let h = model.forward(&example.tokens)?.activation(&probe.meta.site)?.clone();
    if verb >= h.shape()[0] || noun >= h.shape()[0] {
        return Err(Error::invalid("annotated position outside the sequence"));
    }
    probe.distribution(probe.meta.site, h.row(noun), h.row(verb))
}

/// `P(positive) - P(negative)` of a probe read at the verb/final-noun state,
/// by default `P(attach) - P(GEN)`.
#[derive(Clone, Debug)]
pub struct ProbeObjective {
    pub probe: ActionProbe,
    pub positive: Action,
    pub negative: Action,
}

impl ProbeObjective {
    pub fn new(probe: ActionProbe) -> Self {
        ProbeObjective {
            probe,
            positive: attaching_action(),
            negative: Action::Gen,
        }
    }
}

impl Objective for ProbeObjective {
    fn build(&self, trace: &mut Trace, example: &Example) -> Result<Var> {
        let (Some(verb), Some(noun)) = (example.annotations.verb, example.annotations.final_noun) else {
            return Err(Error::invalid("probe objective needs verb and final-noun annotations"));
        };
        let h = trace.site(&self.probe.meta.site)?.output;
        let tape = &mut trace.tape;
        let h1 = tape.gather(h, vec![noun])?;
        let h2 = tape.gather(h, vec![verb])?;
        let logits = self.probe.build(tape, h1, h2)?;
        let p = tape.softmax_rows(logits)?;
        let a = tape.element(p, self.positive.index())?;
        let b = tape.element(p, self.negative.index())?;
        tape.sub(a, b)
    }

    fn describe(&self) -> String {
        format!("probe {} P({}) - P({})", self.probe.meta.site, self.positive, self.negative)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny;

    #[test]
    fn zero_probe_is_uniform_and_bias_dominates() {
        let site = SubmoduleId::residual(0);
        let mut p = ActionProbe::zeros(site, 4, 8);
        let h = [0.3, -1.0, 2.0, 0.5];
        let u = p.distribution(site, &h, &h).unwrap();
        for v in u {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        p.param_mut("action.b").data_mut().copy_from_slice(&[50.0, -50.0, -50.0]);
        let d = p.distribution(site, &h, &h).unwrap();
        assert!(d[0] > 1.0 - 1e-12 && d[1] < 1e-12);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.distribution(SubmoduleId::residual(1), &h, &h).is_err());
    }

    #[test]
    fn repeated_tree_is_memorised() {
        let m = tiny();
        let words: Vec<String> = ["w1", "w2", "w3", "w4", "w5"].iter().map(|s| s.to_string()).collect();
        let t = DepTree::new(words, vec![2, 3, 0, 5, 3]).unwrap();
        let trees = vec![t; 4];
        let cfg = ProbeTrainConfig {
            epochs: 60,
            batch_size: 8,
            lr: 1e-2,
            ..ProbeTrainConfig::default()
        };
        let probe = train_probe(&m, &trees, SubmoduleId::residual(1), &cfg).unwrap();
        assert!(probe.meta.train_log.last().unwrap().accuracy > 0.99);
        let eval = eval_probe(&probe, &m, &trees).unwrap();
        assert_eq!(eval.uas, 1.0);
        assert_eq!(eval.uuas, 1.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let site = SubmoduleId::residual(0);
        let mut p = ActionProbe::zeros(site, 4, 8);
        p.param_mut("mlp.w").data_mut()[3] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.train.sfct");
        p.save(&path).unwrap();
        let q = ActionProbe::load(&path).unwrap();
        assert_eq!(q.param("mlp.w"), p.param("mlp.w"));
        assert_eq!(q.meta, p.meta);
    }
}
