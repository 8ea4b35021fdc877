use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TransformerModel;
use crate::error::{Error, Result};
use crate::numerics::optim::{warmup_linear, Adam};
use crate::numerics::{rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr`.
    pub lr_floor: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub rng_seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            epochs: 8,
            batch_size: 32,
            lr: 3e-3,
            warmup_steps: 50,
            lr_floor: 0.1,
            grad_clip: 1.0,
            rng_seed: 0,
        }
    }
}

impl LmTrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("lm.epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            errs.push("lm.batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push("lm.lr must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            errs.push("lm.lr_floor must lie in [0, 1]".into());
        }
        if self.grad_clip < 0.0 {
            errs.push("lm.grad_clip must be non-negative".into());
        }
        errs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmTrainReport {
    /// Mean per-token cross-entropy over each epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
    /// Set when training stopped on a non-finite loss or gradient; the
    /// returned model is the last finite one.
    pub diverged: Option<String>,
}

/// Summed next-token cross-entropy of one sequence and its gradient,
/// flattened in parameter-name order.
fn sequence_loss_grad(model: &TransformerModel, tokens: &[usize], names: &[String]) -> Result<(f64, Vec<f64>)> {
    let mut trace = model.forward(&tokens[..tokens.len() - 1])?;
    let n = tokens.len() - 1;
    let ce = trace.tape.cross_entropy(trace.logits, tokens[1..].to_vec())?;
    let loss = trace.tape.scale(ce, n as f64)?;
    let wrt: Vec<_> = names.iter().map(|k| trace.params[k]).collect();
    let grads = trace.tape.gradient(loss, &wrt)?;
    let mut flat = Vec::new();
    for g in grads {
        flat.extend_from_slice(g.data());
    }
    Ok((trace.tape.value(loss).item()?, flat))
}

/// Mean per-token next-token cross-entropy of `model` on `corpus`.
pub fn mean_cross_entropy(model: &TransformerModel, corpus: &[Vec<usize>]) -> Result<f64> {
    let per: Vec<(f64, usize)> = corpus
        .par_iter()
        .filter(|s| s.len() >= 2)
        .map(|s| {
            let mut trace = model.forward(&s[..s.len() - 1])?;
            let ce = trace.tape.cross_entropy(trace.logits, s[1..].to_vec())?;
            Ok((trace.tape.value(ce).item()? * (s.len() - 1) as f64, s.len() - 1))
        })
        .collect::<Result<_>>()?;
    let (total, count) = per.iter().fold((0.0, 0), |(a, n), (l, c)| (a + l, n + c));
    Ok(total / count.max(1) as f64)
}

/// Cross-entropy of an add-one-smoothed unigram model fitted on `train`,
/// evaluated on the predicted tokens of `heldout`.
pub fn unigram_cross_entropy(train: &[Vec<usize>], heldout: &[Vec<usize>], vocab_size: usize) -> f64 {
    let mut counts = vec![1.0; vocab_size];
    for s in train {
        for &t in s.iter().skip(1) {
            counts[t] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    let mut nll = 0.0;
    let mut n = 0usize;
    for s in heldout {
        for &t in s.iter().skip(1) {
            nll -= (counts[t] / total).ln();
            n += 1;
        }
    }
    nll / n.max(1) as f64
}

/// Trains with Adam on next-token cross-entropy. Sequences must start with BOS.
pub fn train_lm(
    model: &TransformerModel,
    corpus: &[Vec<usize>],
    cfg: &LmTrainConfig,
) -> Result<(TransformerModel, LmTrainReport)> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let data: Vec<&Vec<usize>> = corpus.iter().filter(|s| s.len() >= 2).collect();
    for s in &data {
        model.check_tokens(s)?;
    }
    let names: Vec<String> = model.params().keys().cloned().collect();
    let shapes: Vec<Vec<usize>> = names.iter().map(|k| model.param(k).shape().to_vec()).collect();
    let mut flat: Vec<f64> = names.iter().flat_map(|k| model.param(k).data().to_vec()).collect();
    let mut opt = Adam::new(flat.len());
    let mut r = rng(cfg.rng_seed);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut current = model.clone();
    let mut report = LmTrainReport {
        epoch_loss: Vec::new(),
        steps: 0,
        diverged: None,
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| sequence_loss_grad(&current, data[i], &names))
                .collect::<Result<_>>()?;
            let n_tok: usize = batch.iter().map(|&i| data[i].len() - 1).sum();
            let mut grad = vec![0.0; flat.len()];
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let scale = 1.0 / n_tok as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                report.diverged = Some(format!(
                    "non-finite loss or gradient at epoch {epoch}, step {}",
                    report.steps
                ));
                break 'epochs;
            }
            if cfg.grad_clip > 0.0 {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > cfg.grad_clip {
                    let s = cfg.grad_clip / norm;
                    grad.iter_mut().for_each(|g| *g *= s);
                }
            }
            let lr = warmup_linear(report.steps, total_steps, cfg.warmup_steps, cfg.lr, cfg.lr_floor);
            let mut next = flat.clone();
            opt.step(&mut next, &grad, lr);
            if next.iter().any(|v| !v.is_finite()) {
                report.diverged = Some(format!("non-finite parameters after step {}", report.steps));
                break 'epochs;
            }
            flat = next;
            current.set_params(unflatten(&names, &shapes, &flat));
            report.steps += 1;
            epoch_loss += loss;
            epoch_tokens += n_tok;
        }
        report.epoch_loss.push(epoch_loss / epoch_tokens.max(1) as f64);
    }
    Ok((current, report))
}

fn unflatten(names: &[String], shapes: &[Vec<usize>], flat: &[f64]) -> BTreeMap<String, Arc<Tensor>> {
    let mut out = BTreeMap::new();
    let mut off = 0;
    for (name, shape) in names.iter().zip(shapes) {
        let n: usize = shape.iter().product();
        let t = Tensor::new(shape.clone(), flat[off..off + n].to_vec()).expect("shape");
        out.insert(name.clone(), Arc::new(t));
        off += n;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny;

    #[test]
    fn one_step_reduces_loss_on_its_sentence() {
        let m = tiny();
        let corpus = vec![vec![0, 3, 5, 2, 7, 1]];
        let before = mean_cross_entropy(&m, &corpus).unwrap();
        let cfg = LmTrainConfig {
            epochs: 1,
            batch_size: 1,
            lr: 1e-2,
            warmup_steps: 0,
            ..LmTrainConfig::default()
        };
        let (trained, report) = train_lm(&m, &corpus, &cfg).unwrap();
        assert_eq!(report.steps, 1);
        assert!(mean_cross_entropy(&trained, &corpus).unwrap() < before);
    }

    #[test]
    fn invalid_config_lists_all_errors() {
        let cfg = LmTrainConfig {
            epochs: 0,
            batch_size: 0,
            ..LmTrainConfig::default()
        };
        match train_lm(&tiny(), &[vec![0, 1]], &cfg) {
            Err(Error::Config(e)) => assert_eq!(e.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unigram_baseline_of_uniform_data() {
        let train = vec![vec![0, 1, 2], vec![0, 2, 1]];
        let ce = unigram_cross_entropy(&train, &train, 3);
        // counts with add-one: [1, 3, 3] / 7
        assert!((ce - (7.0f64 / 3.0).ln()).abs() < 1e-12);
    }
}
