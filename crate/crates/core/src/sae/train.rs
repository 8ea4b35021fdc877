use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::params::{SaeMeta, SaeParams};
use crate::error::{Error, Result};
use crate::model::{SubmoduleId, TransformerModel};
use crate::numerics::kernels::{matmul, matmul_nt, matmul_tn};
use crate::numerics::optim::{warmup_linear, Adam};
use crate::numerics::{randn, rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeTrainConfig {
    pub d_features: usize,
    /// Weight λ of the L1 penalty on features.
    pub sparsity_weight: f64,
    pub lr: f64,
    pub warmup_steps: usize,
    pub lr_floor: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Reinitialise features that stay silent for a full pass over the data.
    pub resample_dead: bool,
    pub rng_seed: u64,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        SaeTrainConfig {
            d_features: 1024,
            sparsity_weight: 0.05,
            lr: 1e-3,
            warmup_steps: 100,
            lr_floor: 0.1,
            steps: 4000,
            batch_size: 256,
            resample_dead: true,
            rng_seed: 0,
        }
    }
}

impl SaeTrainConfig {
    pub fn validate(&self, d_model: usize) -> Vec<String> {
        let mut errs = Vec::new();
        if self.d_features < d_model {
            errs.push(format!(
                "sae.train.d_features ({}) must be at least d_model ({d_model})",
                self.d_features
            ));
        }
        if !(self.sparsity_weight >= 0.0 && self.sparsity_weight.is_finite()) {
            errs.push("sae.train.sparsity_weight must be a finite non-negative number".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push("sae.train.lr must be positive".into());
        }
        if self.steps == 0 {
            errs.push("sae.train.steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            errs.push("sae.train.batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            errs.push("sae.train.lr_floor must lie in [0, 1]".into());
        }
        errs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeMetrics {
    /// `mean ‖x - x̂‖² + λ mean ‖f‖₁` over the whole dataset.
    pub loss: f64,
    pub mean_l0: f64,
    pub variance_explained: f64,
    pub top_decile_activation: f64,
    pub resampled: usize,
}

/// Activations at `site` for every position of every sequence, stacked as rows.
pub fn collect_activations(model: &TransformerModel, corpus: &[Vec<usize>], site: SubmoduleId) -> Result<Tensor> {
    site.validate(model.config.n_layers)?;
    let rows: Vec<Vec<f64>> = corpus
        .par_iter()
        .map(|s| Ok(model.forward(s)?.activation(&site)?.data().to_vec()))
        .collect::<Result<_>>()?;
    let d = model.config.d_model;
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    Tensor::new(vec![data.len() / d, d], data)
}

/// Mean of the largest tenth of the nonzero entries.
pub fn top_decile_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut nz: Vec<f64> = values.into_iter().filter(|v| *v > 0.0).collect();
    if nz.is_empty() {
        return 0.0;
    }
    nz.sort_by(|a, b| b.total_cmp(a));
    let k = nz.len().div_ceil(10);
    nz[..k].iter().sum::<f64>() / k as f64
}

struct Weights {
    d: usize,
    f: usize,
    w_enc: Vec<f64>,
    b_enc: Vec<f64>,
    w_dec: Vec<f64>,
    b_dec: Vec<f64>,
}

struct Pass {
    centered: Vec<f64>,
    pre: Vec<f64>,
    feats: Vec<f64>,
    resid: Vec<f64>,
}

impl Weights {
    fn forward(&self, x: &[f64]) -> Pass {
        let (d, f) = (self.d, self.f);
        let n = x.len() / d;
        let mut centered = x.to_vec();
        for row in centered.chunks_mut(d) {
            for (c, b) in row.iter_mut().zip(&self.b_dec) {
                *c -= b;
            }
        }
        let mut pre = matmul(&centered, &self.w_enc, n, d, f);
        for row in pre.chunks_mut(f) {
            for (p, b) in row.iter_mut().zip(&self.b_enc) {
                *p += b;
            }
        }
        let feats: Vec<f64> = pre.iter().map(|&p| if p > 0.0 { p } else { 0.0 }).collect();
        let mut resid = matmul(&feats, &self.w_dec, n, f, d);
        for (i, row) in resid.chunks_mut(d).enumerate() {
            for j in 0..d {
                row[j] += self.b_dec[j] - x[i * d + j];
            }
        }
        Pass {
            centered,
            pre,
            feats,
            resid,
        }
    }

    /// Unit-norm decoder rows; the encoder absorbs the scale.
    fn normalize(&mut self) {
        let (d, f) = (self.d, self.f);
        for j in 0..f {
            let row = &mut self.w_dec[j * d..(j + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
                for i in 0..d {
                    self.w_enc[i * f + j] *= norm;
                }
                self.b_enc[j] *= norm;
            }
        }
    }
}

/// Trains an SAE minimising `‖x - x̂‖² + λ‖f‖₁` on the rows of `data`.
pub fn train_sae(data: &Tensor, site: SubmoduleId, cfg: &SaeTrainConfig) -> Result<(SaeParams, SaeMetrics)> {
    let (n, d) = data.dims2()?;
    let errs = cfg.validate(d);
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if n == 0 {
        return Err(Error::invalid("empty activation dataset"));
    }
    let f = cfg.d_features;
    let mut r = rng(cfg.rng_seed);
    let x = data.data();

    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let w_dec = randn(&mut r, &[f, d], 1.0).into_data();
    let mut w = Weights {
        d,
        f,
        w_enc: vec![0.0; d * f],
        b_enc: vec![0.0; f],
        w_dec,
        b_dec: mean,
    };
    for j in 0..f {
        let row = &mut w.w_dec[j * d..(j + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
        for i in 0..d {
            w.w_enc[i * f + j] = row[i];
        }
    }

    let mut opt_we = Adam::new(d * f);
    let mut opt_be = Adam::new(f);
    let mut opt_wd = Adam::new(f * d);
    let mut opt_bd = Adam::new(d);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let mut cursor = 0;
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut fired = vec![false; f];
    let mut resampled = 0;
    let mut batch = Vec::with_capacity(cfg.batch_size * d);

    for step in 0..cfg.steps {
        batch.clear();
        for _ in 0..cfg.batch_size.min(n) {
            if cursor == n {
                order.shuffle(&mut r);
                cursor = 0;
            }
            let i = order[cursor];
            batch.extend_from_slice(&x[i * d..(i + 1) * d]);
            cursor += 1;
        }
        let b = batch.len() / d;
        let pass = w.forward(&batch);
        for (j, fired) in fired.iter_mut().enumerate() {
            if !*fired {
                *fired = (0..b).any(|i| pass.feats[i * f + j] > 0.0);
            }
        }

        let scale = 2.0 / b as f64;
        let dxhat: Vec<f64> = pass.resid.iter().map(|r| r * scale).collect();
        let g_wdec = matmul_tn(&pass.feats, &dxhat, b, f, d);
        let mut g_bdec = vec![0.0; d];
        for row in dxhat.chunks(d) {
            for (g, v) in g_bdec.iter_mut().zip(row) {
                *g += v;
            }
        }
        let mut dpre = matmul_nt(&dxhat, &w.w_dec, b, d, f);
        let l1 = cfg.sparsity_weight / b as f64;
        for (g, &p) in dpre.iter_mut().zip(&pass.pre) {
            *g = if p > 0.0 { *g + l1 } else { 0.0 };
        }
        let g_wenc = matmul_tn(&pass.centered, &dpre, b, d, f);
        let mut g_benc = vec![0.0; f];
        for row in dpre.chunks(f) {
            for (g, v) in g_benc.iter_mut().zip(row) {
                *g += v;
            }
        }
        let back = matmul_nt(&dpre, &w.w_enc, b, f, d);
        for row in back.chunks(d) {
            for (g, v) in g_bdec.iter_mut().zip(row) {
                *g -= v;
            }
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !(finite(&g_wenc) && finite(&g_wdec) && finite(&g_benc) && finite(&g_bdec)) {
            return Err(Error::Numerical(format!(
                "SAE training at {site} diverged at step {step}: non-finite gradient"
            )));
        }
        let lr = warmup_linear(step, cfg.steps, cfg.warmup_steps, cfg.lr, cfg.lr_floor);
        opt_we.step(&mut w.w_enc, &g_wenc, lr);
        opt_be.step(&mut w.b_enc, &g_benc, lr);
        opt_wd.step(&mut w.w_dec, &g_wdec, lr);
        opt_bd.step(&mut w.b_dec, &g_bdec, lr);
        w.normalize();

        let epoch_end = (step + 1) % steps_per_epoch == 0;
        if epoch_end && cfg.resample_dead && step + 1 < cfg.steps {
            let dead: Vec<usize> = (0..f).filter(|&j| !fired[j]).collect();
            if !dead.is_empty() {
                resampled += dead.len();
                resample(&mut w, &dead, x, &mut r);
                for &j in &dead {
                    for i in 0..d {
                        opt_we.reset(i * f + j);
                        opt_wd.reset(j * d + i);
                    }
                    opt_be.reset(j);
                }
            }
            fired.iter_mut().for_each(|v| *v = false);
        }
    }

    let pass = w.forward(x);
    let mut sq_err = 0.0;
    let mut l1 = 0.0;
    let mut active = 0usize;
    for v in &pass.resid {
        sq_err += v * v;
    }
    for &v in &pass.feats {
        l1 += v;
        if v > 0.0 {
            active += 1;
        }
    }
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut total_var = 0.0;
    for row in x.chunks(d) {
        for (v, m) in row.iter().zip(&mean) {
            total_var += (v - m) * (v - m);
        }
    }
    let loss = (sq_err + cfg.sparsity_weight * l1) / n as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("SAE training at {site} produced a non-finite loss")));
    }
    let metrics = SaeMetrics {
        loss,
        mean_l0: active as f64 / n as f64,
        variance_explained: if total_var > 0.0 { 1.0 - sq_err / total_var } else { 1.0 },
        top_decile_activation: top_decile_mean(pass.feats.iter().copied()),
        resampled,
    };
    let meta = SaeMeta {
        site,
        d_model: d,
        d_features: f,
        sparsity_weight: cfg.sparsity_weight,
        top_decile_activation: metrics.top_decile_activation,
        steps: cfg.steps,
        rng_seed: cfg.rng_seed,
        final_loss: metrics.loss,
        mean_l0: metrics.mean_l0,
        variance_explained: metrics.variance_explained,
    };
    let sae = SaeParams::from_internal(
        meta,
        Tensor::new(vec![d, f], w.w_enc)?,
        Tensor::vector(w.b_enc),
        Tensor::new(vec![f, d], w.w_dec)?,
        Tensor::vector(w.b_dec),
    );
    Ok((sae, metrics))
}

/// Points dead features at poorly reconstructed inputs.
fn resample(w: &mut Weights, dead: &[usize], x: &[f64], r: &mut impl Rng) {
    let (d, f) = (w.d, w.f);
    let n = x.len() / d;
    let sample: Vec<usize> = (0..n.min(4096)).map(|_| r.random_range(0..n)).collect();
    let rows: Vec<f64> = sample.iter().flat_map(|&i| x[i * d..(i + 1) * d].to_vec()).collect();
    let pass = w.forward(&rows);
    let err: Vec<f64> = pass.resid.chunks(d).map(|r| r.iter().map(|v| v * v).sum()).collect();
    let total: f64 = err.iter().sum();
    let mut alive_norm = 0.0;
    let mut alive = 0;
    for j in 0..f {
        if !dead.contains(&j) {
            alive_norm += (0..d).map(|i| w.w_enc[i * f + j].powi(2)).sum::<f64>().sqrt();
            alive += 1;
        }
    }
    let enc_norm = if alive > 0 { alive_norm / alive as f64 } else { 1.0 } * 0.2;
    for &j in dead {
        // pick an input with probability proportional to its squared error
        let mut target = r.random::<f64>() * total;
        let mut pick = 0;
        for (k, e) in err.iter().enumerate() {
            target -= e;
            pick = k;
            if target <= 0.0 {
                break;
            }
        }
        let dir: Vec<f64> = pass.resid[pick * d..(pick + 1) * d].iter().map(|v| -v).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            continue;
        }
        for i in 0..d {
            w.w_dec[j * d + i] = dir[i] / norm;
            w.w_enc[i * f + j] = dir[i] / norm * enc_norm;
        }
        w.b_enc[j] = 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_decile_of_known_values() {
        let v = (1..=20).map(|i| i as f64).chain([0.0, 0.0]);
        assert_eq!(top_decile_mean(v), 19.5);
        assert_eq!(top_decile_mean([0.0, 0.0]), 0.0);
    }

    #[test]
    fn config_validation_is_exhaustive() {
        let cfg = SaeTrainConfig {
            d_features: 4,
            steps: 0,
            ..SaeTrainConfig::default()
        };
        assert_eq!(cfg.validate(8).len(), 2);
    }
}
