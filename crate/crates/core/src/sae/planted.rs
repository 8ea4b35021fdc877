use rand::seq::index::sample;
use rand::Rng;

use super::SaeParams;
use crate::error::{Error, Result};
use crate::numerics::{randn, rng, Tensor};

/// Synthetic activations `x = D s + b` with exactly `k_active` nonzero,
/// positive entries per code `s`.
#[derive(Clone, Debug)]
pub struct PlantedDictionary {
    /// `[n_features, d_model]`, unit-norm rows.
    pub dictionary: Tensor,
    pub bias: Tensor,
    /// `[n_samples, d_model]`.
    pub data: Tensor,
}

pub fn planted_dictionary(
    d_model: usize,
    n_features: usize,
    k_active: usize,
    n_samples: usize,
    seed: u64,
) -> Result<PlantedDictionary> {
    if k_active == 0 || k_active > n_features {
        return Err(Error::invalid(format!("cannot activate {k_active} of {n_features} features")));
    }
    let mut r = rng(seed);
    let mut dict = randn(&mut r, &[n_features, d_model], 1.0);
    for row in dict.data_mut().chunks_mut(d_model) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    let bias = randn(&mut r, &[d_model], 0.1);
    let mut data = vec![0.0; n_samples * d_model];
    for x in data.chunks_mut(d_model) {
        x.copy_from_slice(bias.data());
        for j in sample(&mut r, n_features, k_active) {
            let s: f64 = r.random_range(0.5..1.5);
            for (xi, di) in x.iter_mut().zip(dict.row(j)) {
                *xi += s * di;
            }
        }
    }
    Ok(PlantedDictionary {
        dictionary: dict,
        bias,
        data: Tensor::new(vec![n_samples, d_model], data)?,
    })
}

/// Mean over true dictionary rows of the best cosine similarity with any
/// learned decoder direction.
pub fn mean_max_cosine(sae: &SaeParams, dictionary: &Tensor) -> Result<f64> {
    let (n, d) = dictionary.dims2()?;
    if d != sae.d_model() {
        return Err(Error::invalid(format!("dictionary width {d} != SAE d_model {}", sae.d_model())));
    }
    let learned: Vec<Vec<f64>> = (0..sae.d_features())
        .map(|j| {
            let col = sae.decoder_direction(j);
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            col.iter().map(|v| v / norm.max(f64::MIN_POSITIVE)).collect()
        })
        .collect();
    let total: f64 = (0..n)
        .map(|i| {
            let t = dictionary.row(i);
            let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            learned
                .iter()
                .map(|l| l.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / norm)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    Ok(total / n as f64)
}
