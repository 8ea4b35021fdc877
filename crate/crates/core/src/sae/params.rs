use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SubmoduleId;
use crate::numerics::{container, kernels, Tensor};

/// Sidecar metadata stored next to an SAE checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeMeta {
    pub site: SubmoduleId,
    pub d_model: usize,
    pub d_features: usize,
    pub sparsity_weight: f64,
    /// Mean of the top decile of nonzero activations on the training data.
    pub top_decile_activation: f64,
    pub steps: usize,
    pub rng_seed: u64,
    pub final_loss: f64,
    pub mean_l0: f64,
    pub variance_explained: f64,
}

/// Encoder/decoder weights of one sparse autoencoder.
///
/// Stored transposed for row-major kernels: `w_enc` is `[d_model, d_features]`
/// and `w_dec` is `[d_features, d_model]`, so row `i` of `w_dec` is the
/// decoder direction of feature `i`.
#[derive(Clone, Debug)]
pub struct SaeParams {
    pub meta: SaeMeta,
    pub(crate) w_enc: Arc<Tensor>,
    pub(crate) b_enc: Arc<Tensor>,
    pub(crate) w_dec: Arc<Tensor>,
    pub(crate) b_dec: Arc<Tensor>,
    pub(crate) neg_b_dec: Arc<Tensor>,
}

impl SaeParams {
    /// Builds an SAE from weights in the `W_e [F, d]`, `W_d [d, F]` convention.
    pub fn from_weights(site: SubmoduleId, w_e: &Tensor, b_e: &Tensor, w_d: &Tensor, b_d: &Tensor) -> Result<Self> {
        let (f, d) = w_e.dims2()?;
        if w_d.shape() != [d, f] || b_e.shape() != [f] || b_d.shape() != [d] {
            return Err(Error::invalid("inconsistent SAE weight shapes"));
        }
        let w_enc = transpose(w_e)?;
        let w_dec = transpose(w_d)?;
        Ok(Self::from_internal(
            SaeMeta {
                site,
                d_model: d,
                d_features: f,
                sparsity_weight: 0.0,
                top_decile_activation: 1.0,
                steps: 0,
                rng_seed: 0,
                final_loss: f64::NAN,
                mean_l0: f64::NAN,
                variance_explained: f64::NAN,
            },
            w_enc,
            b_e.clone(),
            w_dec,
            b_d.clone(),
        ))
    }

    pub(crate) fn from_internal(meta: SaeMeta, w_enc: Tensor, b_enc: Tensor, w_dec: Tensor, b_dec: Tensor) -> Self {
        let neg = Tensor::vector(b_dec.data().iter().map(|v| -v).collect());
        SaeParams {
            meta,
            w_enc: Arc::new(w_enc),
            b_enc: Arc::new(b_enc),
            w_dec: Arc::new(w_dec),
            b_dec: Arc::new(b_dec),
            neg_b_dec: Arc::new(neg),
        }
    }

    /// Untrained SAE with unit-norm random decoder rows and the encoder set to
    /// the decoder transpose, for tests and smoke runs.
    pub fn random(site: SubmoduleId, d_model: usize, d_features: usize, seed: u64) -> Self {
        let mut rng = crate::numerics::rng(seed);
        let mut w_dec = crate::numerics::randn(&mut rng, &[d_features, d_model], 1.0);
        for row in w_dec.data_mut().chunks_mut(d_model) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let w_enc = transpose(&w_dec).expect("matrix");
        let b_enc = crate::numerics::randn(&mut rng, &[d_features], 0.1);
        let meta = SaeMeta {
            site,
            d_model,
            d_features,
            sparsity_weight: 0.0,
            top_decile_activation: 1.0,
            steps: 0,
            rng_seed: seed,
            final_loss: f64::NAN,
            mean_l0: f64::NAN,
            variance_explained: f64::NAN,
        };
        Self::from_internal(meta, w_enc, b_enc, w_dec, Tensor::zeros(&[d_model]))
    }

    pub fn site(&self) -> SubmoduleId {
        self.meta.site
    }

    pub fn d_model(&self) -> usize {
        self.meta.d_model
    }

    pub fn d_features(&self) -> usize {
        self.meta.d_features
    }

    /// `W_e` as `[d_features, d_model]`.
    pub fn w_e(&self) -> Tensor {
        transpose(&self.w_enc).expect("matrix")
    }

    /// `W_d` as `[d_model, d_features]`.
    pub fn w_d(&self) -> Tensor {
        transpose(&self.w_dec).expect("matrix")
    }

    pub fn b_e(&self) -> &Tensor {
        &self.b_enc
    }

    pub fn b_d(&self) -> &Tensor {
        &self.b_dec
    }

    /// Decoder direction of one feature (a column of `W_d`).
    pub fn decoder_direction(&self, feature: usize) -> &[f64] {
        self.w_dec.row(feature)
    }

    /// `f = ReLU(W_e (x - b_d) + b_e)` for each row of `x`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        if d != self.d_model() {
            return Err(Error::invalid(format!("activation width {d}, SAE expects {}", self.d_model())));
        }
        let f = self.d_features();
        let mut centered = x.data().to_vec();
        for row in centered.chunks_mut(d) {
            for (c, &nb) in row.iter_mut().zip(self.neg_b_dec.data()) {
                *c += nb;
            }
        }
        let mut pre = kernels::matmul(&centered, self.w_enc.data(), n, d, f);
        for row in pre.chunks_mut(f) {
            for (p, &b) in row.iter_mut().zip(self.b_enc.data()) {
                *p += b;
                if !(*p > 0.0) {
                    *p = 0.0;
                }
            }
        }
        Tensor::new(vec![n, f], pre)
    }

    /// `x̂ = W_d f + b_d` for each row of `f`.
    pub fn decode(&self, f: &Tensor) -> Result<Tensor> {
        let (n, k) = f.dims2()?;
        if k != self.d_features() {
            return Err(Error::invalid(format!("feature width {k}, SAE has {}", self.d_features())));
        }
        let d = self.d_model();
        let mut out = kernels::matmul(f.data(), self.w_dec.data(), n, k, d);
        for row in out.chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(self.b_dec.data()) {
                *o += b;
            }
        }
        Tensor::new(vec![n, d], out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut m = BTreeMap::new();
        m.insert("W_e".to_string(), self.w_e());
        m.insert("b_e".to_string(), (*self.b_enc).clone());
        m.insert("W_d".to_string(), self.w_d());
        m.insert("b_d".to_string(), (*self.b_dec).clone());
        container::save(path, &m)?;
        std::fs::write(sidecar(path), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m = container::load(path)?;
        let side = sidecar(path);
        if !side.exists() {
            return Err(Error::MissingArtifact(side));
        }
        let meta: SaeMeta = serde_json::from_str(&std::fs::read_to_string(&side)?)?;
        let get = |k: &str| m.get(k).ok_or_else(|| Error::Container(format!("missing tensor `{k}`")));
        let mut sae = SaeParams::from_weights(meta.site, get("W_e")?, get("b_e")?, get("W_d")?, get("b_d")?)?;
        sae.meta = meta;
        Ok(sae)
    }
}

pub(crate) fn sidecar(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

pub(crate) fn transpose(t: &Tensor) -> Result<Tensor> {
    let (r, c) = t.dims2()?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

/// SAEs attached to a model, at most one per site.
#[derive(Clone, Debug, Default)]
pub struct SaeSet {
    saes: BTreeMap<SubmoduleId, Arc<SaeParams>>,
}

impl SaeSet {
    pub fn new() -> Self {
        SaeSet::default()
    }

    pub fn insert(&mut self, sae: SaeParams) -> Result<()> {
        let site = sae.site();
        if self.saes.contains_key(&site) {
            return Err(Error::invalid(format!("two SAEs at site {site}")));
        }
        self.saes.insert(site, Arc::new(sae));
        Ok(())
    }

    pub fn get(&self, site: &SubmoduleId) -> Option<&SaeParams> {
        self.saes.get(site).map(|s| s.as_ref())
    }

    pub fn sites(&self) -> impl Iterator<Item = SubmoduleId> + '_ {
        self.saes.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SubmoduleId, &SaeParams)> {
        self.saes.iter().map(|(k, v)| (k, v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.saes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.saes.is_empty()
    }

    pub fn d_features(&self, site: &SubmoduleId) -> Option<usize> {
        self.get(site).map(|s| s.d_features())
    }
}
