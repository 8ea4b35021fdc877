//! Trains a sparse autoencoder on data built from a known dictionary and
//! reports how closely the learned decoder directions match it.
//!
//! `cargo run --release --example planted_sae`

use gpmech::model::SubmoduleId;
use gpmech::sae::{mean_max_cosine, planted_dictionary, train_sae, SaeTrainConfig};

fn main() -> gpmech::Result<()> {
    let planted = planted_dictionary(64, 256, 5, 20_000, 0)?;
    for lambda in [0.01, 0.05, 0.2] {
        let cfg = SaeTrainConfig {
            d_features: 256,
            sparsity_weight: lambda,
            steps: 3000,
            ..SaeTrainConfig::default()
        };
        let (sae, m) = train_sae(&planted.data, SubmoduleId::EMBEDDING, &cfg)?;
        println!(
            "λ {lambda:<5} mean max cosine {:.4}  L0 {:5.1}  variance explained {:.4}  resampled {}",
            mean_max_cosine(&sae, &planted.dictionary)?,
            m.mean_l0,
            m.variance_explained,
            m.resampled
        );
    }
    Ok(())
}
