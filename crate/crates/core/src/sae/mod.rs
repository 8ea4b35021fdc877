//! Sparse autoencoders over submodule activations and their splicing into
//! the model.

mod params;
mod planted;
mod splice;
mod train;

pub use planted::{mean_max_cosine, planted_dictionary, PlantedDictionary};
pub use params::{SaeMeta, SaeParams, SaeSet};
pub use splice::{CleanRun, CleanSite, SplicedModel};
pub use train::{collect_activations, top_decile_mean, train_sae, SaeMetrics, SaeTrainConfig};
