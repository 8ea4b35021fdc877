//! Synthetic grammar with gold trees, garden-path stimuli, and the
//! behavioural next-token evaluation.

mod behavior;
mod grammar;
mod io;
mod templates;

pub use behavior::{behavior_to_tsv, behavioral_eval, garden_path_ordering, stimulus_probabilities, BehaviorRow};
pub use grammar::{generate_corpus, GrammarSpec, Production};
pub use io::{
    corpus_to_string, read_stimuli, read_treebank, stimuli_from_tsv, stimuli_to_tsv, treebank_from_str,
    treebank_to_string, write_stimuli, write_treebank, STIMULUS_HEADER,
};
pub use templates::{
    default_templates, generate_stimuli, Condition, GardenPathTemplate, Stimulus, Structure, VerbTriple,
};
