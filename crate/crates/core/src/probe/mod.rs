//! Arc-standard parse-action probes over residual-stream states.

mod action_probe;
mod parser;
mod tree;

pub use action_probe::{
    eval_probe, hidden_states, probe_reading, random_baseline, train_probe, ActionProbe, ProbeEpoch, ProbeEval,
    ProbeMeta, ProbeObjective, ProbeTrainConfig,
};
pub use parser::{attaching_action, decode, oracle_actions, oracle_states, replay, Action, ParserState};
pub use tree::DepTree;
