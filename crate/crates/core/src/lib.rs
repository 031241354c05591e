//! A hookable toy transformer together with the causal-intervention and
//! circuit-evaluation machinery used to study function induction: path and
//! activation patching, head ablation, logit lens, function-vector injection
//! and faithfulness/completeness/minimality scoring, plus the counterfactual
//! task families they run on.

pub mod analysis;
pub mod circuits;
pub mod error;
pub mod interventions;
pub mod model;
pub mod tasks;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{
    forward, forward_cached, forward_intervened, load_model, save_model, ActivationCache,
    InterventionPlan, Model, ModelConfig, NodeKind, NodeRef, PatchSources, Positions,
};
pub use tokenizer::{PositionMap, TokenId, TokenSeq, Vocab};
pub use tasks::{PromptPair, TaskKind, TaskSpec};

/// Seeded generator used for every randomized operation in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    rand::SeedableRng::seed_from_u64(seed)
}
