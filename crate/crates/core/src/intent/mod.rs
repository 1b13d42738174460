//! Intent candidates, the intent score network and probability assembly.

pub mod candidates;
pub mod distribution;
pub mod model;

pub use candidates::*;
pub use distribution::{assemble, top_k_indices, top_k_intents, IntentDistribution};
pub use model::{train_intent, IntentExample, IntentLabel, IntentScorer, IntentScorerConfig};
