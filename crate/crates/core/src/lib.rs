//! Interactive intent refinement.
//!
//! A complex natural-language request is parsed into a [`SemanticFrame`];
//! missing preference slots are then elicited step by step by a contextual
//! bandit per (topic, intent) until the Intent Completion Score crosses the
//! intent's stopping threshold, after which sub-queries are issued and the
//! results ranked. Query performance predictors and off-policy estimators
//! evaluate the refinement offline, and a synthetic user simulator drives the
//! whole loop without proprietary data.

pub mod bandit;
pub mod embedding;
pub mod error;
pub mod frame;
pub mod http;
pub mod nlu;
pub mod ope;
pub mod ontology;
pub mod profile;
pub mod qpp;
pub mod retrieval;
pub mod rng;
pub mod session;
pub mod simulator;
pub mod stats;
pub mod text;

#[cfg(test)]
pub(crate) mod fixtures;

pub use error::{Error, Result};
pub use frame::{MentionedSlot, Provenance, SemanticFrame};
pub use ontology::{AspectValue, Intent, IntentKey, IntentOntology, Slot, Topic};
pub use profile::{should_continue, IntentProfile, SharedProfile};
