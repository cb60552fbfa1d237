//! Fairness-aware reference retrieval for human image generation.
//!
//! Given precomputed CLIP-style embeddings with demographic annotations,
//! this crate retrieves candidate reference images for a prompt, selects a
//! demographically balanced subset, packages projected reference tokens for
//! an external generator, and scores generated sets for demographic
//! diversity, text alignment and fidelity.
//!
//! | module | contents |
//! |--------|----------|
//! | [`demographics`] | age/gender/skin-tone groups and classifiers |
//! | [`store`] | embedding store, `FRG1` files, exact Top-N search |
//! | [`retrieval`] | debiased queries, group weights, balanced selection |
//! | [`conditioning`] | linear projector, bimodal prompts, backend bundles |
//! | [`metrics`] | normalized-entropy diversity, CLIP score, FID |
//! | [`fixtures`] | deterministic synthetic populations |
//! | [`prompts`] | the 80-prompt profession evaluation set |
//! | [`harness`] | file-level commands used by the `fairrag` binary |
//!
//! ```
//! use fairrag::retrieval::{balanced_select, DebiasedQuery};
//! use fairrag::fixtures::synth_skewed_pool;
//!
//! let q = DebiasedQuery::new("Photo of a doctor").unwrap();
//! assert_eq!(q.debiased_text, "Photo of a doctor with any age, gender, skin tone");
//!
//! let pool = synth_skewed_pool(0.8, 250, 32, 7).unwrap();
//! let picked = balanced_select(&pool.candidates(), 20, 7).unwrap();
//! assert_eq!(picked.chosen.len(), 20);
//! ```

pub mod conditioning;
pub mod config;
pub mod demographics;
pub mod fixtures;
pub mod harness;
pub mod metrics;
pub mod prompts;
pub mod retrieval;
pub mod store;

pub use conditioning::{ConditioningBundle, ProjectorWeights};
pub use config::RunConfig;
pub use demographics::{AgeGroup, Gender, IntersectionalGroup, MstPalette, SkinTone};
pub use metrics::{DiversityScores, EvalReport};
pub use retrieval::{DebiasedQuery, SelectionResult};
pub use store::{Candidate, EmbeddingStore};
