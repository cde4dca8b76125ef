//! Preference data: JSON Lines ingestion, reference log-probability caches
//! and the planted-reward synthetic generator.

mod cache;
mod dataset;
pub mod synthetic;

pub use cache::{load_or_score, score_references, RefLogProbCache, CACHE_VERSION};
pub use dataset::{dataset_hash, load_preference_file, to_jsonl, write_preference_file, PreferenceExample};
pub use synthetic::{generate_synthetic, PlantedReward, SyntheticData, SyntheticSpec};
