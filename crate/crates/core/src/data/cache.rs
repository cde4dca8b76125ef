use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{dataset_hash, PreferenceExample};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::policy::ToyPolicy;
use crate::prefmath::{check_log_prob, PairRefLogProbs};

pub const CACHE_VERSION: u32 = 1;
const CACHE_FORMAT: &str = "mrpo-refcache";

/// Frozen reference log-probabilities for every example of one dataset.
///
/// Values are stored row-major as `[example][reference][chosen, rejected]`.
/// Reference 0 is the initializing reference.
#[derive(Debug, Clone, PartialEq)]
pub struct RefLogProbCache {
    dataset_hash: String,
    reference_ids: Vec<String>,
    n_examples: usize,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    format: String,
    format_version: u32,
    dataset_hash: String,
    reference_ids: Vec<String>,
    n_examples: usize,
    layout: String,
    byte_order: String,
    eos_appended: bool,
}

impl RefLogProbCache {
    pub fn new(dataset_hash: String, reference_ids: Vec<String>, n_examples: usize, values: Vec<f64>) -> Result<Self> {
        if reference_ids.is_empty() {
            return Err(Error::InvalidArgument("cache needs at least one reference".into()));
        }
        if values.len() != 2 * reference_ids.len() * n_examples {
            return Err(Error::Integrity(format!(
                "expected {} cached values, found {}",
                2 * reference_ids.len() * n_examples,
                values.len()
            )));
        }
        for &v in &values {
            check_log_prob(v).map_err(|e| Error::Integrity(e.to_string()))?;
        }
        Ok(RefLogProbCache {
            dataset_hash,
            reference_ids,
            n_examples,
            values,
        })
    }

    pub fn dataset_hash(&self) -> &str {
        &self.dataset_hash
    }

    pub fn reference_ids(&self) -> &[String] {
        &self.reference_ids
    }

    pub fn k(&self) -> usize {
        self.reference_ids.len()
    }

    pub fn len(&self) -> usize {
        self.n_examples
    }

    pub fn is_empty(&self) -> bool {
        self.n_examples == 0
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `(chosen, rejected)` log-probability of example `i` under reference `k`.
    pub fn get(&self, i: usize, k: usize) -> (f64, f64) {
        let at = 2 * (i * self.k() + k);
        (self.values[at], self.values[at + 1])
    }

    pub fn pair_refs(&self, i: usize) -> PairRefLogProbs {
        let (chosen, rejected) = (0..self.k()).map(|k| self.get(i, k)).unzip();
        PairRefLogProbs::new(chosen, rejected).expect("cache values were validated on construction")
    }

    /// Keep only the listed references, in the given order.
    pub fn select_references(&self, keep: &[usize]) -> Result<Self> {
        if let Some(bad) = keep.iter().find(|&&k| k >= self.k()) {
            return Err(Error::InvalidArgument(format!("reference index {bad} out of range")));
        }
        let mut values = Vec::with_capacity(2 * keep.len() * self.n_examples);
        for i in 0..self.n_examples {
            for &k in keep {
                let (c, r) = self.get(i, k);
                values.extend([c, r]);
            }
        }
        RefLogProbCache::new(
            self.dataset_hash.clone(),
            keep.iter().map(|&k| self.reference_ids[k].clone()).collect(),
            self.n_examples,
            values,
        )
    }

    /// Apply `f(example, reference, chosen, rejected) -> (chosen, rejected)`
    /// to every entry. Used to build perturbed fixtures.
    pub fn map_values<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, usize, f64, f64) -> (f64, f64),
    {
        let mut values = self.values.clone();
        for i in 0..self.n_examples {
            for k in 0..self.k() {
                let at = 2 * (i * self.k() + k);
                let (c, r) = f(i, k, values[at], values[at + 1]);
                values[at] = c;
                values[at + 1] = r;
            }
        }
        RefLogProbCache::new(
            self.dataset_hash.clone(),
            self.reference_ids.clone(),
            self.n_examples,
            values,
        )
    }

    /// Reject a cache built for a different dataset.
    pub fn check_dataset(&self, dataset: &[PreferenceExample]) -> Result<()> {
        let hash = dataset_hash(dataset);
        if hash != self.dataset_hash {
            return Err(Error::Integrity(format!(
                "cache was built for dataset {} but data hashes to {hash}",
                self.dataset_hash
            )));
        }
        if dataset.len() != self.n_examples {
            return Err(Error::Integrity(format!(
                "cache covers {} examples, dataset has {}",
                self.n_examples,
                dataset.len()
            )));
        }
        Ok(())
    }

    /// A copy in which reference `k` adds `offset` to the log-probability of
    /// every token of each rejected output, end-of-sequence included. With a
    /// large negative offset this is a reference far more certain than the
    /// others that every rejected output is bad.
    pub fn with_rejected_token_offset(&self, dataset: &[PreferenceExample], k: usize, offset: f64) -> Result<Self> {
        self.check_dataset(dataset)?;
        if k >= self.k() {
            return Err(Error::InvalidArgument(format!("reference index {k} out of range")));
        }
        self.map_values(|i, j, c, r| {
            if j == k {
                (c, r + offset * (dataset[i].rejected.chars().count() + 1) as f64)
            } else {
                (c, r)
            }
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CacheHeader {
            format: CACHE_FORMAT.into(),
            format_version: CACHE_VERSION,
            dataset_hash: self.dataset_hash.clone(),
            reference_ids: self.reference_ids.clone(),
            n_examples: self.n_examples,
            layout: "example,reference,[chosen,rejected]".into(),
            byte_order: "little".into(),
            eos_appended: true,
        };
        let mut bytes = serde_json::to_vec(&header).expect("header serializes");
        bytes.push(b'\n');
        bytes.extend(fsutil::f64s_to_le(&self.values));
        bytes
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fsutil::read(path)?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (head, body) = fsutil::split_header(bytes, path)?;
        let header: CacheHeader = serde_json::from_slice(&head)
            .map_err(|e| Error::Format(format!("{}: bad cache header: {e}", path.display())))?;
        if header.format != CACHE_FORMAT {
            return Err(Error::Format(format!("{}: not a reference cache", path.display())));
        }
        if header.format_version != CACHE_VERSION {
            return Err(Error::Format(format!(
                "{}: cache version {} is not supported (expected {CACHE_VERSION})",
                path.display(),
                header.format_version
            )));
        }
        if header.byte_order != "little" {
            return Err(Error::Format(format!("{}: unsupported byte order", path.display())));
        }
        let values = fsutil::le_to_f64s(&body, path)?;
        RefLogProbCache::new(header.dataset_hash, header.reference_ids, header.n_examples, values)
    }
}

/// Score every (example, reference, output) triple. Outputs are scored with
/// end-of-sequence appended. Deterministic regardless of thread count.
pub fn score_references(dataset: &[PreferenceExample], references: &[(String, &ToyPolicy)]) -> Result<RefLogProbCache> {
    let first = references
        .first()
        .ok_or_else(|| Error::InvalidArgument("need at least one reference".into()))?;
    for (id, policy) in references {
        if policy.vocab() != first.1.vocab() {
            return Err(Error::InvalidArgument(format!(
                "reference {id:?} uses a different vocabulary than {:?}",
                first.0
            )));
        }
    }
    let vocab = first.1.vocab();
    let rows: Vec<Vec<f64>> = dataset
        .par_iter()
        .map(|ex| {
            let prompt = vocab.encode(&ex.prompt)?;
            let chosen = vocab.encode_output(&ex.chosen)?;
            let rejected = vocab.encode_output(&ex.rejected)?;
            let mut row = Vec::with_capacity(2 * references.len());
            for (_, policy) in references {
                row.push(policy.logprob(&prompt, &chosen)?);
                row.push(policy.logprob(&prompt, &rejected)?);
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    RefLogProbCache::new(
        dataset_hash(dataset),
        references.iter().map(|(id, _)| id.clone()).collect(),
        dataset.len(),
        rows.concat(),
    )
}

/// Reuse the cache at `path` if it matches the dataset and reference ids;
/// otherwise rebuild it from scratch and write it. Returns whether it was rebuilt.
pub fn load_or_score(
    path: &Path,
    dataset: &[PreferenceExample],
    references: &[(String, &ToyPolicy)],
) -> Result<(RefLogProbCache, bool)> {
    if path.exists() {
        if let Ok(cache) = RefLogProbCache::read(path) {
            let ids_match = cache.reference_ids().iter().eq(references.iter().map(|(id, _)| id));
            if ids_match && cache.check_dataset(dataset).is_ok() {
                return Ok((cache, false));
            }
        }
    }
    let cache = score_references(dataset, references)?;
    cache.write(path)?;
    Ok((cache, true))
}
