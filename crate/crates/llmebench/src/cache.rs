//! Response caching and offline reprocessing.
//!
//! Every model call is persisted as one human-inspectable JSON file under
//! `<results_dir>/<asset>/<n_shots>_shot/cache/`, keyed by sample id. A
//! cached entry is only reused when its parameter digest matches the
//! current run, so changing anything that shapes responses transparently
//! invalidates the cache. Entries are written atomically (temp file, then
//! rename) and unparseable files are quarantined, never trusted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assets::Asset;
use crate::evaluation::{evaluate_with, EvalError};
use crate::providers::summarize_response;
use crate::types::{ChatMessage, DataSample, EvaluationResult};

pub const CACHE_SCHEMA_VERSION: u32 = 1;

/// One cached model interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub schema_version: u32,
    pub sample_id: String,
    pub params_digest: String,
    pub rendered_prompt: Vec<ChatMessage>,
    /// The provider payload exactly as received; summarization can always
    /// be re-applied to it.
    pub raw_payload: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summarized: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<String>,
    pub attempts_used: u32,
    pub created_at: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub few_shot_ids: Vec<String>,
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache storage: {0}")]
    Storage(#[from] std::io::Error),
    #[error("no cached responses found under {0}")]
    NoCachedRun(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// The cache directory for one (asset, n_shots) combination.
pub struct CacheStore {
    dir: PathBuf,
}

impl CacheStore {
    /// Open (creating if needed) the cache for `asset_name` at `n_shots`.
    pub fn open(results_dir: &Path, asset_name: &str, n_shots: u32) -> Result<Self, CacheError> {
        let dir = results_dir
            .join(asset_name)
            .join(format!("{n_shots}_shot"))
            .join("cache");
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entry_path(&self, sample_id: &str) -> PathBuf {
        self.dir.join(format!("{}.json", sanitize_id(sample_id)))
    }

    /// Fetch the cached entry for `sample_id` if it exists and was produced
    /// under the same parameter digest. Corrupt files are renamed aside
    /// with a `.corrupt` suffix and treated as misses; storage failures
    /// propagate.
    pub fn lookup(
        &self,
        sample_id: &str,
        params_digest: &str,
    ) -> Result<Option<CacheEntry>, CacheError> {
        let path = self.entry_path(sample_id);
        let raw = match std::fs::read_to_string(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };

        let entry: CacheEntry = match serde_json::from_str(&raw) {
            Ok(entry) => entry,
            Err(e) => {
                let quarantine = path.with_extension("json.corrupt");
                log::warn!("quarantining corrupt cache entry {} ({e})", path.display());
                std::fs::rename(&path, &quarantine)?;
                return Ok(None);
            }
        };

        if entry.schema_version != CACHE_SCHEMA_VERSION {
            log::warn!(
                "cache entry {} has schema version {}, expected {}; ignoring it",
                path.display(),
                entry.schema_version,
                CACHE_SCHEMA_VERSION
            );
            return Ok(None);
        }
        if entry.sample_id != sample_id || entry.params_digest != params_digest {
            return Ok(None);
        }
        Ok(Some(entry))
    }

    /// Persist an entry atomically: readers never observe a partial file,
    /// and the data is flushed to disk before the write is considered done.
    pub fn store_entry(&self, entry: &CacheEntry) -> Result<(), CacheError> {
        let path = self.entry_path(&entry.sample_id);
        let tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        serde_json::to_writer_pretty(&tmp, entry).map_err(std::io::Error::other)?;
        tmp.as_file().sync_all()?;
        tmp.persist(&path).map_err(|e| e.error)?;
        Ok(())
    }
}

/// Keep cache file names readable for simple ids while staying safe and
/// collision-free for arbitrary ones: unsafe bytes are percent-encoded.
fn sanitize_id(sample_id: &str) -> String {
    let mut out = String::with_capacity(sample_id.len());
    for byte in sample_id.bytes() {
        match byte {
            b'a'..=b'z' | b'A'..=b'Z' | b'0'..=b'9' | b'-' | b'_' | b'.' => out.push(byte as char),
            _ => out.push_str(&format!("%{byte:02X}")),
        }
    }
    out
}

/// Outcome of re-deriving predictions from cached payloads.
pub struct ReprocessOutcome {
    pub evaluation: EvaluationResult,
    /// Samples whose cached entries were found and reprocessed.
    pub entries_found: usize,
    /// Sample ids with no usable cache entry.
    pub missing: Vec<String>,
}

/// Re-run summarization and post-processing over cached payloads, without
/// any model calls, and re-evaluate. Updated predictions are written back
/// to the cache. Errors with [`CacheError::NoCachedRun`] when nothing is
/// cached for this digest.
pub fn reprocess(
    store: &CacheStore,
    asset: &dyn Asset,
    samples: &[DataSample],
    params_digest: &str,
) -> Result<ReprocessOutcome, CacheError> {
    let mut predictions: Vec<Option<String>> = Vec::with_capacity(samples.len());
    let mut entries_found = 0usize;
    let mut missing = Vec::new();

    for sample in samples {
        match store.lookup(&sample.sample_id, params_digest)? {
            Some(mut entry) => {
                entries_found += 1;
                let summarized = summarize_response(&entry.raw_payload).ok();
                let prediction = summarized
                    .as_deref()
                    .and_then(|text| asset.post_process(text));
                entry.summarized = summarized;
                entry.prediction = prediction.clone();
                store.store_entry(&entry)?;
                predictions.push(prediction);
            }
            None => {
                missing.push(sample.sample_id.clone());
                predictions.push(None);
            }
        }
    }

    if entries_found == 0 {
        return Err(CacheError::NoCachedRun(store.dir.display().to_string()));
    }

    let gold: Vec<String> = samples.iter().map(|s| s.label.clone()).collect();
    let mut evaluation = evaluate_with(
        &asset.recipe().task,
        &gold,
        &predictions,
        asset.custom_task(),
    )?;
    evaluation.params_digest = params_digest.to_string();

    Ok(ReprocessOutcome {
        evaluation,
        entries_found,
        missing,
    })
}
