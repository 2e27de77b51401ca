//! Shared domain types flowing between the pipeline stages.

use std::path::PathBuf;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

/// One labeled instance moving through the pipeline.
///
/// `input` holds the canonical input fields (after field mapping); any
/// extra dataset columns land in `extras` so prompt templates can
/// reference them by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSample {
    pub sample_id: String,
    pub input: IndexMap<String, String>,
    pub label: String,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub extras: IndexMap<String, String>,
}

impl DataSample {
    /// Convenience constructor for a sample with a single `input` field.
    pub fn simple(sample_id: &str, input: &str, label: &str) -> Self {
        let mut fields = IndexMap::new();
        fields.insert("input".to_string(), input.to_string());
        Self {
            sample_id: sample_id.to_string(),
            input: fields,
            label: label.to_string(),
            extras: IndexMap::new(),
        }
    }

    /// The canonical input text.
    pub fn input_text(&self) -> &str {
        self.input.get("input").map(String::as_str).unwrap_or("")
    }

    /// Look up a field by name, preferring canonical input fields over extras.
    pub fn field(&self, name: &str) -> Option<&str> {
        self.input
            .get(name)
            .or_else(|| self.extras.get(name))
            .map(String::as_str)
    }
}

/// A single message in a chat-style prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".to_string(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".to_string(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: "assistant".to_string(),
            content: content.into(),
        }
    }
}

/// Run-level knobs that apply across assets, as opposed to the per-asset
/// recipe. Mirrors the CLI surface.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentParams {
    pub benchmark_dir: PathBuf,
    pub results_dir: PathBuf,
    /// Wildcard pattern matched against asset names (`*` and `?`).
    pub asset_filter: String,
    pub n_shots: u32,
    /// Evaluate only the first `n` samples of each test set.
    pub limit: Option<usize>,
    /// Skip cache reads (cache writes still happen).
    pub ignore_cache: bool,
    /// Worker threads per asset run.
    pub max_parallel: usize,
    pub seed: u64,
}

impl ExperimentParams {
    pub fn new(benchmark_dir: impl Into<PathBuf>, results_dir: impl Into<PathBuf>) -> Self {
        Self {
            benchmark_dir: benchmark_dir.into(),
            results_dir: results_dir.into(),
            asset_filter: "*".to_string(),
            n_shots: 0,
            limit: None,
            ignore_cache: false,
            max_parallel: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_parallel == 0 {
            return Err("max_parallel must be at least 1".to_string());
        }
        if self.limit == Some(0) {
            return Err("limit must be at least 1 when given".to_string());
        }
        Ok(())
    }
}

/// Outcome of scoring one run: metric values plus bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    /// Metric name to value, in a stable reporting order.
    pub metrics: IndexMap<String, f64>,
    /// Number of (gold, predicted) pairs the run produced, including failed
    /// predictions.
    pub num_processed: usize,
    /// Predictions that post-processing could not map to a usable value.
    pub num_failed_postprocess: usize,
    /// Unix seconds when the evaluation was computed.
    pub timestamp: u64,
    /// Digest of the parameters that produced these predictions.
    pub params_digest: String,
    /// Auxiliary facts about the evaluation (absent classes, primary metric).
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub extras: IndexMap<String, serde_json::Value>,
}

impl EvaluationResult {
    /// The metric named by `extras["primary_metric"]`, when present.
    pub fn primary_metric(&self) -> Option<(&str, f64)> {
        let name = self.extras.get("primary_metric")?.as_str()?;
        let value = *self.metrics.get(name)?;
        Some((name, value))
    }
}

pub fn unix_timestamp() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
