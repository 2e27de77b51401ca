//! Run orchestration: recipe discovery, the per-sample pipeline, and
//! results reporting.
//!
//! One asset run flows dataset -> prompt -> (cache | provider) ->
//! post-process -> evaluate. Failures of individual samples are contained
//! and reported; only storage problems and setup errors abort a run.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assets::{validate_recipe, Asset, DeclarativeAsset, RecipeError};
use crate::cache::{reprocess, CacheEntry, CacheError, CacheStore, CACHE_SCHEMA_VERSION};
use crate::datasets::{load_dataset, resolve_dataset, DatasetError, DatasetSpec};
use crate::digest::params_digest;
use crate::evaluation::{evaluate_with, EvalError};
use crate::fewshot::{precompute_examples, ExamplePool, FewshotError};
use crate::providers::{summarize_response, Provider, ProviderError};
use crate::types::{unix_timestamp, DataSample, EvaluationResult, ExperimentParams};

pub const RESULTS_SCHEMA_VERSION: u32 = 1;

/// Environment variable overriding where downloaded datasets are cached.
pub const CACHE_ROOT_ENV: &str = "LLMEBENCH_CACHE_ROOT";

/// A sample the run could not produce a usable response for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub sample_id: String,
    pub error_class: String,
    pub detail: String,
}

/// Everything recorded about one asset run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub asset_name: String,
    pub n_shots: u32,
    pub params_digest: String,
    pub sample_count: usize,
    pub cache_hits: usize,
    /// Model invocations attempted, successful or not. Retries within one
    /// invocation do not add to this count.
    pub provider_calls: usize,
    pub elapsed_seconds: f64,
    pub evaluation: EvaluationResult,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<SampleFailure>,
}

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("no assets match filter {filter:?}; available: {available}")]
    NoAssetsMatched { filter: String, available: String },
    #[error("invalid run parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Recipe(#[from] RecipeError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Fewshot(#[from] FewshotError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("results storage: {0}")]
    Storage(#[from] std::io::Error),
}

impl DriverError {
    /// Process exit code for this failure: 2 when nothing matched the
    /// filter, 3 for anything run-fatal.
    pub fn exit_code(&self) -> i32 {
        match self {
            DriverError::NoAssetsMatched { .. } => 2,
            _ => 3,
        }
    }
}

/// Wildcard match: `*` spans any run of characters, `?` exactly one.
/// Matching is case-sensitive.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0usize, 0usize);
    let mut backtrack: Option<(usize, usize)> = None;

    while ti < t.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            backtrack = Some((pi, ti));
            pi += 1;
        } else if let Some((star_pi, star_ti)) = backtrack {
            pi = star_pi + 1;
            ti = star_ti + 1;
            backtrack = Some((star_pi, star_ti + 1));
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == '*' {
        pi += 1;
    }
    pi == p.len()
}

/// A recipe file found under the benchmark directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveredAsset {
    pub name: String,
    pub path: PathBuf,
}

/// Recursively scan `benchmark_dir` for recipe files and keep those whose
/// asset name matches `filter`. Hidden directories (including the dataset
/// download cache) are skipped; TOML files without a top-level `name` are
/// not recipes. Duplicate asset names are an error, and an empty match
/// reports what was available.
pub fn discover_assets(
    benchmark_dir: &Path,
    filter: &str,
) -> Result<Vec<DiscoveredAsset>, DriverError> {
    let mut recipe_files = Vec::new();
    collect_toml_files(benchmark_dir, &mut recipe_files)?;
    recipe_files.sort();

    let mut all = Vec::new();
    for path in recipe_files {
        let Ok(raw) = std::fs::read_to_string(&path) else {
            continue;
        };
        let Ok(value) = raw.parse::<toml::Value>() else {
            log::warn!("skipping unparseable TOML file {}", path.display());
            continue;
        };
        let Some(name) = value.get("name").and_then(|n| n.as_str()) else {
            continue;
        };
        if let Some(previous) = all.iter().find(|a: &&DiscoveredAsset| a.name == name) {
            return Err(RecipeError::Validation {
                origin: path.display().to_string(),
                field: "name".to_string(),
                message: format!(
                    "duplicate asset name {name:?} (also defined in {})",
                    previous.path.display()
                ),
            }
            .into());
        }
        all.push(DiscoveredAsset {
            name: name.to_string(),
            path,
        });
    }

    all.sort_by(|a, b| a.name.cmp(&b.name));
    let matched: Vec<DiscoveredAsset> = all
        .iter()
        .filter(|a| glob_match(filter, &a.name))
        .cloned()
        .collect();

    if matched.is_empty() {
        let available = if all.is_empty() {
            "(none)".to_string()
        } else {
            all.iter()
                .map(|a| a.name.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        };
        return Err(DriverError::NoAssetsMatched {
            filter: filter.to_string(),
            available,
        });
    }
    Ok(matched)
}

fn collect_toml_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if !dir.is_dir() {
        return Ok(());
    }
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if path.is_dir() {
            if name.starts_with('.') {
                continue;
            }
            collect_toml_files(&path, out)?;
        } else if name.ends_with(".toml") {
            out.push(path);
        }
    }
    Ok(())
}

/// Where downloaded datasets land: `LLMEBENCH_CACHE_ROOT` when set,
/// otherwise `.dataset_cache` inside the benchmark directory.
pub fn dataset_cache_root(params: &ExperimentParams) -> PathBuf {
    match std::env::var(CACHE_ROOT_ENV) {
        Ok(root) if !root.is_empty() => PathBuf::from(root),
        _ => params.benchmark_dir.join(".dataset_cache"),
    }
}

fn materialized_spec(
    spec: &DatasetSpec,
    base_dir: &Path,
    cache_root: &Path,
) -> Result<DatasetSpec, DatasetError> {
    let path = resolve_dataset(spec, base_dir, cache_root)?;
    let mut resolved = spec.clone();
    resolved.location = path.to_string_lossy().into_owned();
    Ok(resolved)
}

struct SampleOutcome {
    prediction: Option<String>,
    cache_hit: bool,
    provider_called: bool,
    failure: Option<SampleFailure>,
}

/// Execute one asset end to end and return its summary. Per-sample
/// failures (provider errors, malformed responses, unrenderable prompts)
/// are contained and scored per the task's failure policy; cache storage
/// problems abort the run.
pub fn run_asset(asset: &dyn Asset, params: &ExperimentParams) -> Result<RunSummary, DriverError> {
    let start = Instant::now();
    params.validate().map_err(DriverError::Params)?;
    let recipe = asset.recipe();
    validate_recipe(recipe, &recipe.name)?;
    if params.n_shots > 0 && recipe.fewshot.is_none() {
        return Err(RecipeError::Validation {
            origin: recipe.name.clone(),
            field: "fewshot".to_string(),
            message: format!("section required to run with n_shots = {}", params.n_shots),
        }
        .into());
    }

    let cache_root = dataset_cache_root(params);
    let base_dir = asset.origin_dir().unwrap_or(params.benchmark_dir.as_path());

    let test_spec = materialized_spec(&recipe.dataset, base_dir, &cache_root)?;
    let samples = load_dataset(&test_spec, params.limit)?;
    let digest = params_digest(recipe, params);

    let examples_by_id = if params.n_shots > 0 {
        let section = recipe.fewshot.as_ref().expect("checked above");
        let train_spec = materialized_spec(&section.train_dataset, base_dir, &cache_root)?;
        let train = load_dataset(&train_spec, None)?;
        let pool = ExamplePool::build(train, &section.embedder)?;
        precompute_examples(
            &samples,
            &pool,
            &section.embedder,
            params.n_shots as usize,
            section.lambda,
        )?
    } else {
        IndexMap::new()
    };

    let provider = Provider::new(recipe.provider.clone())?;
    let store = CacheStore::open(&params.results_dir, &recipe.name, params.n_shots)?;

    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let fatal: Mutex<Option<DriverError>> = Mutex::new(None);
    let outcomes: Mutex<Vec<Option<SampleOutcome>>> =
        Mutex::new((0..samples.len()).map(|_| None).collect());

    let workers = params.max_parallel.min(samples.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= samples.len() {
                    break;
                }
                let sample = &samples[index];
                let examples = examples_by_id
                    .get(&sample.sample_id)
                    .map(Vec::as_slice)
                    .unwrap_or(&[]);
                match process_sample(
                    asset,
                    sample,
                    examples,
                    &provider,
                    &store,
                    &digest,
                    params.ignore_cache,
                ) {
                    Ok(outcome) => {
                        outcomes.lock().unwrap()[index] = Some(outcome);
                    }
                    Err(error) => {
                        stop.store(true, Ordering::SeqCst);
                        fatal.lock().unwrap().get_or_insert(error);
                        break;
                    }
                }
            });
        }
    });

    if let Some(error) = fatal.into_inner().unwrap() {
        return Err(error);
    }

    let outcomes = outcomes.into_inner().unwrap();
    let mut predictions = Vec::with_capacity(samples.len());
    let mut cache_hits = 0usize;
    let mut provider_calls = 0usize;
    let mut failures = Vec::new();
    for outcome in outcomes {
        let outcome = outcome.expect("every sample was processed");
        if outcome.cache_hit {
            cache_hits += 1;
        }
        if outcome.provider_called {
            provider_calls += 1;
        }
        if let Some(failure) = outcome.failure {
            failures.push(failure);
        }
        predictions.push(outcome.prediction);
    }

    let gold: Vec<String> = samples.iter().map(|s| s.label.clone()).collect();
    let mut evaluation = evaluate_with(&recipe.task, &gold, &predictions, asset.custom_task())?;
    evaluation.params_digest = digest.clone();

    Ok(RunSummary {
        schema_version: RESULTS_SCHEMA_VERSION,
        asset_name: recipe.name.clone(),
        n_shots: params.n_shots,
        params_digest: digest,
        sample_count: samples.len(),
        cache_hits,
        provider_calls,
        elapsed_seconds: start.elapsed().as_secs_f64(),
        evaluation,
        failures,
    })
}

fn process_sample(
    asset: &dyn Asset,
    sample: &DataSample,
    examples: &[DataSample],
    provider: &Provider,
    store: &CacheStore,
    digest: &str,
    ignore_cache: bool,
) -> Result<SampleOutcome, DriverError> {
    let contained = |failure: SampleFailure| SampleOutcome {
        prediction: None,
        cache_hit: false,
        provider_called: false,
        failure: Some(failure),
    };

    let messages = match asset.prompt(sample, examples) {
        Ok(messages) => messages,
        Err(error) => {
            return Ok(contained(SampleFailure {
                sample_id: sample.sample_id.clone(),
                error_class: "render_error".to_string(),
                detail: error.to_string(),
            }))
        }
    };

    if !ignore_cache {
        if let Some(entry) = store.lookup(&sample.sample_id, digest)? {
            return Ok(SampleOutcome {
                prediction: entry.prediction,
                cache_hit: true,
                provider_called: false,
                failure: None,
            });
        }
    }

    match provider.invoke_with_retry(&messages) {
        Ok(response) => {
            let (summarized, prediction, failure) = match summarize_response(&response.payload) {
                Ok(text) => {
                    let prediction = asset.post_process(&text);
                    (Some(text), prediction, None)
                }
                Err(error) => (
                    None,
                    None,
                    Some(SampleFailure {
                        sample_id: sample.sample_id.clone(),
                        error_class: error.class_name().to_string(),
                        detail: error.to_string(),
                    }),
                ),
            };
            let entry = CacheEntry {
                schema_version: CACHE_SCHEMA_VERSION,
                sample_id: sample.sample_id.clone(),
                params_digest: digest.to_string(),
                rendered_prompt: messages,
                raw_payload: response.payload,
                summarized,
                prediction: prediction.clone(),
                attempts_used: response.attempts_used,
                created_at: unix_timestamp(),
                few_shot_ids: examples.iter().map(|e| e.sample_id.clone()).collect(),
            };
            store.store_entry(&entry)?;
            Ok(SampleOutcome {
                prediction,
                cache_hit: false,
                provider_called: true,
                failure,
            })
        }
        Err(error) => Ok(SampleOutcome {
            prediction: None,
            cache_hit: false,
            provider_called: true,
            failure: Some(SampleFailure {
                sample_id: sample.sample_id.clone(),
                error_class: error.class_name().to_string(),
                detail: error.to_string(),
            }),
        }),
    }
}

/// Rebuild predictions for an asset from its cached payloads, with no
/// model calls, and re-evaluate. Useful after changing post-processing.
pub fn reprocess_asset(
    asset: &dyn Asset,
    params: &ExperimentParams,
) -> Result<RunSummary, DriverError> {
    let start = Instant::now();
    params.validate().map_err(DriverError::Params)?;
    let recipe = asset.recipe();
    validate_recipe(recipe, &recipe.name)?;

    let cache_root = dataset_cache_root(params);
    let base_dir = asset.origin_dir().unwrap_or(params.benchmark_dir.as_path());
    let test_spec = materialized_spec(&recipe.dataset, base_dir, &cache_root)?;
    let samples = load_dataset(&test_spec, params.limit)?;
    let digest = params_digest(recipe, params);

    let store = CacheStore::open(&params.results_dir, &recipe.name, params.n_shots)?;
    let outcome = reprocess(&store, asset, &samples, &digest)?;

    let failures = outcome
        .missing
        .iter()
        .map(|sample_id| SampleFailure {
            sample_id: sample_id.clone(),
            error_class: "missing_cache_entry".to_string(),
            detail: "no cached response for this sample and parameter digest".to_string(),
        })
        .collect();

    Ok(RunSummary {
        schema_version: RESULTS_SCHEMA_VERSION,
        asset_name: recipe.name.clone(),
        n_shots: params.n_shots,
        params_digest: digest,
        sample_count: samples.len(),
        cache_hits: outcome.entries_found,
        provider_calls: 0,
        elapsed_seconds: start.elapsed().as_secs_f64(),
        evaluation: outcome.evaluation,
        failures,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct AllResultsEntry {
    asset_name: String,
    n_shots: u32,
    params_digest: String,
    sample_count: usize,
    timestamp: u64,
    metrics: IndexMap<String, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AllResults {
    schema_version: u32,
    runs: Vec<AllResultsEntry>,
}

/// Persist a run's `results.json` and fold it into the cross-run
/// `all_results.json` at the results root. Returns the results.json path.
///
/// The aggregate is keyed by (asset, n_shots): re-running updates the
/// existing entry instead of appending a duplicate, and entries stay
/// sorted for stable diffs.
pub fn write_results(summary: &RunSummary, results_dir: &Path) -> Result<PathBuf, DriverError> {
    let run_dir = results_dir
        .join(&summary.asset_name)
        .join(format!("{}_shot", summary.n_shots));
    std::fs::create_dir_all(&run_dir)?;

    let results_path = run_dir.join("results.json");
    write_json_atomic(&results_path, summary)?;

    let all_path = results_dir.join("all_results.json");
    let mut all: AllResults = match std::fs::read_to_string(&all_path) {
        Ok(raw) => serde_json::from_str(&raw).unwrap_or_else(|e| {
            log::warn!("rebuilding unreadable {} ({e})", all_path.display());
            AllResults {
                schema_version: RESULTS_SCHEMA_VERSION,
                runs: Vec::new(),
            }
        }),
        Err(_) => AllResults {
            schema_version: RESULTS_SCHEMA_VERSION,
            runs: Vec::new(),
        },
    };

    let entry = AllResultsEntry {
        asset_name: summary.asset_name.clone(),
        n_shots: summary.n_shots,
        params_digest: summary.params_digest.clone(),
        sample_count: summary.sample_count,
        timestamp: summary.evaluation.timestamp,
        metrics: summary.evaluation.metrics.clone(),
    };
    all.runs
        .retain(|r| !(r.asset_name == entry.asset_name && r.n_shots == entry.n_shots));
    all.runs.push(entry);
    all.runs
        .sort_by(|a, b| (&a.asset_name, a.n_shots).cmp(&(&b.asset_name, b.n_shots)));
    write_json_atomic(&all_path, &all)?;

    Ok(results_path)
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), DriverError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    let mut body = serde_json::to_vec_pretty(value).map_err(std::io::Error::other)?;
    body.push(b'\n');
    std::io::Write::write_all(&mut tmp.as_file(), &body)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// A finished asset run plus where its results landed.
#[derive(Debug, Clone)]
pub struct AssetRunReport {
    pub summary: RunSummary,
    pub results_path: PathBuf,
}

/// Discover, run (or reprocess), and persist every asset matching the
/// filter, in name order. The first run-fatal error aborts the invocation.
pub fn run(
    params: &ExperimentParams,
    reprocess_only: bool,
) -> Result<Vec<AssetRunReport>, DriverError> {
    let discovered = discover_assets(&params.benchmark_dir, &params.asset_filter)?;
    let mut reports = Vec::with_capacity(discovered.len());
    for found in discovered {
        let asset = DeclarativeAsset::load(&found.path)?;
        let summary = if reprocess_only {
            reprocess_asset(&asset, params)?
        } else {
            run_asset(&asset, params)?
        };
        let results_path = write_results(&summary, &params.results_dir)?;
        reports.push(AssetRunReport {
            summary,
            results_path,
        });
    }
    Ok(reports)
}
