//! A benchmarking harness for evaluating large language models served
//! over HTTP APIs.
//!
//! A benchmark is a directory of TOML *recipes*. Each recipe (an *asset*)
//! declares a dataset, a prompt template, a model provider, optional
//! post-processing rules, and a task to score against. Running an asset
//! loads the dataset, renders a prompt per sample (optionally with
//! few-shot examples picked by maximal marginal relevance), calls the
//! model with retries, caches every raw response on disk, reduces
//! responses to predictions, and reports task metrics.
//!
//! The cache makes runs resumable and cheap to iterate on: re-running
//! skips everything already answered under the same parameters, and
//! post-processing changes can be re-applied to cached responses without
//! a single model call.
//!
//! ```no_run
//! use llmebench::{driver, types::ExperimentParams};
//!
//! let mut params = ExperimentParams::new("benchmark", "results");
//! params.asset_filter = "Sentiment*".to_string();
//! for report in driver::run(&params, false).unwrap() {
//!     println!("{}: {:?}", report.summary.asset_name, report.summary.evaluation.metrics);
//! }
//! ```

pub mod assets;
pub mod cache;
pub mod datasets;
pub mod digest;
pub mod driver;
pub mod evaluation;
pub mod fewshot;
pub mod providers;
pub mod types;

pub use assets::{Asset, AssetRecipe, DeclarativeAsset};
pub use digest::params_digest;
pub use driver::{run_asset, DriverError, RunSummary};
pub use types::{ChatMessage, DataSample, EvaluationResult, ExperimentParams};
