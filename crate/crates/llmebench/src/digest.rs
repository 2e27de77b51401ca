//! Canonical fingerprint of the parameters that shape model responses.
//!
//! The digest covers exactly the inputs that change what the model is
//! asked and how: the prompt template, the provider identity and
//! generation parameters, the shot count, the dataset identity, and (for
//! few-shot runs) the example-selection configuration. Operational knobs
//! that only affect how a run executes (parallelism, limits, retries,
//! timeouts, cache switches, post-processing) are deliberately excluded,
//! as are credentials, which must never leak into artifacts on disk.

use indexmap::IndexMap;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::assets::{AssetRecipe, PromptTemplate};
use crate::datasets::DatasetSpec;
use crate::fewshot::EmbedderConfig;
use crate::providers::{MockBehavior, ProviderKind};
use crate::types::ExperimentParams;

#[derive(Serialize)]
struct DatasetIdentity<'a> {
    name: String,
    format: &'static str,
    location: &'a str,
    field_map: &'a IndexMap<String, String>,
}

impl<'a> DatasetIdentity<'a> {
    fn of(spec: &'a DatasetSpec) -> Self {
        Self {
            name: spec.effective_name(),
            format: spec.format.as_str(),
            location: &spec.location,
            field_map: &spec.field_map,
        }
    }
}

#[derive(Serialize)]
struct ProviderIdentity<'a> {
    kind: ProviderKind,
    model_name: &'a str,
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    mock: Option<&'a MockBehavior>,
}

#[derive(Serialize)]
struct FewshotIdentity<'a> {
    train_dataset: DatasetIdentity<'a>,
    lambda: f64,
    embedder: &'a EmbedderConfig,
}

#[derive(Serialize)]
struct DigestInput<'a> {
    prompt: &'a PromptTemplate,
    provider: ProviderIdentity<'a>,
    n_shots: u32,
    dataset: DatasetIdentity<'a>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fewshot: Option<FewshotIdentity<'a>>,
}

/// SHA-256 hex digest of the response-shaping parameters.
///
/// Two runs share a digest exactly when their cached responses are
/// interchangeable. The few-shot section only participates when
/// `n_shots > 0`: a zero-shot run never consults it.
pub fn params_digest(recipe: &AssetRecipe, params: &ExperimentParams) -> String {
    let fewshot = if params.n_shots > 0 {
        recipe.fewshot.as_ref().map(|section| FewshotIdentity {
            train_dataset: DatasetIdentity::of(&section.train_dataset),
            lambda: section.lambda,
            embedder: &section.embedder,
        })
    } else {
        None
    };

    let input = DigestInput {
        prompt: &recipe.prompt,
        provider: ProviderIdentity {
            kind: recipe.provider.kind,
            model_name: recipe.provider.effective_model_name(),
            temperature: recipe.provider.temperature,
            top_p: recipe.provider.top_p,
            max_tokens: recipe.provider.max_tokens,
            mock: recipe.provider.mock.as_ref(),
        },
        n_shots: params.n_shots,
        dataset: DatasetIdentity::of(&recipe.dataset),
        fewshot,
    };

    let canonical = serde_json::to_vec(&input).expect("digest input serializes");
    let mut hasher = Sha256::new();
    hasher.update(&canonical);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}
