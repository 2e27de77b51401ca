//! Benchmark assets: declarative recipes tying a dataset, a provider, a
//! prompt, post-processing, and a task together, plus the [`Asset`] trait
//! for overriding individual stages in code.
//!
//! Recipes are TOML files. `${VAR}` placeholders anywhere in the file are
//! expanded from the environment before parsing, so credentials and hosts
//! never need to be written into the recipe itself.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::DatasetSpec;
use crate::evaluation::{CustomTask, TaskKind, TaskSpec};
use crate::fewshot::EmbedderConfig;
use crate::providers::{ProviderConfig, ProviderKind};
use crate::types::{ChatMessage, DataSample};

/// Where selected examples go relative to the test instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExamplesPosition {
    #[default]
    Before,
    After,
}

/// Template for building chat prompts.
///
/// `instruction` renders the test instance (its label is never available
/// to the template); `example_template` renders each few-shot example,
/// label included. Placeholders are `{field}` over the sample's input and
/// extra fields; `{{` and `}}` escape literal braces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    pub instruction: String,
    #[serde(default = "default_example_template")]
    pub example_template: String,
    #[serde(default = "default_example_separator")]
    pub example_separator: String,
    #[serde(default)]
    pub examples_position: ExamplesPosition,
}

fn default_example_template() -> String {
    "Input: {input}\nOutput: {label}".to_string()
}

fn default_example_separator() -> String {
    "\n\n".to_string()
}

/// Normalization steps applied to raw model output, in declared order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeStep {
    Trim,
    Lowercase,
    StripPunctuation,
    FirstLine,
    FirstWord,
}

/// Declarative post-processing: optional regex extraction, then
/// normalization, then label mapping.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PostprocessRules {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub normalize: Vec<NormalizeStep>,
    /// The first capture group of the first match is extracted; no match
    /// means the prediction failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regex_extract: Option<String>,
    /// Maps normalized surface forms to task labels. When empty,
    /// classification accepts exact label matches and other tasks pass the
    /// normalized text through.
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub label_map: IndexMap<String, String>,
}

/// Few-shot configuration: where examples come from and how they are picked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewshotSection {
    /// Relevance/diversity trade-off for example selection.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    pub train_dataset: DatasetSpec,
}

fn default_lambda() -> f64 {
    0.5
}

/// A complete benchmark recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetRecipe {
    pub name: String,
    pub dataset: DatasetSpec,
    pub provider: ProviderConfig,
    pub task: TaskSpec,
    pub prompt: PromptTemplate,
    #[serde(default, skip_serializing_if = "is_default_postprocess")]
    pub postprocess: PostprocessRules,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fewshot: Option<FewshotSection>,
    /// Free-form extras for custom assets; ignored by the built-in stages.
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub general_args: IndexMap<String, toml::Value>,
}

fn is_default_postprocess(rules: &PostprocessRules) -> bool {
    *rules == PostprocessRules::default()
}

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error("{origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("{origin}: {field}: {message}")]
    Validation {
        origin: String,
        field: String,
        message: String,
    },
}

/// Load, expand, parse, and validate a recipe file.
pub fn load_recipe(path: &Path) -> Result<AssetRecipe, RecipeError> {
    let origin = path.display().to_string();
    let raw = std::fs::read_to_string(path).map_err(|e| RecipeError::Parse {
        origin: origin.clone(),
        message: format!("cannot read recipe: {e}"),
    })?;
    parse_recipe(&raw, &origin)
}

/// Parse recipe text: `${VAR}` expansion, TOML parse, validation.
pub fn parse_recipe(raw: &str, origin: &str) -> Result<AssetRecipe, RecipeError> {
    let expanded = expand_env_placeholders(raw).map_err(|var| RecipeError::Validation {
        origin: origin.to_string(),
        field: format!("${{{var}}}"),
        message: "environment variable is not set".to_string(),
    })?;
    let recipe: AssetRecipe = toml::from_str(&expanded).map_err(|e| RecipeError::Parse {
        origin: origin.to_string(),
        message: e.to_string(),
    })?;
    validate_recipe(&recipe, origin)?;
    Ok(recipe)
}

/// Serialize a recipe back to TOML. Parsing the output reproduces the
/// recipe exactly.
pub fn recipe_to_toml(recipe: &AssetRecipe) -> Result<String, RecipeError> {
    toml::to_string(recipe).map_err(|e| RecipeError::Parse {
        origin: recipe.name.clone(),
        message: format!("cannot serialize recipe: {e}"),
    })
}

fn expand_env_placeholders(raw: &str) -> Result<String, String> {
    let pattern = regex::Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap();
    let mut missing = None;
    let expanded = pattern.replace_all(raw, |caps: &regex::Captures| {
        let name = &caps[1];
        match std::env::var(name) {
            Ok(value) => value,
            Err(_) => {
                missing.get_or_insert_with(|| name.to_string());
                String::new()
            }
        }
    });
    match missing {
        Some(var) => Err(var),
        None => Ok(expanded.into_owned()),
    }
}

/// Structural validation beyond what deserialization enforces. Error
/// messages name the offending field path.
pub fn validate_recipe(recipe: &AssetRecipe, origin: &str) -> Result<(), RecipeError> {
    let fail = |field: &str, message: String| {
        Err(RecipeError::Validation {
            origin: origin.to_string(),
            field: field.to_string(),
            message,
        })
    };

    if recipe.name.trim().is_empty() {
        return fail("name", "asset name must not be empty".to_string());
    }
    if recipe.prompt.instruction.trim().is_empty() {
        return fail(
            "prompt.instruction",
            "instruction must not be empty".to_string(),
        );
    }

    if let Err(e) = recipe.dataset.validate() {
        return fail("dataset", e.to_string());
    }

    match recipe.task.kind {
        TaskKind::Classification => {
            if recipe.task.labels.is_empty() {
                return fail(
                    "task.labels",
                    "classification tasks need a non-empty label set".to_string(),
                );
            }
            let mut seen = std::collections::HashSet::new();
            for label in &recipe.task.labels {
                if !seen.insert(label) {
                    return fail("task.labels", format!("duplicate label {label:?}"));
                }
            }
            for target in recipe.postprocess.label_map.values() {
                if !recipe.task.labels.contains(target) {
                    return fail(
                        "postprocess.label_map",
                        format!("maps to {target:?}, which is not in task.labels"),
                    );
                }
            }
        }
        TaskKind::Regression | TaskKind::Custom => {}
    }

    if let Some(pattern) = &recipe.postprocess.regex_extract {
        if let Err(e) = regex::Regex::new(pattern) {
            return fail("postprocess.regex_extract", format!("invalid regex: {e}"));
        }
    }

    let provider = &recipe.provider;
    if provider.kind == ProviderKind::OpenaiCompatible && provider.model_name.is_empty() {
        return fail(
            "provider.model_name",
            "required for openai_compatible".to_string(),
        );
    }
    if provider.temperature < 0.0 {
        return fail("provider.temperature", "must be non-negative".to_string());
    }
    if !(0.0 < provider.top_p && provider.top_p <= 1.0) {
        return fail("provider.top_p", "must be in (0, 1]".to_string());
    }
    if provider.max_tokens == 0 {
        return fail("provider.max_tokens", "must be at least 1".to_string());
    }
    if provider.timeout <= 0.0 {
        return fail("provider.timeout", "must be positive".to_string());
    }
    if provider.retry.max_attempts == 0 {
        return fail(
            "provider.retry.max_attempts",
            "must be at least 1".to_string(),
        );
    }
    if provider.retry.base_delay < 0.0 {
        return fail(
            "provider.retry.base_delay",
            "must be non-negative".to_string(),
        );
    }
    if provider.retry.backoff_factor < 1.0 {
        return fail(
            "provider.retry.backoff_factor",
            "must be at least 1".to_string(),
        );
    }

    if let Some(fewshot) = &recipe.fewshot {
        if !(0.0..=1.0).contains(&fewshot.lambda) {
            return fail("fewshot.lambda", "must be in [0, 1]".to_string());
        }
        if let Err(e) = fewshot.train_dataset.validate() {
            return fail("fewshot.train_dataset", e.to_string());
        }
        if fewshot.train_dataset.identity() == recipe.dataset.identity() {
            return fail(
                "fewshot.train_dataset",
                "train and test datasets must differ".to_string(),
            );
        }
        if let EmbedderConfig::Hashing { dim } = fewshot.embedder {
            if dim == 0 {
                return fail("fewshot.embedder.dim", "must be at least 1".to_string());
            }
        }
    }

    Ok(())
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("prompt template references unknown field {0:?}")]
    MissingField(String),
}

/// Fill `{placeholder}`s in `template` via `resolve`; `{{`/`}}` escape
/// literal braces. Unresolvable placeholders are errors rather than being
/// silently dropped.
fn fill_template(
    template: &str,
    resolve: impl Fn(&str) -> Option<String>,
) -> Result<String, RenderError> {
    let mut out = String::with_capacity(template.len());
    let mut chars = template.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                out.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                out.push('}');
            }
            '{' => {
                let mut name = String::new();
                let mut closed = false;
                for inner in chars.by_ref() {
                    if inner == '}' {
                        closed = true;
                        break;
                    }
                    name.push(inner);
                }
                if !closed {
                    out.push('{');
                    out.push_str(&name);
                    break;
                }
                match resolve(&name) {
                    Some(value) => out.push_str(&value),
                    None => return Err(RenderError::MissingField(name)),
                }
            }
            _ => out.push(c),
        }
    }
    Ok(out)
}

/// Render a chat prompt for `sample`, embedding the given few-shot
/// examples (possibly none). The examples see their labels; the test
/// sample does not.
pub fn render_prompt(
    template: &PromptTemplate,
    sample: &DataSample,
    examples: &[DataSample],
) -> Result<Vec<ChatMessage>, RenderError> {
    let sample_resolver = |name: &str| sample.field(name).map(str::to_string);

    let mut rendered_examples = Vec::with_capacity(examples.len());
    for example in examples {
        let resolver = |name: &str| {
            if name == "label" {
                Some(example.label.clone())
            } else {
                example.field(name).map(str::to_string)
            }
        };
        rendered_examples.push(fill_template(&template.example_template, resolver)?);
    }

    let instruction = fill_template(&template.instruction, sample_resolver)?;
    let user = if rendered_examples.is_empty() {
        instruction
    } else {
        let block = rendered_examples.join(&template.example_separator);
        match template.examples_position {
            ExamplesPosition::Before => {
                format!("{block}{}{instruction}", template.example_separator)
            }
            ExamplesPosition::After => {
                format!("{instruction}{}{block}", template.example_separator)
            }
        }
    };

    let mut messages = Vec::with_capacity(2);
    if let Some(system) = &template.system {
        messages.push(ChatMessage::system(fill_template(system, sample_resolver)?));
    }
    messages.push(ChatMessage::user(user));
    Ok(messages)
}

/// Reduce raw model output to a prediction: regex extraction, then
/// normalization steps in order, then label mapping. `None` means the
/// response could not be turned into a usable prediction.
pub fn post_process(text: &str, rules: &PostprocessRules, task: &TaskSpec) -> Option<String> {
    let mut current = match &rules.regex_extract {
        Some(pattern) => {
            let re = match regex::Regex::new(pattern) {
                Ok(re) => re,
                Err(e) => {
                    log::warn!("regex_extract failed to compile at use time: {e}");
                    return None;
                }
            };
            let captures = re.captures(text)?;
            captures.get(1)?.as_str().to_string()
        }
        None => text.to_string(),
    };

    for step in &rules.normalize {
        current = match step {
            NormalizeStep::Trim => current.trim().to_string(),
            NormalizeStep::Lowercase => current.to_lowercase(),
            NormalizeStep::StripPunctuation => current
                .chars()
                .filter(|c| c.is_alphanumeric() || c.is_whitespace())
                .collect(),
            NormalizeStep::FirstLine => current.lines().next().unwrap_or_default().to_string(),
            NormalizeStep::FirstWord => current
                .split_whitespace()
                .next()
                .unwrap_or_default()
                .to_string(),
        };
    }

    if !rules.label_map.is_empty() {
        return rules.label_map.get(&current).cloned();
    }

    match task.kind {
        TaskKind::Classification => task.labels.iter().find(|l| **l == current).cloned(),
        TaskKind::Regression | TaskKind::Custom => {
            if current.is_empty() {
                None
            } else {
                Some(current)
            }
        }
    }
}

/// A runnable benchmark unit. Declarative recipes cover the common case;
/// implementing this trait swaps in custom prompt building,
/// post-processing, or scoring while reusing the rest of the pipeline.
pub trait Asset: Send + Sync {
    fn recipe(&self) -> &AssetRecipe;

    /// Directory recipes resolve relative dataset paths against.
    fn origin_dir(&self) -> Option<&Path> {
        None
    }

    fn prompt(
        &self,
        sample: &DataSample,
        examples: &[DataSample],
    ) -> Result<Vec<ChatMessage>, RenderError> {
        render_prompt(&self.recipe().prompt, sample, examples)
    }

    fn post_process(&self, response_text: &str) -> Option<String> {
        post_process(
            response_text,
            &self.recipe().postprocess,
            &self.recipe().task,
        )
    }

    /// Programmatic evaluator for [`TaskKind::Custom`] recipes.
    fn custom_task(&self) -> Option<&dyn CustomTask> {
        None
    }
}

/// An asset driven entirely by its recipe.
pub struct DeclarativeAsset {
    recipe: AssetRecipe,
    origin_dir: Option<PathBuf>,
}

impl DeclarativeAsset {
    pub fn new(recipe: AssetRecipe) -> Self {
        Self {
            recipe,
            origin_dir: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, RecipeError> {
        let recipe = load_recipe(path)?;
        Ok(Self {
            recipe,
            origin_dir: path.parent().map(Path::to_path_buf),
        })
    }
}

impl Asset for DeclarativeAsset {
    fn recipe(&self) -> &AssetRecipe {
        &self.recipe
    }

    fn origin_dir(&self) -> Option<&Path> {
        self.origin_dir.as_deref()
    }
}
