//! Few-shot example selection.
//!
//! Test inputs and training examples are embedded into vectors, and for
//! each test sample the `k` examples are picked by maximal marginal
//! relevance: a greedy trade-off between similarity to the test input and
//! diversity among the picks, weighted by `lambda` (1.0 = pure relevance,
//! 0.0 = pure diversity after the first pick).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::DataSample;

/// A dense embedding. Construction guarantees a non-zero norm, so cosine
/// similarity is always defined.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, FewshotError> {
        if values.is_empty() || values.iter().all(|v| *v == 0.0) {
            return Err(FewshotError::ZeroVector);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FewshotError::NonFiniteVector);
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Cosine similarity between two vectors of equal dimension.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    dot / (a.norm() * b.norm())
}

/// How to compute embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderConfig {
    /// Offline character-trigram hashing embedder. Deterministic, needs no
    /// service, and never produces a zero vector.
    Hashing {
        #[serde(default = "default_hashing_dim")]
        dim: usize,
    },
    /// Remote embeddings endpoint speaking the `/embeddings` protocol.
    Http {
        base_url: String,
        model: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        api_key_env: Option<String>,
        #[serde(default = "default_http_timeout")]
        timeout: f64,
    },
}

fn default_hashing_dim() -> usize {
    256
}

fn default_http_timeout() -> f64 {
    30.0
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Hashing {
            dim: default_hashing_dim(),
        }
    }
}

#[derive(Debug, Error)]
pub enum FewshotError {
    #[error("embedding vector is all zeros")]
    ZeroVector,
    #[error("embedding vector contains non-finite values")]
    NonFiniteVector,
    #[error("embedding dimensions differ: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("example pool is empty")]
    EmptyPool,
    #[error("embedder dimension must be at least 1")]
    InvalidDimension,
    #[error("embedding service: {0}")]
    EmbeddingService(String),
    #[error("few-shot selection for sample {sample_id}: {source}")]
    ForSample {
        sample_id: String,
        #[source]
        source: Box<FewshotError>,
    },
}

/// Embed a batch of texts with the configured embedder. The result has one
/// vector per input text, in order, all of the same dimension.
pub fn embed(
    texts: &[String],
    embedder: &EmbedderConfig,
) -> Result<Vec<EmbeddingVector>, FewshotError> {
    match embedder {
        EmbedderConfig::Hashing { dim } => {
            if *dim == 0 {
                return Err(FewshotError::InvalidDimension);
            }
            texts.iter().map(|t| hashing_embed(t, *dim)).collect()
        }
        EmbedderConfig::Http {
            base_url,
            model,
            api_key_env,
            timeout,
        } => http_embed(texts, base_url, model, api_key_env.as_deref(), *timeout),
    }
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for byte in bytes {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Character-trigram counts hashed into `dim` buckets, L2-normalized.
///
/// The text is framed with sentinel characters before trigram extraction,
/// so even an empty string yields at least one trigram and the vector norm
/// is never zero.
fn hashing_embed(text: &str, dim: usize) -> Result<EmbeddingVector, FewshotError> {
    let mut chars: Vec<char> = Vec::with_capacity(text.chars().count() + 4);
    chars.push('\u{2}');
    chars.push('\u{2}');
    chars.extend(text.chars());
    chars.push('\u{3}');
    chars.push('\u{3}');

    let mut counts = vec![0.0f64; dim];
    let mut buf = [0u8; 12];
    for window in chars.windows(3) {
        let mut len = 0;
        for c in window {
            len += c.encode_utf8(&mut buf[len..]).len();
        }
        let bucket = (fnv1a(&buf[..len]) % dim as u64) as usize;
        counts[bucket] += 1.0;
    }

    let norm = counts.iter().map(|v| v * v).sum::<f64>().sqrt();
    for value in &mut counts {
        *value /= norm;
    }
    EmbeddingVector::new(counts)
}

fn http_embed(
    texts: &[String],
    base_url: &str,
    model: &str,
    api_key_env: Option<&str>,
    timeout: f64,
) -> Result<Vec<EmbeddingVector>, FewshotError> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let service_err = |message: String| FewshotError::EmbeddingService(message);

    let client = reqwest::blocking::Client::builder()
        .timeout(std::time::Duration::from_secs_f64(timeout.max(0.001)))
        .build()
        .map_err(|e| service_err(e.to_string()))?;
    let endpoint = format!("{}/embeddings", base_url.trim_end_matches('/'));
    let mut request = client
        .post(&endpoint)
        .json(&serde_json::json!({"model": model, "input": texts}));
    if let Some(var) = api_key_env {
        if let Ok(key) = std::env::var(var) {
            if !key.is_empty() {
                request = request.bearer_auth(key);
            }
        }
    }

    let response = request.send().map_err(|e| service_err(e.to_string()))?;
    if !response.status().is_success() {
        return Err(service_err(format!("HTTP {}", response.status().as_u16())));
    }
    let payload: serde_json::Value = response
        .json()
        .map_err(|e| service_err(format!("invalid JSON body: {e}")))?;

    let data = payload
        .get("data")
        .and_then(|d| d.as_array())
        .ok_or_else(|| service_err("response has no data array".to_string()))?;
    if data.len() != texts.len() {
        return Err(service_err(format!(
            "expected {} embeddings, got {}",
            texts.len(),
            data.len()
        )));
    }

    // The protocol allows out-of-order items; put them back by index.
    let mut ordered: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
    for item in data {
        let index = item
            .get("index")
            .and_then(|i| i.as_u64())
            .ok_or_else(|| service_err("embedding item has no index".to_string()))?
            as usize;
        let values: Vec<f64> = item
            .get("embedding")
            .and_then(|e| e.as_array())
            .ok_or_else(|| service_err("embedding item has no vector".to_string()))?
            .iter()
            .map(|v| v.as_f64().unwrap_or(f64::NAN))
            .collect();
        if index >= texts.len() || ordered[index].is_some() {
            return Err(service_err(format!("bad embedding index {index}")));
        }
        ordered[index] = Some(values);
    }

    let mut vectors = Vec::with_capacity(texts.len());
    let mut expected_dim = None;
    for values in ordered {
        let values = values.ok_or_else(|| service_err("missing embedding index".to_string()))?;
        let vector = EmbeddingVector::new(values)?;
        if let Some(expected) = expected_dim {
            if vector.dim() != expected {
                return Err(FewshotError::DimensionMismatch {
                    expected,
                    got: vector.dim(),
                });
            }
        } else {
            expected_dim = Some(vector.dim());
        }
        vectors.push(vector);
    }
    Ok(vectors)
}

/// A training set with precomputed embeddings, ready for selection.
pub struct ExamplePool {
    entries: Vec<(DataSample, EmbeddingVector)>,
}

impl ExamplePool {
    /// Embed `samples` (by their input text) and build the pool.
    pub fn build(
        samples: Vec<DataSample>,
        embedder: &EmbedderConfig,
    ) -> Result<Self, FewshotError> {
        let texts: Vec<String> = samples.iter().map(|s| s.input_text().to_string()).collect();
        let vectors = embed(&texts, embedder)?;
        Ok(Self {
            entries: samples.into_iter().zip(vectors).collect(),
        })
    }

    pub fn from_entries(entries: Vec<(DataSample, EmbeddingVector)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|(_, v)| v.dim())
    }
}

/// Greedy maximal marginal relevance selection.
///
/// At each step the candidate maximizing
/// `lambda * sim(c, query) - (1 - lambda) * max_{s in selected} sim(c, s)`
/// is picked; the first pick maximizes query similarity alone. Ties break
/// toward the earlier pool index. Asking for more examples than the pool
/// holds returns the whole pool in selection order.
pub fn mmr_select(
    query: &EmbeddingVector,
    pool: &ExamplePool,
    k: usize,
    lambda: f64,
) -> Result<Vec<DataSample>, FewshotError> {
    if pool.is_empty() {
        return Err(FewshotError::EmptyPool);
    }
    if let Some(dim) = pool.dim() {
        if dim != query.dim() {
            return Err(FewshotError::DimensionMismatch {
                expected: dim,
                got: query.dim(),
            });
        }
    }
    debug_assert!((0.0..=1.0).contains(&lambda));

    let n = pool.entries.len();
    let take = k.min(n);
    let query_sim: Vec<f64> = pool
        .entries
        .iter()
        .map(|(_, v)| cosine_similarity(query, v))
        .collect();

    let mut selected: Vec<usize> = Vec::with_capacity(take);
    let mut remaining: Vec<usize> = (0..n).collect();

    while selected.len() < take {
        let mut best_pos = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (pos, &candidate) in remaining.iter().enumerate() {
            let score = if selected.is_empty() {
                query_sim[candidate]
            } else {
                let max_selected_sim = selected
                    .iter()
                    .map(|&s| cosine_similarity(&pool.entries[candidate].1, &pool.entries[s].1))
                    .fold(f64::NEG_INFINITY, f64::max);
                lambda * query_sim[candidate] - (1.0 - lambda) * max_selected_sim
            };
            if score > best_score {
                best_score = score;
                best_pos = pos;
            }
        }
        selected.push(remaining.remove(best_pos));
    }

    Ok(selected
        .into_iter()
        .map(|i| pool.entries[i].0.clone())
        .collect())
}

/// Select few-shot examples for every test sample up front.
///
/// Returns a map from test sample id to its selected examples, in
/// selection order. With `k == 0` no embedding work happens at all.
pub fn precompute_examples(
    test_samples: &[DataSample],
    pool: &ExamplePool,
    embedder: &EmbedderConfig,
    k: usize,
    lambda: f64,
) -> Result<indexmap::IndexMap<String, Vec<DataSample>>, FewshotError> {
    let mut selections = indexmap::IndexMap::new();
    if k == 0 {
        return Ok(selections);
    }

    let texts: Vec<String> = test_samples
        .iter()
        .map(|s| s.input_text().to_string())
        .collect();
    let queries = embed(&texts, embedder)?;

    for (sample, query) in test_samples.iter().zip(queries.iter()) {
        let examples = mmr_select(query, pool, k, lambda).map_err(|e| FewshotError::ForSample {
            sample_id: sample.sample_id.clone(),
            source: Box::new(e),
        })?;
        selections.insert(sample.sample_id.clone(), examples);
    }
    Ok(selections)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vector(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    fn pool_of(vectors: &[&[f64]]) -> ExamplePool {
        let entries = vectors
            .iter()
            .enumerate()
            .map(|(i, values)| {
                (
                    DataSample::simple(&format!("train-{i}"), &format!("text {i}"), "x"),
                    vector(values),
                )
            })
            .collect();
        ExamplePool::from_entries(entries)
    }

    fn selected_ids(samples: &[DataSample]) -> Vec<usize> {
        samples
            .iter()
            .map(|s| s.sample_id.strip_prefix("train-").unwrap().parse().unwrap())
            .collect()
    }

    // Five hand-set unit vectors against query [1.0, 0.2, 0.0]:
    // query similarities are approximately
    //   p0: 0.9806, p1: 0.9021, p2: 0.1961, p3: 0.5883, p4: 0.0
    // With lambda 0.5 the greedy picks are p0 (best query match), then p2
    // (score 0.0981 vs p1's 0.0511, p3's -0.0058, p4's 0.0), then p1.
    fn hand_pool() -> ExamplePool {
        pool_of(&[
            &[1.0, 0.0, 0.0],
            &[0.8, 0.6, 0.0],
            &[0.0, 1.0, 0.0],
            &[0.6, 0.0, 0.8],
            &[0.0, 0.0, 1.0],
        ])
    }

    #[test]
    fn mmr_balances_relevance_and_diversity() {
        let query = vector(&[1.0, 0.2, 0.0]);
        let picked = mmr_select(&query, &hand_pool(), 3, 0.5).unwrap();
        assert_eq!(selected_ids(&picked), vec![0, 2, 1]);
    }

    #[test]
    fn mmr_with_lambda_one_is_pure_relevance_ranking() {
        let query = vector(&[1.0, 0.2, 0.0]);
        let picked = mmr_select(&query, &hand_pool(), 3, 1.0).unwrap();
        assert_eq!(selected_ids(&picked), vec![0, 1, 3]);
    }

    #[test]
    fn mmr_first_pick_is_query_argmax_even_at_lambda_zero() {
        let query = vector(&[1.0, 0.2, 0.0]);
        let picked = mmr_select(&query, &hand_pool(), 1, 0.0).unwrap();
        assert_eq!(selected_ids(&picked), vec![0]);
    }

    #[test]
    fn mmr_k_larger_than_pool_returns_whole_pool() {
        let query = vector(&[1.0, 0.2, 0.0]);
        let picked = mmr_select(&query, &hand_pool(), 10, 0.5).unwrap();
        assert_eq!(picked.len(), 5);
        let ids = selected_ids(&picked);
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn mmr_ties_break_toward_lower_index() {
        let pool = pool_of(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let query = vector(&[1.0, 0.0]);
        let picked = mmr_select(&query, &pool, 1, 0.5).unwrap();
        assert_eq!(selected_ids(&picked), vec![0]);
    }

    #[test]
    fn mmr_rejects_empty_pool_and_dimension_mismatch() {
        let query = vector(&[1.0, 0.0]);
        let empty = ExamplePool::from_entries(Vec::new());
        assert!(matches!(
            mmr_select(&query, &empty, 1, 0.5),
            Err(FewshotError::EmptyPool)
        ));

        let pool = pool_of(&[&[1.0, 0.0, 0.0]]);
        assert!(matches!(
            mmr_select(&query, &pool, 1, 0.5),
            Err(FewshotError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn hashing_embedder_is_deterministic_and_normalized() {
        let embedder = EmbedderConfig::default();
        let texts = vec!["hello world".to_string(), "hello world".to_string()];
        let vectors = embed(&texts, &embedder).unwrap();
        assert_eq!(vectors[0], vectors[1]);
        assert_eq!(vectors[0].dim(), 256);
        assert!((vectors[0].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hashing_embedder_handles_empty_text() {
        let vectors = embed(&[String::new()], &EmbedderConfig::default()).unwrap();
        assert!(vectors[0].norm() > 0.0);
    }

    #[test]
    fn distinct_texts_embed_to_distinct_directions() {
        let texts = vec![
            "the cat sat on the mat".to_string(),
            "quarterly earnings exceeded forecasts".to_string(),
        ];
        let vectors = embed(&texts, &EmbedderConfig::default()).unwrap();
        let similarity = cosine_similarity(&vectors[0], &vectors[1]);
        assert!(similarity < 1.0 - 1e-9, "similarity {similarity}");
    }

    #[test]
    fn zero_and_non_finite_vectors_are_rejected() {
        assert!(matches!(
            EmbeddingVector::new(vec![0.0, 0.0]),
            Err(FewshotError::ZeroVector)
        ));
        assert!(matches!(
            EmbeddingVector::new(vec![]),
            Err(FewshotError::ZeroVector)
        ));
        assert!(matches!(
            EmbeddingVector::new(vec![1.0, f64::NAN]),
            Err(FewshotError::NonFiniteVector)
        ));
    }

    #[test]
    fn precompute_returns_empty_map_for_zero_shots() {
        let pool = hand_pool();
        let samples = vec![DataSample::simple("t1", "anything", "x")];
        let selections =
            precompute_examples(&samples, &pool, &EmbedderConfig::default(), 0, 0.5).unwrap();
        assert!(selections.is_empty());
    }

    #[test]
    fn precompute_selects_k_examples_per_test_sample() {
        let train: Vec<DataSample> = (0..4)
            .map(|i| DataSample::simple(&format!("train-{i}"), &format!("example text {i}"), "x"))
            .collect();
        let embedder = EmbedderConfig::default();
        let pool = ExamplePool::build(train, &embedder).unwrap();
        let tests = vec![
            DataSample::simple("t1", "example text 0", "x"),
            DataSample::simple("t2", "completely different", "x"),
        ];
        let selections = precompute_examples(&tests, &pool, &embedder, 2, 0.5).unwrap();
        assert_eq!(selections.len(), 2);
        assert_eq!(selections["t1"].len(), 2);
        assert_eq!(selections["t2"].len(), 2);
        let ids: std::collections::HashSet<_> = selections["t1"]
            .iter()
            .map(|s| s.sample_id.as_str())
            .collect();
        assert_eq!(ids.len(), 2, "no duplicate examples");
    }
}
