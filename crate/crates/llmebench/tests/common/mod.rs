//! Shared helpers for the integration tests: independently written metric
//! and selection oracles, CLI invocation, and fixture builders.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use llmebench::providers::{ProviderConfig, ProviderKind, RetryPolicy};

/// The benchmark directory shipped with the repository.
pub fn bundled_benchmark() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../benchmark")
}

pub fn llmebench_cmd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_llmebench"))
}

/// Run the CLI and require a zero exit status.
pub fn run_ok(args: &[&str]) -> Output {
    let output = llmebench_cmd()
        .args(args)
        .output()
        .expect("spawn llmebench");
    assert!(
        output.status.success(),
        "llmebench {args:?} failed with {:?}\nstdout:\n{}\nstderr:\n{}",
        output.status.code(),
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr),
    );
    output
}

pub fn write_file(dir: &Path, rel: &str, contents: &str) -> PathBuf {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).unwrap();
    }
    std::fs::write(&path, contents).unwrap();
    path
}

pub fn read_json(path: &Path) -> serde_json::Value {
    let raw = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()));
    serde_json::from_str(&raw).unwrap_or_else(|e| panic!("bad JSON in {}: {e}", path.display()))
}

/// The persisted summary for one (asset, n_shots) run.
pub fn results_json(results_dir: &Path, asset: &str, n_shots: u32) -> serde_json::Value {
    read_json(
        &results_dir
            .join(asset)
            .join(format!("{n_shots}_shot"))
            .join("results.json"),
    )
}

pub fn metric(results: &serde_json::Value, name: &str) -> f64 {
    results["evaluation"]["metrics"][name]
        .as_f64()
        .unwrap_or_else(|| panic!("metric {name} missing in {results}"))
}

/// Relative comparison at 1e-12, treating NaN == NaN as agreement.
pub fn close_rel(a: f64, b: f64) -> bool {
    if a.is_nan() && b.is_nan() {
        return true;
    }
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

/// A chat-completion body the way a conforming server would answer.
pub fn chat_body(content: &str) -> String {
    serde_json::json!({
        "id": "resp-1",
        "object": "chat.completion",
        "model": "stub-model",
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": content},
            "finish_reason": "stop",
        }],
    })
    .to_string()
}

pub fn chat_ok(content: &str) -> httpstub::StubResponse {
    httpstub::StubResponse::json(200, &chat_body(content))
}

/// An openai_compatible provider aimed at a stub server.
pub fn stub_provider_config(base_url: &str, retry: RetryPolicy) -> ProviderConfig {
    ProviderConfig {
        kind: ProviderKind::OpenaiCompatible,
        model_name: "stub-model".to_string(),
        temperature: 0.0,
        top_p: 1.0,
        max_tokens: 64,
        timeout: 5.0,
        base_url: Some(base_url.to_string()),
        api_key_env: None,
        retry,
        mock: None,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::Digest;
    let mut hasher = sha2::Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// A zip archive holding the given (name, contents) members.
pub fn zip_bytes(members: &[(&str, &[u8])]) -> Vec<u8> {
    use std::io::Write;
    let mut cursor = std::io::Cursor::new(Vec::new());
    {
        let mut writer = zip::ZipWriter::new(&mut cursor);
        let options = zip::write::SimpleFileOptions::default()
            .compression_method(zip::CompressionMethod::Deflated);
        for (name, contents) in members {
            writer.start_file(*name, options).unwrap();
            writer.write_all(contents).unwrap();
        }
        writer.finish().unwrap();
    }
    cursor.into_inner()
}

/// A gzipped tar archive holding the given (name, contents) members.
pub fn targz_bytes(members: &[(&str, &[u8])]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let encoder = flate2::write::GzEncoder::new(&mut out, flate2::Compression::default());
        let mut builder = tar::Builder::new(encoder);
        for (name, contents) in members {
            let mut header = tar::Header::new_gnu();
            header.set_size(contents.len() as u64);
            header.set_mode(0o644);
            header.set_cksum();
            builder.append_data(&mut header, *name, *contents).unwrap();
        }
        builder.into_inner().unwrap().finish().unwrap();
    }
    out
}

// ---------------------------------------------------------------------------
// Selection oracle: plain greedy search over raw vectors.
// ---------------------------------------------------------------------------

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    dot / (aa.sqrt() * bb.sqrt())
}

/// Brute-force greedy selection; returns pool indices in pick order. The
/// first pick maximizes query similarity; later picks maximize
/// `lambda * sim(c, query) - (1 - lambda) * max sim(c, picked)`. Ties keep
/// the lowest index, and k beyond the pool size exhausts the pool.
pub fn mmr_oracle(query: &[f64], pool: &[Vec<f64>], k: usize, lambda: f64) -> Vec<usize> {
    let take = k.min(pool.len());
    let to_query: Vec<f64> = pool.iter().map(|v| cosine(query, v)).collect();
    let mut picked: Vec<usize> = Vec::new();
    let mut open: Vec<usize> = (0..pool.len()).collect();

    while picked.len() < take {
        let mut best_at = 0;
        let mut best = f64::NEG_INFINITY;
        for (at, &candidate) in open.iter().enumerate() {
            let score = if picked.is_empty() {
                to_query[candidate]
            } else {
                let mut closest = f64::NEG_INFINITY;
                for &chosen in &picked {
                    let sim = cosine(&pool[candidate], &pool[chosen]);
                    if sim > closest {
                        closest = sim;
                    }
                }
                lambda * to_query[candidate] - (1.0 - lambda) * closest
            };
            if score > best {
                best = score;
                best_at = at;
            }
        }
        picked.push(open.remove(best_at));
    }
    picked
}

// ---------------------------------------------------------------------------
// Classification oracle: every count is a direct scan over the scored pairs.
// ---------------------------------------------------------------------------

pub struct ClassificationOracle {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub weighted_f1: f64,
}

pub fn classification_oracle(
    gold: &[String],
    predicted: &[Option<String>],
    labels: &[String],
    exclude_failed: bool,
) -> ClassificationOracle {
    let as_index = |value: &str| labels.iter().position(|l| l == value);

    // A prediction is usable only when it names a declared label. Failed
    // pairs are either dropped or kept as guaranteed misses.
    let mut pairs: Vec<(usize, Option<usize>)> = Vec::new();
    for (g, p) in gold.iter().zip(predicted) {
        let g = as_index(g).expect("gold label is declared");
        let p = p.as_deref().and_then(as_index);
        if p.is_none() && exclude_failed {
            continue;
        }
        pairs.push((g, p));
    }

    let total = pairs.len();
    let count = |want: &dyn Fn(usize, Option<usize>) -> bool| -> usize {
        pairs.iter().filter(|(g, p)| want(*g, *p)).count()
    };
    let frac = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let f1_of = |p: f64, r: f64| {
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    };

    let accuracy = frac(count(&|g, p| p == Some(g)), total);

    let mut precision = Vec::new();
    let mut recall = Vec::new();
    let mut f1 = Vec::new();
    for l in 0..labels.len() {
        let tp = count(&|g, p| g == l && p == Some(l));
        let fp = count(&|g, p| g != l && p == Some(l));
        let fn_ = count(&|g, p| g == l && p != Some(l));
        let pr = frac(tp, tp + fp);
        let rc = frac(tp, tp + fn_);
        precision.push(pr);
        recall.push(rc);
        f1.push(f1_of(pr, rc));
    }

    let macro_f1 = if f1.is_empty() {
        0.0
    } else {
        f1.iter().sum::<f64>() / f1.len() as f64
    };

    let mut tp_sum = 0;
    let mut fp_sum = 0;
    let mut fn_sum = 0;
    for l in 0..labels.len() {
        tp_sum += count(&|g, p| g == l && p == Some(l));
        fp_sum += count(&|g, p| g != l && p == Some(l));
        fn_sum += count(&|g, p| g == l && p != Some(l));
    }
    // Kept failed pairs predict nothing usable: one false positive each.
    fp_sum += count(&|_, p| p.is_none());
    let micro_f1 = f1_of(frac(tp_sum, tp_sum + fp_sum), frac(tp_sum, tp_sum + fn_sum));

    let weighted_f1 = if total == 0 {
        0.0
    } else {
        (0..labels.len())
            .map(|l| count(&|g, _| g == l) as f64 * f1[l])
            .sum::<f64>()
            / total as f64
    };

    ClassificationOracle {
        accuracy,
        precision,
        recall,
        f1,
        macro_f1,
        micro_f1,
        weighted_f1,
    }
}

// ---------------------------------------------------------------------------
// Regression oracle: the textbook formulas, nothing shared with the crate.
// ---------------------------------------------------------------------------

/// Returns (mse, mae, rmse, pearson) over already-parsed value pairs.
pub fn regression_oracle(gold: &[f64], predicted: &[f64]) -> (f64, f64, f64, f64) {
    assert_eq!(gold.len(), predicted.len());
    if gold.is_empty() {
        return (0.0, 0.0, 0.0, f64::NAN);
    }
    let n = gold.len() as f64;

    let mut squared = 0.0;
    let mut absolute = 0.0;
    for (g, p) in gold.iter().zip(predicted) {
        squared += (g - p) * (g - p);
        absolute += (g - p).abs();
    }
    let mse = squared / n;
    let mae = absolute / n;

    let pearson = if gold.len() < 2 {
        f64::NAN
    } else {
        let g_mean = gold.iter().sum::<f64>() / n;
        let p_mean = predicted.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut g_var = 0.0;
        let mut p_var = 0.0;
        for (g, p) in gold.iter().zip(predicted) {
            cov += (g - g_mean) * (p - p_mean);
            g_var += (g - g_mean) * (g - g_mean);
            p_var += (p - p_mean) * (p - p_mean);
        }
        if g_var == 0.0 || p_var == 0.0 {
            f64::NAN
        } else {
            cov / (g_var.sqrt() * p_var.sqrt())
        }
    };

    (mse, mae, mse.sqrt(), pearson)
}
