//! Task definitions and metric computation.
//!
//! Predictions arrive as `Option<String>`: `None` marks a sample whose
//! response could not be post-processed into a usable prediction. How such
//! failures are scored is governed by the task's [`FailurePolicy`].

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{unix_timestamp, EvaluationResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
    Custom,
}

/// How failed predictions are scored.
///
/// `count_as_wrong` (the default) scores a failed prediction as an
/// incorrect answer; `exclude` drops the pair from metric computation
/// while still reporting the failure count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    #[default]
    CountAsWrong,
    Exclude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Closed label set for classification tasks.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
    /// Metric highlighted in summary output; defaults per task kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primary_metric: Option<String>,
    #[serde(default)]
    pub failure_policy: FailurePolicy,
}

impl TaskSpec {
    pub fn classification(labels: &[&str]) -> Self {
        Self {
            kind: TaskKind::Classification,
            labels: labels.iter().map(|l| l.to_string()).collect(),
            primary_metric: None,
            failure_policy: FailurePolicy::default(),
        }
    }

    pub fn regression() -> Self {
        Self {
            kind: TaskKind::Regression,
            labels: Vec::new(),
            primary_metric: None,
            failure_policy: FailurePolicy::default(),
        }
    }

    pub fn primary_metric_name(&self) -> &str {
        if let Some(name) = &self.primary_metric {
            return name;
        }
        match self.kind {
            TaskKind::Classification => "accuracy",
            TaskKind::Regression => "mse",
            TaskKind::Custom => "score",
        }
    }
}

/// Programmatic scoring hook for tasks the built-in metrics don't cover.
pub trait CustomTask: Send + Sync {
    fn metrics(
        &self,
        gold: &[String],
        predicted: &[Option<String>],
    ) -> Result<IndexMap<String, f64>, EvalError>;
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gold and predicted lengths differ: {gold} vs {predicted}")]
    LengthMismatch { gold: usize, predicted: usize },
    #[error("gold label {0:?} is not in the task label set")]
    InvalidGold(String),
    #[error("gold label {0:?} is not a finite number")]
    NonNumericGold(String),
    #[error("task kind {0:?} requires a programmatic evaluator")]
    MissingCustomTask(String),
    #[error("custom task produced no metrics")]
    EmptyMetrics,
}

/// Raw output of a metric computation before packaging.
pub struct MetricsBundle {
    pub metrics: IndexMap<String, f64>,
    pub num_failed: usize,
    pub extras: IndexMap<String, serde_json::Value>,
}

/// Score a run and package the outcome.
pub fn evaluate(
    task: &TaskSpec,
    gold: &[String],
    predicted: &[Option<String>],
) -> Result<EvaluationResult, EvalError> {
    evaluate_with(task, gold, predicted, None)
}

/// Score a run, delegating to `custom` for [`TaskKind::Custom`].
pub fn evaluate_with(
    task: &TaskSpec,
    gold: &[String],
    predicted: &[Option<String>],
    custom: Option<&dyn CustomTask>,
) -> Result<EvaluationResult, EvalError> {
    if gold.len() != predicted.len() {
        return Err(EvalError::LengthMismatch {
            gold: gold.len(),
            predicted: predicted.len(),
        });
    }

    let bundle = match task.kind {
        TaskKind::Classification => {
            classification_metrics(gold, predicted, &task.labels, task.failure_policy)?
        }
        TaskKind::Regression => regression_metrics(gold, predicted)?,
        TaskKind::Custom => {
            let evaluator =
                custom.ok_or_else(|| EvalError::MissingCustomTask("custom".to_string()))?;
            let metrics = evaluator.metrics(gold, predicted)?;
            if metrics.is_empty() {
                return Err(EvalError::EmptyMetrics);
            }
            let num_failed = predicted.iter().filter(|p| p.is_none()).count();
            MetricsBundle {
                metrics,
                num_failed,
                extras: IndexMap::new(),
            }
        }
    };

    let mut extras = bundle.extras;
    extras.insert(
        "primary_metric".to_string(),
        serde_json::Value::String(task.primary_metric_name().to_string()),
    );

    Ok(EvaluationResult {
        metrics: bundle.metrics,
        num_processed: gold.len(),
        num_failed_postprocess: bundle.num_failed,
        timestamp: unix_timestamp(),
        params_digest: String::new(),
        extras,
    })
}

/// Accuracy plus per-class precision/recall/F1 and macro/micro/weighted F1
/// over the declared label set.
///
/// Failed predictions are handled per `policy`. Under `count_as_wrong`
/// each failed pair counts as a miss for its gold class and as one false
/// positive in the micro totals, preserving the micro-F1 == accuracy
/// identity of single-label classification. Classes absent from both gold
/// and predictions score zero F1 and are listed in the result extras.
pub fn classification_metrics(
    gold: &[String],
    predicted: &[Option<String>],
    labels: &[String],
    policy: FailurePolicy,
) -> Result<MetricsBundle, EvalError> {
    for g in gold {
        if !labels.contains(g) {
            return Err(EvalError::InvalidGold(g.clone()));
        }
    }

    let is_failed = |p: &Option<String>| p.as_ref().is_none_or(|value| !labels.contains(value));
    let num_failed = predicted.iter().filter(|p| is_failed(p)).count();

    // Pairs that participate in metric computation. Under count_as_wrong a
    // failed prediction becomes None here (guaranteed wrong); under exclude
    // the pair is dropped entirely.
    let pairs: Vec<(&String, Option<&String>)> = gold
        .iter()
        .zip(predicted.iter())
        .filter_map(|(g, p)| match (policy, is_failed(p)) {
            (FailurePolicy::Exclude, true) => None,
            (_, true) => Some((g, None)),
            (_, false) => Some((g, p.as_ref())),
        })
        .collect();

    let total = pairs.len();
    let correct = pairs
        .iter()
        .filter(|(g, p)| p.map(|p| p == *g).unwrap_or(false))
        .count();
    let accuracy = if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    };

    let index_of = |label: &String| labels.iter().position(|l| l == label).unwrap();
    let mut tp = vec![0usize; labels.len()];
    let mut fp = vec![0usize; labels.len()];
    let mut fn_ = vec![0usize; labels.len()];
    // False positives attributed to failed predictions; they belong to no
    // declared class but still count in the micro totals.
    let mut failed_fp = 0usize;

    for (g, p) in &pairs {
        let gi = index_of(g);
        match p {
            Some(p) => {
                let pi = index_of(p);
                if pi == gi {
                    tp[gi] += 1;
                } else {
                    fp[pi] += 1;
                    fn_[gi] += 1;
                }
            }
            None => {
                failed_fp += 1;
                fn_[gi] += 1;
            }
        }
    }

    let ratio = |num: usize, den: usize| {
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

    let mut metrics = IndexMap::new();
    metrics.insert("accuracy".to_string(), accuracy);

    let mut f1s = Vec::with_capacity(labels.len());
    let mut absent = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        let precision = ratio(tp[i], tp[i] + fp[i]);
        let recall = ratio(tp[i], tp[i] + fn_[i]);
        let f1 = f1_of(precision, recall);
        metrics.insert(format!("precision_{label}"), precision);
        metrics.insert(format!("recall_{label}"), recall);
        metrics.insert(format!("f1_{label}"), f1);
        f1s.push(f1);
        if tp[i] + fn_[i] == 0 && fp[i] == 0 {
            absent.push(label.clone());
        }
    }

    let macro_f1 = if f1s.is_empty() {
        0.0
    } else {
        f1s.iter().sum::<f64>() / f1s.len() as f64
    };

    let tp_total: usize = tp.iter().sum();
    let fp_total: usize = fp.iter().sum::<usize>() + failed_fp;
    let fn_total: usize = fn_.iter().sum();
    let micro_p = ratio(tp_total, tp_total + fp_total);
    let micro_r = ratio(tp_total, tp_total + fn_total);
    let micro_f1 = f1_of(micro_p, micro_r);

    let weighted_f1 = if total == 0 {
        0.0
    } else {
        labels
            .iter()
            .enumerate()
            .map(|(i, _)| (tp[i] + fn_[i]) as f64 * f1s[i])
            .sum::<f64>()
            / total as f64
    };

    metrics.insert("macro_f1".to_string(), macro_f1);
    metrics.insert("micro_f1".to_string(), micro_f1);
    metrics.insert("weighted_f1".to_string(), weighted_f1);

    let mut extras = IndexMap::new();
    if !absent.is_empty() {
        extras.insert("absent_classes".to_string(), serde_json::json!(absent));
    }

    Ok(MetricsBundle {
        metrics,
        num_failed,
        extras,
    })
}

/// MSE, MAE, RMSE, and Pearson correlation over numeric labels.
///
/// Failed or non-numeric predictions are always excluded from the numeric
/// computation (there is no meaningful "wrong number"); they are still
/// counted as failures. Pearson is NaN when either side has zero variance,
/// which serializes to JSON null.
pub fn regression_metrics(
    gold: &[String],
    predicted: &[Option<String>],
) -> Result<MetricsBundle, EvalError> {
    let mut gold_values = Vec::new();
    let mut pred_values = Vec::new();
    let mut num_failed = 0usize;

    for (g, p) in gold.iter().zip(predicted.iter()) {
        let g_value: f64 = g
            .trim()
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| EvalError::NonNumericGold(g.clone()))?;
        let p_value = p
            .as_ref()
            .and_then(|p| p.trim().parse::<f64>().ok())
            .filter(|v| v.is_finite());
        match p_value {
            Some(p_value) => {
                gold_values.push(g_value);
                pred_values.push(p_value);
            }
            None => num_failed += 1,
        }
    }

    Ok(MetricsBundle {
        metrics: regression_metrics_numeric(&gold_values, &pred_values),
        num_failed,
        extras: IndexMap::new(),
    })
}

/// The numeric core of regression scoring, usable directly on parsed values.
pub fn regression_metrics_numeric(gold: &[f64], predicted: &[f64]) -> IndexMap<String, f64> {
    assert_eq!(gold.len(), predicted.len());
    let n = gold.len() as f64;

    let (mse, mae) = if gold.is_empty() {
        (0.0, 0.0)
    } else {
        let mse = gold
            .iter()
            .zip(predicted)
            .map(|(g, p)| (g - p) * (g - p))
            .sum::<f64>()
            / n;
        let mae = gold
            .iter()
            .zip(predicted)
            .map(|(g, p)| (g - p).abs())
            .sum::<f64>()
            / n;
        (mse, mae)
    };

    let pearson = if gold.len() < 2 {
        f64::NAN
    } else {
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let gm = mean(gold);
        let pm = mean(predicted);
        let cov: f64 = gold
            .iter()
            .zip(predicted)
            .map(|(g, p)| (g - gm) * (p - pm))
            .sum();
        let g_var: f64 = gold.iter().map(|g| (g - gm) * (g - gm)).sum();
        let p_var: f64 = predicted.iter().map(|p| (p - pm) * (p - pm)).sum();
        if g_var == 0.0 || p_var == 0.0 {
            f64::NAN
        } else {
            cov / (g_var.sqrt() * p_var.sqrt())
        }
    };

    let mut metrics = IndexMap::new();
    metrics.insert("mse".to_string(), mse);
    metrics.insert("mae".to_string(), mae);
    metrics.insert("rmse".to_string(), mse.sqrt());
    metrics.insert("pearson".to_string(), pearson);
    metrics
}
