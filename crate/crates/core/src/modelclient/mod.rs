//! Label-scoring backends.
//!
//! A backend assigns one finite, log-probability-like score to every candidate
//! label of a prompt; prediction is the argmax with ties broken by label-set
//! order. Implementations:
//!
//! * [`SimBackend`]: deterministic simulated models (oracle, label copier, noisy)
//!   seeded from the prompt hash.
//! * `HttpBackend` (feature `http`): an OpenAI-compatible `/v1/completions`
//!   server that echoes prompt tokens with log-probabilities.
//! * [`ScoreCache`]: persistent append-only score store used by the HTTP backend.

mod cache;
#[cfg(feature = "http")]
mod http;
mod sim;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::LabelSet;
use crate::prompting::PromptSpec;

pub use cache::{cache_key, ScoreCache};
#[cfg(feature = "http")]
pub use http::{extract_continuation_logprobs, HttpBackend};
pub use sim::SimBackend;

/// Environment variable that replaces the configured HTTP endpoint.
pub const ENDPOINT_ENV: &str = "CICL_HTTP_ENDPOINT";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("endpoint did not return echoed prompt logprobs: {0}")]
    EchoUnsupported(String),
    #[error("token alignment failed: {0}")]
    Alignment(String),
    #[error("backend returned a missing or non-finite score for label {0:?}")]
    BadScore(String),
    #[error("simulated backend needs the query's gold label")]
    MissingGold,
    #[error("label {0:?} is not a candidate label")]
    UnknownLabel(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
    #[error("score cache: {0}")]
    Cache(#[from] std::io::Error),
}

impl ModelError {
    /// Failures that come from talking to a remote endpoint.
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            ModelError::Transport { .. } | ModelError::Status { .. } | ModelError::EchoUnsupported(_)
        )
    }
}

/// One score per candidate label, in label-set order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub scores: IndexMap<String, f64>,
    pub backend_id: String,
}

impl LabelScores {
    /// Builds scores in the order of `labels`, checking exhaustiveness and finiteness.
    pub fn from_fn<F>(labels: &LabelSet, backend_id: &str, mut f: F) -> Result<Self, ModelError>
    where
        F: FnMut(&str) -> Result<f64, ModelError>,
    {
        let mut scores = IndexMap::with_capacity(labels.len());
        for label in labels.iter() {
            let s = f(label)?;
            if !s.is_finite() {
                return Err(ModelError::BadScore(label.to_string()));
            }
            scores.insert(label.to_string(), s);
        }
        Ok(LabelScores {
            scores,
            backend_id: backend_id.to_string(),
        })
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        self.scores.get(label).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Highest-scoring label; the first one in `labels` order wins ties.
pub fn argmax<'a>(scores: &LabelScores, labels: &'a LabelSet) -> Option<&'a str> {
    let mut best: Option<(&str, f64)> = None;
    for label in labels.iter() {
        let Some(s) = scores.get(label) else { continue };
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((label, s)),
        }
    }
    best.map(|(l, _)| l)
}

/// Anything that can score the candidate labels of a prompt.
///
/// `gold` is the query's true label. Real models ignore it; simulated backends
/// need it to define their behaviour.
pub trait LabelScorer: Send + Sync {
    fn backend_id(&self) -> &str;

    fn score_labels(&self, prompt: &PromptSpec, gold: Option<&str>) -> Result<LabelScores, ModelError>;

    /// Number of scoring requests actually issued (cache hits excluded).
    fn calls(&self) -> u64;
}

/// Scores every candidate and returns the argmax label alongside the scores.
pub fn predict(
    prompt: &PromptSpec,
    backend: &dyn LabelScorer,
    gold: Option<&str>,
) -> Result<(String, LabelScores), ModelError> {
    let scores = backend.score_labels(prompt, gold)?;
    if scores.len() != prompt.candidate_labels.len() {
        return Err(ModelError::BadScore(format!(
            "expected {} scores, got {}",
            prompt.candidate_labels.len(),
            scores.len()
        )));
    }
    let label = argmax(&scores, &prompt.candidate_labels)
        .ok_or_else(|| ModelError::BadScore("no candidate labels".into()))?
        .to_string();
    Ok((label, scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Http,
    SimOracle,
    SimCopy,
    SimNoisy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_base_delay_ms")]
    pub base_delay_ms: u64,
    #[serde(default = "default_max_delay_ms")]
    pub max_delay_ms: u64,
}

fn default_attempts() -> u32 {
    5
}
fn default_base_delay_ms() -> u64 {
    250
}
fn default_max_delay_ms() -> u64 {
    8_000
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: default_attempts(),
            base_delay_ms: default_base_delay_ms(),
            max_delay_ms: default_max_delay_ms(),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based), doubling each time.
    pub fn delay_ms(&self, retry: u32) -> u64 {
        let factor = 1u64.checked_shl(retry).unwrap_or(u64::MAX);
        self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms)
    }
}

fn default_kind() -> BackendKind {
    BackendKind::SimNoisy
}
fn default_timeout() -> f64 {
    60.0
}
fn default_max_concurrency() -> usize {
    8
}
fn default_accuracy() -> f64 {
    0.7
}
fn default_copy_probability() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendDescriptor {
    #[serde(default = "default_kind")]
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Probability that sim-noisy keeps the gold label.
    #[serde(default = "default_accuracy")]
    pub accuracy: f64,
    /// Per-class overrides of `accuracy`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub class_accuracy: BTreeMap<String, f64>,
    /// Probability that sim-copy repeats the query's predicted label.
    #[serde(default = "default_copy_probability")]
    pub copy_probability: f64,
    #[serde(default)]
    pub stream: u64,
}

impl Default for BackendDescriptor {
    fn default() -> Self {
        BackendDescriptor::sim(default_kind())
    }
}

impl BackendDescriptor {
    pub fn sim(kind: BackendKind) -> Self {
        BackendDescriptor {
            kind,
            url: None,
            model: None,
            timeout_secs: default_timeout(),
            max_concurrency: default_max_concurrency(),
            retry: RetryPolicy::default(),
            accuracy: default_accuracy(),
            class_accuracy: BTreeMap::new(),
            copy_probability: default_copy_probability(),
            stream: 0,
        }
    }

    pub fn http(url: impl Into<String>, model: impl Into<String>) -> Self {
        BackendDescriptor {
            url: Some(url.into()),
            model: Some(model.into()),
            ..BackendDescriptor::sim(BackendKind::Http)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(ModelError::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("accuracy", self.accuracy)?;
        unit("copy_probability", self.copy_probability)?;
        for (label, &acc) in &self.class_accuracy {
            unit(&format!("class_accuracy[{label}]"), acc)?;
        }
        if self.max_concurrency == 0 {
            return Err(ModelError::Config("max_concurrency must be at least 1".into()));
        }
        if self.kind == BackendKind::Http {
            if self.url.as_deref().is_none_or(str::is_empty) {
                return Err(ModelError::Config("http backend requires url".into()));
            }
            if self.model.as_deref().is_none_or(str::is_empty) {
                return Err(ModelError::Config("http backend requires model".into()));
            }
        }
        // Written this way so NaN is rejected too.
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(ModelError::Config("timeout_secs must be positive".into()));
        }
        Ok(())
    }

    /// Applies the [`ENDPOINT_ENV`] override, if set, to an HTTP descriptor.
    pub fn with_env_override(mut self) -> Self {
        if self.kind == BackendKind::Http {
            if let Ok(url) = std::env::var(ENDPOINT_ENV) {
                if !url.is_empty() {
                    self.url = Some(url);
                }
            }
        }
        self
    }

    /// Stable identifier used in cache keys, record provenance and reports.
    pub fn backend_id(&self) -> String {
        match self.kind {
            BackendKind::Http => format!(
                "http:{}@{}",
                self.model.as_deref().unwrap_or(""),
                self.url.as_deref().unwrap_or("").trim_end_matches('/')
            ),
            BackendKind::SimOracle => "sim-oracle".to_string(),
            BackendKind::SimNoisy => {
                let mut id = format!("sim-noisy(acc={},stream={}", self.accuracy, self.stream);
                for (l, a) in &self.class_accuracy {
                    id.push_str(&format!(",{l}={a}"));
                }
                id.push(')');
                id
            }
            BackendKind::SimCopy => {
                let mut id = format!(
                    "sim-copy(copy={},acc={},stream={}",
                    self.copy_probability, self.accuracy, self.stream
                );
                for (l, a) in &self.class_accuracy {
                    id.push_str(&format!(",{l}={a}"));
                }
                id.push(')');
                id
            }
        }
    }
}

/// Instantiates the backend described by `desc`.
///
/// `cache_path` enables the persistent score cache for HTTP backends.
pub fn build_backend(
    desc: &BackendDescriptor,
    normalize: bool,
    cache_path: Option<&Path>,
) -> Result<Arc<dyn LabelScorer>, ModelError> {
    desc.validate()?;
    match desc.kind {
        BackendKind::Http => {
            #[cfg(feature = "http")]
            {
                let cache = match cache_path {
                    Some(p) => Some(Arc::new(ScoreCache::open(p)?)),
                    None => None,
                };
                Ok(Arc::new(HttpBackend::new(desc, normalize, cache)?))
            }
            #[cfg(not(feature = "http"))]
            {
                let _ = (normalize, cache_path);
                Err(ModelError::Config("built without the `http` feature".into()))
            }
        }
        _ => Ok(Arc::new(SimBackend::new(desc)?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scores(pairs: &[(&str, f64)]) -> LabelScores {
        LabelScores {
            scores: pairs.iter().map(|(l, s)| (l.to_string(), *s)).collect(),
            backend_id: "t".into(),
        }
    }

    #[test]
    fn ties_go_to_first_label() {
        let labels = LabelSet::new(["a", "b"]).unwrap();
        assert_eq!(argmax(&scores(&[("a", -1.0), ("b", -1.0)]), &labels), Some("a"));
        let labels = LabelSet::new(["b", "a"]).unwrap();
        assert_eq!(argmax(&scores(&[("a", -1.0), ("b", -1.0)]), &labels), Some("b"));
    }

    #[test]
    fn plain_argmax() {
        let labels = LabelSet::new(["neg", "pos"]).unwrap();
        assert_eq!(argmax(&scores(&[("neg", -5.2), ("pos", -0.1)]), &labels), Some("pos"));
    }

    #[test]
    fn non_finite_scores_rejected() {
        let labels = LabelSet::new(["a", "b"]).unwrap();
        let err = LabelScores::from_fn(&labels, "t", |l| Ok(if l == "b" { f64::NAN } else { 0.0 })).unwrap_err();
        assert!(matches!(err, ModelError::BadScore(l) if l == "b"));
    }

    #[test]
    fn http_descriptor_requires_url_and_model() {
        let mut d = BackendDescriptor::sim(BackendKind::Http);
        assert!(d.validate().is_err());
        d.url = Some("http://localhost:1".into());
        assert!(d.validate().is_err());
        d.model = Some("m".into());
        assert!(d.validate().is_ok());
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 100,
            max_delay_ms: 500,
        };
        assert_eq!(
            (0..5).map(|i| p.delay_ms(i)).collect::<Vec<_>>(),
            vec![100, 200, 400, 500, 500]
        );
        assert_eq!(p.delay_ms(200), 500);
    }

    proptest! {
        #[test]
        fn argmax_is_shift_invariant(vals in prop::collection::vec(-20i32..20, 2..6), shift in -100.0f64..100.0) {
            let names: Vec<String> = (0..vals.len()).map(|i| format!("l{i}")).collect();
            let labels = LabelSet::new(names.clone()).unwrap();
            let base = LabelScores {
                scores: names.iter().cloned().zip(vals.iter().map(|&v| v as f64)).collect(),
                backend_id: "t".into(),
            };
            let shifted = LabelScores {
                scores: base.scores.iter().map(|(l, s)| (l.clone(), s + shift)).collect(),
                backend_id: "t".into(),
            };
            prop_assert_eq!(argmax(&base, &labels), argmax(&shifted, &labels));
        }
    }
}
