use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use super::{cache_key, BackendDescriptor, LabelScorer, LabelScores, ModelError, RetryPolicy, ScoreCache};
use crate::prompting::{continuation, PromptSpec};

const ECHO_HINT: &str = "the server must support POST /v1/completions with echo=true and logprobs \
     (e.g. vLLM or llama.cpp's OpenAI-compatible server); chat-only endpoints cannot score labels";

const BODY_EXCERPT: usize = 300;

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("limiter lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("limiter lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limiter lock") += 1;
        self.0.cv.notify_one();
    }
}

/// Scores labels through an OpenAI-compatible completions endpoint.
///
/// One request per `(prompt, label)`: the label continuation `" {label}"` is
/// appended to the prompt, the server echoes the prompt with per-token
/// log-probabilities, and the continuation tokens' log-probabilities are summed
/// (or averaged when `normalize` is set).
#[derive(Debug)]
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    retry: RetryPolicy,
    normalize: bool,
    cache: Option<Arc<ScoreCache>>,
    limiter: Limiter,
    calls: AtomicU64,
    id: String,
    zero_tokens_rejected: AtomicBool,
}

impl HttpBackend {
    pub fn new(desc: &BackendDescriptor, normalize: bool, cache: Option<Arc<ScoreCache>>) -> Result<Self, ModelError> {
        desc.validate()?;
        let url = desc.url.as_deref().unwrap_or_default().trim_end_matches('/');
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(desc.timeout_secs))
            .build()
            .map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(HttpBackend {
            client,
            endpoint: format!("{url}/v1/completions"),
            model: desc.model.clone().unwrap_or_default(),
            retry: desc.retry.clone(),
            normalize,
            cache,
            limiter: Limiter::new(desc.max_concurrency),
            calls: AtomicU64::new(0),
            id: desc.backend_id(),
            zero_tokens_rejected: AtomicBool::new(false),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Log-probability of `" {label}"` following `prompt_text`.
    pub fn http_score(&self, prompt_text: &str, label: &str) -> Result<f64, ModelError> {
        let key = cache_key(&self.id, prompt_text, label, self.normalize);
        if let Some(cache) = &self.cache {
            if let Some(score) = cache.get(&key) {
                return Ok(score);
            }
        }
        let full = format!("{prompt_text}{}", continuation(label));
        let prompt_chars = prompt_text.chars().count();
        let full_chars = full.chars().count();
        let response = self.complete(&full)?;
        let logprobs = extract_continuation_logprobs(&response, prompt_chars, full_chars)?;
        let total: f64 = logprobs.iter().sum();
        let score = if self.normalize {
            total / logprobs.len() as f64
        } else {
            total
        };
        if !score.is_finite() {
            return Err(ModelError::BadScore(label.to_string()));
        }
        if let Some(cache) = &self.cache {
            cache.insert(key, score)?;
        }
        Ok(score)
    }

    fn complete(&self, text: &str) -> Result<Value, ModelError> {
        let mut attempt: u32 = 0;
        loop {
            let max_tokens = if self.zero_tokens_rejected.load(Ordering::Relaxed) {
                1
            } else {
                0
            };
            let body = json!({
                "model": self.model,
                "prompt": text,
                "max_tokens": max_tokens,
                "echo": true,
                "logprobs": 1,
            });
            attempt += 1;
            match self.post_once(&body) {
                Ok(v) => return Ok(v),
                Err(ModelError::Status {
                    status: 400 | 422,
                    body,
                }) if max_tokens == 0 && !self.zero_tokens_rejected.load(Ordering::Relaxed) => {
                    // Some servers refuse max_tokens=0; echo one generated token and discard it.
                    log::info!("endpoint rejected max_tokens=0 ({body}); falling back to max_tokens=1");
                    self.zero_tokens_rejected.store(true, Ordering::Relaxed);
                    attempt -= 1;
                }
                Err(e) if retryable(&e) && attempt < self.retry.max_attempts => {
                    let delay = self.retry.delay_ms(attempt - 1);
                    log::warn!("request failed ({e}); retry {attempt} in {delay} ms");
                    std::thread::sleep(Duration::from_millis(delay));
                }
                Err(ModelError::Transport { message, .. }) => {
                    return Err(ModelError::Transport {
                        attempts: attempt,
                        message,
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn post_once(&self, body: &Value) -> Result<Value, ModelError> {
        let _permit = self.limiter.acquire();
        self.calls.fetch_add(1, Ordering::Relaxed);
        let response = self
            .client
            .post(&self.endpoint)
            .json(body)
            .send()
            .map_err(|e| ModelError::Transport {
                attempts: 1,
                message: format!("{}: {e}", self.endpoint),
            })?;
        let status = response.status();
        let text = response.text().map_err(|e| ModelError::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        if !status.is_success() {
            let excerpt: String = text.chars().take(BODY_EXCERPT).collect();
            return Err(ModelError::Status {
                status: status.as_u16(),
                body: excerpt,
            });
        }
        serde_json::from_str(&text)
            .map_err(|e| ModelError::EchoUnsupported(format!("response is not JSON ({e}); {ECHO_HINT}")))
    }
}

fn retryable(e: &ModelError) -> bool {
    match e {
        ModelError::Transport { .. } => true,
        ModelError::Status { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

/// Picks the log-probabilities of the tokens spanning characters
/// `[prompt_chars, full_chars)` out of an echoed completions response.
///
/// Offsets come from `text_offset` when the server reports it, otherwise from
/// the cumulative character lengths of `tokens`. Tokens starting at or after
/// `full_chars` were generated and are ignored.
pub fn extract_continuation_logprobs(
    response: &Value,
    prompt_chars: usize,
    full_chars: usize,
) -> Result<Vec<f64>, ModelError> {
    let logprobs = response
        .pointer("/choices/0/logprobs")
        .filter(|v| !v.is_null())
        .ok_or_else(|| ModelError::EchoUnsupported(format!("no logprobs in response; {ECHO_HINT}")))?;
    let tokens: Vec<&str> = logprobs
        .get("tokens")
        .and_then(Value::as_array)
        .ok_or_else(|| ModelError::EchoUnsupported(format!("logprobs.tokens missing; {ECHO_HINT}")))?
        .iter()
        .map(|t| t.as_str().unwrap_or(""))
        .collect();
    let token_logprobs = logprobs
        .get("token_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| ModelError::EchoUnsupported(format!("logprobs.token_logprobs missing; {ECHO_HINT}")))?;
    if token_logprobs.len() != tokens.len() {
        return Err(ModelError::Alignment(format!(
            "{} tokens but {} token_logprobs",
            tokens.len(),
            token_logprobs.len()
        )));
    }
    let offsets: Vec<usize> = match logprobs.get("text_offset").and_then(Value::as_array) {
        Some(off) if off.len() == tokens.len() => off
            .iter()
            .map(|o| o.as_u64().map(|o| o as usize))
            .collect::<Option<_>>()
            .ok_or_else(|| ModelError::Alignment("non-integer text_offset".into()))?,
        _ => tokens
            .iter()
            .scan(0usize, |acc, t| {
                let start = *acc;
                *acc += t.chars().count();
                Some(start)
            })
            .collect(),
    };

    let mut picked = Vec::new();
    let mut first_start = None;
    for (i, tok) in tokens.iter().enumerate() {
        let start = offsets[i];
        let end = start + tok.chars().count();
        if start < prompt_chars && end > prompt_chars {
            return Err(ModelError::Alignment(format!(
                "token {tok:?} straddles the end of the prompt"
            )));
        }
        if start >= prompt_chars && start < full_chars {
            first_start.get_or_insert(start);
            let lp = token_logprobs[i]
                .as_f64()
                .filter(|v| v.is_finite())
                .ok_or_else(|| ModelError::BadScore(format!("token {tok:?} has no finite logprob")))?;
            picked.push(lp);
        }
    }
    match first_start {
        None => Err(ModelError::Alignment("no tokens cover the label continuation".into())),
        Some(s) if s != prompt_chars => Err(ModelError::Alignment(format!(
            "continuation should start at character {prompt_chars}, first token starts at {s}"
        ))),
        Some(_) => Ok(picked),
    }
}

impl LabelScorer for HttpBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn score_labels(&self, prompt: &PromptSpec, _gold: Option<&str>) -> Result<LabelScores, ModelError> {
        LabelScores::from_fn(&prompt.candidate_labels, &self.id, |label| {
            self.http_score(&prompt.rendered_text, label)
        })
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}
