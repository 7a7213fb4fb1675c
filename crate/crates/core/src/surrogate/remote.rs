//! OpenAI-style chat-completion client.

use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureKind, FeatureSpec, Value};

use super::{
    match_selection, parse_feature_list, parse_strict_float, Context, OutcomeSample, PromptSet,
    QueryCounter, Surrogate, SurrogateConfig, SurrogateError,
};

/// Bearer token for the endpoint, if any.
pub const API_KEY_VAR: &str = "SURROGATE_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChatMessage,
}

/// Counting semaphore bounding concurrent requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock();
        while *free == 0 {
            self.cv.wait(&mut free);
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock() += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteSurrogate {
    config: SurrogateConfig,
    prompts: PromptSet,
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    api_key: Option<String>,
    gate: Gate,
    counter: QueryCounter,
}

impl RemoteSurrogate {
    /// Must not be called from inside an async runtime; the blocking client
    /// owns its own.
    pub fn new(config: SurrogateConfig, prompts: PromptSet) -> Result<Self, SurrogateError> {
        config.validate()?;
        let url = config
            .endpoint_url
            .clone()
            .ok_or_else(|| SurrogateError::Config("endpoint_url is required".into()))?;
        let model = config
            .model_name
            .clone()
            .ok_or_else(|| SurrogateError::Config("model_name is required".into()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| SurrogateError::Config(e.to_string()))?;
        Ok(Self {
            gate: Gate::new(config.max_in_flight),
            api_key: std::env::var(API_KEY_VAR).ok().filter(|k| !k.is_empty()),
            config,
            prompts,
            client,
            url,
            model,
            counter: QueryCounter::default(),
        })
    }

    fn request(&self, user: &str) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages: vec![
                ChatMessage {
                    role: "system".into(),
                    content: self.prompts.system(),
                },
                ChatMessage {
                    role: "user".into(),
                    content: user.to_string(),
                },
            ],
            temperature: self.config.temperature,
        }
    }

    fn send_once(&self, body: &ChatRequest) -> Result<String, SurrogateError> {
        let _permit = self.gate.acquire();
        let mut req = self.client.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| SurrogateError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(SurrogateError::Transport(format!("HTTP {status}")));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| SurrogateError::Transport(format!("bad response body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| SurrogateError::Transport("response has no choices".into()))
    }

    /// Sends `user` and parses the reply, retrying transport and parse
    /// failures up to `max_retries` times with doubling delays. The last
    /// error is returned when all attempts fail.
    fn ask<T>(
        &self,
        user: &str,
        parse: impl Fn(&str) -> Result<T, SurrogateError>,
    ) -> Result<T, SurrogateError> {
        let body = self.request(user);
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut attempt = 0;
        loop {
            let result = self.send_once(&body).and_then(|raw| parse(&raw));
            match result {
                Ok(v) => return Ok(v),
                Err(e) if attempt >= self.config.max_retries => return Err(e),
                Err(e) => {
                    tracing::warn!(attempt, error = %e, "surrogate query failed, retrying");
                    std::thread::sleep(delay);
                    delay = delay.saturating_mul(2);
                    attempt += 1;
                }
            }
        }
    }

    fn parse_sample(feature: &FeatureSpec, raw: &str) -> Result<OutcomeSample, SurrogateError> {
        let bad = || SurrogateError::UnparseableSample {
            feature: feature.name.clone(),
            raw: raw.to_string(),
        };
        let value = match feature.kind {
            FeatureKind::Numeric => Value::Number(parse_strict_float(raw).map_err(|_| bad())?),
            FeatureKind::Categorical => {
                let trimmed = raw.trim().trim_end_matches('.').trim_matches(['\'', '"']);
                Value::Category(feature.match_category(trimmed).ok_or_else(bad)?.to_string())
            }
        };
        Ok(OutcomeSample::new(&feature.name, value, raw.trim()))
    }
}

impl Surrogate for RemoteSurrogate {
    fn sample_outcomes(
        &self,
        ctx: &Context<'_>,
        feature: &FeatureSpec,
        m: usize,
        _seed: u64,
    ) -> Result<Vec<OutcomeSample>, SurrogateError> {
        if self.prompts.schema.feature(&feature.name).is_none() {
            return Err(SurrogateError::UnknownFeature(feature.name.clone()));
        }
        self.counter.add_outcome(m as u64);
        let prompt = self.prompts.sampling(ctx.vignette, ctx.disease, feature);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..m)
                .map(|_| s.spawn(|| self.ask(&prompt, |raw| Self::parse_sample(feature, raw))))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sampling thread panicked"))
                .collect()
        })
    }

    fn estimate_risk(&self, ctx: &Context<'_>, _draw: usize) -> Result<f64, SurrogateError> {
        self.counter.add_risk(1);
        let prompt = self.prompts.risk(ctx.vignette, ctx.disease);
        self.ask(&prompt, |raw| {
            parse_strict_float(raw)
                .map(|p| p.clamp(0.0, 1.0))
                .map_err(|_| SurrogateError::UnparseableRisk {
                    raw: raw.to_string(),
                })
        })
    }

    fn implicit_select(
        &self,
        ctx: &Context<'_>,
        unknown: &[String],
    ) -> Result<String, SurrogateError> {
        self.counter.add_selection(1);
        let prompt = self.prompts.implicit(ctx.vignette, ctx.disease, unknown);
        self.ask(&prompt, |raw| {
            match_selection(raw, unknown)
                .map(str::to_string)
                .ok_or_else(|| SurrogateError::InvalidSelection {
                    raw: raw.to_string(),
                })
        })
    }

    fn global_select(&self, all: &[String], n: usize) -> Result<Vec<String>, SurrogateError> {
        self.counter.add_selection(1);
        let prompt = self.prompts.global(all, n);
        self.ask(&prompt, |raw| parse_feature_list(raw, all, n))
    }

    fn counter(&self) -> &QueryCounter {
        &self.counter
    }
}
