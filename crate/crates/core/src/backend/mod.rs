//! Client for inference servers speaking the OpenAI-compatible
//! `/v1/completions` protocol.

mod template;
pub mod stub;

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::oracle::{
    verdict_from_decision_probability, Generation, Generator, OracleError, Tier, VerificationQuery,
    VerificationVerdict, Verifier,
};
use crate::step::{estimate_tokens, BoundaryDelimiter, ReasoningContext, Step, StepEnd, StepOrigin};

pub use template::{VerificationPromptTemplate, TEMPLATE_VERSION};

pub const DEFAULT_API_KEY_ENV: &str = "STEPCASCADE_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Environment variable holding the bearer token, if any.
    pub api_key_env: Option<String>,
    pub request_timeout_secs: f64,
    pub max_retries: u32,
    pub retry_backoff_ms: u64,
    pub stop_sequences: Vec<String>,
    pub max_step_tokens: u32,
    pub logprob_top_k: u32,
    pub temperature: f64,
    pub max_in_flight: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000".into(),
            model_name: "default".into(),
            api_key_env: Some(DEFAULT_API_KEY_ENV.into()),
            request_timeout_secs: 60.0,
            max_retries: 2,
            retry_backoff_ms: 100,
            stop_sequences: vec!["\n\n".into()],
            max_step_tokens: 512,
            logprob_top_k: 5,
            temperature: 0.0,
            max_in_flight: 8,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::Config(m.into()));
        if !(self.request_timeout_secs.is_finite() && self.request_timeout_secs > 0.0) {
            return bad("request_timeout_secs must be positive");
        }
        if self.stop_sequences.is_empty() || self.stop_sequences.iter().any(String::is_empty) {
            return bad("stop_sequences must be non-empty");
        }
        if self.max_step_tokens == 0 {
            return bad("max_step_tokens must be positive");
        }
        if self.logprob_top_k < 2 {
            return bad("logprob_top_k must be at least 2");
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be positive");
        }
        if self.base_url.is_empty() || self.model_name.is_empty() {
            return bad("base_url and model_name are required");
        }
        Ok(())
    }

    fn endpoint_key(&self) -> String {
        format!("{}|{}", self.base_url.trim_end_matches('/'), self.model_name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("endpoint configuration: {0}")]
    Config(String),
    #[error("request failed after {} attempt(s): {}", attempts.len(), attempts.last().map_or("", |a| a.error.as_str()))]
    Transport { attempts: Vec<AttemptRecord> },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("endpoint lacks a required capability: {0}")]
    Capability(String),
}

impl From<BackendError> for OracleError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Transport { ref attempts } => {
                OracleError::Backend { message: e.to_string(), attempts: attempts.len() }
            }
            BackendError::Protocol(m) => OracleError::Protocol(m),
            BackendError::Config(m) | BackendError::Capability(m) => OracleError::Invalid(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stop: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Logprobs {
    #[serde(default)]
    pub tokens: Vec<String>,
    #[serde(default)]
    pub token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    pub top_logprobs: Vec<Option<HashMap<String, f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub text: String,
    #[serde(default)]
    pub finish_reason: Option<String>,
    /// Matched stop string; servers that report it send `null` when the
    /// model emitted end of sequence.
    #[serde(default, skip_serializing_if = "Option::is_none", with = "present_null")]
    pub stop_reason: Option<Option<serde_json::Value>>,
    #[serde(default)]
    pub logprobs: Option<Logprobs>,
}

mod present_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Option<serde_json::Value>>, s: S) -> Result<S::Ok, S::Error> {
        v.as_ref().and_then(|x| x.as_ref()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Option<serde_json::Value>>, D::Error> {
        Ok(Some(Option::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub completion_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub choices: Vec<Choice>,
    #[serde(default)]
    pub usage: Option<Usage>,
}

/// Caps concurrent requests.
struct InFlightGate {
    cap: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlightGate);

impl InFlightGate {
    fn new(cap: usize) -> Self {
        Self { cap, active: Mutex::new(0), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.active.lock().unwrap_or_else(|p| p.into_inner());
        while *n >= self.cap {
            n = self.freed.wait(n).unwrap_or_else(|p| p.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.active.lock().unwrap_or_else(|p| p.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

type ProbeCell = Arc<OnceLock<Result<(), BackendError>>>;

fn probe_registry() -> &'static Mutex<HashMap<String, ProbeCell>> {
    static REGISTRY: OnceLock<Mutex<HashMap<String, ProbeCell>>> = OnceLock::new();
    REGISTRY.get_or_init(Default::default)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientStats {
    pub requests: u64,
    pub retries: u64,
    pub failures: u64,
}

/// Blocking completions client with retries and an in-flight cap. Safe to
/// share across threads.
pub struct RemoteClient {
    cfg: EndpointConfig,
    http: reqwest::blocking::Client,
    api_key: Option<String>,
    gate: InFlightGate,
    stats: Mutex<ClientStats>,
}

impl std::fmt::Debug for RemoteClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteClient").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl RemoteClient {
    pub fn new(cfg: EndpointConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.request_timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let api_key = cfg.api_key_env.as_deref().and_then(|v| std::env::var(v).ok()).filter(|k| !k.is_empty());
        let gate = InFlightGate::new(cfg.max_in_flight);
        Ok(Self { cfg, http, api_key, gate, stats: Mutex::default() })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    pub fn stats(&self) -> ClientStats {
        *self.stats.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn bump(&self, f: impl FnOnce(&mut ClientStats)) {
        f(&mut self.stats.lock().unwrap_or_else(|p| p.into_inner()));
    }

    fn url(&self) -> String {
        format!("{}/v1/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    fn send_once(&self, req: &CompletionRequest) -> Result<CompletionResponse, (bool, String)> {
        let _permit = self.gate.acquire();
        let mut builder = self.http.post(self.url()).json(req);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| (true, e.to_string()))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| (true, e.to_string()))?;
        if !status.is_success() {
            let retryable = status.is_server_error() || status.as_u16() == 429;
            return Err((retryable, format!("HTTP {status}: {}", body.chars().take(200).collect::<String>())));
        }
        serde_json::from_str(&body).map_err(|e| (false, format!("protocol: {e}")))
    }

    /// Sends a completion request, retrying transport and server errors.
    pub fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let mut attempts = Vec::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                self.bump(|s| s.retries += 1);
                std::thread::sleep(Duration::from_millis(self.cfg.retry_backoff_ms * attempt as u64));
            }
            self.bump(|s| s.requests += 1);
            match self.send_once(req) {
                Ok(resp) if resp.choices.is_empty() => {
                    return Err(BackendError::Protocol("response has no choices".into()));
                }
                Ok(resp) => return Ok(resp),
                Err((false, msg)) => {
                    self.bump(|s| s.failures += 1);
                    return Err(BackendError::Protocol(msg));
                }
                Err((true, msg)) => {
                    warn!(attempt, error = %msg, "completion request failed");
                    self.bump(|s| s.failures += 1);
                    attempts.push(AttemptRecord { attempt, error: msg });
                }
            }
        }
        Err(BackendError::Transport { attempts })
    }

    /// Checks once per endpoint and process that the server returns top-k
    /// log-probabilities.
    pub fn probe(&self) -> Result<(), BackendError> {
        let cell = {
            let mut reg = probe_registry().lock().unwrap_or_else(|p| p.into_inner());
            reg.entry(self.cfg.endpoint_key()).or_default().clone()
        };
        cell.get_or_init(|| {
            debug!(endpoint = %self.cfg.endpoint_key(), "probing logprob support");
            let req = CompletionRequest {
                model: self.cfg.model_name.clone(),
                prompt: "Answer Yes or No. Is 2 greater than 1?\nAnswer:".into(),
                max_tokens: 1,
                temperature: 0.0,
                stop: Vec::new(),
                logprobs: Some(self.cfg.logprob_top_k),
            };
            let resp = self.complete(&req)?;
            match first_top_logprobs(&resp.choices[0]) {
                Some(top) if !top.is_empty() => Ok(()),
                _ => Err(BackendError::Capability("no top log-probabilities on the first token".into())),
            }
        })
        .clone()
    }

    /// One step after `context ⊕ prefix`, stopping at the step boundary.
    pub fn generate_step(
        &self,
        context: &ReasoningContext,
        prefix: &[Step],
        delimiter: &BoundaryDelimiter,
    ) -> Result<Generation, BackendError> {
        let req = CompletionRequest {
            model: self.cfg.model_name.clone(),
            prompt: context.render(delimiter, prefix),
            max_tokens: self.cfg.max_step_tokens,
            temperature: self.cfg.temperature,
            stop: self.cfg.stop_sequences.clone(),
            logprobs: None,
        };
        let resp = self.complete(&req)?;
        let usage_tokens = resp.usage.as_ref().and_then(|u| u.completion_tokens);
        let choice = &resp.choices[0];
        let text = strip_stop(&choice.text, &self.cfg.stop_sequences).trim().to_owned();
        let end = match (choice.finish_reason.as_deref(), &choice.stop_reason) {
            (Some("length"), _) => StepEnd::Incomplete,
            (_, Some(None)) => StepEnd::EndOfSequence,
            _ => StepEnd::Delimiter,
        };
        let tokens = estimate_tokens(&text);
        let passes = usage_tokens.map_or(tokens, |t| t as usize).max(1);
        let step = Step::new(text, StepOrigin::Target).with_end(end);
        Ok(Generation { step, forward_passes: passes })
    }

    /// Verdict from the first-token Yes/No distribution.
    pub fn verify(
        &self,
        query: &VerificationQuery<'_>,
        template: &VerificationPromptTemplate,
        tier: Tier,
    ) -> Result<VerificationVerdict, OracleError> {
        self.probe()?;
        let req = CompletionRequest {
            model: self.cfg.model_name.clone(),
            prompt: template.render(query),
            max_tokens: 1,
            temperature: 0.0,
            stop: Vec::new(),
            logprobs: Some(self.cfg.logprob_top_k),
        };
        let resp = self.complete(&req)?;
        let top = first_top_logprobs(&resp.choices[0])
            .ok_or_else(|| OracleError::Unverifiable("response carries no log-probabilities".into()))?;
        let p_accept = template.p_accept(&top)?;
        verdict_from_decision_probability(p_accept, tier)
    }
}

fn strip_stop<'a>(text: &'a str, stops: &[String]) -> &'a str {
    stops.iter().fold(text, |t, s| t.strip_suffix(s.as_str()).unwrap_or(t))
}

/// Top alternatives of the first generated token, with the sampled token
/// folded in when a server reports it separately.
fn first_top_logprobs(choice: &Choice) -> Option<HashMap<String, f64>> {
    let lp = choice.logprobs.as_ref()?;
    let mut top = lp.top_logprobs.first().cloned().flatten().unwrap_or_default();
    if let (Some(tok), Some(Some(l))) = (lp.tokens.first(), lp.token_logprobs.first()) {
        top.entry(tok.clone()).or_insert(*l);
    }
    (!top.is_empty()).then_some(top)
}

/// Free-function form of [`RemoteClient::generate_step`] with an empty prefix.
pub fn remote_generate_step(client: &RemoteClient, context: &ReasoningContext) -> Result<Step, OracleError> {
    let delimiter = BoundaryDelimiter::new(client.config().stop_sequences[0].clone()).map_err(|e| OracleError::Invalid(e.to_string()))?;
    Ok(client.generate_step(context, &[], &delimiter)?.step)
}

/// Free-function form of [`RemoteClient::verify`] for the draft tier.
pub fn remote_verify(
    client: &RemoteClient,
    query: &VerificationQuery<'_>,
    template: &VerificationPromptTemplate,
) -> Result<VerificationVerdict, OracleError> {
    client.verify(query, template, Tier::Draft)
}

/// [`Generator`] backed by a remote endpoint.
#[derive(Debug, Clone)]
pub struct RemoteGenerator {
    client: Arc<RemoteClient>,
    delimiter: BoundaryDelimiter,
}

impl RemoteGenerator {
    pub fn new(client: Arc<RemoteClient>, delimiter: BoundaryDelimiter) -> Self {
        Self { client, delimiter }
    }
}

impl Generator for RemoteGenerator {
    fn generate(&self, context: &ReasoningContext, prefix: &[Step]) -> Result<Generation, OracleError> {
        let g = self.client.generate_step(context, prefix, &self.delimiter)?;
        if g.step.is_empty() {
            return Err(OracleError::Exhausted);
        }
        Ok(g)
    }
}

/// [`Verifier`] backed by a remote endpoint.
#[derive(Debug, Clone)]
pub struct RemoteVerifier {
    client: Arc<RemoteClient>,
    template: VerificationPromptTemplate,
    tier: Tier,
}

impl RemoteVerifier {
    pub fn new(client: Arc<RemoteClient>, template: VerificationPromptTemplate, tier: Tier) -> Self {
        Self { client, template, tier }
    }
}

impl Verifier for RemoteVerifier {
    fn verify(&self, query: &VerificationQuery<'_>) -> Result<VerificationVerdict, OracleError> {
        self.client.verify(query, &self.template, self.tier)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(EndpointConfig::default().validate().is_ok());
        assert!(EndpointConfig { logprob_top_k: 1, ..Default::default() }.validate().is_err());
        assert!(EndpointConfig { request_timeout_secs: 0.0, ..Default::default() }.validate().is_err());
        assert!(EndpointConfig { stop_sequences: vec![], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn stop_reason_null_is_distinguished_from_absent() {
        let c: Choice = serde_json::from_str(r#"{"text":"a","finish_reason":"stop","stop_reason":null}"#).unwrap();
        assert_eq!(c.stop_reason, Some(None));
        let c: Choice = serde_json::from_str(r#"{"text":"a","finish_reason":"stop"}"#).unwrap();
        assert_eq!(c.stop_reason, None);
    }

    #[test]
    fn request_uses_wire_field_names() {
        let req = CompletionRequest {
            model: "m".into(),
            prompt: "p".into(),
            max_tokens: 1,
            temperature: 0.0,
            stop: vec!["\n\n".into()],
            logprobs: Some(5),
        };
        let v = serde_json::to_value(&req).unwrap();
        for k in ["model", "prompt", "max_tokens", "temperature", "stop", "logprobs"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }
}
