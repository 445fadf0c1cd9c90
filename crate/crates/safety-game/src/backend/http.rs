//! Completions-style HTTP backend. Log-likelihoods are measured by echoing
//! the prompt+completion with `logprobs` enabled and summing the token
//! log-probabilities past the prompt boundary; generation uses plain
//! sampled completions. Auth comes from the `SAFETY_GAME_API_TOKEN`
//! environment variable when set.

use serde::Deserialize;
use serde_json::json;

use super::{Backend, BackendConfig, BackendError, GenParams};

/// Environment variable holding the bearer token for the endpoint.
pub const TOKEN_ENV_VAR: &str = "SAFETY_GAME_API_TOKEN";

pub struct HttpBackend {
    endpoint: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Debug, Deserialize)]
struct CompletionsResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Debug, Deserialize)]
struct Logprobs {
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

impl HttpBackend {
    pub fn from_config(config: &BackendConfig) -> Result<Self, BackendError> {
        if config.endpoint.is_empty() {
            return Err(BackendError::InvalidConfig("http backend requires an endpoint".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::InvalidConfig(e.to_string()))?;
        Ok(Self {
            endpoint: config.endpoint.trim_end_matches('/').to_string(),
            token: std::env::var(TOKEN_ENV_VAR).ok(),
            client,
        })
    }

    fn post(&self, body: serde_json::Value) -> Result<CompletionsResponse, BackendError> {
        let mut request = self.client.post(&self.endpoint).json(&body);
        if let Some(token) = &self.token {
            request = request.bearer_auth(token);
        }
        let response = request.send().map_err(|e| {
            // Connection-level failures are worth retrying.
            BackendError::Transient(e.to_string())
        })?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transient(format!("http status {status}")));
        }
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(BackendError::Rejected(format!("http status {status}: {text}")));
        }
        response
            .json::<CompletionsResponse>()
            .map_err(|e| BackendError::Rejected(format!("unparseable response: {e}")))
    }

    /// Sum of completion-token log-probabilities for `prompt + completion`.
    fn completion_loglik(&self, model: &str, prompt: &str, completion: &str) -> Result<f64, BackendError> {
        let full = format!("{prompt}{completion}");
        let body = json!({
            "model": model,
            "prompt": full,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
        });
        let response = self.post(body)?;
        let choice = response
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Rejected("empty choices".into()))?;
        let logprobs = choice.logprobs.ok_or(BackendError::MissingLogprobs)?;
        if logprobs.token_logprobs.len() != logprobs.text_offset.len() {
            return Err(BackendError::Rejected("mismatched logprob arrays".into()));
        }
        let boundary = prompt.len();
        let mut total = 0.0;
        let mut counted = 0usize;
        for (offset, lp) in logprobs.text_offset.iter().zip(&logprobs.token_logprobs) {
            if *offset >= boundary {
                let lp = lp.ok_or(BackendError::MissingLogprobs)?;
                total += lp;
                counted += 1;
            }
        }
        if counted == 0 {
            return Err(BackendError::MissingLogprobs);
        }
        if !total.is_finite() {
            return Err(BackendError::NonFinite);
        }
        Ok(total)
    }
}

impl Backend for HttpBackend {
    fn logprob_pair(
        &self,
        model: &str,
        prompt: &str,
        completion_a: &str,
        completion_b: &str,
    ) -> Result<(f64, f64), BackendError> {
        let a = self.completion_loglik(model, prompt, completion_a)?;
        let b = if completion_b == completion_a {
            a
        } else {
            self.completion_loglik(model, prompt, completion_b)?
        };
        Ok((a, b))
    }

    fn generate(
        &self,
        model: &str,
        prompt: &str,
        params: &GenParams,
        n: usize,
        seed: u64,
        _offset: usize,
    ) -> Result<Vec<String>, BackendError> {
        let body = json!({
            "model": model,
            "prompt": prompt,
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "repetition_penalty": params.repetition_penalty,
            "stop": params.stop,
            "n": n,
            "seed": seed,
        });
        let response = self.post(body)?;
        Ok(response
            .choices
            .into_iter()
            .filter_map(|c| c.text)
            .collect())
    }
}
