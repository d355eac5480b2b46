//! Provider-agnostic structured-completion client.
//!
//! One interface covers HTTP chat-completion providers and the deterministic
//! offline stub backends; adding a provider touches only this module. Every
//! response payload is validated against the request's output schema —
//! enforced, not assumed — with a bounded repair-retry loop for malformed
//! model output. Credentials come from environment variables only.

mod http;
mod limiter;
pub mod schema_check;
mod stub;

pub use limiter::RateLimiter;
pub use stub::stub_judge_rules;

use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::label::Label;
use crate::schema::ParameterKey;

/// Number of repair retries after a schema-invalid response.
pub const RETRY_BUDGET: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpProvider,
    Stub,
}

/// A configured model backend. `temperature` defaults to zero; benchmark
/// runs keep it there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    #[serde(default)]
    pub id: String,
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    pub model_name: String,
    #[serde(default)]
    pub credential_env_var: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    /// Requests per minute; 0 means unlimited. Applies to HTTP providers.
    #[serde(default = "default_rate_limit")]
    pub rate_limit: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Answer returned by a stub backend serving the baseline role.
    #[serde(default)]
    pub fixed_label: Option<Label>,
}

fn default_max_output_tokens() -> u32 {
    4096
}

fn default_rate_limit() -> u32 {
    60
}

fn default_timeout_secs() -> u64 {
    120
}

impl BackendDescriptor {
    /// Offline deterministic backend.
    pub fn stub(id: &str) -> Self {
        BackendDescriptor {
            id: id.to_string(),
            kind: BackendKind::Stub,
            endpoint: None,
            model_name: format!("{id}-offline"),
            credential_env_var: None,
            temperature: 0.0,
            max_output_tokens: default_max_output_tokens(),
            rate_limit: 0,
            timeout_secs: default_timeout_secs(),
            fixed_label: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.id.is_empty() {
            return Err(GatewayError::InvalidDescriptor("backend id is empty".to_string()));
        }
        if self.kind == BackendKind::HttpProvider {
            if self.endpoint.is_none() {
                return Err(GatewayError::InvalidDescriptor(format!(
                    "http backend \"{}\" has no endpoint",
                    self.id
                )));
            }
            if self.credential_env_var.is_none() {
                return Err(GatewayError::InvalidDescriptor(format!(
                    "http backend \"{}\" names no credential_env_var",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Which pipeline role a request serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    Extractor,
    Reference,
    Judge,
    Baseline,
}

#[derive(Debug, Clone)]
pub struct StructuredRequest {
    pub system_prompt: String,
    pub user_content: String,
    pub output_schema: Value,
    pub role_tag: RoleTag,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt: u64,
    pub completion: u64,
}

#[derive(Debug, Clone)]
pub struct StructuredResponse {
    /// Schema-valid payload.
    pub payload: Value,
    pub raw_text: String,
    pub attempts: u32,
    pub latency_secs: f64,
    pub token_usage: TokenUsage,
}

/// Gateway failures, one kind per tallied category.
#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("authentication failure: {0}")]
    Auth(String),
    #[error("schema-invalid output after {attempts} attempt(s): {detail}")]
    SchemaInvalid { attempts: u32, detail: String },
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("invalid backend descriptor: {0}")]
    InvalidDescriptor(String),
}

impl GatewayError {
    /// Stable name used in evaluation error tallies.
    pub fn kind_name(&self) -> &'static str {
        match self {
            GatewayError::Transport(_) => "transport",
            GatewayError::Auth(_) => "auth",
            GatewayError::SchemaInvalid { .. } => "schema_invalid",
            GatewayError::Timeout(_) => "timeout",
            GatewayError::InvalidDescriptor(_) => "invalid_descriptor",
        }
    }
}

/// Record of one completed gateway call, kept for audit and tests.
#[derive(Debug, Clone)]
pub struct CallRecord {
    pub backend_id: String,
    pub role: RoleTag,
    pub user_content: String,
    pub attempts: u32,
}

/// Shared completion client: rate limiter, retry state, and call log are
/// internally synchronized, so concurrent callers are fine.
#[derive(Default)]
pub struct Gateway {
    limiter: RateLimiter,
    log: Mutex<Vec<CallRecord>>,
}

impl Gateway {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn call_log(&self) -> Vec<CallRecord> {
        self.log.lock().unwrap().clone()
    }

    pub fn clear_log(&self) {
        self.log.lock().unwrap().clear();
    }

    pub fn calls_for_role(&self, role: RoleTag) -> usize {
        self.log.lock().unwrap().iter().filter(|r| r.role == role).count()
    }

    /// Complete a structured request against a backend. The returned payload
    /// validates against `req.output_schema`; malformed output is retried up
    /// to [`RETRY_BUDGET`] times with a repair instruction appended.
    pub fn complete_structured(
        &self,
        backend: &BackendDescriptor,
        req: &StructuredRequest,
    ) -> Result<StructuredResponse, GatewayError> {
        backend.validate()?;
        let started = Instant::now();
        let result = match backend.kind {
            BackendKind::Stub => self.complete_stub(backend, req, started),
            BackendKind::HttpProvider => self.complete_http(backend, req, started),
        };
        if let Ok(response) = &result {
            self.log.lock().unwrap().push(CallRecord {
                backend_id: backend.id.clone(),
                role: req.role_tag,
                user_content: req.user_content.clone(),
                attempts: response.attempts,
            });
        }
        result
    }

    fn complete_stub(
        &self,
        backend: &BackendDescriptor,
        req: &StructuredRequest,
        started: Instant,
    ) -> Result<StructuredResponse, GatewayError> {
        let payload = stub::respond(backend, req)?;
        let violations = schema_check::check(&req.output_schema, &payload);
        if !violations.is_empty() {
            return Err(GatewayError::SchemaInvalid {
                attempts: 1,
                detail: violations[0].to_string(),
            });
        }
        let raw_text = serde_json::to_string(&payload).expect("stub payload serializes");
        Ok(StructuredResponse {
            token_usage: TokenUsage {
                prompt: (req.system_prompt.len() + req.user_content.len()) as u64 / 4,
                completion: raw_text.len() as u64 / 4,
            },
            payload,
            raw_text,
            attempts: 1,
            latency_secs: started.elapsed().as_secs_f64(),
        })
    }

    fn complete_http(
        &self,
        backend: &BackendDescriptor,
        req: &StructuredRequest,
        started: Instant,
    ) -> Result<StructuredResponse, GatewayError> {
        let mut messages = vec![
            json!({"role": "system", "content": req.system_prompt}),
            json!({"role": "user", "content": req.user_content}),
        ];
        let mut last_detail = String::new();
        let max_attempts = 1 + RETRY_BUDGET;
        for attempt in 1..=max_attempts {
            self.limiter.acquire(&backend.id, backend.rate_limit);
            let (raw_text, token_usage) = http::chat_completion(backend, &messages)?;
            match parse_payload(&raw_text) {
                Ok(payload) => {
                    let violations = schema_check::check(&req.output_schema, &payload);
                    if violations.is_empty() {
                        return Ok(StructuredResponse {
                            payload,
                            raw_text,
                            attempts: attempt,
                            latency_secs: started.elapsed().as_secs_f64(),
                            token_usage,
                        });
                    }
                    last_detail = violations[0].to_string();
                }
                Err(detail) => last_detail = detail,
            }
            messages.push(json!({"role": "assistant", "content": raw_text}));
            messages.push(json!({
                "role": "user",
                "content": format!(
                    "Your previous reply did not satisfy the required output schema ({last_detail}). \
                     Reply again with a single JSON object that matches the schema exactly, \
                     with no surrounding prose or code fences."
                ),
            }));
        }
        Err(GatewayError::SchemaInvalid { attempts: max_attempts, detail: last_detail })
    }
}

/// Parse model text into JSON, tolerating surrounding code fences.
fn parse_payload(raw: &str) -> Result<Value, String> {
    let trimmed = raw.trim();
    let candidate = if trimmed.starts_with("```") {
        let inner = trimmed.trim_start_matches("```");
        let inner = inner.strip_prefix("json").unwrap_or(inner);
        inner.trim_end_matches('`').trim()
    } else {
        trimmed
    };
    serde_json::from_str(candidate).map_err(|e| format!("not valid JSON: {e}"))
}

fn nullable(inner: Value) -> Value {
    json!({"anyOf": [inner, {"type": "null"}]})
}

/// Output contract for the extractor role. Numeric keys accept a bare
/// number, a string, an annotated value/unit object, or null; unknown extra
/// keys are tolerated (they are routed to notes downstream).
pub fn extraction_output_schema() -> Value {
    let mut properties = serde_json::Map::new();
    let numeric = json!({"anyOf": [
        {"type": "number"},
        {"type": "string"},
        {"type": "object", "required": ["value"], "properties": {
            "value": {"type": "number"},
            "unit": {"type": ["string", "null"]}
        }},
        {"type": "null"}
    ]});
    for key in ParameterKey::ALL {
        properties.insert(key.as_str().to_string(), numeric.clone());
    }
    for key in ["printer_model", "material_type", "bed_adhesion_type"] {
        properties.insert(key.to_string(), json!({"type": ["string", "null"]}));
    }
    properties.insert("notes".to_string(), json!({"type": "array", "items": {"type": "string"}}));
    json!({"type": "object", "properties": Value::Object(properties)})
}

/// Output contract for the reference role.
pub fn reference_output_schema() -> Value {
    let mut properties = serde_json::Map::new();
    let interval = nullable(json!({
        "type": "array",
        "items": {"type": "number"}
    }));
    for key in ParameterKey::ALL {
        properties.insert(key.as_str().to_string(), interval.clone());
    }
    properties.insert("printer".to_string(), json!({"type": "string"}));
    properties.insert("material".to_string(), json!({"type": "string"}));
    for key in ["notes", "warnings", "interactions"] {
        properties.insert(key.to_string(), json!({"type": "array", "items": {"type": "string"}}));
    }
    json!({"type": "object", "properties": Value::Object(properties)})
}

/// Output contract for the judge role.
pub fn verdict_output_schema() -> Value {
    json!({
        "type": "object",
        "required": [
            "label", "confidence", "support_summary",
            "deviations_used", "rationale", "evidence_citations"
        ],
        "properties": {
            "label": {"type": "string", "enum": ["ND", "UE", "OE", "WP", "ST"]},
            "confidence": {"type": "number", "minimum": 0.0, "maximum": 1.0},
            "support_summary": {"type": "string"},
            "deviations_used": {"type": "array", "items": {"type": "string"}},
            "rationale": {"type": "string"},
            "evidence_citations": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["line", "quote"],
                    "properties": {
                        "line": {"type": "integer", "minimum": 0},
                        "quote": {"type": "string"}
                    }
                }
            }
        }
    })
}

/// Output contract for the single-model baselines.
pub fn baseline_output_schema() -> Value {
    json!({
        "type": "object",
        "required": ["label"],
        "properties": {
            "label": {"type": "string", "enum": ["ND", "UE", "OE", "WP", "ST"]}
        }
    })
}
