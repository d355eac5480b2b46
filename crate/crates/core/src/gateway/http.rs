//! Chat-completion transport for OpenAI-style JSON APIs. The gateway owns
//! the retry loop; this module performs exactly one request per call and
//! maps failures onto the gateway's error kinds.

use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendDescriptor, GatewayError, TokenUsage};

pub(super) fn chat_completion(
    backend: &BackendDescriptor,
    messages: &[Value],
) -> Result<(String, TokenUsage), GatewayError> {
    let endpoint = backend
        .endpoint
        .as_deref()
        .ok_or_else(|| GatewayError::InvalidDescriptor("missing endpoint".to_string()))?;
    let env_var = backend
        .credential_env_var
        .as_deref()
        .ok_or_else(|| GatewayError::InvalidDescriptor("missing credential_env_var".to_string()))?;
    let credential = std::env::var(env_var).ok().filter(|v| !v.trim().is_empty()).ok_or_else(
        || GatewayError::Auth(format!("environment variable {env_var} is not set")),
    )?;

    let timeout = Duration::from_secs(backend.timeout_secs);
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into();

    let body = json!({
        "model": backend.model_name,
        "temperature": backend.temperature,
        "max_tokens": backend.max_output_tokens,
        "response_format": {"type": "json_object"},
        "messages": messages,
    });

    let mut response = agent
        .post(endpoint)
        .header("authorization", &format!("Bearer {credential}"))
        .send_json(&body)
        .map_err(|e| classify_ureq_error(e, timeout))?;

    let status = response.status().as_u16();
    if status == 401 || status == 403 {
        return Err(GatewayError::Auth(format!("provider returned HTTP {status}")));
    }
    if !(200..300).contains(&status) {
        let detail = response.body_mut().read_to_string().unwrap_or_default();
        return Err(GatewayError::Transport(format!(
            "provider returned HTTP {status}: {}",
            detail.chars().take(200).collect::<String>()
        )));
    }

    let parsed: Value = response
        .body_mut()
        .read_json()
        .map_err(|e| GatewayError::Transport(format!("unreadable provider response: {e}")))?;
    let content = parsed["choices"][0]["message"]["content"]
        .as_str()
        .ok_or_else(|| {
            GatewayError::Transport("provider response carries no message content".to_string())
        })?
        .to_string();
    let usage = TokenUsage {
        prompt: parsed["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
        completion: parsed["usage"]["completion_tokens"].as_u64().unwrap_or(0),
    };
    Ok((content, usage))
}

fn classify_ureq_error(err: ureq::Error, timeout: Duration) -> GatewayError {
    match &err {
        ureq::Error::Timeout(_) => GatewayError::Timeout(timeout),
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => {
            GatewayError::Timeout(timeout)
        }
        _ => GatewayError::Transport(err.to_string()),
    }
}
