use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendConfig, LlmError};

pub fn chat_request_body(model: &str, prompt: &str, temperature: f64) -> Value {
    json!({
        "model": model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": temperature,
    })
}

/// Text of the first choice's message.
pub fn parse_chat_response(body: &str) -> Result<String, LlmError> {
    let v: Value = serde_json::from_str(body).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
    v["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| LlmError::MalformedResponse("no choices[0].message.content".into()))
}

/// One HTTP attempt. The key goes only into the Authorization header.
pub(super) fn post(cfg: &BackendConfig, key: &str, prompt: &str) -> Result<String, LlmError> {
    let endpoint = cfg.endpoint.as_deref().unwrap_or_default();
    let model = cfg.model.as_deref().unwrap_or_default();
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
        .http_status_as_error(false)
        .build()
        .into();
    let result = agent
        .post(endpoint)
        .header("Authorization", &format!("Bearer {key}"))
        .send_json(chat_request_body(model, prompt, cfg.temperature));
    let mut resp = match result {
        Ok(r) => r,
        Err(ureq::Error::Timeout(_)) => return Err(LlmError::Timeout),
        Err(e) => return Err(LlmError::Transport(e.to_string())),
    };
    let status = resp.status().as_u16();
    let body = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| match e {
            ureq::Error::Timeout(_) => LlmError::Timeout,
            e => LlmError::Transport(e.to_string()),
        })?;
    if !(200..300).contains(&status) {
        let mut body = body;
        body.truncate(512);
        return Err(LlmError::RemoteError { status, body });
    }
    parse_chat_response(&body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_extraction() {
        let body = r#"{"choices":[{"message":{"content":"hi"}},{"message":{"content":"no"}}]}"#;
        assert_eq!(parse_chat_response(body).unwrap(), "hi");
        assert!(parse_chat_response(r#"{"choices":[]}"#).is_err());
        assert!(parse_chat_response("not json").is_err());
    }
}
