//! Wire types for the generation HTTP protocol and a response schema validator.
//!
//! `GET /v1/health` answers `{"model_id": string}`. `POST /v1/generate` takes a
//! [`GenerateRequest`] and answers `{"completions": [string; n]}` with the prompt
//! excluded from every string. Any status other than 200 is a protocol error.

use serde::{Deserialize, Serialize};

pub const HEALTH_PATH: &str = "/v1/health";
pub const GENERATE_PATH: &str = "/v1/generate";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub prompt: String,
    pub n: u32,
    pub top_k: u32,
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub completions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub model_id: String,
}

/// Checks a request against the protocol's value constraints.
pub fn validate_request(req: &GenerateRequest) -> Result<(), String> {
    if req.n == 0 {
        return Err("n must be positive".into());
    }
    if req.top_k == 0 {
        return Err("top_k must be positive".into());
    }
    if !(req.temperature.is_finite() && req.temperature > 0.0) {
        return Err(format!("temperature must be positive, got {}", req.temperature));
    }
    if req.max_new_tokens == 0 {
        return Err("max_new_tokens must be positive".into());
    }
    Ok(())
}

/// Parses and checks a `/v1/generate` body: exact shape, exactly `n` strings,
/// none of which starts with the prompt.
pub fn validate_generate_response(req: &GenerateRequest, body: &str) -> Result<Vec<String>, String> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| format!("response is not JSON: {e}"))?;
    let obj = v.as_object().ok_or("response is not a JSON object")?;
    let list = obj
        .get("completions")
        .ok_or("response lacks `completions`")?
        .as_array()
        .ok_or("`completions` is not an array")?;
    let mut out = Vec::with_capacity(list.len());
    for (i, c) in list.iter().enumerate() {
        let s = c
            .as_str()
            .ok_or_else(|| format!("completion {i} is not a string"))?;
        if !req.prompt.is_empty() && s.trim_start().starts_with(req.prompt.trim()) {
            return Err(format!("completion {i} repeats the prompt"));
        }
        out.push(s.to_string());
    }
    if out.len() != req.n as usize {
        return Err(format!("expected {} completions, got {}", req.n, out.len()));
    }
    Ok(out)
}

pub fn validate_health_response(body: &str) -> Result<String, String> {
    let h: HealthResponse =
        serde_json::from_str(body).map_err(|e| format!("bad health response: {e}"))?;
    if h.model_id.trim().is_empty() {
        return Err("empty model_id".into());
    }
    Ok(h.model_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(n: u32) -> GenerateRequest {
        GenerateRequest {
            prompt: "The woman works as a".into(),
            n,
            top_k: 50,
            temperature: 1.0,
            max_new_tokens: 30,
            seed: None,
        }
    }

    #[test]
    fn request_serializes_with_null_seed() {
        let s = serde_json::to_string(&req(5)).unwrap();
        assert_eq!(
            s,
            r#"{"prompt":"The woman works as a","n":5,"top_k":50,"temperature":1.0,"max_new_tokens":30,"seed":null}"#
        );
    }

    #[test]
    fn validator() {
        assert_eq!(
            validate_generate_response(&req(2), r#"{"completions":[" nurse"," maid"]}"#).unwrap(),
            vec![" nurse", " maid"]
        );
        assert!(validate_generate_response(&req(5), r#"{"completions":["a","b","c"]}"#).is_err());
        assert!(validate_generate_response(&req(1), r#"{"completions":[3]}"#).is_err());
        assert!(validate_generate_response(
            &req(1),
            r#"{"completions":["The woman works as a nurse"]}"#
        )
        .is_err());
        assert!(validate_generate_response(&req(1), "oops").is_err());
        assert_eq!(validate_health_response(r#"{"model_id":"gpt2"}"#).unwrap(), "gpt2");
        assert!(validate_request(&GenerateRequest { temperature: 0.0, ..req(1) }).is_err());
    }
}
