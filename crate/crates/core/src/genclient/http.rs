use std::time::Duration;

use super::protocol::{validate_health_response, GenerateRequest, GenerateResponse, GENERATE_PATH, HEALTH_PATH};
use super::{Backend, BackendError};
use crate::demography::SubjectProfile;

/// Client for a remote backend speaking the `/v1` protocol.
pub struct HttpBackend {
    base: String,
    agent: ureq::Agent,
    model_id: std::sync::OnceLock<String>,
}

impl HttpBackend {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(timeout)
            .timeout(timeout)
            .build();
        HttpBackend {
            base: base_url.trim_end_matches('/').to_string(),
            agent,
            model_id: std::sync::OnceLock::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }
}

fn map_err(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Status(code, resp) => {
            let body = resp.into_string().unwrap_or_default();
            BackendError::Protocol(format!("status {code}: {}", body.trim()))
        }
        ureq::Error::Transport(t) => BackendError::Unavailable(t.to_string()),
    }
}

impl Backend for HttpBackend {
    fn backend_id(&self) -> String {
        match self.model_id.get() {
            Some(m) => format!("http:{m}"),
            None => format!("http:{}", self.base),
        }
    }

    fn health(&self) -> Result<String, BackendError> {
        let resp = self
            .agent
            .get(&format!("{}{HEALTH_PATH}", self.base))
            .call()
            .map_err(map_err)?;
        let body = resp
            .into_string()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        let id = validate_health_response(&body).map_err(BackendError::Protocol)?;
        let _ = self.model_id.set(id.clone());
        Ok(id)
    }

    fn generate(
        &self,
        _subject: &SubjectProfile,
        req: &GenerateRequest,
    ) -> Result<Vec<String>, BackendError> {
        let resp = self
            .agent
            .post(&format!("{}{GENERATE_PATH}", self.base))
            .send_json(req)
            .map_err(map_err)?;
        let body = resp
            .into_string()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        let parsed: GenerateResponse = serde_json::from_str(&body)
            .map_err(|e| BackendError::Malformed(format!("unparseable body: {e}")))?;
        Ok(parsed.completions)
    }
}
