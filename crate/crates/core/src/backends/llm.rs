//! Language-model backends that answer the object-extraction query.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde::Serialize;

use super::http::{agent, post_json_text};
use super::{LLM_KEY_ENV, LLM_URL_ENV};
use crate::error::{Error, Result};
use crate::knowledge::PromptSource;

/// One chat turn sent to the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LlmRequest {
    pub system_text: String,
    pub user_text: String,
    /// The concept being asked about; offline backends key their answers on it.
    pub concept: String,
}

pub trait LlmBackend: Send + Sync {
    /// Raw text of the model's reply.
    fn complete(&self, request: &LlmRequest) -> Result<String>;

    fn source(&self) -> PromptSource;

    fn id(&self) -> String;
}

/// Canned replies keyed by concept.
#[derive(Debug, Clone, Default)]
pub struct FixtureLlm {
    replies: HashMap<String, String>,
}

impl FixtureLlm {
    pub fn new(replies: HashMap<String, String>) -> Self {
        Self { replies }
    }

    /// Reads a JSON object mapping concept to raw reply text.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::new(serde_json::from_str(&text)?))
    }

    /// Replies shipped with the crate.
    pub fn bundled() -> Result<Self> {
        Self::from_file(&bundled_fixture_path())
    }

    pub fn with_reply(mut self, concept: impl Into<String>, reply: impl Into<String>) -> Self {
        self.replies.insert(concept.into(), reply.into());
        self
    }
}

pub fn bundled_fixture_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/fixtures/llm.json")
}

impl LlmBackend for FixtureLlm {
    fn complete(&self, request: &LlmRequest) -> Result<String> {
        self.replies
            .get(&request.concept)
            .cloned()
            .ok_or_else(|| Error::BackendUnavailable(format!("no fixture reply for {:?}", request.concept)))
    }

    fn source(&self) -> PromptSource {
        PromptSource::Fixture
    }

    fn id(&self) -> String {
        "fixture".into()
    }
}

/// Posts `{system_text, user_text}` to a chat endpoint; the response body is the reply.
#[derive(Debug)]
pub struct HttpLlm {
    url: String,
    key: Option<String>,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    system_text: &'a str,
    user_text: &'a str,
}

impl HttpLlm {
    pub fn new(url: impl Into<String>, key: Option<String>, timeout: Duration) -> Self {
        Self {
            url: url.into(),
            key,
            agent: agent(timeout),
        }
    }

    pub fn from_env(timeout: Duration) -> Result<Self> {
        let url =
            std::env::var(LLM_URL_ENV).map_err(|_| Error::BackendUnavailable(format!("{LLM_URL_ENV} is not set")))?;
        Ok(Self::new(url, std::env::var(LLM_KEY_ENV).ok(), timeout))
    }
}

impl LlmBackend for HttpLlm {
    fn complete(&self, request: &LlmRequest) -> Result<String> {
        let body = ChatBody {
            system_text: &request.system_text,
            user_text: &request.user_text,
        };
        post_json_text(&self.agent, &self.url, &body, self.key.as_deref())
    }

    fn source(&self) -> PromptSource {
        PromptSource::Llm
    }

    fn id(&self) -> String {
        format!("http({})", self.url)
    }
}
