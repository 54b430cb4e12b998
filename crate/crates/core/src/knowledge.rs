//! Subject / surrounding prompt acquisition from a language model.
//!
//! The model is asked one question per concept and must answer with a JSON object
//! carrying the keys `"subject prompt"` and `"surrounding prompt"`.

use std::collections::HashMap;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::backends::llm::{LlmBackend, LlmRequest};
use crate::error::{Error, Result};
use crate::imageops::sha256_hex;

pub const CONCEPT_PLACEHOLDER: &str = "<CONCEPT>";
pub const SUBJECT_KEY: &str = "subject prompt";
pub const SURROUNDING_KEY: &str = "surrounding prompt";
pub const MAX_ATTEMPTS: usize = 3;

const SYSTEM_TEXT: &str = "Suppose you are a creative and active explainer, dedicated to helping people understand abstract concepts and concrete them. Your task is to identify and elucidate the representative tangible objects within these abstract concepts, helping the audience better connect abstract thinking with real-world entities. All questions should follow a standardized format, such as: \"Please list the representative tangible objects in/of <CONCEPT>, along with the appropriate artistic font style.\" Your response must adhere to a strict JSON format, specifically: {\"subject prompt\": \"representative tangible object that can express the intrinsic semantic of input <CONCEPT>\", \"surrounding prompt\": \"appropriate artistic font style or texture that can enrich <CONCEPT>.\"} This format ensures clarity and consistency in responses, making the information easy to parse and understand. For example, suppose the question is: \"Please list the representative category or object name in/of 'cat', including in real-life, artist works, and film works, and select an appropriate artistic font style.\" Your response should be: {\"subject prompt\": \"cake and frosting, sprinkles, layers, with features like sweet, colorful, decadent, multi-tiered.\", \"surrounding prompt\": \"texture design is frosting, sprinkles, layers, with creamy, glossy, textured, and delightful details.\"}";

const QUESTION_FORMAT: &str =
    "Please list the representative tangible objects in/of <CONCEPT>, along with the appropriate artistic font style.";

const REPAIR_INSTRUCTION: &str = "Your previous reply could not be parsed. Reply with only a JSON object of the form {\"subject prompt\": \"...\", \"surrounding prompt\": \"...\"} and no other text.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptSource {
    Llm,
    Fixture,
    Manual,
}

/// The two text prompts driving the subject and surrounding branches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub subject: String,
    pub surrounding: String,
    pub source: PromptSource,
}

impl PromptPair {
    pub fn new(subject: impl Into<String>, surrounding: impl Into<String>, source: PromptSource) -> Result<Self> {
        let subject = subject.into().trim().to_owned();
        let surrounding = surrounding.into().trim().to_owned();
        if subject.is_empty() || surrounding.is_empty() {
            return Err(Error::MalformedResponse("empty prompt".into()));
        }
        if !has_noun_like_token(&subject) {
            return Err(Error::MalformedResponse(format!(
                "subject prompt {subject:?} names no object"
            )));
        }
        Ok(Self {
            subject,
            surrounding,
            source,
        })
    }

    pub fn manual(subject: impl Into<String>, surrounding: impl Into<String>) -> Result<Self> {
        Self::new(subject, surrounding, PromptSource::Manual)
    }

    /// The JSON object a well-behaved model would answer with.
    pub fn to_response_json(&self) -> String {
        serde_json::json!({ SUBJECT_KEY: self.subject, SURROUNDING_KEY: self.surrounding }).to_string()
    }
}

const FUNCTION_WORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "of", "in", "on", "with", "for", "to", "by", "at", "as", "is", "are", "be", "very",
    "such", "like", "its", "it", "this", "that", "some", "many",
];

// Heuristic: at least one alphabetic token of two or more characters that is not
// a function word. Single CJK characters count, since they are whole words.
fn has_noun_like_token(text: &str) -> bool {
    text.split(|c: char| !c.is_alphabetic())
        .filter(|w| !w.is_empty())
        .any(|w| {
            let lower = w.to_lowercase();
            let cjk = w.chars().any(|c| ('\u{4e00}'..='\u{9fff}').contains(&c));
            (cjk || w.chars().count() >= 2) && !FUNCTION_WORDS.contains(&lower.as_str())
        })
}

/// System instructions plus the per-concept question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTemplate {
    pub system_text: String,
    pub question_format: String,
}

impl Default for QueryTemplate {
    fn default() -> Self {
        Self {
            system_text: SYSTEM_TEXT.to_owned(),
            question_format: QUESTION_FORMAT.to_owned(),
        }
    }
}

impl QueryTemplate {
    pub fn validate(&self) -> Result<()> {
        match self.question_format.matches(CONCEPT_PLACEHOLDER).count() {
            1 => Ok(()),
            n => Err(Error::Template(format!(
                "question format must contain {CONCEPT_PLACEHOLDER} exactly once, found {n}"
            ))),
        }
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(format!("{}\u{0}{}", self.system_text, self.question_format).as_bytes())
    }
}

pub fn build_query(concept: &str, template: &QueryTemplate) -> Result<String> {
    template.validate()?;
    if concept.trim().is_empty() {
        return Err(Error::invalid("empty concept"));
    }
    Ok(template.question_format.replacen(CONCEPT_PLACEHOLDER, concept, 1))
}

/// Extracts the prompt pair from a model reply. Surrounding prose is tolerated:
/// the first balanced `{...}` that parses as JSON is used.
pub fn parse_response(text: &str) -> Result<PromptPair> {
    let object =
        first_json_object(text).ok_or_else(|| Error::MalformedResponse("no JSON object in response".into()))?;
    let field = |key: &str| -> Result<String> {
        match object.get(key) {
            Some(serde_json::Value::String(s)) if !s.trim().is_empty() => Ok(s.clone()),
            Some(serde_json::Value::String(_)) => Err(Error::MalformedResponse(format!("empty {key:?}"))),
            Some(_) => Err(Error::MalformedResponse(format!("{key:?} is not a string"))),
            None => Err(Error::MalformedResponse(format!("missing {key:?}"))),
        }
    };
    PromptPair::new(field(SUBJECT_KEY)?, field(SURROUNDING_KEY)?, PromptSource::Llm)
}

fn first_json_object(text: &str) -> Option<serde_json::Map<String, serde_json::Value>> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(offset) = text[start..].find('{') {
        let open = start + offset;
        if let Some(close) = balanced_end(bytes, open) {
            if let Ok(serde_json::Value::Object(map)) = serde_json::from_str(&text[open..=close]) {
                return Some(map);
            }
        }
        start = open + 1;
    }
    None
}

// Index of the brace closing the one at `open`, skipping over string literals.
fn balanced_end(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Concurrent cache of acquired prompts keyed by (concept, template fingerprint).
#[derive(Debug, Default)]
pub struct PromptCache {
    entries: RwLock<HashMap<(String, String), PromptPair>>,
}

impl PromptCache {
    pub fn get(&self, concept: &str, template: &QueryTemplate) -> Option<PromptPair> {
        let key = (concept.to_owned(), template.fingerprint());
        self.entries.read().ok()?.get(&key).cloned()
    }

    pub fn insert(&self, concept: &str, template: &QueryTemplate, pair: PromptPair) {
        if let Ok(mut map) = self.entries.write() {
            map.insert((concept.to_owned(), template.fingerprint()), pair);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.read().map(|m| m.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Asks the backend for a prompt pair, re-asking with a repair instruction when the
/// reply cannot be parsed. Gives up after [`MAX_ATTEMPTS`] replies.
pub fn acquire_prompts(
    concept: &str,
    backend: &dyn LlmBackend,
    template: &QueryTemplate,
    cache: Option<&PromptCache>,
) -> Result<PromptPair> {
    if let Some(hit) = cache.and_then(|c| c.get(concept, template)) {
        return Ok(hit);
    }
    let question = build_query(concept, template)?;
    let mut last_error = String::new();
    for attempt in 0..MAX_ATTEMPTS {
        let user_text = if attempt == 0 {
            question.clone()
        } else {
            format!("{question}\n\n{REPAIR_INSTRUCTION}")
        };
        let request = LlmRequest {
            system_text: template.system_text.clone(),
            user_text,
            concept: concept.to_owned(),
        };
        let reply = backend.complete(&request)?;
        match parse_response(&reply) {
            Ok(mut pair) => {
                pair.source = backend.source();
                if let Some(cache) = cache {
                    cache.insert(concept, template, pair.clone());
                }
                return Ok(pair);
            }
            Err(e) => last_error = e.to_string(),
        }
    }
    Err(Error::MalformedResponse(format!(
        "{MAX_ATTEMPTS} unusable replies for {concept:?}; last: {last_error}"
    )))
}
