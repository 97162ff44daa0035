use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::prompt::{build_prompt, parse_score};
use super::{ComplexityScore, ImageDescription};
use crate::error::{Error, Result};

/// Environment variable holding the bearer token for the HTTP scorer.
pub const SCORER_TOKEN_ENV: &str = "ADAPTOK_SCORER_TOKEN";

/// Text-in, text-out language model endpoint. Implementations must tolerate
/// concurrent calls.
pub trait ScorerBackend: Send + Sync {
    /// Returns the raw response, or a transport-level failure message.
    fn respond(&self, prompt: &str) -> std::result::Result<String, String>;
}

impl<F> ScorerBackend for F
where
    F: Fn(&str) -> std::result::Result<String, String> + Send + Sync,
{
    fn respond(&self, prompt: &str) -> std::result::Result<String, String> {
        self(prompt)
    }
}

/// Result of scoring with every raw response kept for audit.
#[derive(Debug, Clone)]
pub struct ScoreAudit {
    pub score: ComplexityScore,
    pub responses: Vec<std::result::Result<String, String>>,
}

/// Prompt, query and parse, retrying on parse or transport failures.
pub fn score_description(
    desc: &ImageDescription,
    backend: &dyn ScorerBackend,
    retries: usize,
) -> Result<ComplexityScore> {
    score_description_audited(desc, backend, retries).map(|a| a.score)
}

pub fn score_description_audited(
    desc: &ImageDescription,
    backend: &dyn ScorerBackend,
    retries: usize,
) -> Result<ScoreAudit> {
    let prompt = build_prompt(desc);
    let mut responses = Vec::new();
    let mut last = String::new();
    for _ in 0..=retries {
        let reply = backend.respond(&prompt);
        responses.push(reply.clone());
        match reply {
            Ok(text) => match parse_score(&text) {
                Ok(score) => return Ok(ScoreAudit { score, responses }),
                Err(e) => last = e.to_string(),
            },
            Err(e) => last = e,
        }
        log::debug!("scoring attempt failed: {last}");
    }
    Err(Error::ScoringUnavailable {
        attempts: retries + 1,
        last,
    })
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "in", "on", "of", "with", "and", "or", "is", "are", "at", "to", "by", "for",
    "from", "it", "its", "some", "there", "this", "that", "over", "under", "into", "near", "up",
];

/// Deterministic offline stand-in for a language model.
///
/// Base score is `1 + distinct_content_words / 3` capped at 5, where content
/// words are lowercased alphanumeric tokens outside a small stopword list.
/// Visible text and faces each add 2; the result is clamped to 1..=9.
pub fn heuristic_mock_score(desc: &ImageDescription) -> ComplexityScore {
    let words: BTreeSet<String> = desc
        .caption
        .split_whitespace()
        .map(|t| {
            t.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|t| !t.is_empty() && !STOPWORDS.contains(&t.as_str()))
        .collect();
    let base = (1 + words.len() / 3).clamp(1, 5) as i64;
    let score = base + 2 * i64::from(desc.has_text) + 2 * i64::from(desc.has_faces);
    ComplexityScore::new(score.clamp(1, 9)).expect("clamped")
}

/// Backend that answers with the mock heuristic, formatted like a model reply.
#[derive(Debug, Default, Clone, Copy)]
pub struct MockScorer;

impl MockScorer {
    pub fn score(&self, desc: &ImageDescription) -> ComplexityScore {
        heuristic_mock_score(desc)
    }
}

#[derive(Serialize)]
struct PromptBody<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct ResponseBody {
    response: String,
}

/// JSON-over-HTTP scorer: `POST {"prompt": ..}` returning `{"response": ..}`.
pub struct HttpScorer {
    endpoint: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpScorer {
    /// Reads the optional bearer token from [`SCORER_TOKEN_ENV`].
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let token = std::env::var(SCORER_TOKEN_ENV).ok().filter(|t| !t.is_empty());
        Self::with_token(endpoint, timeout, token)
    }

    pub fn with_token(endpoint: impl Into<String>, timeout: Duration, token: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        HttpScorer {
            endpoint: endpoint.into(),
            token,
            agent,
        }
    }
}

impl ScorerBackend for HttpScorer {
    fn respond(&self, prompt: &str) -> std::result::Result<String, String> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req
            .send_json(PromptBody { prompt })
            .map_err(|e| format!("{}: {e}", self.endpoint))?;
        let body: ResponseBody = resp
            .body_mut()
            .read_json()
            .map_err(|e| format!("{}: bad response body: {e}", self.endpoint))?;
        Ok(body.response)
    }
}
