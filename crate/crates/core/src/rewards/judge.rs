//! LLM judge: prompt template, verdict parsing, mock and HTTP backends,
//! and a concurrency-safe verdict cache.
//!
//! The judge receives a fixed equivalence-checking prompt and must answer
//! with `[[YES]]` or `[[NO]]`; the last marker in the reply wins, and a
//! reply with neither marker scores 0 with `parse_failed` set. The HTTP
//! backend speaks the chat-completions wire format at temperature 0 and
//! retries transport failures with exponential backoff. Credentials come
//! exclusively from the environment (`JUDGE_BASE_URL`, `JUDGE_API_KEY`,
//! `JUDGE_MODEL`), never from configuration files.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rewards::rule_score;

/// Environment variable holding the chat-completions base URL.
pub const ENV_BASE_URL: &str = "JUDGE_BASE_URL";
/// Environment variable holding the bearer token (may be unset).
pub const ENV_API_KEY: &str = "JUDGE_API_KEY";
/// Environment variable holding the judge model name.
pub const ENV_MODEL: &str = "JUDGE_MODEL";

/// Render the equivalence-judging prompt for one (question, predicted,
/// gold) triple. The wording is part of the external contract and must not
/// drift.
pub fn render_judge_prompt(question: &str, predicted: &str, gold: &str) -> String {
    format!(
        "You are an expert in verifying if two answers are the same. \
         Your input is a problem and two answers, Answer 1 and Answer 2. \
         You need to check if they are equivalent. \
         Your task is to determine if two answers are equivalent, without attempting to solve the original problem. \
         Compare the answers to verify they represent identical values or meaning, even when written in different forms or notations. \
         Your output must follow the following format:\n\
         1) Provide an explanation for why the answers are equivalent or not.\n\
         2) Then provide your final answer in the form of: [[YES]] or [[NO]]\n\
         Problem: {question} Answer 1: {predicted} Answer 2: {gold}"
    )
}

/// A parsed judge verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub score: u8,
    /// True when the reply carried neither `[[YES]]` nor `[[NO]]`.
    pub parse_failed: bool,
}

/// Parse a judge reply: the last `[[YES]]`/`[[NO]]` marker wins.
pub fn parse_judge_reply(reply: &str) -> JudgeVerdict {
    let yes = reply.rfind("[[YES]]");
    let no = reply.rfind("[[NO]]");
    match (yes, no) {
        (Some(y), Some(n)) => JudgeVerdict { score: u8::from(y > n), parse_failed: false },
        (Some(_), None) => JudgeVerdict { score: 1, parse_failed: false },
        (None, Some(_)) => JudgeVerdict { score: 0, parse_failed: false },
        (None, None) => JudgeVerdict { score: 0, parse_failed: true },
    }
}

/// Deterministic test/offline backend. Canned replies are keyed by the
/// (question, predicted, gold) triple and run through the real reply
/// parser; triples without a canned reply fall back to normalized string
/// equality.
#[derive(Debug, Default)]
pub struct MockJudge {
    replies: HashMap<(String, String, String), String>,
    calls: AtomicUsize,
}

impl MockJudge {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a canned reply for one triple.
    pub fn with_reply(
        mut self,
        question: &str,
        predicted: &str,
        gold: &str,
        reply: &str,
    ) -> Self {
        self.replies.insert(
            (question.to_string(), predicted.to_string(), gold.to_string()),
            reply.to_string(),
        );
        self
    }

    /// Number of times the mock was consulted.
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn complete(&self, question: &str, predicted: &str, gold: &str) -> String {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let key = (question.to_string(), predicted.to_string(), gold.to_string());
        if let Some(reply) = self.replies.get(&key) {
            return reply.clone();
        }
        if rule_score(predicted, gold) == 1 {
            "The two answers are identical. [[YES]]".to_string()
        } else {
            "The two answers differ. [[NO]]".to_string()
        }
    }
}

/// Chat-completions wire format (request side).
#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
}

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

/// HTTP chat-completions backend.
#[derive(Debug)]
pub struct HttpJudge {
    base_url: String,
    api_key: String,
    model: String,
    client: reqwest::blocking::Client,
    max_retries: usize,
    backoff: Duration,
}

impl HttpJudge {
    /// Build from the `JUDGE_*` environment variables.
    pub fn from_env(config: &JudgeConfig) -> Result<Self> {
        let base_url = std::env::var(ENV_BASE_URL).map_err(|_| {
            Error::Config(format!("{ENV_BASE_URL} must be set for the http judge backend"))
        })?;
        let model = std::env::var(ENV_MODEL).map_err(|_| {
            Error::Config(format!("{ENV_MODEL} must be set for the http judge backend"))
        })?;
        let api_key = std::env::var(ENV_API_KEY).unwrap_or_default();
        Self::new(&base_url, &api_key, &model, config)
    }

    pub fn new(base_url: &str, api_key: &str, model: &str, config: &JudgeConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::JudgeTransport(format!("building http client: {e}")))?;
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key: api_key.to_string(),
            model: model.to_string(),
            client,
            max_retries: config.max_retries,
            backoff: Duration::from_millis(config.backoff_ms),
        })
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let url = format!("{}/chat/completions", self.base_url);
        let body = ChatRequest {
            model: &self.model,
            messages: [ChatMessage { role: "user", content: prompt }],
            temperature: 0.0,
        };
        let mut last_err = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff * (1 << (attempt - 1).min(16)) as u32);
            }
            let mut req = self.client.post(&url).json(&body);
            if !self.api_key.is_empty() {
                req = req.bearer_auth(&self.api_key);
            }
            match req.send() {
                Err(e) => last_err = format!("request failed: {e}"),
                Ok(resp) => {
                    let status = resp.status();
                    if !status.is_success() {
                        last_err = format!("status {status}");
                        continue;
                    }
                    match resp.json::<ChatResponse>() {
                        Err(e) => last_err = format!("malformed response body: {e}"),
                        Ok(parsed) => match parsed.choices.into_iter().next() {
                            Some(choice) => return Ok(choice.message.content),
                            None => last_err = "response had no choices".to_string(),
                        },
                    }
                }
            }
        }
        Err(Error::JudgeTransport(format!(
            "{last_err} (after {} attempts)",
            self.max_retries + 1
        )))
    }
}

/// Judge backend selection.
#[derive(Debug)]
pub enum JudgeBackend {
    Mock(MockJudge),
    Http(HttpJudge),
}

impl JudgeBackend {
    fn model_name(&self) -> &str {
        match self {
            JudgeBackend::Mock(_) => "mock",
            JudgeBackend::Http(h) => &h.model,
        }
    }
}

/// Judge behavior knobs (transport and caching; credentials stay in the
/// environment).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    pub cache: bool,
    /// Optional line-delimited cache file: `key_hash score parse_failed`.
    pub cache_path: Option<PathBuf>,
    pub timeout_secs: u64,
    pub max_retries: usize,
    pub backoff_ms: u64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            cache: true,
            cache_path: None,
            timeout_secs: 30,
            max_retries: 3,
            backoff_ms: 100,
        }
    }
}

struct CacheState {
    map: HashMap<String, JudgeVerdict>,
    file: Option<fs::File>,
}

/// A judge backend plus verdict cache. Identical (question, predicted,
/// gold, model) requests hit the backend at most once while caching is
/// enabled; the cache is safe to share across rollout threads.
pub struct JudgeClient {
    backend: JudgeBackend,
    cache: Option<Mutex<CacheState>>,
}

impl JudgeClient {
    pub fn new(backend: JudgeBackend, config: &JudgeConfig) -> Result<Self> {
        let cache = if config.cache {
            let mut map = HashMap::new();
            let file = match &config.cache_path {
                None => None,
                Some(path) => {
                    if path.exists() {
                        for (idx, line) in fs::read_to_string(path)?.lines().enumerate() {
                            let mut parts = line.split_whitespace();
                            let (Some(key), Some(score), Some(failed)) =
                                (parts.next(), parts.next(), parts.next())
                            else {
                                return Err(Error::Data {
                                    line: idx + 1,
                                    msg: "malformed judge cache record".into(),
                                });
                            };
                            let score: u8 = score.parse().map_err(|_| Error::Data {
                                line: idx + 1,
                                msg: "malformed judge cache score".into(),
                            })?;
                            let parse_failed = failed == "1";
                            map.insert(key.to_string(), JudgeVerdict { score, parse_failed });
                        }
                    }
                    Some(fs::OpenOptions::new().create(true).append(true).open(path)?)
                }
            };
            Some(Mutex::new(CacheState { map, file }))
        } else {
            None
        };
        Ok(Self { backend, cache })
    }

    /// Mock backend with normalized-equality behavior and default config.
    pub fn mock_equality() -> Self {
        Self::new(JudgeBackend::Mock(MockJudge::new()), &JudgeConfig::default())
            .expect("mock judge construction cannot fail")
    }

    /// Mock backend with canned replies.
    pub fn mock(mock: MockJudge) -> Self {
        Self::new(JudgeBackend::Mock(mock), &JudgeConfig::default())
            .expect("mock judge construction cannot fail")
    }

    pub fn backend(&self) -> &JudgeBackend {
        &self.backend
    }

    fn cache_key(&self, question: &str, predicted: &str, gold: &str) -> String {
        let mut hasher = Sha256::new();
        for part in [self.backend.model_name(), question, predicted, gold] {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part.as_bytes());
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    /// Judge one (question, predicted, gold) triple.
    pub fn score(&self, question: &str, predicted: &str, gold: &str) -> Result<JudgeVerdict> {
        let key = self.cache_key(question, predicted, gold);
        if let Some(cache) = &self.cache {
            let state = cache.lock().expect("judge cache poisoned");
            if let Some(hit) = state.map.get(&key) {
                return Ok(*hit);
            }
        }
        let verdict = match &self.backend {
            JudgeBackend::Mock(mock) => parse_judge_reply(&mock.complete(question, predicted, gold)),
            JudgeBackend::Http(http) => {
                let prompt = render_judge_prompt(question, predicted, gold);
                parse_judge_reply(&http.complete(&prompt)?)
            }
        };
        if let Some(cache) = &self.cache {
            let mut state = cache.lock().expect("judge cache poisoned");
            if state.map.insert(key.clone(), verdict).is_none() {
                if let Some(file) = &mut state.file {
                    writeln!(
                        file,
                        "{key} {} {}",
                        verdict.score,
                        u8::from(verdict.parse_failed)
                    )?;
                }
            }
        }
        Ok(verdict)
    }
}
