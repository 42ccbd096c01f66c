//! Prompt rendering, chat transport, mock providers and answer parsing.

use std::collections::{BTreeSet, VecDeque};
use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::qagen::{letter, AnswerMode, QAItem};
use crate::text::normalize_text;
use crate::text_ranker::truncate_chars;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum LlmError {
    #[error("template `{template}` leaves placeholder {{{placeholder}}} unfilled")]
    UnfilledPlaceholder { template: String, placeholder: String },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("credential rejected: {0}")]
    AuthRejected(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("prompt exceeds the model context: {0}")]
    ContextTooLong(String),
    #[error("provider configuration: {0}")]
    Config(String),
}

impl LlmError {
    /// Transport failures and rate limits are retried; the rest surface.
    pub fn is_transient(&self) -> bool {
        matches!(self, LlmError::Transport(_) | LlmError::RateLimited(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Self { role: role.to_string(), content: content.into() }
    }
}

pub const PLACEHOLDERS: [&str; 4] = ["question", "background", "options", "context"];

/// Clinician-role prompt with `{question}`, `{background}`, `{options}` and
/// `{context}` placeholders. `direct` is used when there is no context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub system: String,
    pub direct: String,
    pub rag: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            id: "clinician-v1".into(),
            system: "You are an experienced clinician preparing a patient's discharge. \
                     Answer multiple-choice questions using only option letters."
                .into(),
            direct: "Patient background:\n{background}\n\nQuestion: {question}\n\nOptions:\n{options}\n\nAnswer:".into(),
            rag: "Discharge reports of similar patients:\n{context}\n\nPatient background:\n{background}\n\n\
                  Question: {question}\n\nOptions:\n{options}\n\nAnswer:"
                .into(),
        }
    }
}

fn placeholders_in(text: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if !after[..close].is_empty() && after[..close].chars().all(|c| c.is_ascii_alphanumeric() || c == '_') => {
                out.insert(after[..close].to_string());
                rest = &after[close + 1..];
            }
            _ => rest = after,
        }
    }
    out
}

impl PromptTemplate {
    pub fn from_toml(text: &str) -> Result<Self, LlmError> {
        toml::from_str(text).map_err(|e| LlmError::Config(e.to_string()))
    }

    fn fill(&self, text: &str, values: &[(&str, &str)]) -> Result<String, LlmError> {
        for p in placeholders_in(text) {
            if !values.iter().any(|(k, _)| *k == p) {
                return Err(LlmError::UnfilledPlaceholder { template: self.id.clone(), placeholder: p });
            }
        }
        // Single pass so substituted values are never re-scanned.
        let mut out = String::with_capacity(text.len());
        let mut rest = text;
        'outer: while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open..];
            for (k, v) in values {
                let token = format!("{{{k}}}");
                if after.starts_with(&token) {
                    out.push_str(v);
                    rest = &after[token.len()..];
                    continue 'outer;
                }
            }
            out.push('{');
            rest = &after[1..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

pub fn render_options(item: &QAItem) -> String {
    item.options.iter().map(|o| format!("{}) {}", o.letter, o.text)).collect::<Vec<_>>().join("\n")
}

fn question_with_mode(item: &QAItem) -> String {
    match item.mode {
        AnswerMode::MultiSelect => format!("{} Select all options that apply.", item.question),
        AnswerMode::SingleSelect => format!("{} Select exactly one option.", item.question),
    }
}

/// System plus user message. An empty context renders the direct variant.
pub fn render_prompt(item: &QAItem, context: &str, template: &PromptTemplate) -> Result<Vec<ChatMessage>, LlmError> {
    let question = question_with_mode(item);
    let options = render_options(item);
    let mut values = vec![("question", question.as_str()), ("background", item.background.as_str()), ("options", options.as_str())];
    let body = if context.trim().is_empty() {
        &template.direct
    } else {
        values.push(("context", context));
        &template.rag
    };
    Ok(vec![ChatMessage::new("system", template.fill(&template.system, &values)?), ChatMessage::new("user", template.fill(body, &values)?)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(model: &str, messages: Vec<ChatMessage>) -> Self {
        Self { model: model.to_string(), messages, temperature: 0.0, max_tokens: 64 }
    }

    /// Hex sha256 over roles and contents.
    pub fn prompt_hash(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.messages {
            h.update(m.role.as_bytes());
            h.update([0u8]);
            h.update(m.content.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn prompt_chars(&self) -> usize {
        self.messages.iter().map(|m| m.content.chars().count()).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

/// What the question under evaluation looks like; mocks read it, real
/// endpoints ignore it.
#[derive(Debug, Clone, Copy)]
pub struct Probe<'a> {
    pub item: Option<&'a QAItem>,
    pub context: &'a str,
}

impl<'a> Probe<'a> {
    pub fn question(item: &'a QAItem, context: &'a str) -> Self {
        Self { item: Some(item), context }
    }

    pub fn free(context: &'a str) -> Self {
        Self { item: None, context }
    }

    fn require_item(&self, mock: &str) -> Result<&'a QAItem, LlmError> {
        self.item.ok_or_else(|| LlmError::Config(format!("{mock} only answers generated questions")))
    }
}

pub trait ChatProvider: Send + Sync {
    fn name(&self) -> String;
    fn chat(&self, request: &ChatRequest, probe: Probe<'_>) -> Result<ChatResponse, LlmError>;
}

fn reply(text: impl Into<String>) -> Result<ChatResponse, LlmError> {
    Ok(ChatResponse { text: text.into(), ..ChatResponse::default() })
}

pub fn format_letters(letters: &BTreeSet<char>) -> String {
    letters.iter().map(char::to_string).collect::<Vec<_>>().join(", ")
}

/// Answers with the item's gold letters.
#[derive(Debug, Clone, Default)]
pub struct EchoGold;

impl ChatProvider for EchoGold {
    fn name(&self) -> String {
        "mock:echo-gold".into()
    }

    fn chat(&self, _: &ChatRequest, probe: Probe<'_>) -> Result<ChatResponse, LlmError> {
        let item = probe.require_item("mock:echo-gold")?;
        reply(format!("Answer: {}", format_letters(&item.gold_letters)))
    }
}

/// Always answers the same letter.
#[derive(Debug, Clone)]
pub struct FixedLetter(pub char);

impl ChatProvider for FixedLetter {
    fn name(&self) -> String {
        format!("mock:fixed-{}", self.0)
    }

    fn chat(&self, _: &ChatRequest, _: Probe<'_>) -> Result<ChatResponse, LlmError> {
        reply(format!("Answer: {}", self.0))
    }
}

/// Answers the gold letters iff the normalized text of some gold option
/// occurs in the normalized context; otherwise the first non-gold letter.
#[derive(Debug, Clone, Default)]
pub struct ContextAware;

impl ContextAware {
    pub fn context_supports(item: &QAItem, context: &str) -> bool {
        let ctx = format!(" {} ", normalize_text(context));
        item.gold_options().any(|o| {
            let g = normalize_text(&o.text);
            !g.is_empty() && ctx.contains(&format!(" {g} "))
        })
    }
}

impl ChatProvider for ContextAware {
    fn name(&self) -> String {
        "mock:context-aware".into()
    }

    fn chat(&self, _: &ChatRequest, probe: Probe<'_>) -> Result<ChatResponse, LlmError> {
        let item = probe.require_item("mock:context-aware")?;
        if Self::context_supports(item, probe.context) {
            return reply(format!("Answer: {}", format_letters(&item.gold_letters)));
        }
        let wrong = item.options.iter().map(|o| o.letter).find(|l| !item.gold_letters.contains(l)).unwrap_or('A');
        reply(format!("Answer: {wrong}"))
    }
}

/// Plays back a fixed script, then repeats `fallback` forever. Rejects
/// prompts longer than `max_prompt_chars` when set.
pub struct Scripted {
    script: Mutex<VecDeque<Result<String, LlmError>>>,
    fallback: Result<String, LlmError>,
    pub max_prompt_chars: Option<usize>,
    calls: Mutex<usize>,
}

impl Scripted {
    pub fn new(script: Vec<Result<String, LlmError>>, fallback: Result<String, LlmError>) -> Self {
        Self { script: Mutex::new(script.into()), fallback, max_prompt_chars: None, calls: Mutex::new(0) }
    }

    pub fn calls(&self) -> usize {
        *self.calls.lock().expect("call counter")
    }
}

impl ChatProvider for Scripted {
    fn name(&self) -> String {
        "mock:scripted".into()
    }

    fn chat(&self, request: &ChatRequest, _: Probe<'_>) -> Result<ChatResponse, LlmError> {
        *self.calls.lock().expect("call counter") += 1;
        if let Some(limit) = self.max_prompt_chars {
            let n = request.prompt_chars();
            if n > limit {
                return Err(LlmError::ContextTooLong(format!("{n} chars > {limit}")));
            }
        }
        let next = self.script.lock().expect("script").pop_front().unwrap_or_else(|| self.fallback.clone());
        next.map(|text| ChatResponse { text, ..ChatResponse::default() })
    }
}

/// Parses `mock:echo-gold`, `mock:fixed-B` and `mock:context-aware`.
pub fn mock_provider(spec: &str) -> Option<Box<dyn ChatProvider>> {
    let rest = spec.strip_prefix("mock:")?;
    match rest {
        "echo-gold" => Some(Box::new(EchoGold)),
        "context-aware" => Some(Box::new(ContextAware)),
        _ => {
            let l = rest.strip_prefix("fixed-").or_else(|| rest.strip_prefix("fixed:"))?;
            let mut chars = l.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) if c.is_ascii_alphabetic() => Some(Box::new(FixedLetter(c.to_ascii_uppercase()))),
                _ => None,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenAiConfig {
    /// Base URL; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for OpenAiConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: "EXPRAG_LLM_API_KEY".into(),
            timeout_secs: 120,
        }
    }
}

/// Any endpoint speaking the OpenAI chat-completions protocol.
pub struct OpenAiCompatible {
    config: OpenAiConfig,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<CompletionChoice>,
    #[serde(default)]
    usage: Option<CompletionUsage>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct CompletionUsage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

impl OpenAiCompatible {
    pub fn new(config: OpenAiConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }
}

/// Maps an HTTP status and body to the error taxonomy.
pub fn classify_status(status: u16, body: &str) -> LlmError {
    let snippet = truncate_chars(body, 200).to_string();
    let lower = body.to_ascii_lowercase();
    match status {
        401 | 403 => LlmError::AuthRejected(snippet),
        429 => LlmError::RateLimited(snippet),
        413 => LlmError::ContextTooLong(snippet),
        400 if lower.contains("context_length") || lower.contains("maximum context") || lower.contains("too long") => {
            LlmError::ContextTooLong(snippet)
        }
        _ => LlmError::Transport(format!("HTTP {status}: {snippet}")),
    }
}

impl ChatProvider for OpenAiCompatible {
    fn name(&self) -> String {
        format!("openai:{}", self.config.model)
    }

    fn chat(&self, request: &ChatRequest, _: Probe<'_>) -> Result<ChatResponse, LlmError> {
        let key = std::env::var(&self.config.api_key_env)
            .map_err(|_| LlmError::Config(format!("environment variable {} is not set", self.config.api_key_env)))?;
        let mut response = self
            .agent
            .post(&self.endpoint())
            .header("Authorization", &format!("Bearer {key}"))
            .send_json(request)
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(|e| LlmError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, &text));
        }
        let body: CompletionBody =
            serde_json::from_str(&text).map_err(|e| LlmError::Transport(format!("bad response body: {e}")))?;
        let choice = body.choices.into_iter().next().ok_or_else(|| LlmError::Transport("no choices".into()))?;
        Ok(ChatResponse {
            text: choice.message.content,
            prompt_tokens: body.usage.as_ref().and_then(|u| u.prompt_tokens),
            completion_tokens: body.usage.as_ref().and_then(|u| u.completion_tokens),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_delay_ms: 500, max_delay_ms: 8000 }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        Self { max_attempts, base_delay_ms: 0, max_delay_ms: 0 }
    }

    /// Delay before retry number `attempt` (1-based): base · 2^(attempt−1).
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub request: ChatRequest,
    pub response: ChatResponse,
    pub attempts: u32,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{error} (after {attempts} attempts)")]
pub struct CompletionFailure {
    pub error: LlmError,
    pub attempts: u32,
    pub latency_ms: u64,
}

/// Sends `request`, retrying transient failures with exponential backoff.
pub fn complete(
    request: ChatRequest,
    provider: &dyn ChatProvider,
    probe: Probe<'_>,
    policy: RetryPolicy,
) -> Result<ChatExchange, CompletionFailure> {
    let started = Instant::now();
    let max = policy.max_attempts.max(1);
    let mut attempts = 0;
    loop {
        attempts += 1;
        match provider.chat(&request, probe) {
            Ok(response) => {
                let latency_ms = started.elapsed().as_millis() as u64;
                return Ok(ChatExchange { request, response, attempts, latency_ms });
            }
            Err(e) if e.is_transient() && attempts < max => {
                log::warn!("{} attempt {attempts} failed: {e}", provider.name());
                std::thread::sleep(policy.delay(attempts));
            }
            Err(error) => {
                return Err(CompletionFailure { error, attempts, latency_ms: started.elapsed().as_millis() as u64 });
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsedAnswer {
    Letters(BTreeSet<char>),
    Invalid(String),
}

impl ParsedAnswer {
    pub fn letters(&self) -> Option<&BTreeSet<char>> {
        match self {
            ParsedAnswer::Letters(l) => Some(l),
            ParsedAnswer::Invalid(_) => None,
        }
    }

    pub fn is_valid(&self) -> bool {
        matches!(self, ParsedAnswer::Letters(_))
    }
}

const ANSWER_MARKERS: [&str; 5] = ["answers are", "answer is", "answers:", "answer:", "final answer"];

/// Standalone capital letters. `A` and `I` followed by a lowercase word
/// (other than and/or) read as English words and are skipped.
fn letter_tokens(text: &str) -> Vec<char> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    for (i, &c) in chars.iter().enumerate() {
        if !c.is_ascii_uppercase() {
            continue;
        }
        let before_ok = i == 0 || !chars[i - 1].is_alphanumeric() && chars[i - 1] != '\'';
        let after_ok = i + 1 == chars.len() || !chars[i + 1].is_alphanumeric() && chars[i + 1] != '\'';
        if !before_ok || !after_ok {
            continue;
        }
        if c == 'A' || c == 'I' {
            let rest: String = chars[i + 1..].iter().collect();
            let next_word: String = rest
                .trim_start_matches([' ', '\t'])
                .chars()
                .take_while(|ch| ch.is_alphabetic() || *ch == '\'')
                .collect();
            let starts_lower = next_word.chars().next().is_some_and(char::is_lowercase);
            let space_follows = rest.starts_with([' ', '\t']);
            if space_follows && starts_lower && next_word != "and" && next_word != "or" {
                continue;
            }
        }
        out.push(c);
    }
    out
}

/// Extracts option letters from a free-text reply. Text after the last
/// answer marker ("Answer:", "the answer is", …) is preferred when it holds
/// any letter.
pub fn parse_answer(text: &str, mode: AnswerMode, n_options: usize) -> ParsedAnswer {
    let lower = text.to_ascii_lowercase();
    let marked = ANSWER_MARKERS
        .iter()
        .filter_map(|m| lower.rfind(m).map(|i| i + m.len()))
        .max()
        .map(|i| letter_tokens(&text[i..]))
        .filter(|l| !l.is_empty());
    let found = marked.unwrap_or_else(|| letter_tokens(text));
    if found.is_empty() {
        return ParsedAnswer::Invalid("no answer".into());
    }
    let last = letter(n_options.saturating_sub(1));
    let in_range = |c: &char| *c <= last;
    match mode {
        AnswerMode::SingleSelect => match found.iter().find(|c| in_range(c)) {
            Some(&c) => ParsedAnswer::Letters(BTreeSet::from([c])),
            None => ParsedAnswer::Invalid("out of range".into()),
        },
        AnswerMode::MultiSelect => {
            if found.iter().any(|c| !in_range(c)) {
                ParsedAnswer::Invalid("out of range".into())
            } else {
                ParsedAnswer::Letters(found.into_iter().collect())
            }
        }
    }
}

/// One line of a transcript log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub question_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_mode: Option<String>,
    pub prompt_hash: String,
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub attempts: u32,
    pub latency_ms: u64,
}

pub fn write_transcript<W: Write>(records: &[TranscriptRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r).map_err(std::io::Error::other)?)?;
    }
    Ok(())
}
