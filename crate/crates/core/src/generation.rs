//! Candidate generation: a completion-protocol HTTP client and a replay
//! generator that reads stored completions from line-delimited JSON.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::corpus::DecompilationTask;

/// Overrides the configured generator endpoint.
pub const GEN_ENDPOINT_ENV: &str = "DECAF_GEN_ENDPOINT";
pub const DEFAULT_TEMPLATE: &str = "decaf-v1";
const BUILTIN_TEMPLATES: &[(&str, &str)] = &[("decaf-v1", include_str!("../templates/decaf-v1.txt"))];
const MAX_RETRIES: u32 = 3;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("transport error talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },
    #[error("protocol error: {message}; payload: {excerpt}")]
    Protocol { message: String, excerpt: String },
    #[error("no replay candidates for task `{0}`")]
    NoReplay(String),
    #[error("{path}:{line}: {message}")]
    ReplayParse { path: String, line: usize, message: String },
    #[error("unknown prompt template `{0}`")]
    UnknownTemplate(String),
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("refusing to store an empty candidate list")]
    Empty,
}

fn excerpt(payload: &str) -> String {
    let mut end = payload.len().min(200);
    while !payload.is_char_boundary(end) {
        end -= 1;
    }
    payload[..end].to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMode {
    Remote,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub mode: GeneratorMode,
    /// URL in remote mode, replay file path in replay mode.
    pub endpoint: String,
    pub n_samples: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(rename = "request_timeout_secs", with = "crate::secs", default = "default_timeout")]
    pub request_timeout: Duration,
    #[serde(default = "default_template")]
    pub prompt_template_id: String,
}

fn default_temperature() -> f64 {
    0.8
}
fn default_max_tokens() -> usize {
    2048
}
fn default_timeout() -> Duration {
    Duration::from_secs(600)
}
fn default_template() -> String {
    DEFAULT_TEMPLATE.into()
}

impl GeneratorConfig {
    pub fn replay(path: impl Into<PathBuf>, n_samples: usize) -> Self {
        Self {
            mode: GeneratorMode::Replay,
            endpoint: path.into().display().to_string(),
            n_samples,
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
            request_timeout: default_timeout(),
            prompt_template_id: default_template(),
        }
    }

    pub fn remote(url: &str, n_samples: usize) -> Self {
        Self {
            mode: GeneratorMode::Remote,
            endpoint: url.to_string(),
            ..Self::replay("", n_samples)
        }
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        if self.n_samples == 0 {
            return Err(GenerationError::Config("n_samples must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GenerationError::Config("temperature must be a non-negative number".into()));
        }
        if self.max_tokens == 0 {
            return Err(GenerationError::Config("max_tokens must be positive".into()));
        }
        if self.endpoint.is_empty() {
            return Err(GenerationError::Config("missing endpoint".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Generated,
    Compiled,
    CompileFailed,
    Executed,
    Selected,
}

/// One sampled decompilation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub candidate_id: String,
    pub task_id: String,
    pub sample_index: usize,
    pub source: String,
    /// Natural-log probability of each emitted token; empty when the backend gave none.
    #[serde(default)]
    pub token_logprobs: Vec<f64>,
    pub sum_logprob: Option<f64>,
    pub token_count: Option<usize>,
    pub status: CandidateStatus,
}

pub fn candidate_id(task_id: &str, sample_index: usize) -> String {
    format!("{task_id}#{sample_index}")
}

/// Splits `task#index`.
pub fn parse_candidate_id(id: &str) -> Option<(&str, usize)> {
    let (task, index) = id.rsplit_once('#')?;
    Some((task, index.parse().ok()?))
}

impl Candidate {
    pub fn new(task_id: &str, sample_index: usize, source: String, token_logprobs: Vec<f64>) -> Self {
        let has = !token_logprobs.is_empty();
        Self {
            candidate_id: candidate_id(task_id, sample_index),
            task_id: task_id.to_string(),
            sample_index,
            source,
            sum_logprob: has.then(|| token_logprobs.iter().sum()),
            token_count: has.then_some(token_logprobs.len()),
            token_logprobs,
            status: CandidateStatus::Generated,
        }
    }

    pub fn has_logprobs(&self) -> bool {
        self.sum_logprob.is_some() && self.token_count.is_some_and(|n| n > 0)
    }
}

fn check_logprobs(values: &[f64]) -> Result<(), String> {
    match values.iter().find(|v| !(v.is_finite() && **v <= 0.0)) {
        Some(v) => Err(format!("token log-probability {v} is not a finite value <= 0")),
        None => Ok(()),
    }
}

/// Renders the prompt for a task from a builtin template id or a template file.
pub fn build_prompt(task: &DecompilationTask, template_id: &str) -> Result<String, GenerationError> {
    let template = match BUILTIN_TEMPLATES.iter().find(|(id, _)| *id == template_id) {
        Some((_, t)) => t.to_string(),
        None => fs::read_to_string(template_id).map_err(|_| GenerationError::UnknownTemplate(template_id.to_string()))?,
    };
    Ok(template.replace("{decompiler_output}", task.decompiler_output.trim_end()))
}

pub trait Generator: Send + Sync {
    /// Samples candidates for one task, ordered by sample index.
    fn sample(&self, task: &DecompilationTask, cfg: &GeneratorConfig, seed: u64) -> Result<Vec<Candidate>, GenerationError>;
}

/// Line of a replay candidate file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub candidate_id: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub token_logprobs: Vec<f64>,
}

/// Serves candidates stored in a replay file.
#[derive(Debug, Clone, Default)]
pub struct ReplayGenerator {
    by_task: BTreeMap<String, BTreeMap<usize, ReplayRecord>>,
}

impl ReplayGenerator {
    pub fn open(path: &Path) -> Result<Self, GenerationError> {
        let mut generator = Self::default();
        for (line, rec) in read_replay(path)?.into_iter().enumerate() {
            let (task, index) = parse_candidate_id(&rec.candidate_id).ok_or_else(|| GenerationError::ReplayParse {
                path: path.display().to_string(),
                line: line + 1,
                message: format!("candidate_id `{}` is not `<task>#<index>`", rec.candidate_id),
            })?;
            generator
                .by_task
                .entry(task.to_string())
                .or_default()
                .insert(index, rec.clone());
        }
        Ok(generator)
    }
}

impl Generator for ReplayGenerator {
    fn sample(&self, task: &DecompilationTask, cfg: &GeneratorConfig, _seed: u64) -> Result<Vec<Candidate>, GenerationError> {
        let stored = self
            .by_task
            .get(&task.task_id)
            .ok_or_else(|| GenerationError::NoReplay(task.task_id.clone()))?;
        let out: Vec<Candidate> = stored
            .iter()
            .take(cfg.n_samples)
            .map(|(&i, rec)| Candidate::new(&task.task_id, i, rec.source.clone(), rec.token_logprobs.clone()))
            .collect();
        if out.len() < cfg.n_samples {
            warn!(task = %task.task_id, have = out.len(), want = cfg.n_samples, "replay file has fewer samples than requested");
        }
        Ok(out)
    }
}

/// Reads a replay file, validating each line.
pub fn read_replay(path: &Path) -> Result<Vec<ReplayRecord>, GenerationError> {
    let text = fs::read_to_string(path).map_err(|source| GenerationError::Io {
        context: format!("reading {}", path.display()),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| GenerationError::ReplayParse {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let rec: ReplayRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        check_logprobs(&rec.token_logprobs).map_err(parse_err)?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes candidates as replay lines, truncating or appending.
pub fn replay_store(path: &Path, candidates: &[Candidate], append: bool) -> Result<(), GenerationError> {
    if candidates.is_empty() {
        return Err(GenerationError::Empty);
    }
    let io = |source| GenerationError::Io {
        context: format!("writing {}", path.display()),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(io)?;
    let mut buf = String::new();
    for c in candidates {
        let rec = ReplayRecord {
            candidate_id: c.candidate_id.clone(),
            source: c.source.clone(),
            token_logprobs: c.token_logprobs.clone(),
        };
        buf.push_str(&serde_json::to_string(&rec).expect("replay records serialize"));
        buf.push('\n');
    }
    file.write_all(buf.as_bytes()).map_err(io)
}

#[derive(Debug, Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
    n: usize,
    temperature: f64,
    max_tokens: usize,
    logprobs: bool,
    seed: u64,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    index: Option<usize>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Debug, Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    token_logprobs: Vec<f64>,
}

/// Blocking JSON-over-HTTP POST with bounded exponential-backoff retries
/// on transport failures and 5xx statuses.
pub(crate) fn post_json<T: Serialize>(
    client: &reqwest::blocking::Client,
    url: &str,
    body: &T,
    backoff: Duration,
) -> Result<String, GenerationError> {
    let mut delay = backoff;
    let mut attempt = 0;
    loop {
        let result = client.post(url).json(body).send();
        let transient = match result {
            Ok(resp) if resp.status().is_server_error() => format!("server returned {}", resp.status()),
            Ok(resp) => {
                let status = resp.status();
                let text = resp.text().map_err(|e| GenerationError::Transport {
                    endpoint: url.to_string(),
                    message: e.to_string(),
                })?;
                if !status.is_success() {
                    return Err(GenerationError::Protocol {
                        message: format!("HTTP {status}"),
                        excerpt: excerpt(&text),
                    });
                }
                return Ok(text);
            }
            Err(e) => e.to_string(),
        };
        if attempt >= MAX_RETRIES {
            return Err(GenerationError::Transport {
                endpoint: url.to_string(),
                message: format!("{transient} (after {} attempts)", attempt + 1),
            });
        }
        warn!(url, attempt, error = %transient, "request failed, retrying");
        thread::sleep(delay);
        delay *= 2;
        attempt += 1;
    }
}

pub(crate) fn http_client(timeout: Duration) -> Result<reqwest::blocking::Client, GenerationError> {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| GenerationError::Config(e.to_string()))
}

/// Client for a completion server returning per-token log-probabilities.
pub struct RemoteGenerator {
    client: reqwest::blocking::Client,
    backoff: Duration,
}

impl RemoteGenerator {
    pub fn new(cfg: &GeneratorConfig) -> Result<Self, GenerationError> {
        Ok(Self {
            client: http_client(cfg.request_timeout)?,
            backoff: Duration::from_millis(500),
        })
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }
}

impl Generator for RemoteGenerator {
    fn sample(&self, task: &DecompilationTask, cfg: &GeneratorConfig, seed: u64) -> Result<Vec<Candidate>, GenerationError> {
        let prompt = build_prompt(task, &cfg.prompt_template_id)?;
        let request = CompletionRequest {
            prompt: &prompt,
            n: cfg.n_samples,
            temperature: cfg.temperature,
            max_tokens: cfg.max_tokens,
            logprobs: true,
            seed,
        };
        let body = post_json(&self.client, &cfg.endpoint, &request, self.backoff)?;
        let response: CompletionResponse = serde_json::from_str(&body).map_err(|e| GenerationError::Protocol {
            message: e.to_string(),
            excerpt: excerpt(&body),
        })?;

        let mut choices: Vec<(usize, Choice)> = response
            .choices
            .into_iter()
            .enumerate()
            .map(|(pos, c)| (c.index.unwrap_or(pos), c))
            .collect();
        choices.sort_by_key(|(i, _)| *i);

        let mut out = Vec::new();
        let mut missing_logprobs = false;
        for (pos, (_, choice)) in choices.into_iter().enumerate() {
            let Some(text) = choice.text else {
                warn!(task = %task.task_id, sample = pos, "completion without text, dropping sample");
                continue;
            };
            let logprobs = choice.logprobs.map(|l| l.token_logprobs).unwrap_or_default();
            check_logprobs(&logprobs).map_err(|message| GenerationError::Protocol {
                message,
                excerpt: excerpt(&body),
            })?;
            missing_logprobs |= logprobs.is_empty();
            out.push(Candidate::new(&task.task_id, pos, text, logprobs));
        }
        if missing_logprobs {
            warn!(task = %task.task_id, "backend returned no token log-probabilities; log-prob reranking unavailable");
        }
        if out.len() < cfg.n_samples {
            warn!(task = %task.task_id, got = out.len(), want = cfg.n_samples, "fewer completions than requested");
        }
        Ok(out)
    }
}

/// Fraction of candidates whose source duplicates an earlier sample.
pub fn duplicate_rate(candidates: &[Candidate]) -> f64 {
    if candidates.is_empty() {
        return 0.0;
    }
    let unique: std::collections::BTreeSet<&str> = candidates.iter().map(|c| c.source.as_str()).collect();
    (candidates.len() - unique.len()) as f64 / candidates.len() as f64
}
