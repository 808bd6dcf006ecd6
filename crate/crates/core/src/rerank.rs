//! Candidate ranking policies.
//!
//! Every policy produces a total order over a task's candidates. Compiling
//! candidates always come before non-compiling ones, so the selected
//! (first) candidate compiles whenever any does. Ties are broken by
//! ascending sample index, which makes orderings independent of the order
//! candidates are supplied in.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use similar::TextDiff;
use thiserror::Error;

use crate::corpus::digest_parts;
use crate::generation::{self, Candidate, GenerationError};
use crate::metrics::{exact_match, wildcard_levenshtein, MetricsError};
use crate::sandbox::Verdict;
use crate::toolchain::{ByteListing, DisassemblyListing};

/// Overrides the configured scorer endpoint.
pub const SCORER_ENDPOINT_ENV: &str = "DECAF_SCORER_ENDPOINT";
/// Length-penalty exponent used unless configured otherwise.
pub const DEFAULT_ALPHA: f64 = 0.6;

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("policy `{policy}` unavailable: {reason}")]
    PolicyUnavailable { policy: PolicyId, reason: String },
    #[error("scorer: {0}")]
    Scorer(#[from] GenerationError),
    #[error("scorer returned out-of-range score {score} for `{candidate}`")]
    ScoreRange { candidate: String, score: f64 },
    #[error("no replay score for `{task}` / `{candidate}`")]
    NoReplayScore { task: String, candidate: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("malformed diff: {0}")]
    Patch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyId {
    Logprob,
    Bytedist,
    Neural,
    TwoStage,
    /// Upper-limit selection using execution verdicts; not a deployable policy.
    Oracle,
}

impl PolicyId {
    pub const DEPLOYABLE: [PolicyId; 4] = [PolicyId::Logprob, PolicyId::Bytedist, PolicyId::Neural, PolicyId::TwoStage];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyId::Logprob => "logprob",
            PolicyId::Bytedist => "bytedist",
            PolicyId::Neural => "neural",
            PolicyId::TwoStage => "two_stage",
            PolicyId::Oracle => "oracle",
        }
    }

    pub fn needs_scorer(self) -> bool {
        matches!(self, PolicyId::Neural | PolicyId::TwoStage)
    }
}

impl fmt::Display for PolicyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "logprob" => Ok(PolicyId::Logprob),
            "bytedist" => Ok(PolicyId::Bytedist),
            "neural" => Ok(PolicyId::Neural),
            "two_stage" => Ok(PolicyId::TwoStage),
            "oracle" => Ok(PolicyId::Oracle),
            other => Err(format!(
                "unknown policy `{other}` (expected logprob, bytedist, neural, two_stage)"
            )),
        }
    }
}

/// What ranking knows about one candidate after compilation and execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEvidence {
    pub candidate_id: String,
    pub sample_index: usize,
    pub compiled: bool,
    pub bytes: Option<ByteListing>,
    /// Canonical disassembly, when the function could be disassembled.
    pub canonical: Option<String>,
    pub sum_logprob: Option<f64>,
    pub token_count: Option<usize>,
    pub verdict: Option<Verdict>,
}

impl CandidateEvidence {
    pub fn from_candidate(c: &Candidate) -> Self {
        Self {
            candidate_id: c.candidate_id.clone(),
            sample_index: c.sample_index,
            compiled: false,
            bytes: None,
            canonical: None,
            sum_logprob: c.sum_logprob,
            token_count: c.token_count,
            verdict: None,
        }
    }
}

/// A policy's ordering of one task's candidates, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSelection {
    pub policy_id: PolicyId,
    pub ordering: Vec<String>,
    /// Higher is better; only candidates the policy could score appear.
    pub scores: BTreeMap<String, f64>,
    pub selected: Option<String>,
    pub selected_compiles: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Set when part of the ordering fell back to sample order.
    #[serde(default)]
    pub degraded: bool,
}

/// Sort key: tier first, then a policy key (lower is better), then sample index.
struct Keyed<'a> {
    tier: u8,
    key: f64,
    c: &'a CandidateEvidence,
}

fn finish(policy_id: PolicyId, mut keyed: Vec<Keyed<'_>>, scores: BTreeMap<String, f64>) -> RankedSelection {
    keyed.sort_by(|a, b| {
        a.tier
            .cmp(&b.tier)
            .then_with(|| a.key.total_cmp(&b.key))
            .then_with(|| a.c.sample_index.cmp(&b.c.sample_index))
            .then_with(|| a.c.candidate_id.cmp(&b.c.candidate_id))
    });
    let selected = keyed.first().map(|k| k.c);
    RankedSelection {
        policy_id,
        selected: selected.map(|c| c.candidate_id.clone()),
        selected_compiles: selected.is_some_and(|c| c.compiled),
        ordering: keyed.iter().map(|k| k.c.candidate_id.clone()).collect(),
        scores,
        alpha: None,
        degraded: false,
    }
}

/// `((5 + len) / 6) ^ alpha`.
pub fn length_penalty(token_count: usize, alpha: f64) -> f64 {
    ((5.0 + token_count as f64) / 6.0).powf(alpha)
}

/// Length-normalized sequence log-probability.
pub fn logprob_score_raw(sum_logprob: f64, token_count: usize, alpha: f64) -> f64 {
    sum_logprob / length_penalty(token_count, alpha)
}

pub fn logprob_score(c: &Candidate, alpha: f64) -> Result<f64, RerankError> {
    match (c.sum_logprob, c.token_count) {
        (Some(sum), Some(n)) if n > 0 => Ok(logprob_score_raw(sum, n, alpha)),
        _ => Err(RerankError::PolicyUnavailable {
            policy: PolicyId::Logprob,
            reason: format!("`{}` has no token log-probabilities", c.candidate_id),
        }),
    }
}

pub fn logprob_rank(candidates: &[CandidateEvidence], alpha: f64) -> Result<RankedSelection, RerankError> {
    let mut scores = BTreeMap::new();
    let mut keyed = Vec::with_capacity(candidates.len());
    for c in candidates {
        let (Some(sum), Some(n)) = (c.sum_logprob, c.token_count.filter(|&n| n > 0)) else {
            return Err(RerankError::PolicyUnavailable {
                policy: PolicyId::Logprob,
                reason: format!("`{}` has no token log-probabilities", c.candidate_id),
            });
        };
        let s = logprob_score_raw(sum, n, alpha);
        scores.insert(c.candidate_id.clone(), s);
        keyed.push(Keyed {
            tier: if c.compiled { 0 } else { 1 },
            key: -s,
            c,
        });
    }
    let mut sel = finish(PolicyId::Logprob, keyed, scores);
    sel.alpha = Some(alpha);
    Ok(sel)
}

fn byte_distances(candidates: &[CandidateEvidence], reference: &ByteListing) -> Result<HashMap<String, f64>, RerankError> {
    let mut out = HashMap::new();
    for c in candidates {
        if let (true, Some(b)) = (c.compiled, &c.bytes) {
            out.insert(c.candidate_id.clone(), wildcard_levenshtein(b, reference)?.normalized);
        }
    }
    Ok(out)
}

pub fn bytedist_rank(candidates: &[CandidateEvidence], reference: &ByteListing) -> Result<RankedSelection, RerankError> {
    let dist = byte_distances(candidates, reference)?;
    let keyed = candidates
        .iter()
        .map(|c| match (c.compiled, dist.get(&c.candidate_id)) {
            (true, Some(&d)) => Keyed { tier: 0, key: d, c },
            (true, None) => Keyed { tier: 1, key: 0.0, c },
            (false, _) => Keyed { tier: 2, key: 0.0, c },
        })
        .collect();
    let scores = dist.into_iter().map(|(id, d)| (id, -d)).collect();
    Ok(finish(PolicyId::Bytedist, keyed, scores))
}

/// Input to the neural scorer: reference disassembly plus a diff to the candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerRequest {
    pub reference_canonical: String,
    pub candidate_diff: String,
    pub stripped: bool,
}

/// Unified diff (3 context lines) from reference to candidate canonical text.
pub fn unified_diff(reference: &str, candidate: &str) -> String {
    if reference == candidate {
        return String::new();
    }
    TextDiff::from_lines(reference, candidate)
        .unified_diff()
        .context_radius(3)
        .header("reference", "candidate")
        .to_string()
}

pub fn diff_compress(reference: &DisassemblyListing, candidate: &DisassemblyListing) -> ScorerRequest {
    ScorerRequest {
        reference_canonical: reference.canonical.clone(),
        candidate_diff: unified_diff(&reference.canonical, &candidate.canonical),
        stripped: reference.stripped_view || candidate.stripped_view,
    }
}

fn parse_range(s: &str) -> Result<(usize, usize), RerankError> {
    let bad = || RerankError::Patch(format!("bad hunk range `{s}`"));
    let (start, len) = match s.split_once(',') {
        Some((a, b)) => (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?),
        None => (s.parse().map_err(|_| bad())?, 1),
    };
    Ok((start, len))
}

/// Applies a unified diff to `original`. Context and removed lines must
/// match exactly.
pub fn apply_unified_diff(original: &str, diff: &str) -> Result<String, RerankError> {
    if diff.is_empty() {
        return Ok(original.to_string());
    }
    let src: Vec<&str> = original.split_inclusive('\n').collect();
    let mut out = String::with_capacity(original.len());
    let mut cursor = 0usize;
    let mut lines = diff.split_inclusive('\n').peekable();
    while let Some(line) = lines.next() {
        if line.starts_with("--- ") || line.starts_with("+++ ") {
            continue;
        }
        let Some(header) = line.strip_prefix("@@ -") else {
            return Err(RerankError::Patch(format!("unexpected line `{}`", line.trim_end())));
        };
        let (old, _) = header
            .split_once(" +")
            .ok_or_else(|| RerankError::Patch(format!("bad hunk header `{}`", line.trim_end())))?;
        let (old_start, old_len) = parse_range(old)?;
        let hunk_start = if old_len == 0 { old_start } else { old_start - 1 };
        if hunk_start < cursor || hunk_start > src.len() {
            return Err(RerankError::Patch(format!("hunk at line {old_start} out of order")));
        }
        for l in &src[cursor..hunk_start] {
            out.push_str(l);
        }
        cursor = hunk_start;
        let mut last_tag = "";
        while let Some(body) = lines.peek() {
            if body.starts_with("@@ ") {
                break;
            }
            let body = lines.next().expect("peeked");
            let (tag, text) = body.split_at(1.min(body.len()));
            let this_tag = tag;
            match tag {
                " " | "-" => {
                    let expected = src
                        .get(cursor)
                        .ok_or_else(|| RerankError::Patch("hunk runs past end of input".into()))?;
                    let text_no_nl = text.strip_suffix('\n').unwrap_or(text);
                    if expected.strip_suffix('\n').unwrap_or(expected) != text_no_nl {
                        return Err(RerankError::Patch(format!("context mismatch at line {}", cursor + 1)));
                    }
                    if tag == " " {
                        out.push_str(expected);
                    }
                    cursor += 1;
                }
                "+" => out.push_str(text),
                "\\" => {
                    // "\ No newline at end of file": the previous line had no newline.
                    if last_tag == "+" {
                        out.pop();
                    }
                }
                _ => return Err(RerankError::Patch(format!("bad hunk line `{}`", body.trim_end()))),
            }
            last_tag = this_tag;
        }
    }
    for l in &src[cursor..] {
        out.push_str(l);
    }
    Ok(out)
}

/// Scores how likely a candidate is equivalent to the reference, in [0, 1].
pub trait Scorer: Send + Sync {
    fn score(&self, task_id: &str, candidate_id: &str, request: &ScorerRequest) -> Result<f64, RerankError>;
}

fn check_range(candidate: &str, score: f64) -> Result<f64, RerankError> {
    if (0.0..=1.0).contains(&score) {
        Ok(score)
    } else {
        Err(RerankError::ScoreRange {
            candidate: candidate.to_string(),
            score,
        })
    }
}

/// Pass-through with range validation.
pub fn neural_score(task_id: &str, candidate_id: &str, request: &ScorerRequest, scorer: &dyn Scorer) -> Result<f64, RerankError> {
    let s = scorer.score(task_id, candidate_id, request)?;
    check_range(candidate_id, s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ScorerConfig {
    Remote {
        endpoint: String,
        #[serde(rename = "timeout_secs", with = "crate::secs")]
        timeout: Duration,
    },
    Replay {
        path: PathBuf,
    },
}

impl ScorerConfig {
    pub fn build(&self) -> Result<Box<dyn Scorer>, RerankError> {
        Ok(match self {
            ScorerConfig::Remote { endpoint, timeout } => Box::new(CachingScorer::new(RemoteScorer::new(endpoint, *timeout)?)),
            ScorerConfig::Replay { path } => Box::new(ReplayScorer::open(path)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayScore {
    pub task_id: String,
    pub candidate_id: String,
    pub score: f64,
}

/// Scores read from a line-delimited `{task_id, candidate_id, score}` file.
#[derive(Debug, Clone, Default)]
pub struct ReplayScorer {
    scores: HashMap<(String, String), f64>,
}

impl ReplayScorer {
    pub fn open(path: &Path) -> Result<Self, RerankError> {
        let text = std::fs::read_to_string(path).map_err(|source| GenerationError::Io {
            context: format!("reading {}", path.display()),
            source,
        })?;
        let mut scores = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ReplayScore = serde_json::from_str(line).map_err(|e| GenerationError::ReplayParse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            scores.insert((rec.task_id, rec.candidate_id), rec.score);
        }
        Ok(Self { scores })
    }

    pub fn from_scores(scores: impl IntoIterator<Item = ReplayScore>) -> Self {
        Self {
            scores: scores
                .into_iter()
                .map(|r| ((r.task_id, r.candidate_id), r.score))
                .collect(),
        }
    }
}

impl Scorer for ReplayScorer {
    fn score(&self, task_id: &str, candidate_id: &str, _request: &ScorerRequest) -> Result<f64, RerankError> {
        self.scores
            .get(&(task_id.to_string(), candidate_id.to_string()))
            .copied()
            .ok_or_else(|| RerankError::NoReplayScore {
                task: task_id.to_string(),
                candidate: candidate_id.to_string(),
            })
    }
}

#[derive(Serialize)]
struct ScoreRequestBody<'a> {
    reference: &'a str,
    diff: &'a str,
    stripped: bool,
}

#[derive(Deserialize)]
struct ScoreResponseBody {
    score: f64,
}

/// HTTP client for a scorer speaking `{reference, diff, stripped}` -> `{score}`.
pub struct RemoteScorer {
    client: reqwest::blocking::Client,
    endpoint: String,
    backoff: Duration,
}

impl RemoteScorer {
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self, RerankError> {
        Ok(Self {
            client: generation::http_client(timeout)?,
            endpoint: endpoint.to_string(),
            backoff: Duration::from_millis(500),
        })
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }
}

impl Scorer for RemoteScorer {
    fn score(&self, _task_id: &str, candidate_id: &str, request: &ScorerRequest) -> Result<f64, RerankError> {
        let body = ScoreRequestBody {
            reference: &request.reference_canonical,
            diff: &request.candidate_diff,
            stripped: request.stripped,
        };
        let text = generation::post_json(&self.client, &self.endpoint, &body, self.backoff)?;
        let resp: ScoreResponseBody = serde_json::from_str(&text).map_err(|e| GenerationError::Protocol {
            message: e.to_string(),
            excerpt: text.chars().take(200).collect(),
        })?;
        check_range(candidate_id, resp.score)
    }
}

/// Memoizes scores by (reference digest, request digest).
pub struct CachingScorer<S> {
    inner: S,
    cache: Mutex<HashMap<(String, String), f64>>,
}

impl<S: Scorer> CachingScorer<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl<S: Scorer> Scorer for CachingScorer<S> {
    fn score(&self, task_id: &str, candidate_id: &str, request: &ScorerRequest) -> Result<f64, RerankError> {
        let key = (
            digest_parts([request.reference_canonical.as_bytes()]),
            digest_parts([request.candidate_diff.as_bytes(), &[u8::from(request.stripped)][..]]),
        );
        if let Some(&s) = self.cache.lock().expect("scorer cache poisoned").get(&key) {
            return Ok(s);
        }
        let s = self.inner.score(task_id, candidate_id, request)?;
        self.cache.lock().expect("scorer cache poisoned").insert(key, s);
        Ok(s)
    }
}

/// Reference-side context needed by the disassembly-based policies.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceView<'a> {
    pub task_id: &'a str,
    pub bytes: Option<&'a ByteListing>,
    pub canonical: Option<&'a str>,
    pub stripped: bool,
}

fn neural_scores(
    candidates: &[CandidateEvidence],
    reference: &ReferenceView<'_>,
    scorer: &dyn Scorer,
) -> Result<BTreeMap<String, f64>, RerankError> {
    let Some(ref_canonical) = reference.canonical else {
        return Err(RerankError::PolicyUnavailable {
            policy: PolicyId::Neural,
            reason: "reference disassembly unavailable".into(),
        });
    };
    let mut scores = BTreeMap::new();
    for c in candidates {
        let (true, Some(canonical)) = (c.compiled, &c.canonical) else {
            continue;
        };
        let request = ScorerRequest {
            reference_canonical: ref_canonical.to_string(),
            candidate_diff: unified_diff(ref_canonical, canonical),
            stripped: reference.stripped,
        };
        scores.insert(
            c.candidate_id.clone(),
            neural_score(reference.task_id, &c.candidate_id, &request, scorer)?,
        );
    }
    Ok(scores)
}

pub fn neural_rank(
    candidates: &[CandidateEvidence],
    reference: &ReferenceView<'_>,
    scorer: &dyn Scorer,
) -> Result<RankedSelection, RerankError> {
    let scores = neural_scores(candidates, reference, scorer).map_err(|e| RerankError::PolicyUnavailable {
        policy: PolicyId::Neural,
        reason: e.to_string(),
    })?;
    let keyed = candidates
        .iter()
        .map(|c| match (c.compiled, scores.get(&c.candidate_id)) {
            (true, Some(&s)) => Keyed { tier: 0, key: -s, c },
            (true, None) => Keyed { tier: 1, key: 0.0, c },
            (false, _) => Keyed { tier: 2, key: 0.0, c },
        })
        .collect();
    Ok(finish(PolicyId::Neural, keyed, scores))
}

/// Exact byte matches first (by sample index), then the rest of the
/// compiling candidates by descending neural score, then non-compiling ones.
pub fn two_stage_rank(
    candidates: &[CandidateEvidence],
    reference: &ReferenceView<'_>,
    scorer: &dyn Scorer,
) -> Result<RankedSelection, RerankError> {
    let is_exact = |c: &CandidateEvidence| {
        c.compiled
            && matches!((&c.bytes, reference.bytes), (Some(b), Some(r)) if exact_match(b, r))
    };
    let any_exact = candidates.iter().any(is_exact);
    let (scores, degraded) = match neural_scores(candidates, reference, scorer) {
        Ok(s) => (s, false),
        Err(e) if !any_exact => {
            return Err(RerankError::PolicyUnavailable {
                policy: PolicyId::TwoStage,
                reason: format!("no exact match and scorer failed: {e}"),
            })
        }
        Err(e) => {
            tracing::warn!(task = reference.task_id, error = %e, "scorer failed; ordering non-matching candidates by sample index");
            (BTreeMap::new(), true)
        }
    };
    let keyed = candidates
        .iter()
        .map(|c| {
            if is_exact(c) {
                Keyed { tier: 0, key: 0.0, c }
            } else if !c.compiled {
                Keyed { tier: 3, key: 0.0, c }
            } else if let Some(&s) = scores.get(&c.candidate_id) {
                Keyed { tier: 1, key: -s, c }
            } else {
                Keyed { tier: 2, key: 0.0, c }
            }
        })
        .collect();
    let mut sel = finish(PolicyId::TwoStage, keyed, scores);
    sel.degraded = degraded;
    Ok(sel)
}

/// Upper-limit ordering from execution verdicts: equivalent candidates,
/// then other compiling ones, each by ascending byte distance.
pub fn oracle_rank(candidates: &[CandidateEvidence], reference: Option<&ByteListing>) -> Result<RankedSelection, RerankError> {
    let all_exempt = !candidates.is_empty() && candidates.iter().all(|c| matches!(c.verdict, Some(Verdict::Exempt)));
    if all_exempt {
        if let Some(r) = reference {
            let mut sel = bytedist_rank(candidates, r)?;
            sel.policy_id = PolicyId::Oracle;
            return Ok(sel);
        }
    }
    let dist = match reference {
        Some(r) => byte_distances(candidates, r)?,
        None => HashMap::new(),
    };
    let keyed = candidates
        .iter()
        .map(|c| {
            let d = dist.get(&c.candidate_id).copied().unwrap_or(f64::INFINITY);
            let tier = match (&c.verdict, c.compiled) {
                (Some(Verdict::Equivalent), _) => 0,
                (_, true) => 1,
                (_, false) => 2,
            };
            Keyed { tier, key: if tier < 2 { d } else { 0.0 }, c }
        })
        .collect();
    let scores = dist.into_iter().map(|(id, d)| (id, -d)).collect();
    Ok(finish(PolicyId::Oracle, keyed, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(i: usize, compiled: bool, bytes: Option<&[u8]>) -> CandidateEvidence {
        CandidateEvidence {
            candidate_id: format!("t#{i}"),
            sample_index: i,
            compiled,
            bytes: bytes.map(|b| ByteListing {
                bytes: b.to_vec(),
                wildcard_mask: vec![false; b.len()],
                symbol: "f".into(),
                origin_profile: "p".into(),
            }),
            canonical: compiled.then(|| format!("    nop {i}\n")),
            sum_logprob: Some(-(i as f64) - 1.0),
            token_count: Some(10),
            verdict: None,
        }
    }

    fn reference(bytes: &[u8]) -> ByteListing {
        ByteListing {
            bytes: bytes.to_vec(),
            wildcard_mask: vec![false; bytes.len()],
            symbol: "f".into(),
            origin_profile: "p".into(),
        }
    }

    fn scorer(pairs: &[(usize, f64)]) -> ReplayScorer {
        ReplayScorer::from_scores(pairs.iter().map(|&(i, s)| ReplayScore {
            task_id: "t".into(),
            candidate_id: format!("t#{i}"),
            score: s,
        }))
    }

    fn view<'a>(bytes: Option<&'a ByteListing>) -> ReferenceView<'a> {
        ReferenceView {
            task_id: "t",
            bytes,
            canonical: Some("    nop ref\n"),
            stripped: false,
        }
    }

    #[test]
    fn normalized_score_examples() {
        assert_eq!(logprob_score_raw(-2.0, 1, 0.6), -2.0);
        let s = logprob_score_raw(-5.0, 5, 0.6);
        assert!((length_penalty(5, 0.6) - 1.358_655_18).abs() < 1e-8);
        assert!((s - -3.680_109_61).abs() < 1e-8, "{s}");
        assert_eq!(logprob_score_raw(-7.5, 123, 0.0), -7.5);
        let bare = Candidate::new("t", 0, "x".into(), vec![]);
        assert!(matches!(logprob_score(&bare, 0.6), Err(RerankError::PolicyUnavailable { .. })));
    }

    #[test]
    fn bytedist_orders_by_distance_then_index() {
        let r = reference(b"abcd");
        let cands = vec![ev(0, true, Some(b"abxx")), ev(1, true, Some(b"abcd")), ev(2, false, None), ev(3, true, Some(b"abcx"))];
        let sel = bytedist_rank(&cands, &r).unwrap();
        assert_eq!(sel.ordering, ["t#1", "t#3", "t#0", "t#2"]);
        assert_eq!(sel.scores["t#1"], 0.0);
        assert_eq!(sel.scores["t#0"], -0.5);

        let ties = vec![ev(5, true, Some(b"abcx")), ev(4, true, Some(b"xbcd"))];
        assert_eq!(bytedist_rank(&ties, &r).unwrap().selected.as_deref(), Some("t#4"));

        let none = vec![ev(2, false, None), ev(0, false, None), ev(1, false, None)];
        let sel = bytedist_rank(&none, &r).unwrap();
        assert_eq!(sel.ordering, ["t#0", "t#1", "t#2"]);
        assert!(!sel.selected_compiles);
        assert!(bytedist_rank(&[], &r).unwrap().ordering.is_empty());
    }

    #[test]
    fn two_stage_tiers() {
        let r = reference(b"abcd");
        let cands = vec![ev(0, true, Some(b"abcd")), ev(1, true, Some(b"zzzz"))];
        let s = scorer(&[(0, 0.2), (1, 0.99)]);
        let sel = two_stage_rank(&cands, &view(Some(&r)), &s).unwrap();
        assert_eq!(sel.selected.as_deref(), Some("t#0"));

        let cands = vec![ev(0, true, Some(b"abxx")), ev(1, true, Some(b"zzzz"))];
        let s = scorer(&[(0, 0.681), (1, 0.858)]);
        let sel = two_stage_rank(&cands, &view(Some(&r)), &s).unwrap();
        assert_eq!(sel.ordering, ["t#1", "t#0"]);

        let cands = vec![ev(3, true, Some(b"abcd")), ev(1, true, Some(b"abcd"))];
        let sel = two_stage_rank(&cands, &view(Some(&r)), &scorer(&[(1, 0.1), (3, 0.9)])).unwrap();
        assert_eq!(sel.selected.as_deref(), Some("t#1"));
    }

    #[test]
    fn two_stage_without_scorer() {
        let r = reference(b"abcd");
        let empty = scorer(&[]);
        let no_match = vec![ev(0, true, Some(b"zzzz"))];
        assert!(matches!(
            two_stage_rank(&no_match, &view(Some(&r)), &empty),
            Err(RerankError::PolicyUnavailable { policy: PolicyId::TwoStage, .. })
        ));
        let with_match = vec![ev(1, true, Some(b"zzzz")), ev(2, true, Some(b"abcd"))];
        let sel = two_stage_rank(&with_match, &view(Some(&r)), &empty).unwrap();
        assert!(sel.degraded);
        assert_eq!(sel.ordering, ["t#2", "t#1"]);
    }

    #[test]
    fn neural_range_check() {
        let cands = vec![ev(0, true, Some(b"a"))];
        let bad = scorer(&[(0, 1.7)]);
        assert!(neural_rank(&cands, &view(None), &bad).is_err());
        let req = ScorerRequest {
            reference_canonical: String::new(),
            candidate_diff: String::new(),
            stripped: false,
        };
        assert!(matches!(neural_score("t", "t#0", &req, &bad), Err(RerankError::ScoreRange { .. })));
    }

    #[test]
    fn oracle_cases() {
        let r = reference(b"abcd");
        let mut cands: Vec<_> = (0..4).map(|i| ev(i, true, Some(b"abcx"))).collect();
        cands[0].bytes = Some(reference(b"abcd"));
        for c in &mut cands {
            c.verdict = Some(Verdict::Inequivalent {
                first_diverging_test: "x".into(),
            });
        }
        cands[2].verdict = Some(Verdict::Equivalent);
        assert_eq!(oracle_rank(&cands, Some(&r)).unwrap().selected.as_deref(), Some("t#2"));
        cands[2].verdict = cands[1].verdict.clone();
        assert_eq!(oracle_rank(&cands, Some(&r)).unwrap().selected.as_deref(), Some("t#0"));
        for c in &mut cands {
            c.verdict = Some(Verdict::Exempt);
        }
        let o = oracle_rank(&cands, Some(&r)).unwrap();
        let b = bytedist_rank(&cands, &r).unwrap();
        assert_eq!(o.ordering, b.ordering);
    }

    #[test]
    fn diff_round_trip_examples() {
        let a = "    mov %edi,%eax\n    ret\n";
        assert_eq!(unified_diff(a, a), "");
        let b = "    mov %esi,%eax\n    ret\n";
        let d = unified_diff(a, b);
        assert_eq!(d.matches("@@ ").count(), 1);
        assert_eq!(apply_unified_diff(a, &d).unwrap(), b);
        assert!(apply_unified_diff("    other\n    ret\n", &d).is_err());
    }

    proptest! {
        #[test]
        fn diff_round_trip(
            a in proptest::collection::vec("[a-d]{1,3}", 0..30),
            b in proptest::collection::vec("[a-d]{1,3}", 0..30),
            a_nl in any::<bool>(),
            b_nl in any::<bool>(),
        ) {
            let join = |v: &[String], nl: bool| {
                let mut s = v.join("\n");
                if nl && !s.is_empty() { s.push('\n'); }
                s
            };
            let (a, b) = (join(&a, a_nl), join(&b, b_nl));
            let d = unified_diff(&a, &b);
            prop_assert_eq!(apply_unified_diff(&a, &d).unwrap(), b);
        }

        #[test]
        fn orderings_are_permutation_invariant(
            spec in proptest::collection::vec((any::<bool>(), 0u8..4, 0u8..100), 1..12),
            seed in any::<u64>(),
        ) {
            let r = reference(b"abcd");
            let cands: Vec<CandidateEvidence> = spec
                .iter()
                .enumerate()
                .map(|(i, &(compiled, variant, _))| {
                    let bytes: &[u8] = match variant { 0 => b"abcd", 1 => b"abcx", 2 => b"ab", _ => b"zzzzzz" };
                    ev(i, compiled, compiled.then_some(bytes))
                })
                .collect();
            let s = scorer(&spec.iter().enumerate().map(|(i, &(_, _, q))| (i, f64::from(q) / 100.0)).collect::<Vec<_>>());
            let mut shuffled = cands.clone();
            let mut state = seed;
            for i in (1..shuffled.len()).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (state >> 33) as usize % (i + 1));
            }
            let v = view(Some(&r));
            prop_assert_eq!(logprob_rank(&cands, 0.6).unwrap().ordering, logprob_rank(&shuffled, 0.6).unwrap().ordering);
            prop_assert_eq!(bytedist_rank(&cands, &r).unwrap().ordering, bytedist_rank(&shuffled, &r).unwrap().ordering);
            prop_assert_eq!(neural_rank(&cands, &v, &s).unwrap().ordering, neural_rank(&shuffled, &v, &s).unwrap().ordering);
            let ts = two_stage_rank(&cands, &v, &s).unwrap();
            prop_assert_eq!(&ts.ordering, &two_stage_rank(&shuffled, &v, &s).unwrap().ordering);

            let exact: Vec<bool> = ts.ordering.iter().map(|id| {
                let c = cands.iter().find(|c| &c.candidate_id == id).unwrap();
                c.compiled && c.bytes.as_ref().is_some_and(|b| exact_match(b, &r))
            }).collect();
            if let Some(first_non) = exact.iter().position(|e| !e) {
                prop_assert!(exact[first_non..].iter().all(|e| !e));
            }
            if cands.iter().any(|c| c.compiled) {
                prop_assert!(ts.selected_compiles);
            }
        }

        #[test]
        fn logprob_monotonicity(sum in -1e4f64..-1e-6, delta in 1e-6f64..10.0, n in 1usize..10_000, alpha in 0.01f64..2.0) {
            prop_assert!(logprob_score_raw(sum + delta.min(-sum), n, alpha) >= logprob_score_raw(sum, n, alpha));
            prop_assert!(logprob_score_raw(sum, n + 1, alpha) > logprob_score_raw(sum, n, alpha));
        }
    }
}
