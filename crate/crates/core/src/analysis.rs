//! Aggregation of per-task results into split tables, best-of-k curves and
//! vulnerability-recovery precision/recall.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{write_atomic, PersistenceError};
use crate::rerank::PolicyId;
use crate::sandbox::Verdict;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("k = {k} outside 1..={n}")]
    KOutOfRange { n: usize, k: usize },
    #[error("c = {c} exceeds n = {n}")]
    SuccessesExceedSamples { n: usize, c: usize },
    #[error("no task results to aggregate")]
    Empty,
    #[error("finding for `{0}` has no good/bad label")]
    Unlabeled(String),
    #[error("unknown report format `{0}` (expected json, csv, markdown)")]
    UnknownFormat(String),
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error(transparent)]
    Persistence(#[from] PersistenceError),
}

/// One candidate's outcomes, for best-of-k curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub candidate_id: String,
    pub sample_index: usize,
    pub compiled: bool,
    /// `None` when the task is not executed.
    pub equivalent: Option<bool>,
    pub exact_match: bool,
    pub byte_distance: Option<f64>,
    pub source_distance: Option<f64>,
}

/// What a policy selected for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutcome {
    pub selected: Option<String>,
    pub verdict: Option<Verdict>,
    pub exact_match: bool,
    pub byte_distance: Option<f64>,
    pub source_distance: Option<f64>,
    pub compiled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub split: String,
    /// Not scored for correctness: exempt by label, or nondeterministic reference.
    pub execution_exempt: bool,
    pub policies: BTreeMap<PolicyId, PolicyOutcome>,
    pub candidates: Vec<CandidateRow>,
}

/// Table-style metrics for one split under one policy, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: String,
    pub policy: PolicyId,
    pub tasks: usize,
    pub acc: Option<f64>,
    pub bm: f64,
    pub edit: Option<f64>,
    pub comp: f64,
}

fn percent(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Order-independent mean: values are summed in sorted order.
fn stable_mean(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

/// Acc / BM / Edit / Comp for `policy` over `results`. A task the policy
/// could not rank counts as a miss everywhere.
pub fn aggregate_split(results: &[TaskResult], policy: PolicyId) -> Result<SplitReport, AnalysisError> {
    if results.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mut executed = 0;
    let mut equivalent = 0;
    let mut matched = 0;
    let mut compiled = 0;
    let mut edits = Vec::new();
    for r in results {
        let outcome = r.policies.get(&policy);
        if !r.execution_exempt {
            executed += 1;
            if outcome.and_then(|o| o.verdict.as_ref()).is_some_and(Verdict::is_equivalent) {
                equivalent += 1;
            }
        }
        let Some(o) = outcome else { continue };
        matched += usize::from(o.exact_match);
        compiled += usize::from(o.selected.is_some() && o.compiled);
        if let (Some(_), Some(d)) = (&o.selected, o.source_distance) {
            edits.push(d);
        }
    }
    Ok(SplitReport {
        split: results[0].split.clone(),
        policy,
        tasks: results.len(),
        acc: (executed > 0).then(|| percent(equivalent, executed)),
        bm: percent(matched, results.len()),
        edit: stable_mean(&mut edits).map(|m| 100.0 * m),
        comp: percent(compiled, results.len()),
    })
}

fn binomial_u64(n: usize, k: usize) -> Option<u64> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step.
        acc = acc.checked_mul((n - i) as u64)? / (i as u64 + 1);
    }
    Some(acc)
}

const EXACT_LIMIT: u64 = 1 << 53;

/// Probability that a uniformly random k-subset of n samples, c of which
/// succeed, contains at least one success: `1 - C(n-c, k) / C(n, k)`.
///
/// Uses exact integer binomials while they are exactly representable,
/// and the product form `1 - prod_{i=n-c+1}^{n} (1 - k/i)` beyond that.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64, AnalysisError> {
    if k == 0 || k > n {
        return Err(AnalysisError::KOutOfRange { n, k });
    }
    if c > n {
        return Err(AnalysisError::SuccessesExceedSamples { n, c });
    }
    if n - c < k {
        return Ok(1.0);
    }
    if let (Some(total), Some(fail)) = (binomial_u64(n, k), binomial_u64(n - c, k)) {
        if total <= EXACT_LIMIT {
            return Ok((total - fail) as f64 / total as f64);
        }
    }
    let miss: f64 = ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

/// Expected minimum of a uniformly random k-subset of `values`.
///
/// With ascending order statistics v(1) <= ... <= v(n), the i-th smallest
/// is the minimum of exactly C(n-i, k-1) subsets.
pub fn expected_min_at_k(values: &[f64], k: usize) -> Result<f64, AnalysisError> {
    let n = values.len();
    if k == 0 || k > n {
        return Err(AnalysisError::KOutOfRange { n, k });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    match binomial_u64(n, k) {
        Some(total) if total <= EXACT_LIMIT => {
            let sum: f64 = sorted
                .iter()
                .enumerate()
                .take(n - k + 1)
                .map(|(i, v)| v * binomial_u64(n - i - 1, k - 1).expect("smaller than total") as f64)
                .sum();
            Ok(sum / total as f64)
        }
        _ => {
            // Weight of position i is C(n-i-1, k-1) / C(n, k); the ratio between
            // consecutive weights is (n-i-k)/(n-i-1), starting from k/n.
            let mut w = k as f64 / n as f64;
            let mut sum = 0.0;
            for i in 0..=(n - k) {
                sum += w * sorted[i];
                if i + 1 <= n - k {
                    w *= (n - i - k) as f64 / (n - i - 1) as f64;
                }
            }
            Ok(sum)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveMetric {
    Acc,
    Bm,
    Edit,
}

impl CurveMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            CurveMetric::Acc => "acc",
            CurveMetric::Bm => "bm",
            CurveMetric::Edit => "edit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    SubsetExpectation,
    PrefixBest,
}

/// Best-of-k success rate (acc, bm) or expected minimum distance (edit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingCurve {
    pub metric: CurveMetric,
    pub estimator: Estimator,
    pub k_values: Vec<usize>,
    pub values: Vec<f64>,
}

/// Per-task inputs of one curve: successes out of n, or candidate distances.
enum CurveData {
    Counts(Vec<(usize, usize)>),
    Distances(Vec<Vec<f64>>),
}

fn curve_data(results: &[TaskResult], metric: CurveMetric) -> CurveData {
    let mut rows: Vec<&TaskResult> = results.iter().filter(|r| !r.candidates.is_empty()).collect();
    rows.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    match metric {
        CurveMetric::Acc => CurveData::Counts(
            rows.iter()
                .filter(|r| !r.execution_exempt)
                .map(|r| (r.candidates.len(), r.candidates.iter().filter(|c| c.equivalent == Some(true)).count()))
                .collect(),
        ),
        CurveMetric::Bm => CurveData::Counts(
            rows.iter()
                .map(|r| (r.candidates.len(), r.candidates.iter().filter(|c| c.exact_match).count()))
                .collect(),
        ),
        CurveMetric::Edit => CurveData::Distances(
            rows.iter()
                .filter_map(|r| r.candidates.iter().map(|c| c.source_distance).collect::<Option<Vec<f64>>>())
                .collect(),
        ),
    }
}

/// Subset-expectation curves for k = 1..=max_k. Tasks with fewer than k
/// candidates contribute their all-samples value.
pub fn scaling_curve(results: &[TaskResult], metric: CurveMetric, max_k: usize) -> Result<ScalingCurve, AnalysisError> {
    let data = curve_data(results, metric);
    let mut values = Vec::with_capacity(max_k);
    for k in 1..=max_k {
        let mut per_task = Vec::new();
        match &data {
            CurveData::Counts(rows) => {
                for &(n, c) in rows {
                    per_task.push(pass_at_k(n, c, k.min(n))?);
                }
            }
            CurveData::Distances(rows) => {
                for d in rows {
                    per_task.push(expected_min_at_k(d, k.min(d.len()))?);
                }
            }
        }
        values.push(stable_mean(&mut per_task).unwrap_or(0.0));
    }
    Ok(ScalingCurve {
        metric,
        estimator: Estimator::SubsetExpectation,
        k_values: (1..=max_k).collect(),
        values,
    })
}

/// Best over the first k samples in sample order.
pub fn prefix_best_curve(results: &[TaskResult], metric: CurveMetric, max_k: usize) -> ScalingCurve {
    let mut values = Vec::with_capacity(max_k);
    for k in 1..=max_k {
        let mut per_task = Vec::new();
        for r in results.iter().filter(|r| !r.candidates.is_empty()) {
            let mut cands: Vec<&CandidateRow> = r.candidates.iter().collect();
            cands.sort_by_key(|c| c.sample_index);
            let prefix = &cands[..k.min(cands.len())];
            match metric {
                CurveMetric::Acc if !r.execution_exempt => {
                    per_task.push(f64::from(u8::from(prefix.iter().any(|c| c.equivalent == Some(true)))))
                }
                CurveMetric::Acc => {}
                CurveMetric::Bm => per_task.push(f64::from(u8::from(prefix.iter().any(|c| c.exact_match)))),
                CurveMetric::Edit => {
                    if let Some(d) = prefix.iter().map(|c| c.source_distance).collect::<Option<Vec<f64>>>() {
                        per_task.push(d.into_iter().fold(f64::INFINITY, f64::min));
                    }
                }
            }
        }
        values.push(stable_mean(&mut per_task).unwrap_or(0.0));
    }
    ScalingCurve {
        metric,
        estimator: Estimator::PrefixBest,
        k_values: (1..=max_k).collect(),
        values,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JulietLabel {
    Good,
    Bad,
}

/// Function-level vulnerability recovery; percentages in 0..=100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JulietReport {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of bad (vulnerable) functions.
    pub support: usize,
    /// Nothing was flagged, so precision is reported as 0.
    pub precision_undefined: bool,
}

/// Confusion counts over labelled functions. Functions missing from
/// `findings` (e.g. their decompilation failed analysis) count as not flagged.
pub fn juliet_confusion(
    findings: &BTreeMap<String, bool>,
    labels: &BTreeMap<String, JulietLabel>,
) -> Result<JulietReport, AnalysisError> {
    if let Some(unlabeled) = findings.keys().find(|k| !labels.contains_key(*k)) {
        return Err(AnalysisError::Unlabeled(unlabeled.clone()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (id, label) in labels {
        let flagged = findings.get(id).copied().unwrap_or(false);
        match (label, flagged) {
            (JulietLabel::Bad, true) => tp += 1,
            (JulietLabel::Good, true) => fp += 1,
            (JulietLabel::Bad, false) => fn_ += 1,
            (JulietLabel::Good, false) => tn += 1,
        }
    }
    let precision_undefined = tp + fp == 0;
    let p = if precision_undefined { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Ok(JulietReport {
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        true_negatives: tn,
        precision: 100.0 * p,
        recall: 100.0 * r,
        f1: 100.0 * f1,
        support: tp + fn_,
        precision_undefined,
    })
}

#[derive(Deserialize)]
struct FindingLine {
    function_id: String,
    flagged: bool,
}

#[derive(Deserialize)]
struct LabelLine {
    function_id: String,
    label: JulietLabel,
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, AnalysisError> {
    let text = std::fs::read_to_string(path).map_err(|e| AnalysisError::Parse {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AnalysisError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Reads `{function_id, flagged}` lines; a function flagged on any line is flagged.
pub fn load_findings(path: &Path) -> Result<BTreeMap<String, bool>, AnalysisError> {
    let mut out = BTreeMap::new();
    for f in read_lines::<FindingLine>(path)? {
        *out.entry(f.function_id).or_insert(false) |= f.flagged;
    }
    Ok(out)
}

/// Reads `{function_id, label: good|bad}` lines.
pub fn load_labels(path: &Path) -> Result<BTreeMap<String, JulietLabel>, AnalysisError> {
    Ok(read_lines::<LabelLine>(path)?
        .into_iter()
        .map(|l| (l.function_id, l.label))
        .collect())
}

/// Reduces a SARIF log to per-function flags: a function is flagged when
/// any result's logical location names it. Every id in `functions` gets an
/// entry.
pub fn findings_from_sarif(sarif: &serde_json::Value, functions: &BTreeSet<String>) -> BTreeMap<String, bool> {
    let mut out: BTreeMap<String, bool> = functions.iter().map(|f| (f.clone(), false)).collect();
    let runs = sarif.get("runs").and_then(|r| r.as_array()).into_iter().flatten();
    for run in runs {
        let results = run.get("results").and_then(|r| r.as_array()).into_iter().flatten();
        for result in results {
            let locations = result.get("locations").and_then(|l| l.as_array()).into_iter().flatten();
            for loc in locations {
                let logical = loc.get("logicalLocations").and_then(|l| l.as_array()).into_iter().flatten();
                for l in logical {
                    for key in ["name", "fullyQualifiedName"] {
                        if let Some(name) = l.get(key).and_then(|n| n.as_str()) {
                            if let Some(flag) = out.get_mut(name) {
                                *flag = true;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(AnalysisError::UnknownFormat(other.to_string())),
        }
    }
}

/// A task-level problem recorded during the run.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskIssue {
    pub task_id: String,
    pub phase: String,
    pub message: String,
}

/// Everything a report renders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub manifest_digest: String,
    pub policies: Vec<PolicyId>,
    pub splits: Vec<SplitReport>,
    pub curves: Vec<ScalingCurve>,
    pub task_count: usize,
    pub duplicate_rate: f64,
    pub issues: Vec<TaskIssue>,
}

/// Builds the report: one row per (split, policy), splits sorted by name.
pub fn build_report(
    manifest_digest: &str,
    results: &[TaskResult],
    policies: &[PolicyId],
    duplicate_rate: f64,
    issues: Vec<TaskIssue>,
    prefix_curves: bool,
) -> Result<RunReport, AnalysisError> {
    let mut by_split: BTreeMap<&str, Vec<TaskResult>> = BTreeMap::new();
    for r in results {
        by_split.entry(r.split.as_str()).or_default().push(r.clone());
    }
    let mut splits = Vec::new();
    for rows in by_split.values() {
        for &p in policies {
            splits.push(aggregate_split(rows, p)?);
        }
    }
    let max_k = results.iter().map(|r| r.candidates.len()).max().unwrap_or(0);
    let mut curves = Vec::new();
    if max_k > 0 {
        for metric in [CurveMetric::Acc, CurveMetric::Bm, CurveMetric::Edit] {
            curves.push(scaling_curve(results, metric, max_k)?);
        }
        if prefix_curves {
            for metric in [CurveMetric::Acc, CurveMetric::Bm, CurveMetric::Edit] {
                curves.push(prefix_best_curve(results, metric, max_k));
            }
        }
    }
    let mut issues = issues;
    issues.sort();
    Ok(RunReport {
        manifest_digest: manifest_digest.to_string(),
        policies: policies.to_vec(),
        splits,
        curves,
        task_count: results.len(),
        duplicate_rate,
        issues,
    })
}

fn round_to(x: f64, places: i32) -> f64 {
    let scale = 10f64.powi(places);
    (x * scale).round() / scale
}

fn pct(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.1}")).unwrap_or_else(|| "--".into())
}

fn render_json(report: &RunReport) -> String {
    let splits: Vec<serde_json::Value> = report
        .splits
        .iter()
        .map(|s| {
            serde_json::json!({
                "split": s.split,
                "policy": s.policy,
                "tasks": s.tasks,
                "acc": s.acc.map(|v| round_to(v, 1)),
                "bm": round_to(s.bm, 1),
                "edit": s.edit.map(|v| round_to(v, 1)),
                "comp": round_to(s.comp, 1),
            })
        })
        .collect();
    let curves: Vec<serde_json::Value> = report
        .curves
        .iter()
        .map(|c| {
            serde_json::json!({
                "metric": c.metric,
                "estimator": c.estimator,
                "k": c.k_values,
                "values": c.values.iter().map(|v| round_to(*v, 4)).collect::<Vec<_>>(),
            })
        })
        .collect();
    let doc = serde_json::json!({
        "manifest_digest": report.manifest_digest,
        "task_count": report.task_count,
        "policies": report.policies,
        "duplicate_rate": round_to(100.0 * report.duplicate_rate, 1),
        "splits": splits,
        "curves": curves,
        "issues": report.issues,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("report serializes");
    s.push('\n');
    s
}

fn render_csv(report: &RunReport) -> String {
    let mut s = String::from("split,policy,tasks,acc,bm,edit,comp\n");
    for r in &report.splits {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.1},{},{:.1}",
            r.split,
            r.policy,
            r.tasks,
            pct(r.acc),
            r.bm,
            pct(r.edit),
            r.comp
        );
    }
    s
}

fn render_curves_csv(report: &RunReport) -> String {
    let mut s = String::from("metric,estimator,k,value\n");
    for c in &report.curves {
        let est = match c.estimator {
            Estimator::SubsetExpectation => "subset-expectation",
            Estimator::PrefixBest => "prefix-best",
        };
        for (k, v) in c.k_values.iter().zip(&c.values) {
            let _ = writeln!(s, "{},{est},{k},{v:.4}", c.metric.as_str());
        }
    }
    s
}

fn render_markdown(report: &RunReport) -> String {
    let mut s = String::from("# Decompilation run report\n\n");
    let _ = writeln!(s, "Manifest digest: `{}`\n", report.manifest_digest);
    let _ = writeln!(
        s,
        "Tasks: {}. Duplicate candidate rate: {:.1}%.\n",
        report.task_count,
        100.0 * report.duplicate_rate
    );
    s.push_str("| Split | Policy | Acc | BM | Edit | Comp |\n");
    s.push_str("|---|---|---|---|---|---|\n");
    for r in &report.splits {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.1} | {} | {:.1} |",
            r.split,
            r.policy,
            pct(r.acc),
            r.bm,
            pct(r.edit),
            r.comp
        );
    }
    if !report.curves.is_empty() {
        s.push_str("\n## Best-of-k upper limit\n\n");
        let subset: Vec<&ScalingCurve> = report
            .curves
            .iter()
            .filter(|c| c.estimator == Estimator::SubsetExpectation)
            .collect();
        s.push_str("| k |");
        for c in &subset {
            let _ = write!(s, " {} |", c.metric.as_str());
        }
        s.push('\n');
        s.push_str("|---|");
        for _ in &subset {
            s.push_str("---|");
        }
        s.push('\n');
        let ks = subset.first().map(|c| c.k_values.clone()).unwrap_or_default();
        for (i, k) in ks.iter().enumerate() {
            let _ = write!(s, "| {k} |");
            for c in &subset {
                let _ = write!(s, " {:.4} |", c.values[i]);
            }
            s.push('\n');
        }
    }
    if !report.issues.is_empty() {
        s.push_str("\n## Issues\n\n");
        for i in &report.issues {
            let _ = writeln!(s, "- `{}` ({}): {}", i.task_id, i.phase, i.message.replace('\n', " "));
        }
    }
    s
}

/// Renders a report in one format, returning (file name, contents) pairs.
pub fn render_report(report: &RunReport, format: ReportFormat) -> Vec<(&'static str, String)> {
    match format {
        ReportFormat::Json => vec![("report.json", render_json(report))],
        ReportFormat::Csv => vec![("report.csv", render_csv(report)), ("curves.csv", render_curves_csv(report))],
        ReportFormat::Markdown => vec![("report.md", render_markdown(report))],
    }
}

/// Writes the rendered report under `dir`.
pub fn emit_report(report: &RunReport, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>, AnalysisError> {
    let mut written = Vec::new();
    for (name, body) in render_report(report, format) {
        let path = dir.join(name);
        write_atomic(&path, body.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn outcome(verdict: Option<Verdict>, exact: bool, edit: Option<f64>, compiled: bool) -> PolicyOutcome {
        PolicyOutcome {
            selected: Some("x#0".into()),
            verdict,
            exact_match: exact,
            byte_distance: None,
            source_distance: edit,
            compiled,
        }
    }

    fn result(id: &str, exempt: bool, o: PolicyOutcome) -> TaskResult {
        TaskResult {
            task_id: id.into(),
            split: "real-O2".into(),
            execution_exempt: exempt,
            policies: [(PolicyId::Bytedist, o)].into_iter().collect(),
            candidates: Vec::new(),
        }
    }

    fn ineq() -> Verdict {
        Verdict::Inequivalent {
            first_diverging_test: "t".into(),
        }
    }

    #[test]
    fn two_task_split() {
        let rs = vec![
            result("a", false, outcome(Some(Verdict::Equivalent), true, Some(0.1), true)),
            result("b", false, outcome(Some(ineq()), false, Some(0.3), true)),
        ];
        let r = aggregate_split(&rs, PolicyId::Bytedist).unwrap();
        assert_eq!(r.acc, Some(50.0));
        assert_eq!(r.bm, 50.0);
        assert!((r.edit.unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(r.comp, 100.0);
    }

    #[test]
    fn all_exempt_has_no_acc() {
        let rs = vec![result("a", true, outcome(Some(Verdict::Exempt), true, None, true))];
        let r = aggregate_split(&rs, PolicyId::Bytedist).unwrap();
        assert_eq!(r.acc, None);
        assert_eq!(r.bm, 100.0);
        assert_eq!(r.edit, None);
        assert!(aggregate_split(&[], PolicyId::Bytedist).is_err());
    }

    #[test]
    fn golden_acc_839() {
        // 839 of 1000 executed tasks equivalent.
        let rs: Vec<_> = (0..1000)
            .map(|i| {
                let v = if i < 839 { Verdict::Equivalent } else { ineq() };
                result(&format!("t{i:04}"), false, outcome(Some(v), i < 709, Some(0.25), true))
            })
            .collect();
        let report = build_report("d", &rs, &[PolicyId::Bytedist], 0.0, vec![], false).unwrap();
        let csv = render_report(&report, ReportFormat::Csv)[0].1.clone();
        assert_eq!(csv, "split,policy,tasks,acc,bm,edit,comp\nreal-O2,bytedist,1000,83.9,70.9,25.0,100.0\n");
    }

    #[test]
    fn pass_at_k_examples() {
        assert_eq!(pass_at_k(2, 1, 1).unwrap(), 0.5);
        assert_eq!(pass_at_k(4, 2, 2).unwrap(), 5.0 / 6.0);
        for k in 1..=5 {
            assert_eq!(pass_at_k(5, 0, k).unwrap(), 0.0);
            assert_eq!(pass_at_k(5, 5, k).unwrap(), 1.0);
        }
        assert!(pass_at_k(3, 1, 4).is_err());
        assert!(pass_at_k(3, 4, 1).is_err());
    }

    #[test]
    fn pass_at_k_large_n_uses_product_form() {
        let v = pass_at_k(200, 3, 100).unwrap();
        let expected = 1.0 - (100.0 * 99.0 * 98.0) / (200.0 * 199.0 * 198.0);
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn expected_min_examples() {
        let v = [0.2, 0.4, 0.6];
        assert!((expected_min_at_k(&v, 2).unwrap() - (0.2 + 0.2 + 0.4) / 3.0).abs() < 1e-15);
        assert_eq!(expected_min_at_k(&v, 3).unwrap(), 0.2);
        assert!((expected_min_at_k(&v, 1).unwrap() - 0.4).abs() < 1e-15);
        assert!(expected_min_at_k(&v, 4).is_err());
    }

    #[test]
    fn expected_min_large_n_matches_exact_path_shape() {
        let vals: Vec<f64> = (0..80).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let e = expected_min_at_k(&vals, 40).unwrap();
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(e >= min && e <= expected_min_at_k(&vals, 39).unwrap() + 1e-12);
    }

    #[test]
    fn juliet_cases() {
        let labels: BTreeMap<String, JulietLabel> = (0..148)
            .map(|i| (format!("bad{i}"), JulietLabel::Bad))
            .chain((0..148).map(|i| (format!("good{i}"), JulietLabel::Good)))
            .collect();
        let findings: BTreeMap<String, bool> = (0..26).map(|i| (format!("bad{i}"), true)).collect();
        let r = juliet_confusion(&findings, &labels).unwrap();
        assert_eq!((r.true_positives, r.false_positives, r.false_negatives), (26, 0, 122));
        assert_eq!(format!("{:.1} {:.1} {:.1}", r.precision, r.recall, r.f1), "100.0 17.6 29.9");

        let none = juliet_confusion(&BTreeMap::new(), &labels).unwrap();
        assert!(none.precision_undefined);
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));

        let stray: BTreeMap<String, bool> = [("mystery".to_string(), true)].into_iter().collect();
        assert!(matches!(juliet_confusion(&stray, &labels), Err(AnalysisError::Unlabeled(_))));
    }

    #[test]
    fn sarif_reduction() {
        let sarif = serde_json::json!({"runs": [{"results": [
            {"locations": [{"logicalLocations": [{"name": "CWE121_bad"}]}]},
            {"locations": [{"logicalLocations": [{"fullyQualifiedName": "unknown_fn"}]}]}
        ]}]});
        let fns: BTreeSet<String> = ["CWE121_bad", "CWE121_good"].iter().map(|s| s.to_string()).collect();
        let f = findings_from_sarif(&sarif, &fns);
        assert_eq!(f["CWE121_bad"], true);
        assert_eq!(f["CWE121_good"], false);
        assert_eq!(f.len(), 2);
    }

    #[test]
    fn empty_policy_list_gives_header_only_tables() {
        let rs = vec![result("a", false, outcome(None, false, None, false))];
        let report = build_report("d", &rs, &[], 0.0, vec![], false).unwrap();
        assert_eq!(render_report(&report, ReportFormat::Csv)[0].1, "split,policy,tasks,acc,bm,edit,comp\n");
        let md = &render_report(&report, ReportFormat::Markdown)[0].1;
        assert!(md.contains("| Split | Policy | Acc | BM | Edit | Comp |\n|---|---|---|---|---|---|\n"));
        assert!("yaml".parse::<ReportFormat>().is_err());
    }

    proptest! {
        #[test]
        fn split_is_permutation_invariant(
            rows in proptest::collection::vec((any::<bool>(), any::<bool>(), 0.0f64..1.0, any::<bool>()), 1..20),
            rot in 0usize..20,
        ) {
            let rs: Vec<_> = rows.iter().enumerate().map(|(i, &(eq, bm, d, comp))| {
                let v = if eq { Verdict::Equivalent } else { ineq() };
                result(&format!("t{i}"), false, outcome(Some(v), bm, Some(d), comp))
            }).collect();
            let mut rotated = rs.clone();
            rotated.rotate_left(rot % rs.len());
            rotated.reverse();
            prop_assert_eq!(aggregate_split(&rs, PolicyId::Bytedist).unwrap(), aggregate_split(&rotated, PolicyId::Bytedist).unwrap());
        }
    }
}
