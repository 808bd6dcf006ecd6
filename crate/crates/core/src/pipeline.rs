//! Phase orchestration: generate → compile → execute → rerank → report.
//!
//! Every phase writes one checkpoint per task into the run store and skips
//! tasks that already have one, so an interrupted run resumes where it
//! stopped. Test executions are additionally cached by content key.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{info, warn};

use crate::analysis::{
    build_report, emit_report, AnalysisError, CandidateRow, PolicyOutcome, ReportFormat, RunReport, TaskIssue,
    TaskResult,
};
use crate::corpus::{safe_file_stem, CacheKey, DecompilationTask, PersistenceError, RunManifest, RunStore, TaskSet};
use crate::generation::{Candidate, GenerationError, Generator, GeneratorConfig, GeneratorMode, RemoteGenerator, ReplayGenerator};
use crate::metrics::{exact_match, source_edit_distance, wildcard_levenshtein};
use crate::rerank::{
    bytedist_rank, logprob_rank, neural_rank, oracle_rank, two_stage_rank, CandidateEvidence, PolicyId, RankedSelection,
    ReferenceView, RerankError, Scorer,
};
use crate::sandbox::{self, Comparison, ExecutionRecord, Verdict};
use crate::toolchain::{self, ByteListing, CompilationArtifact, CompilerProfile, ToolchainError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Persistence(#[from] PersistenceError),
    #[error(transparent)]
    Toolchain(#[from] ToolchainError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("task `{task}` has no {phase} checkpoint; run that phase first")]
    MissingPhase { task: String, phase: &'static str },
    #[error("task `{task}`, phase {phase}: {source}")]
    Task {
        task: String,
        phase: &'static str,
        #[source]
        source: Box<PipelineError>,
    },
}

impl PipelineError {
    /// Problems the user must fix in flags, config or environment.
    pub fn is_configuration(&self) -> bool {
        match self {
            PipelineError::Config(_) => true,
            PipelineError::Toolchain(e) => e.is_configuration(),
            PipelineError::Task { source, .. } => source.is_configuration(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Generate,
    Compile,
    Execute,
    Rerank,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Generate, Phase::Compile, Phase::Execute, Phase::Rerank];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Generate => "generate",
            Phase::Compile => "compile",
            Phase::Execute => "execute",
            Phase::Rerank => "rerank",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerateCheckpoint {
    pub candidates: Vec<Candidate>,
    /// Set when sampling failed; the task is retried on resume.
    pub error: Option<String>,
}

/// Outcome of compiling one source for one task.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildRecord {
    pub compiled: bool,
    pub bytes: Option<ByteListing>,
    pub canonical: Option<String>,
    /// Why the build or extraction failed.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompileCheckpoint {
    pub reference: Option<BuildRecord>,
    /// Task-supplied bytes when present, otherwise extracted from the reference build.
    pub reference_bytes: Option<ByteListing>,
    pub candidates: BTreeMap<String, BuildRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecuteCheckpoint {
    /// The task is not scored for correctness (exempt label, nondeterministic
    /// or unavailable reference).
    pub excluded: bool,
    pub reference_issue: Option<String>,
    pub verdicts: BTreeMap<String, Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySelection {
    pub selection: Option<RankedSelection>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RerankCheckpoint {
    pub policies: BTreeMap<PolicyId, PolicySelection>,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub jobs: usize,
    pub alpha: f64,
    pub prefix_curves: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            jobs: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            alpha: crate::rerank::DEFAULT_ALPHA,
            prefix_curves: false,
        }
    }
}

/// Builds the configured generator.
pub fn build_generator(cfg: &GeneratorConfig) -> Result<Box<dyn Generator>, PipelineError> {
    cfg.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    Ok(match cfg.mode {
        GeneratorMode::Replay => {
            Box::new(ReplayGenerator::open(Path::new(&cfg.endpoint)).map_err(|e| PipelineError::Config(e.to_string()))?)
        }
        GeneratorMode::Remote => Box::new(RemoteGenerator::new(cfg).map_err(|e| PipelineError::Config(e.to_string()))?),
    })
}

/// A deterministic run id derived from the run's settings.
pub fn derived_run_id(manifest: &RunManifest) -> String {
    format!("run-{}", &manifest.content_digest()[..12])
}

/// Parses the manifest's policy list.
pub fn manifest_policies(manifest: &RunManifest) -> Result<Vec<PolicyId>, PipelineError> {
    manifest
        .policy_ids
        .iter()
        .map(|p| p.parse().map_err(PipelineError::Config))
        .collect()
}

pub struct Pipeline {
    store: RunStore,
    manifest: RunManifest,
    tasks: TaskSet,
    generator: Option<Box<dyn Generator>>,
    scorer: Option<Box<dyn Scorer>>,
    options: RunOptions,
    policies: Vec<PolicyId>,
}

fn task_seed(seed: u64, task_id: &str) -> u64 {
    let h = Sha256::digest(task_id.as_bytes());
    seed ^ u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

fn unit_source(task: &DecompilationTask, source: &str) -> String {
    format!("{}\n{}", task.dependencies, source)
}

fn test_key(task: &DecompilationTask, index: usize) -> String {
    let test = &task.tests[index];
    format!(
        "{}\n{}\n{}",
        task.symbol,
        test.test_id,
        serde_json::to_string(&test.driver_inputs).expect("inputs serialize")
    )
}

fn first_line(text: &str) -> String {
    text.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim().to_string()
}

impl Pipeline {
    /// Opens (or creates) the run described by `manifest`. An existing run
    /// with the same id must have been created with the same settings.
    pub fn open(
        store: RunStore,
        manifest: RunManifest,
        tasks: TaskSet,
        generator: Option<Box<dyn Generator>>,
        scorer: Option<Box<dyn Scorer>>,
        options: RunOptions,
    ) -> Result<Self, PipelineError> {
        if manifest.task_set_digest != tasks.digest {
            return Err(PipelineError::Config(format!(
                "task set digest {} differs from the manifest's {}",
                tasks.digest, manifest.task_set_digest
            )));
        }
        for t in &tasks.tasks {
            if manifest.profile(&t.compiler_profile_id).is_none() {
                return Err(PipelineError::Config(format!(
                    "task `{}` uses unknown compiler profile `{}`",
                    t.task_id, t.compiler_profile_id
                )));
            }
        }
        let policies = manifest_policies(&manifest)?;
        match store.read_manifest(&manifest.run_id)? {
            Some(existing) if existing.content_digest() != manifest.content_digest() => {
                return Err(PipelineError::Config(format!(
                    "run `{}` already exists with different settings",
                    manifest.run_id
                )))
            }
            Some(_) => info!(run = %manifest.run_id, "resuming run"),
            None => store.write_manifest(&manifest)?,
        }
        Ok(Self {
            store,
            manifest,
            tasks,
            generator,
            scorer,
            options,
            policies,
        })
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn store(&self) -> &RunStore {
        &self.store
    }

    fn run_id(&self) -> &str {
        &self.manifest.run_id
    }

    fn profile(&self, task: &DecompilationTask) -> &CompilerProfile {
        self.manifest
            .profile(&task.compiler_profile_id)
            .expect("profiles checked in open")
    }

    fn scratch(&self, task: &DecompilationTask, unit: &str) -> PathBuf {
        self.store
            .scratch_dir(self.run_id())
            .join(safe_file_stem(&task.task_id))
            .join(safe_file_stem(unit))
    }

    fn checkpoint<T: serde::de::DeserializeOwned>(&self, phase: Phase, task: &DecompilationTask) -> Result<Option<T>, PipelineError> {
        Ok(self.store.get_checkpoint(self.run_id(), phase.as_str(), &task.task_id)?)
    }

    fn require<T: serde::de::DeserializeOwned>(&self, phase: Phase, task: &DecompilationTask) -> Result<T, PipelineError> {
        self.checkpoint(phase, task)?.ok_or_else(|| PipelineError::MissingPhase {
            task: task.task_id.clone(),
            phase: phase.as_str(),
        })
    }

    fn for_each_task(&self, phase: Phase, f: impl Fn(&DecompilationTask) -> Result<(), PipelineError> + Sync) -> Result<(), PipelineError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.options.jobs.max(1))
            .build()
            .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
        info!(phase = phase.as_str(), tasks = self.tasks.len(), "phase start");
        pool.install(|| {
            self.tasks.tasks.par_iter().try_for_each(|t| {
                f(t).map_err(|e| match e {
                    e @ (PipelineError::MissingPhase { .. } | PipelineError::Task { .. }) => e,
                    e => PipelineError::Task {
                        task: t.task_id.clone(),
                        phase: phase.as_str(),
                        source: Box::new(e),
                    },
                })
            })
        })
    }

    /// Runs every phase up to and including `last`, skipping checkpointed tasks.
    pub fn run_through(&self, last: Phase) -> Result<(), PipelineError> {
        for phase in Phase::ALL.into_iter().filter(|p| *p <= last) {
            match phase {
                Phase::Generate => self.for_each_task(phase, |t| self.generate_task(t))?,
                Phase::Compile => self.for_each_task(phase, |t| self.compile_task(t))?,
                Phase::Execute => self.for_each_task(phase, |t| self.execute_task(t))?,
                Phase::Rerank => self.for_each_task(phase, |t| self.rerank_task(t))?,
            }
        }
        Ok(())
    }

    fn generate_task(&self, task: &DecompilationTask) -> Result<(), PipelineError> {
        if let Some(done) = self.checkpoint::<GenerateCheckpoint>(Phase::Generate, task)? {
            if done.error.is_none() {
                return Ok(());
            }
        }
        let generator = self
            .generator
            .as_deref()
            .ok_or_else(|| PipelineError::Config("no generator configured".into()))?;
        let cfg = &self.manifest.generator_config;
        let checkpoint = match generator.sample(task, cfg, task_seed(self.manifest.seed, &task.task_id)) {
            Ok(candidates) => GenerateCheckpoint { candidates, error: None },
            Err(e @ (GenerationError::Config(_) | GenerationError::UnknownTemplate(_))) => {
                return Err(PipelineError::Config(e.to_string()))
            }
            Err(e) => {
                warn!(task = %task.task_id, error = %e, "generation failed");
                GenerateCheckpoint {
                    candidates: Vec::new(),
                    error: Some(e.to_string()),
                }
            }
        };
        self.store.put_checkpoint(self.run_id(), Phase::Generate.as_str(), &task.task_id, &checkpoint)?;
        Ok(())
    }

    /// Compiles `source` into the unit's scratch directory.
    fn build(&self, task: &DecompilationTask, unit: &str, source: &str) -> Result<(CompilationArtifact, BuildRecord), PipelineError> {
        let profile = self.profile(task);
        let scratch = self.scratch(task, unit);
        let artifact = match toolchain::compile_candidate(source, &task.dependencies, profile, &scratch) {
            Ok(a) => a,
            Err(e) if e.is_configuration() => return Err(e.into()),
            Err(e) => {
                let record = BuildRecord {
                    error: Some(e.to_string()),
                    ..BuildRecord::default()
                };
                let artifact = CompilationArtifact {
                    object_path: scratch.join("candidate.o"),
                    executable_path: None,
                    compiler_log: e.to_string(),
                    profile_id: profile.profile_id.clone(),
                    success: false,
                };
                return Ok((artifact, record));
            }
        };
        if !artifact.success {
            // Scratch paths differ between runs; keep the message path-free.
            let log = artifact.compiler_log.replace(&format!("{}/", scratch.display()), "");
            let record = BuildRecord {
                error: Some(format!("compile failed: {}", first_line(&log))),
                ..BuildRecord::default()
            };
            return Ok((artifact, record));
        }
        let mut record = BuildRecord {
            compiled: true,
            ..BuildRecord::default()
        };
        match toolchain::extract_function_bytes(&artifact, &task.symbol) {
            Ok(b) => record.bytes = Some(b),
            Err(e) => record.error = Some(e.to_string()),
        }
        match toolchain::disassemble(&artifact, &task.symbol, task.stripped) {
            Ok(d) => record.canonical = Some(d.canonical),
            Err(e) if e.is_configuration() => return Err(e.into()),
            Err(e) => {
                record.error.get_or_insert(e.to_string());
            }
        }
        Ok((artifact, record))
    }

    fn compile_task(&self, task: &DecompilationTask) -> Result<(), PipelineError> {
        if self.checkpoint::<CompileCheckpoint>(Phase::Compile, task)?.is_some() {
            return Ok(());
        }
        let generated: GenerateCheckpoint = self.require(Phase::Generate, task)?;
        let mut checkpoint = CompileCheckpoint::default();
        if let Some(src) = &task.reference_source {
            let (_, record) = self.build(task, "reference", src)?;
            checkpoint.reference = Some(record);
        }
        checkpoint.reference_bytes = task
            .reference_bytes
            .clone()
            .or_else(|| checkpoint.reference.as_ref().and_then(|r| r.bytes.clone()));
        for c in &generated.candidates {
            let (_, record) = self.build(task, &c.candidate_id, &c.source)?;
            checkpoint.candidates.insert(c.candidate_id.clone(), record);
        }
        self.store.put_checkpoint(self.run_id(), Phase::Compile.as_str(), &task.task_id, &checkpoint)?;
        Ok(())
    }

    /// Observations of all tests for one pass, from the cache or by running
    /// the linked executable (compiled and linked on first need).
    fn observe(&self, task: &DecompilationTask, unit: &str, source: &str, pass: u8) -> Result<Result<ExecutionRecord, String>, PipelineError> {
        let profile = self.profile(task);
        let unit_src = unit_source(task, source);
        let mut record = ExecutionRecord::default();
        let mut exe: Option<PathBuf> = None;
        for (i, test) in task.tests.iter().enumerate() {
            let key = CacheKey::new(&unit_src, profile, &test_key(task, i), pass);
            if let Some(cached) = self.store.cache_get(self.run_id(), &key)? {
                if let Some(obs) = cached.tests.get(&test.test_id) {
                    record.tests.insert(test.test_id.clone(), obs.clone());
                    continue;
                }
            }
            if exe.is_none() {
                let scratch = self.scratch(task, unit);
                let artifact = match toolchain::compile_candidate(source, &task.dependencies, profile, &scratch) {
                    Ok(a) if a.success => a,
                    Ok(a) => return Ok(Err(format!("compile failed: {}", first_line(&a.compiler_log)))),
                    Err(e) if e.is_configuration() => return Err(e.into()),
                    Err(e) => return Ok(Err(e.to_string())),
                };
                match toolchain::link_with_harness(&artifact, task, profile) {
                    Ok(linked) => match linked.executable_path {
                        Some(p) => exe = Some(p),
                        None => return Ok(Err(format!("link failed: {}", first_line(&linked.compiler_log)))),
                    },
                    Err(e) if e.is_configuration() => return Err(e.into()),
                    Err(e) => return Ok(Err(format!("link failed: {e}"))),
                }
            }
            let path = exe.as_ref().expect("linked above");
            let obs = match sandbox::run_test(path, i, test, &self.manifest.limits) {
                Ok(o) => o,
                Err(e) => return Ok(Err(e.to_string())),
            };
            let mut single = ExecutionRecord::default();
            single.tests.insert(test.test_id.clone(), obs.clone());
            self.store.cache_put(self.run_id(), &key, &single)?;
            record.tests.insert(test.test_id.clone(), obs);
        }
        Ok(Ok(record))
    }

    /// Runs twice and keeps the record only if both runs agree.
    fn observe_deterministic(&self, task: &DecompilationTask, unit: &str, source: &str) -> Result<Result<ExecutionRecord, String>, PipelineError> {
        let first = match self.observe(task, unit, source, 0)? {
            Ok(r) => r,
            Err(e) => return Ok(Err(e)),
        };
        let second = match self.observe(task, unit, source, 1)? {
            Ok(r) => r,
            Err(e) => return Ok(Err(e)),
        };
        if sandbox::determinism_filter(&first, &second) {
            Ok(Ok(first))
        } else {
            Ok(Err("nondeterministic: two runs disagree".into()))
        }
    }

    fn reference_record(&self, task: &DecompilationTask, compiled: &CompileCheckpoint) -> Result<Result<ExecutionRecord, String>, PipelineError> {
        if task.tests.iter().all(|t| t.expected.is_some()) {
            let tests = task
                .tests
                .iter()
                .map(|t| (t.test_id.clone(), t.expected.clone().expect("checked")))
                .collect();
            return Ok(Ok(ExecutionRecord { tests }));
        }
        let Some(src) = &task.reference_source else {
            return Ok(Err("no reference source and not every test has an expected observation".into()));
        };
        if !compiled.reference.as_ref().is_some_and(|r| r.compiled) {
            return Ok(Err("reference did not compile".into()));
        }
        let mut record = match self.observe_deterministic(task, "reference", src)? {
            Ok(r) => r,
            Err(e) => return Ok(Err(format!("reference excluded: {e}"))),
        };
        for t in &task.tests {
            if let Some(exp) = &t.expected {
                record.tests.insert(t.test_id.clone(), exp.clone());
            }
        }
        if let Some((id, _)) = record.tests.iter().find(|(_, o)| o.timed_out || o.signaled) {
            return Ok(Err(format!("reference excluded: fails on test `{id}`")));
        }
        Ok(Ok(record))
    }

    fn execute_task(&self, task: &DecompilationTask) -> Result<(), PipelineError> {
        if self.checkpoint::<ExecuteCheckpoint>(Phase::Execute, task)?.is_some() {
            return Ok(());
        }
        let generated: GenerateCheckpoint = self.require(Phase::Generate, task)?;
        let compiled: CompileCheckpoint = self.require(Phase::Compile, task)?;
        let mut checkpoint = ExecuteCheckpoint::default();
        let reference = if task.execution_exempt() {
            Err(String::new())
        } else {
            self.reference_record(task, &compiled)?
        };
        match reference {
            Err(issue) => {
                checkpoint.excluded = true;
                checkpoint.reference_issue = (!issue.is_empty()).then_some(issue);
                for c in &generated.candidates {
                    checkpoint.verdicts.insert(c.candidate_id.clone(), Verdict::Exempt);
                }
            }
            Ok(reference) => {
                let comparison = Comparison::for_task(task);
                for c in &generated.candidates {
                    let built = compiled.candidates.get(&c.candidate_id).is_some_and(|b| b.compiled);
                    let verdict = if !built {
                        Verdict::CandidateFailed {
                            reason: "did not compile".into(),
                        }
                    } else {
                        match self.observe_deterministic(task, &c.candidate_id, &c.source)? {
                            Err(reason) => Verdict::CandidateFailed { reason },
                            Ok(rec) => sandbox::judge_equivalence_with(&reference, &rec, &comparison)
                                .unwrap_or_else(|e| Verdict::CandidateFailed { reason: e.to_string() }),
                        }
                    };
                    checkpoint.verdicts.insert(c.candidate_id.clone(), verdict);
                }
            }
        }
        self.store.put_checkpoint(self.run_id(), Phase::Execute.as_str(), &task.task_id, &checkpoint)?;
        Ok(())
    }

    fn evidence(&self, task: &DecompilationTask) -> Result<(Vec<CandidateEvidence>, CompileCheckpoint), PipelineError> {
        let generated: GenerateCheckpoint = self.require(Phase::Generate, task)?;
        let compiled: CompileCheckpoint = self.require(Phase::Compile, task)?;
        let executed: Option<ExecuteCheckpoint> = self.checkpoint(Phase::Execute, task)?;
        let evidence = generated
            .candidates
            .iter()
            .map(|c| {
                let mut e = CandidateEvidence::from_candidate(c);
                if let Some(b) = compiled.candidates.get(&c.candidate_id) {
                    e.compiled = b.compiled;
                    e.bytes = b.bytes.clone();
                    e.canonical = b.canonical.clone();
                }
                e.verdict = executed.as_ref().and_then(|x| x.verdicts.get(&c.candidate_id).cloned());
                e
            })
            .collect();
        Ok((evidence, compiled))
    }

    fn rerank_task(&self, task: &DecompilationTask) -> Result<(), PipelineError> {
        if self.checkpoint::<RerankCheckpoint>(Phase::Rerank, task)?.is_some() {
            return Ok(());
        }
        let (evidence, compiled) = self.evidence(task)?;
        let view = ReferenceView {
            task_id: &task.task_id,
            bytes: compiled.reference_bytes.as_ref(),
            canonical: compiled.reference.as_ref().and_then(|r| r.canonical.as_deref()),
            stripped: task.stripped,
        };
        let no_scorer = |p: PolicyId| RerankError::PolicyUnavailable {
            policy: p,
            reason: "no scorer configured".into(),
        };
        let no_reference = |p: PolicyId| RerankError::PolicyUnavailable {
            policy: p,
            reason: "reference bytes unavailable".into(),
        };
        let mut checkpoint = RerankCheckpoint::default();
        for &policy in &self.policies {
            let result = match policy {
                PolicyId::Logprob => logprob_rank(&evidence, self.options.alpha),
                PolicyId::Bytedist => match view.bytes {
                    Some(r) => bytedist_rank(&evidence, r),
                    None => Err(no_reference(policy)),
                },
                PolicyId::Neural => match &self.scorer {
                    Some(s) => neural_rank(&evidence, &view, s.as_ref()),
                    None => Err(no_scorer(policy)),
                },
                PolicyId::TwoStage => match &self.scorer {
                    Some(s) => two_stage_rank(&evidence, &view, s.as_ref()),
                    None => Err(no_scorer(policy)),
                },
                PolicyId::Oracle => oracle_rank(&evidence, view.bytes),
            };
            let entry = match result {
                Ok(selection) => PolicySelection {
                    selection: Some(selection),
                    error: None,
                },
                Err(e) => {
                    warn!(task = %task.task_id, %policy, error = %e, "policy unavailable");
                    PolicySelection {
                        selection: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            checkpoint.policies.insert(policy, entry);
        }
        self.store.put_checkpoint(self.run_id(), Phase::Rerank.as_str(), &task.task_id, &checkpoint)?;
        Ok(())
    }

    fn task_result(&self, task: &DecompilationTask, issues: &mut Vec<TaskIssue>) -> Result<(TaskResult, Vec<Candidate>), PipelineError> {
        let generated: GenerateCheckpoint = self.require(Phase::Generate, task)?;
        let compiled: CompileCheckpoint = self.require(Phase::Compile, task)?;
        let executed: ExecuteCheckpoint = self.require(Phase::Execute, task)?;
        let reranked: RerankCheckpoint = self.require(Phase::Rerank, task)?;
        let mut issue = |phase: &str, message: String| {
            issues.push(TaskIssue {
                task_id: task.task_id.clone(),
                phase: phase.into(),
                message,
            })
        };
        if let Some(e) = &generated.error {
            issue(Phase::Generate.as_str(), e.clone());
        }
        if let Some(e) = compiled.reference.as_ref().and_then(|r| r.error.as_ref()) {
            issue(Phase::Compile.as_str(), format!("reference: {e}"));
        }
        if let Some(e) = &executed.reference_issue {
            issue(Phase::Execute.as_str(), e.clone());
        }
        for (policy, sel) in &reranked.policies {
            if let Some(e) = &sel.error {
                issue(Phase::Rerank.as_str(), format!("{policy}: {e}"));
            } else if sel.selection.as_ref().is_some_and(|s| s.degraded) {
                issue(Phase::Rerank.as_str(), format!("{policy}: scorer failed, ordering degraded"));
            }
        }

        let rows: BTreeMap<&str, CandidateRow> = generated
            .candidates
            .iter()
            .map(|c| {
                let build = compiled.candidates.get(&c.candidate_id);
                let bytes = build.and_then(|b| b.bytes.as_ref());
                let compiled_ok = build.is_some_and(|b| b.compiled);
                let (exact, dist) = match (compiled_ok, bytes, compiled.reference_bytes.as_ref()) {
                    (true, Some(b), Some(r)) => (exact_match(b, r), wildcard_levenshtein(b, r).ok().map(|d| d.normalized)),
                    _ => (false, None),
                };
                let verdict = executed.verdicts.get(&c.candidate_id);
                let row = CandidateRow {
                    candidate_id: c.candidate_id.clone(),
                    sample_index: c.sample_index,
                    compiled: compiled_ok,
                    equivalent: match verdict {
                        None | Some(Verdict::Exempt) => None,
                        Some(v) => Some(v.is_equivalent()),
                    },
                    exact_match: exact,
                    byte_distance: dist,
                    source_distance: task
                        .reference_source
                        .as_deref()
                        .map(|r| source_edit_distance(&c.source, r).normalized),
                };
                (c.candidate_id.as_str(), row)
            })
            .collect();

        let policies = reranked
            .policies
            .iter()
            .map(|(&policy, sel)| {
                let selected = sel.selection.as_ref().and_then(|s| s.selected.clone());
                let row = selected.as_deref().and_then(|id| rows.get(id));
                let outcome = PolicyOutcome {
                    verdict: selected.as_ref().and_then(|id| executed.verdicts.get(id).cloned()),
                    exact_match: row.is_some_and(|r| r.exact_match),
                    byte_distance: row.and_then(|r| r.byte_distance),
                    source_distance: row.and_then(|r| r.source_distance),
                    compiled: row.is_some_and(|r| r.compiled),
                    selected,
                };
                (policy, outcome)
            })
            .collect();

        let result = TaskResult {
            task_id: task.task_id.clone(),
            split: task.split().to_string(),
            execution_exempt: executed.excluded,
            policies,
            candidates: rows.into_values().collect(),
        };
        Ok((result, generated.candidates))
    }

    /// Per-task results assembled from checkpoints, plus recorded issues and
    /// the pooled duplicate-candidate rate.
    pub fn results(&self) -> Result<(Vec<TaskResult>, Vec<TaskIssue>, f64), PipelineError> {
        let mut issues = Vec::new();
        let mut results = Vec::new();
        let (mut dups, mut total) = (0usize, 0usize);
        for task in &self.tasks.tasks {
            let (r, cands) = self.task_result(task, &mut issues)?;
            let unique: BTreeSet<&str> = cands.iter().map(|c| c.source.as_str()).collect();
            dups += cands.len() - unique.len();
            total += cands.len();
            results.push(r);
        }
        let rate = if total == 0 { 0.0 } else { dups as f64 / total as f64 };
        Ok((results, issues, rate))
    }

    pub fn build_report(&self) -> Result<RunReport, PipelineError> {
        let (results, issues, rate) = self.results()?;
        Ok(build_report(
            &self.manifest.content_digest(),
            &results,
            &self.policies,
            rate,
            issues,
            self.options.prefix_curves,
        )?)
    }

    /// Writes reports in each format to the run's `reports/` directory.
    pub fn report(&self, formats: &[ReportFormat]) -> Result<Vec<PathBuf>, PipelineError> {
        let report = self.build_report()?;
        let dir = self.store.reports_dir(self.run_id());
        fs::create_dir_all(&dir).map_err(|source| {
            PipelineError::Persistence(PersistenceError::Io {
                context: format!("creating {}", dir.display()),
                source,
            })
        })?;
        let mut written = Vec::new();
        for &f in formats {
            written.extend(emit_report(&report, f, &dir)?);
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phases_are_ordered() {
        let names: Vec<_> = Phase::ALL.iter().map(|p| p.as_str()).collect();
        assert_eq!(names, ["generate", "compile", "execute", "rerank"]);
        assert!(Phase::Generate < Phase::Rerank);
    }

    #[test]
    fn task_seeds_differ_per_task() {
        assert_ne!(task_seed(7, "a"), task_seed(7, "b"));
        assert_eq!(task_seed(7, "a"), task_seed(7, "a"));
    }

    #[test]
    fn first_line_skips_blanks() {
        assert_eq!(first_line("\n\n  x.c:1: error: boom\nmore"), "x.c:1: error: boom");
    }
}
