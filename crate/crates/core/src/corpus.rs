//! Task ingestion and the on-disk run store.
//!
//! Tasks are line-delimited JSON, one task per line. A run lives under
//! `runs/<run_id>/` with its `manifest.json`, an execution cache in
//! `cache/<hash>.json`, per-phase per-task checkpoints in
//! `phases/<phase>/<task>.json` and emitted reports in `reports/`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::generation::GeneratorConfig;
use crate::rerank::ScorerConfig;
use crate::sandbox::{ExecutionRecord, SandboxLimits, TestObservation};
use crate::toolchain::{ByteListing, CompilerProfile, DriverInputs};

/// Label key marking tasks that are never executed.
pub const EXECUTION_LABEL: &str = "execution";
pub const EXEMPT: &str = "exempt";
/// Label key naming the evaluation split a task belongs to.
pub const SPLIT_LABEL: &str = "split";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },
    #[error("duplicate task_id `{0}`")]
    DuplicateTask(String),
    #[error("task `{task}`: {message}")]
    Invalid { task: String, message: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum PersistenceError {
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: corrupt record: {message}")]
    Corrupt { path: String, message: String },
}

fn persist_io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> PersistenceError {
    let context = context.into();
    move |source| PersistenceError::Io { context, source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub test_id: String,
    pub driver_inputs: DriverInputs,
    /// When absent, expected behavior comes from running the reference build.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<TestObservation>,
}

/// One target function to decompile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompilationTask {
    pub task_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_source: Option<String>,
    pub decompiler_output: String,
    #[serde(default)]
    pub dependencies: String,
    pub symbol: String,
    #[serde(default)]
    pub stripped: bool,
    pub compiler_profile_id: String,
    #[serde(default)]
    pub tests: Vec<TestCase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_bytes: Option<ByteListing>,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    /// Absolute tolerance for floating-point captures; bit-exact when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub float_tolerance: Option<f64>,
}

impl DecompilationTask {
    pub fn execution_exempt(&self) -> bool {
        self.labels.get(EXECUTION_LABEL).is_some_and(|v| v == EXEMPT)
    }

    pub fn split(&self) -> &str {
        self.labels.get(SPLIT_LABEL).map(String::as_str).unwrap_or("all")
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |message: String| CorpusError::Invalid {
            task: self.task_id.clone(),
            message,
        };
        if self.task_id.is_empty() {
            return Err(invalid("empty task_id".into()));
        }
        if self.decompiler_output.trim().is_empty() {
            return Err(invalid("empty decompiler_output".into()));
        }
        if self.symbol.is_empty() {
            return Err(invalid("empty symbol".into()));
        }
        if self.tests.is_empty() && !self.execution_exempt() {
            return Err(invalid(format!(
                "no tests and not labelled `{EXECUTION_LABEL}: {EXEMPT}`"
            )));
        }
        let mut seen = BTreeSet::new();
        for t in &self.tests {
            if !seen.insert(t.test_id.as_str()) {
                return Err(invalid(format!("duplicate test_id `{}`", t.test_id)));
            }
        }
        if let Some(b) = &self.reference_bytes {
            if b.bytes.len() != b.wildcard_mask.len() {
                return Err(invalid("reference_bytes mask length differs from byte length".into()));
            }
        }
        Ok(())
    }
}

/// Validated tasks sorted by id, plus a digest of the bytes they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSet {
    pub tasks: Vec<DecompilationTask>,
    pub digest: String,
}

impl TaskSet {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, task_id: &str) -> Option<&DecompilationTask> {
        self.tasks
            .binary_search_by(|t| t.task_id.as_str().cmp(task_id))
            .ok()
            .map(|i| &self.tasks[i])
    }
}

fn task_files(path: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    let io = |source| CorpusError::Io {
        context: format!("reading {}", path.display()),
        source,
    };
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(path).map_err(io)? {
        let p = entry.map_err(io)?.path();
        if p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("jsonl" | "json")) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every task from a task file or a directory of `*.jsonl` / `*.json` files.
pub fn load_tasks(path: &Path) -> Result<TaskSet, CorpusError> {
    let mut hasher = Sha256::new();
    let mut tasks = Vec::new();
    for file in task_files(path)? {
        let bytes = fs::read(&file).map_err(|source| CorpusError::Io {
            context: format!("reading {}", file.display()),
            source,
        })?;
        let name = file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
        let text = String::from_utf8(bytes).map_err(|e| CorpusError::Parse {
            file: file.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let task: DecompilationTask = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
                file: file.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            task.validate()?;
            tasks.push(task);
        }
    }
    tasks.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    if let Some(w) = tasks.windows(2).find(|w| w[0].task_id == w[1].task_id) {
        return Err(CorpusError::DuplicateTask(w[0].task_id.clone()));
    }
    Ok(TaskSet {
        tasks,
        digest: hex::encode(hasher.finalize()),
    })
}

/// Hex SHA-256 over length-prefixed parts.
pub fn digest_parts<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Content key of one cached test execution.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey(pub String);

impl CacheKey {
    /// Hash of candidate source, compiler profile and test id. `pass`
    /// distinguishes the two runs of the determinism check.
    pub fn new(source: &str, profile: &CompilerProfile, test_id: &str, pass: u8) -> Self {
        let profile = serde_json::to_vec(profile).expect("profiles serialize");
        CacheKey(digest_parts([
            source.as_bytes(),
            profile.as_slice(),
            test_id.as_bytes(),
            &[pass][..],
        ]))
    }
}

/// Everything needed to replay a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at: DateTime<Utc>,
    pub task_set_digest: String,
    pub tasks_path: PathBuf,
    pub generator_config: GeneratorConfig,
    pub compiler_profiles: Vec<CompilerProfile>,
    pub policy_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<ScorerConfig>,
    pub limits: SandboxLimits,
    pub seed: u64,
}

impl RunManifest {
    /// Digest of the settings that determine results; excludes the run id
    /// and creation time so equivalent runs share it.
    pub fn content_digest(&self) -> String {
        let body = serde_json::json!({
            "task_set_digest": self.task_set_digest,
            "generator_config": self.generator_config,
            "compiler_profiles": self.compiler_profiles,
            "policy_ids": self.policy_ids,
            "scorer": self.scorer,
            "limits": self.limits,
            "seed": self.seed,
        });
        digest_parts([body.to_string().as_bytes()])
    }

    pub fn profile(&self, profile_id: &str) -> Option<&CompilerProfile> {
        self.compiler_profiles.iter().find(|p| p.profile_id == profile_id)
    }
}

/// File name for an arbitrary id: kept when filesystem-safe, hashed otherwise.
pub fn safe_file_stem(id: &str) -> String {
    let safe = !id.is_empty()
        && !id.starts_with('.')
        && id.len() <= 120
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'));
    if safe {
        id.to_string()
    } else {
        format!("h-{}", &digest_parts([id.as_bytes()])[..32])
    }
}

/// The `runs/` directory tree.
#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(safe_file_stem(run_id))
    }

    pub fn scratch_dir(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("scratch")
    }

    pub fn reports_dir(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("reports")
    }

    fn manifest_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("manifest.json")
    }

    fn cache_path(&self, run_id: &str, key: &CacheKey) -> PathBuf {
        self.run_dir(run_id).join("cache").join(format!("{}.json", key.0))
    }

    fn phase_path(&self, run_id: &str, phase: &str, task_id: &str) -> PathBuf {
        self.run_dir(run_id)
            .join("phases")
            .join(phase)
            .join(format!("{}.json", safe_file_stem(task_id)))
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<(), PersistenceError> {
        write_json(&self.manifest_path(&manifest.run_id), manifest)
    }

    pub fn read_manifest(&self, run_id: &str) -> Result<Option<RunManifest>, PersistenceError> {
        read_json(&self.manifest_path(run_id))
    }

    pub fn cache_put(&self, run_id: &str, key: &CacheKey, record: &ExecutionRecord) -> Result<(), PersistenceError> {
        write_json(&self.cache_path(run_id, key), record)
    }

    pub fn cache_get(&self, run_id: &str, key: &CacheKey) -> Result<Option<ExecutionRecord>, PersistenceError> {
        read_json(&self.cache_path(run_id, key))
    }

    pub fn put_checkpoint<T: Serialize>(&self, run_id: &str, phase: &str, task_id: &str, value: &T) -> Result<(), PersistenceError> {
        write_json(&self.phase_path(run_id, phase, task_id), value)
    }

    pub fn get_checkpoint<T: DeserializeOwned>(&self, run_id: &str, phase: &str, task_id: &str) -> Result<Option<T>, PersistenceError> {
        read_json(&self.phase_path(run_id, phase, task_id))
    }

    pub fn clear_checkpoint(&self, run_id: &str, phase: &str, task_id: &str) -> Result<(), PersistenceError> {
        let path = self.phase_path(run_id, phase, task_id);
        match fs::remove_file(&path) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(persist_io(format!("removing {}", path.display()))(e)),
            _ => Ok(()),
        }
    }
}

/// Writes through a temporary file and renames it into place, so readers
/// never observe a partial record and concurrent writers resolve to the
/// last rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PersistenceError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(persist_io(format!("creating {}", dir.display())))?;
    let tmp = dir.join(format!(
        ".{}.{}.{:?}.tmp",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default(),
        std::process::id(),
        std::thread::current().id()
    ));
    let mut f = fs::File::create(&tmp).map_err(persist_io(format!("creating {}", tmp.display())))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(persist_io(format!("writing {}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(persist_io(format!("renaming into {}", path.display())))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), PersistenceError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| PersistenceError::Corrupt {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Option<T>, PersistenceError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(persist_io(format!("reading {}", path.display()))(e)),
    };
    serde_json::from_slice(&bytes).map(Some).map_err(|e| PersistenceError::Corrupt {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}
