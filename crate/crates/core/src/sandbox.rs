//! Test execution under resource limits and behavioral equivalence.
//!
//! Each test runs in its own process (`<exe> <test-index>`), with CPU and
//! address-space rlimits, a wall-clock kill, a clean environment and, where
//! the kernel allows it, no network namespace. stderr is not part of the
//! observed behavior.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DecompilationTask, TestCase};
use crate::process::{self, Limits, Termination};
use crate::toolchain::ArgValue;

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("cannot spawn {path}: {source}")]
    Spawn {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("records cover different tests: {0}")]
    TestSetMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SandboxLimits {
    #[serde(rename = "cpu_secs", with = "crate::secs")]
    pub cpu: Duration,
    pub memory_bytes: u64,
    pub max_output_bytes: usize,
}

impl Default for SandboxLimits {
    fn default() -> Self {
        Self {
            cpu: Duration::from_secs(10),
            memory_bytes: 512 * 1024 * 1024,
            max_output_bytes: 1 << 20,
        }
    }
}

/// What one test invocation did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestObservation {
    /// Output printed by the function itself, protocol lines removed.
    #[serde(with = "crate::b64")]
    pub stdout: Vec<u8>,
    pub exit_code: i32,
    /// Hex dumps of the return value, buffer arguments and globals, in order.
    pub side_effects: Vec<String>,
    pub timed_out: bool,
    /// Terminated by a signal (segfault, abort, ...).
    #[serde(default)]
    pub signaled: bool,
    #[serde(default)]
    pub wall_time: Duration,
}

impl TestObservation {
    fn failure(&self) -> Option<&'static str> {
        if self.timed_out {
            Some("timed out")
        } else if self.signaled {
            Some("crashed")
        } else {
            None
        }
    }

    fn same_behavior(&self, other: &Self) -> bool {
        self.stdout == other.stdout
            && self.exit_code == other.exit_code
            && self.side_effects == other.side_effects
            && self.timed_out == other.timed_out
            && self.signaled == other.signaled
    }
}

/// Observations for a set of tests, keyed by test id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub tests: BTreeMap<String, TestObservation>,
}

impl ExecutionRecord {
    /// Function output of all tests, concatenated in test-id order.
    pub fn stdout(&self) -> Vec<u8> {
        self.tests.values().flat_map(|t| t.stdout.iter().copied()).collect()
    }

    /// First non-zero exit code in test-id order, else 0.
    pub fn exit_code(&self) -> i32 {
        self.tests.values().map(|t| t.exit_code).find(|&c| c != 0).unwrap_or(0)
    }

    pub fn side_effects(&self) -> BTreeMap<&str, String> {
        self.tests
            .iter()
            .map(|(id, t)| (id.as_str(), t.side_effects.join(" ")))
            .collect()
    }

    pub fn timed_out(&self) -> bool {
        self.tests.values().any(|t| t.timed_out)
    }

    pub fn wall_time(&self) -> Duration {
        self.tests.values().map(|t| t.wall_time).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Equivalent,
    Inequivalent { first_diverging_test: String },
    CandidateFailed { reason: String },
    Exempt,
}

impl Verdict {
    pub fn is_equivalent(&self) -> bool {
        matches!(self, Verdict::Equivalent)
    }
}

/// Splits driver output into the function's own output, the `OUT` values
/// and whether the driver reached `EXIT`.
fn parse_protocol(raw: &[u8], test_id: &str) -> (Vec<u8>, Vec<String>, bool) {
    let header = format!("TEST {test_id}\n");
    let body = match raw.strip_prefix(header.as_bytes()) {
        Some(b) => b,
        None => return (raw.to_vec(), Vec::new(), false),
    };
    let marker = [&b"\nOUT "[..], &b"\nEXIT "[..]]
        .iter()
        .filter_map(|m| body.windows(m.len()).position(|w| w == *m))
        .min();
    let Some(pos) = marker else {
        return (body.to_vec(), Vec::new(), false);
    };
    let mut captures = Vec::new();
    let mut completed = false;
    for line in String::from_utf8_lossy(&body[pos + 1..]).lines() {
        if let Some(hex) = line.strip_prefix("OUT ") {
            captures.push(hex.to_string());
        } else if line.starts_with("EXIT ") {
            completed = true;
        }
    }
    (body[..pos].to_vec(), captures, completed)
}

/// Runs the test at `index` of the driver linked into `executable`.
pub fn run_test(executable: &Path, index: usize, test: &TestCase, limits: &SandboxLimits) -> Result<TestObservation, SandboxError> {
    let cwd = executable.parent().unwrap_or(Path::new("."));
    let stdin = test.driver_inputs.stdin.clone().unwrap_or_default();
    let proc_limits = Limits {
        wall: Some(limits.cpu * 2 + Duration::from_secs(1)),
        cpu: Some(limits.cpu),
        memory: Some(limits.memory_bytes),
        max_output: Some(limits.max_output_bytes),
        isolate_network: true,
    };
    let out = process::run(executable, &[index.to_string()], cwd, stdin.as_bytes(), &proc_limits).map_err(|source| {
        SandboxError::Spawn {
            path: executable.display().to_string(),
            source,
        }
    })?;
    let (stdout, side_effects, _completed) = parse_protocol(&out.stdout, &test.test_id);
    Ok(TestObservation {
        stdout,
        exit_code: out.termination.code(),
        side_effects,
        timed_out: out.timed_out,
        signaled: matches!(out.termination, Termination::Signaled(_)) && !out.timed_out,
        wall_time: out.wall_time,
    })
}

/// Runs every test, one process each.
pub fn run_tests(executable: &Path, tests: &[TestCase], limits: &SandboxLimits) -> Result<ExecutionRecord, SandboxError> {
    let mut record = ExecutionRecord::default();
    for (i, test) in tests.iter().enumerate() {
        record.tests.insert(test.test_id.clone(), run_test(executable, i, test, limits)?);
    }
    Ok(record)
}

/// True when two runs of the same executable behaved identically.
pub fn determinism_filter(run1: &ExecutionRecord, run2: &ExecutionRecord) -> bool {
    run1.tests.len() == run2.tests.len()
        && run1
            .tests
            .iter()
            .zip(&run2.tests)
            .all(|((id1, a), (id2, b))| id1 == id2 && a.same_behavior(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FloatWidth {
    F32,
    F64,
}

/// Settings for comparing side effects; bit-exact unless a float tolerance
/// is configured for the task.
#[derive(Debug, Clone, Default)]
pub struct Comparison {
    float_tolerance: Option<f64>,
    /// Per test, the float width of each capture (`None` for non-float).
    captures: BTreeMap<String, Vec<Option<FloatWidth>>>,
}

fn float_width(ctype: &str) -> Option<FloatWidth> {
    match ctype {
        "float" => Some(FloatWidth::F32),
        "double" => Some(FloatWidth::F64),
        _ => None,
    }
}

impl Comparison {
    pub fn exact() -> Self {
        Self::default()
    }

    pub fn for_task(task: &DecompilationTask) -> Self {
        let Some(tol) = task.float_tolerance else {
            return Self::exact();
        };
        let captures = task
            .tests
            .iter()
            .map(|t| {
                let inputs = &t.driver_inputs;
                let mut widths = Vec::new();
                if inputs.returns != "void" {
                    widths.push(float_width(&inputs.returns));
                }
                for arg in &inputs.args {
                    match arg {
                        ArgValue::Buffer { ctype, .. } => widths.push(float_width(ctype)),
                        ArgValue::String { .. } => widths.push(None),
                        _ => {}
                    }
                }
                widths.extend(inputs.globals.iter().map(|g| float_width(&g.ctype)));
                (t.test_id.clone(), widths)
            })
            .collect();
        Self {
            float_tolerance: Some(tol),
            captures,
        }
    }

    fn capture_matches(&self, test_id: &str, index: usize, a: &str, b: &str) -> bool {
        if a == b {
            return true;
        }
        let (Some(tol), Some(Some(width))) = (
            self.float_tolerance,
            self.captures.get(test_id).and_then(|c| c.get(index)),
        ) else {
            return false;
        };
        let (Ok(a), Ok(b)) = (hex::decode(a), hex::decode(b)) else {
            return false;
        };
        let size = match width {
            FloatWidth::F32 => 4,
            FloatWidth::F64 => 8,
        };
        if a.len() != b.len() || a.len() % size != 0 {
            return false;
        }
        a.chunks(size).zip(b.chunks(size)).all(|(x, y)| {
            let (x, y) = match width {
                FloatWidth::F32 => (
                    f32::from_le_bytes(x.try_into().unwrap()) as f64,
                    f32::from_le_bytes(y.try_into().unwrap()) as f64,
                ),
                FloatWidth::F64 => (f64::from_le_bytes(x.try_into().unwrap()), f64::from_le_bytes(y.try_into().unwrap())),
            };
            x.to_bits() == y.to_bits() || (x - y).abs() <= tol
        })
    }

    fn observations_match(&self, test_id: &str, a: &TestObservation, b: &TestObservation) -> bool {
        a.stdout == b.stdout
            && a.exit_code == b.exit_code
            && a.side_effects.len() == b.side_effects.len()
            && a
                .side_effects
                .iter()
                .zip(&b.side_effects)
                .enumerate()
                .all(|(i, (x, y))| self.capture_matches(test_id, i, x, y))
    }
}

/// Compares a candidate's behavior to the reference's, bit-exactly.
pub fn judge_equivalence(reference: &ExecutionRecord, candidate: &ExecutionRecord) -> Result<Verdict, SandboxError> {
    judge_equivalence_with(reference, candidate, &Comparison::exact())
}

pub fn judge_equivalence_with(
    reference: &ExecutionRecord,
    candidate: &ExecutionRecord,
    comparison: &Comparison,
) -> Result<Verdict, SandboxError> {
    if !reference.tests.keys().eq(candidate.tests.keys()) {
        let r: Vec<_> = reference.tests.keys().cloned().collect();
        let c: Vec<_> = candidate.tests.keys().cloned().collect();
        return Err(SandboxError::TestSetMismatch(format!("reference {r:?} vs candidate {c:?}")));
    }
    for (side, record) in [("candidate", candidate), ("reference", reference)] {
        if let Some((id, why)) = record.tests.iter().find_map(|(id, t)| t.failure().map(|w| (id, w))) {
            return Ok(Verdict::CandidateFailed {
                reason: format!("{side} {why} on test `{id}`"),
            });
        }
    }
    for (id, r) in &reference.tests {
        if !comparison.observations_match(id, r, &candidate.tests[id]) {
            return Ok(Verdict::Inequivalent {
                first_diverging_test: id.clone(),
            });
        }
    }
    Ok(Verdict::Equivalent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obs(stdout: &str, exit: i32, effects: &[&str]) -> TestObservation {
        TestObservation {
            stdout: stdout.as_bytes().to_vec(),
            exit_code: exit,
            side_effects: effects.iter().map(|s| s.to_string()).collect(),
            timed_out: false,
            signaled: false,
            wall_time: Duration::from_millis(1),
        }
    }

    fn rec(entries: &[(&str, TestObservation)]) -> ExecutionRecord {
        ExecutionRecord {
            tests: entries.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        }
    }

    #[test]
    fn protocol_parsing() {
        let raw = b"TEST size8\nhello\n\nOUT 0400000002000000\nOUT ff\nEXIT 0\n";
        let (out, caps, done) = parse_protocol(raw, "size8");
        assert_eq!(out, b"hello\n");
        assert_eq!(caps, ["0400000002000000", "ff"]);
        assert!(done);

        let (out, caps, done) = parse_protocol(b"TEST t\npartial", "t");
        assert_eq!(out, b"partial");
        assert!(caps.is_empty());
        assert!(!done);

        let (out, _, done) = parse_protocol(b"TEST t\n\nEXIT 0\n", "t");
        assert!(out.is_empty());
        assert!(done);
    }

    #[test]
    fn verdicts() {
        let a = rec(&[("size6", obs("", 0, &["0300000002000000"])), ("size8", obs("", 0, &["0400000002000000"]))]);
        let e = rec(&[("size6", obs("", 0, &["0300000002000000"])), ("size8", obs("", 0, &["0300000002000000"]))]);
        assert_eq!(judge_equivalence(&a, &a).unwrap(), Verdict::Equivalent);
        assert_eq!(
            judge_equivalence(&a, &e).unwrap(),
            Verdict::Inequivalent {
                first_diverging_test: "size8".into()
            }
        );
        let only6 = |r: &ExecutionRecord| rec(&[("size6", r.tests["size6"].clone())]);
        assert_eq!(judge_equivalence(&only6(&a), &only6(&e)).unwrap(), Verdict::Equivalent);
    }

    #[test]
    fn exit_code_and_stdout_matter() {
        let a = rec(&[("t", obs("x", 0, &[]))]);
        assert!(matches!(judge_equivalence(&a, &rec(&[("t", obs("y", 0, &[]))])).unwrap(), Verdict::Inequivalent { .. }));
        assert!(matches!(judge_equivalence(&a, &rec(&[("t", obs("x", 1, &[]))])).unwrap(), Verdict::Inequivalent { .. }));
    }

    #[test]
    fn failures_never_equivalent() {
        let mut t = obs("", 0, &[]);
        t.timed_out = true;
        let timed = rec(&[("t", t)]);
        assert!(matches!(judge_equivalence(&timed, &timed).unwrap(), Verdict::CandidateFailed { .. }));
        let mut c = obs("", 139, &[]);
        c.signaled = true;
        let crashed = rec(&[("t", c)]);
        assert!(matches!(judge_equivalence(&crashed, &crashed).unwrap(), Verdict::CandidateFailed { .. }));
    }

    #[test]
    fn mismatched_tests_are_a_contract_error() {
        let a = rec(&[("t", obs("", 0, &[]))]);
        let b = rec(&[("u", obs("", 0, &[]))]);
        assert!(matches!(judge_equivalence(&a, &b), Err(SandboxError::TestSetMismatch(_))));
    }

    #[test]
    fn determinism() {
        let a = rec(&[("t", obs("42\n", 0, &["2a000000"]))]);
        let mut b = a.clone();
        b.tests.get_mut("t").unwrap().wall_time = Duration::from_secs(3);
        assert!(determinism_filter(&a, &b));
        let c = rec(&[("t", obs("43\n", 0, &["2a000000"]))]);
        assert!(!determinism_filter(&a, &c));
    }

    #[test]
    fn float_tolerance_applies_only_to_float_captures() {
        let task: DecompilationTask = serde_json::from_value(serde_json::json!({
            "task_id": "f", "decompiler_output": "x", "symbol": "f", "compiler_profile_id": "gcc-O0",
            "float_tolerance": 1e-6,
            "tests": [{"test_id": "t", "driver_inputs": {"returns": "double",
                "args": [{"kind": "buffer", "ctype": "int", "values": [0]}]}}]
        }))
        .unwrap();
        let cmp = Comparison::for_task(&task);
        let d = |v: f64| hex::encode(v.to_le_bytes());
        let a = rec(&[("t", obs("", 0, &[&d(1.0), "01000000"]))]);
        let close = rec(&[("t", obs("", 0, &[&d(1.0 + 1e-9), "01000000"]))]);
        let int_off = rec(&[("t", obs("", 0, &[&d(1.0), "02000000"]))]);
        assert_eq!(judge_equivalence_with(&a, &close, &cmp).unwrap(), Verdict::Equivalent);
        assert!(matches!(judge_equivalence(&a, &close).unwrap(), Verdict::Inequivalent { .. }));
        assert!(matches!(judge_equivalence_with(&a, &int_off, &cmp).unwrap(), Verdict::Inequivalent { .. }));
    }

    fn arb_record() -> impl Strategy<Value = ExecutionRecord> {
        proptest::collection::btree_map(
            "[a-c]",
            ("[xy]{0,2}", 0i32..2, proptest::collection::vec("[01]{2}", 0..2), proptest::bool::weighted(0.1)),
            1..3,
        )
        .prop_map(|m| ExecutionRecord {
            tests: m
                .into_iter()
                .map(|(k, (s, e, fx, to))| {
                    let mut o = obs(&s, e, &[]);
                    o.side_effects = fx;
                    o.timed_out = to;
                    (k, o)
                })
                .collect(),
        })
    }

    proptest! {
        #[test]
        fn reflexive_and_symmetric(a in arb_record(), b in arb_record()) {
            if !a.timed_out() {
                prop_assert_eq!(judge_equivalence(&a, &a).unwrap(), Verdict::Equivalent);
            }
            if let (Ok(x), Ok(y)) = (judge_equivalence(&a, &b), judge_equivalence(&b, &a)) {
                prop_assert_eq!(x.is_equivalent(), y.is_equivalent());
                prop_assert_eq!(
                    matches!(x, Verdict::Inequivalent { .. }),
                    matches!(y, Verdict::Inequivalent { .. })
                );
                if a.timed_out() || b.timed_out() {
                    prop_assert!(!x.is_equivalent());
                }
            }
        }
    }
}
