//! Compiler and binutils driving.
//!
//! Byte metrics are taken from relocatable objects, where relocations are
//! still pending and can be masked; execution uses executables linked
//! against a generated test driver.

mod disasm;
mod driver;
mod elf;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DecompilationTask;
use crate::process::{self, Limits};

pub use disasm::{canonicalize, DisassemblyListing, REL};
pub use driver::{generate_driver, ArgValue, DriverError, DriverInputs, GlobalSpec};
pub use elf::{function_bytes, relocation_sites, x86_64_reloc_width, ByteListing, RelocationSite};

#[derive(Debug, Error)]
pub enum ToolchainError {
    #[error("tool `{0}` not found (searched ${env} and the default PATH)", env = process::TOOLCHAIN_DIR_ENV)]
    MissingTool(String),
    #[error("invalid compiler profile `{profile}`: {reason}")]
    BadProfile { profile: String, reason: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("symbol `{symbol}` not found; available functions: [{}]", available.join(", "))]
    SymbolNotFound { symbol: String, available: Vec<String> },
    #[error("symbol `{0}` has zero size")]
    ZeroSizeSymbol(String),
    #[error("unreadable object file: {0}")]
    BadObject(String),
    #[error("task `{0}` is execution-exempt")]
    ExecutionExempt(String),
    #[error("driver generation failed: {0}")]
    Driver(#[from] DriverError),
    #[error("artifact for profile `{0}` did not compile")]
    NotCompiled(String),
    #[error("candidate source is empty")]
    EmptySource,
}

impl ToolchainError {
    /// Environment or configuration problems, as opposed to a bad candidate.
    pub fn is_configuration(&self) -> bool {
        matches!(self, ToolchainError::MissingTool(_) | ToolchainError::BadProfile { .. })
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> ToolchainError {
    let context = context.into();
    move |source| ToolchainError::Io { context, source }
}

/// How to build one candidate: compile and link command templates.
///
/// Templates are split on whitespace into an argument vector; `{src}`,
/// `{out}` and `{flags}` tokens are substituted (list-valued placeholders
/// expand to several arguments). No shell is involved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompilerProfile {
    pub profile_id: String,
    pub compile_command_template: String,
    #[serde(default)]
    pub flags: Vec<String>,
    pub linker_command_template: String,
    #[serde(default)]
    pub strip: bool,
    #[serde(rename = "timeout_secs", with = "crate::secs")]
    pub timeout: Duration,
}

impl CompilerProfile {
    pub fn new(profile_id: &str, compiler: &str, flags: &[&str]) -> Self {
        Self {
            profile_id: profile_id.to_string(),
            compile_command_template: format!("{compiler} -c {{flags}} {{src}} -o {{out}}"),
            flags: flags.iter().map(|f| f.to_string()).collect(),
            linker_command_template: format!("{compiler} {{flags}} {{src}} -o {{out}}"),
            strip: false,
            timeout: Duration::from_secs(60),
        }
    }

    /// Profiles available without a config file.
    pub fn builtin(profile_id: &str) -> Option<Self> {
        let (cc, opt) = match profile_id {
            "gcc-O0" => ("gcc", "-O0"),
            "gcc-O2" => ("gcc", "-O2"),
            "gcc-Os" => ("gcc", "-Os"),
            "clang-O0" => ("clang", "-O0"),
            "clang-O2" => ("clang", "-O2"),
            "clang-Os" => ("clang", "-Os"),
            _ => return None,
        };
        Some(Self::new(profile_id, cc, &[opt]))
    }

    pub fn builtin_ids() -> &'static [&'static str] {
        &["gcc-O0", "gcc-O2", "gcc-Os", "clang-O0", "clang-O2", "clang-Os"]
    }

    /// Reads a profile from a `.toml` or `.json` file.
    pub fn from_file(path: &Path) -> Result<Self, ToolchainError> {
        let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
        let bad = |reason: String| ToolchainError::BadProfile {
            profile: path.display().to_string(),
            reason,
        };
        let profile: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?,
            _ => toml::from_str(&text).map_err(|e| bad(e.to_string()))?,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<(), ToolchainError> {
        let bad = |reason: &str| ToolchainError::BadProfile {
            profile: self.profile_id.clone(),
            reason: reason.to_string(),
        };
        if self.profile_id.is_empty() {
            return Err(bad("empty profile_id"));
        }
        if self.timeout.is_zero() {
            return Err(bad("timeout must be positive"));
        }
        for template in [&self.compile_command_template, &self.linker_command_template] {
            if !template.contains("{src}") || !template.contains("{out}") {
                return Err(bad("templates need {src} and {out}"));
            }
            self.render(template, &["x".into()], "y")?;
        }
        Ok(())
    }

    fn render(&self, template: &str, src: &[String], out: &str) -> Result<Vec<String>, ToolchainError> {
        let mut argv = Vec::new();
        for token in template.split_whitespace() {
            match token {
                "{src}" => argv.extend(src.iter().cloned()),
                "{flags}" => argv.extend(self.flags.iter().cloned()),
                "{out}" => argv.push(out.to_string()),
                t if t.contains('{') || t.contains('}') => {
                    let rendered = t
                        .replace("{out}", out)
                        .replace("{src}", &src.join(" "))
                        .replace("{flags}", &self.flags.join(" "));
                    if rendered.contains('{') || rendered.contains('}') {
                        return Err(ToolchainError::BadProfile {
                            profile: self.profile_id.clone(),
                            reason: format!("unknown placeholder in `{t}`"),
                        });
                    }
                    argv.push(rendered);
                }
                t => argv.push(t.to_string()),
            }
        }
        if argv.is_empty() {
            return Err(ToolchainError::BadProfile {
                profile: self.profile_id.clone(),
                reason: "empty command template".into(),
            });
        }
        Ok(argv)
    }
}

/// Result of compiling (and possibly linking) one candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompilationArtifact {
    pub object_path: PathBuf,
    pub executable_path: Option<PathBuf>,
    pub compiler_log: String,
    pub profile_id: String,
    pub success: bool,
}

fn run_tool(argv: &[String], cwd: &Path, timeout: Duration) -> Result<process::Output, ToolchainError> {
    let program = process::resolve_tool(&argv[0]).ok_or_else(|| ToolchainError::MissingTool(argv[0].clone()))?;
    let limits = Limits {
        wall: Some(timeout),
        max_output: Some(1 << 20),
        ..Limits::default()
    };
    process::run(&program, &argv[1..], cwd, b"", &limits).map_err(io_err(format!("spawning `{}`", argv[0])))
}

fn log_of(out: &process::Output, timeout: Duration) -> String {
    let mut log = String::from_utf8_lossy(&out.stderr).into_owned();
    log.push_str(&String::from_utf8_lossy(&out.stdout));
    if out.timed_out {
        log.push_str(&format!("\n[decaf] timed out after {:.1}s\n", timeout.as_secs_f64()));
    }
    log
}

fn is_relocatable(path: &Path) -> bool {
    use object::Object;
    fs::read(path)
        .ok()
        .and_then(|data| object::File::parse(&*data).ok().map(|f| f.kind() == object::ObjectKind::Relocatable))
        .unwrap_or(false)
}

/// Compiles `dependencies + source` into `scratch/candidate.o`.
///
/// A candidate that fails to compile (or times out) is an `Ok` artifact
/// with `success == false`; `Err` is reserved for environment problems.
pub fn compile_candidate(
    source: &str,
    dependencies: &str,
    profile: &CompilerProfile,
    scratch: &Path,
) -> Result<CompilationArtifact, ToolchainError> {
    if source.trim().is_empty() {
        return Err(ToolchainError::EmptySource);
    }
    fs::create_dir_all(scratch).map_err(io_err(format!("creating {}", scratch.display())))?;
    // Tools run with the scratch directory as cwd, so relative paths would not resolve.
    let scratch = &fs::canonicalize(scratch).map_err(io_err(format!("resolving {}", scratch.display())))?;
    let src_path = scratch.join("candidate.c");
    let object_path = scratch.join("candidate.o");
    let mut unit = String::with_capacity(dependencies.len() + source.len() + 1);
    unit.push_str(dependencies);
    if !dependencies.is_empty() && !dependencies.ends_with('\n') {
        unit.push('\n');
    }
    unit.push_str(source);
    fs::write(&src_path, unit).map_err(io_err(format!("writing {}", src_path.display())))?;
    let _ = fs::remove_file(&object_path);

    let argv = profile.render(
        &profile.compile_command_template,
        &[src_path.display().to_string()],
        &object_path.display().to_string(),
    )?;
    let out = run_tool(&argv, scratch, profile.timeout)?;
    let mut compiler_log = log_of(&out, profile.timeout);
    let mut success = out.success();
    if success && !is_relocatable(&object_path) {
        compiler_log.push_str("\n[decaf] compiler exited 0 but produced no relocatable object\n");
        success = false;
    }
    Ok(CompilationArtifact {
        object_path,
        executable_path: None,
        compiler_log,
        profile_id: profile.profile_id.clone(),
        success,
    })
}

/// Links a compiled candidate with a driver generated from the task's tests.
pub fn link_with_harness(
    artifact: &CompilationArtifact,
    task: &DecompilationTask,
    profile: &CompilerProfile,
) -> Result<CompilationArtifact, ToolchainError> {
    if task.execution_exempt() {
        return Err(ToolchainError::ExecutionExempt(task.task_id.clone()));
    }
    if !artifact.success {
        return Err(ToolchainError::NotCompiled(artifact.profile_id.clone()));
    }
    let scratch = artifact
        .object_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let driver = generate_driver(&task.symbol, &task.tests)?;
    let driver_path = scratch.join("driver.c");
    let exe_path = scratch.join("test.exe");
    fs::write(&driver_path, driver).map_err(io_err(format!("writing {}", driver_path.display())))?;
    let _ = fs::remove_file(&exe_path);

    let argv = profile.render(
        &profile.linker_command_template,
        &[driver_path.display().to_string(), artifact.object_path.display().to_string()],
        &exe_path.display().to_string(),
    )?;
    let out = run_tool(&argv, &scratch, profile.timeout)?;
    let success = out.success() && exe_path.is_file();
    let mut linked = artifact.clone();
    linked.compiler_log.push_str(&log_of(&out, profile.timeout));
    linked.success = success;
    linked.executable_path = success.then_some(exe_path);
    Ok(linked)
}

/// The named function's bytes from the artifact's object file.
pub fn extract_function_bytes(artifact: &CompilationArtifact, symbol: &str) -> Result<ByteListing, ToolchainError> {
    if !artifact.success {
        return Err(ToolchainError::NotCompiled(artifact.profile_id.clone()));
    }
    let data = fs::read(&artifact.object_path).map_err(io_err(format!("reading {}", artifact.object_path.display())))?;
    elf::function_bytes(&data, symbol, &artifact.profile_id)
}

/// Disassembles one function of an object or executable with `objdump -d -r`.
pub fn disassemble_file(path: &Path, symbol: &str, stripped_view: bool) -> Result<DisassemblyListing, ToolchainError> {
    let data = fs::read(path).map_err(io_err(format!("reading {}", path.display())))?;
    let span = elf::function_span(&data, symbol)?;
    let objdump = process::resolve_tool("objdump").ok_or_else(|| ToolchainError::MissingTool("objdump".into()))?;
    let cwd = path.parent().unwrap_or(Path::new("."));
    let args = vec![
        "-d".to_string(),
        "-r".to_string(),
        "-w".to_string(),
        "-j".to_string(),
        span.section,
        format!("--start-address=0x{:x}", span.address),
        format!("--stop-address=0x{:x}", span.address + span.size),
        path.display().to_string(),
    ];
    let limits = Limits {
        wall: Some(Duration::from_secs(60)),
        ..Limits::default()
    };
    let out = process::run(&objdump, &args, cwd, b"", &limits).map_err(io_err("running objdump"))?;
    if !out.success() {
        return Err(ToolchainError::BadObject(String::from_utf8_lossy(&out.stderr).into_owned()));
    }
    let raw = String::from_utf8_lossy(&out.stdout).into_owned();
    let canonical = canonicalize(&raw);
    Ok(DisassemblyListing {
        raw,
        canonical,
        symbol: symbol.to_string(),
        stripped_view,
    })
}

/// Disassembles the function from the artifact's object file.
pub fn disassemble(artifact: &CompilationArtifact, symbol: &str, stripped_view: bool) -> Result<DisassemblyListing, ToolchainError> {
    if !artifact.success {
        return Err(ToolchainError::NotCompiled(artifact.profile_id.clone()));
    }
    disassemble_file(&artifact.object_path, symbol, stripped_view)
}
