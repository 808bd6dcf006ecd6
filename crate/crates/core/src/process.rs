//! External process execution shared by the toolchain and the sandbox.
//!
//! Every child runs with an emptied environment (fixed `C` locale, fixed
//! `PATH`), in its own process group so a timeout can take down
//! grandchildren such as `cc1`, and with optional rlimits applied between
//! fork and exec.

use std::ffi::OsString;
use std::io::{self, Read, Write};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

/// Directory searched before `PATH` when resolving tools.
pub const TOOLCHAIN_DIR_ENV: &str = "DECAF_TOOLCHAIN_DIR";

const DEFAULT_PATH: &str = "/usr/local/bin:/usr/bin:/bin";
const POLL_INTERVAL: Duration = Duration::from_millis(2);

#[derive(Debug, Clone, Default)]
pub struct Limits {
    /// Wall-clock budget; the process group is killed when it runs out.
    pub wall: Option<Duration>,
    /// `RLIMIT_CPU`, rounded up to whole seconds.
    pub cpu: Option<Duration>,
    /// `RLIMIT_AS` in bytes.
    pub memory: Option<u64>,
    /// Cap on captured bytes per stream; the rest is drained and dropped.
    pub max_output: Option<usize>,
    /// Try to detach the child from the network namespace.
    pub isolate_network: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Exited(i32),
    Signaled(i32),
}

impl Termination {
    /// Shell-style status: exit code, or 128 + signal number.
    pub fn code(self) -> i32 {
        match self {
            Termination::Exited(c) => c,
            Termination::Signaled(s) => 128 + s,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Output {
    pub termination: Termination,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub timed_out: bool,
    pub wall_time: Duration,
}

impl Output {
    pub fn success(&self) -> bool {
        !self.timed_out && self.termination == Termination::Exited(0)
    }
}

fn search_path() -> OsString {
    match std::env::var_os(TOOLCHAIN_DIR_ENV) {
        Some(dir) if !dir.is_empty() => {
            let mut p = dir;
            p.push(":");
            p.push(DEFAULT_PATH);
            p
        }
        _ => OsString::from(DEFAULT_PATH),
    }
}

/// Finds an executable by name. Names containing a slash are taken as paths.
pub fn resolve_tool(name: &str) -> Option<PathBuf> {
    if name.contains('/') {
        let p = PathBuf::from(name);
        return is_executable(&p).then_some(p);
    }
    std::env::split_paths(&search_path())
        .map(|dir| dir.join(name))
        .find(|p| is_executable(p))
}

fn is_executable(p: &Path) -> bool {
    use std::os::unix::fs::PermissionsExt;
    p.metadata()
        .map(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
        .unwrap_or(false)
}

fn spawn_reader<R: Read + Send + 'static>(mut r: R, cap: usize) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            match r.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..n.min(room)]);
                }
            }
        }
        kept
    })
}

fn set_rlimit(resource: libc::__rlimit_resource_t, soft: u64, hard: u64) -> io::Result<()> {
    let lim = libc::rlimit {
        rlim_cur: soft as libc::rlim_t,
        rlim_max: hard as libc::rlim_t,
    };
    // SAFETY: plain syscall on a stack value.
    if unsafe { libc::setrlimit(resource, &lim) } != 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

/// Runs `program args...` in `cwd`, feeding `stdin`, under `limits`.
///
/// Spawn failures are returned as `Err`; everything that happens after the
/// child exists (non-zero exit, signals, timeouts) is reported in `Output`.
pub fn run(program: &Path, args: &[String], cwd: &Path, stdin: &[u8], limits: &Limits) -> io::Result<Output> {
    let mut cmd = Command::new(program);
    cmd.args(args)
        .current_dir(cwd)
        .env_clear()
        .env("PATH", search_path())
        .env("LC_ALL", "C")
        .env("LANG", "C")
        .env("TMPDIR", cwd)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);

    let cpu = limits.cpu.map(|d| d.as_secs() + u64::from(d.subsec_nanos() > 0)).map(|s| s.max(1));
    let memory = limits.memory;
    let isolate = limits.isolate_network;
    // SAFETY: the closure only issues async-signal-safe syscalls.
    unsafe {
        cmd.pre_exec(move || {
            if let Some(secs) = cpu {
                set_rlimit(libc::RLIMIT_CPU, secs, secs + 1)?;
            }
            if let Some(bytes) = memory {
                set_rlimit(libc::RLIMIT_AS, bytes, bytes)?;
            }
            set_rlimit(libc::RLIMIT_CORE, 0, 0)?;
            if isolate {
                // Unprivileged containers usually refuse this; the rlimits still apply.
                let _ = libc::unshare(libc::CLONE_NEWUSER | libc::CLONE_NEWNET);
            }
            Ok(())
        });
    }

    let start = Instant::now();
    let mut child = cmd.spawn()?;
    let cap = limits.max_output.unwrap_or(usize::MAX);
    let out_reader = spawn_reader(child.stdout.take().expect("piped stdout"), cap);
    let err_reader = spawn_reader(child.stderr.take().expect("piped stderr"), cap);
    if let Some(mut pipe) = child.stdin.take() {
        let payload = stdin.to_vec();
        thread::spawn(move || {
            let _ = pipe.write_all(&payload);
        });
    }

    let deadline = limits.wall.map(|w| start + w);
    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if deadline.is_some_and(|d| Instant::now() >= d) {
            timed_out = true;
            // SAFETY: negative pid addresses the child's own process group.
            unsafe {
                libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
            }
            break child.wait()?;
        }
        thread::sleep(POLL_INTERVAL);
    };
    let wall_time = start.elapsed();

    let termination = match (status.code(), status.signal()) {
        (Some(c), _) => Termination::Exited(c),
        (None, Some(s)) => Termination::Signaled(s),
        (None, None) => Termination::Exited(-1),
    };
    if cpu.is_some() && matches!(termination, Termination::Signaled(s) if s == libc::SIGXCPU || s == libc::SIGKILL) {
        timed_out = true;
    }
    // Stragglers in the group may still hold the pipes open.
    // SAFETY: as above.
    unsafe {
        libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
    }

    Ok(Output {
        termination,
        stdout: out_reader.join().unwrap_or_default(),
        stderr: err_reader.join().unwrap_or_default(),
        timed_out,
        wall_time,
    })
}
