//! Child-interpreter sandbox.
//!
//! Each completion runs in a fresh `python3` process inside its own temp
//! directory with a scrubbed environment. A driver script installs an audit
//! hook that denies sockets, subprocesses and filesystem writes outside the
//! working directory, and reports every denial as a violation. The driver
//! writes its verdict together with a nonce it read from stdin, so a
//! candidate that exits the interpreter early cannot forge a pass.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{Read, Write};
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{BenchmarkTask, Status};

const DRIVER: &str = r#"
import os, sys, traceback

WRITE_FLAGS = os.O_WRONLY | os.O_RDWR | os.O_CREAT | os.O_APPEND | os.O_TRUNC
PATH_EVENTS = {"os.remove", "os.rename", "os.rmdir", "os.mkdir", "os.chmod", "os.chown",
               "os.symlink", "os.link", "os.truncate", "shutil.rmtree", "shutil.copyfile"}
DENIED_EVENTS = {"subprocess.Popen", "os.system", "os.exec", "os.posix_spawn", "os.spawn",
                 "os.fork", "os.forkpty", "socket.connect", "socket.bind", "socket.sendto",
                 "socket.getaddrinfo", "ctypes.dlopen"}


def main():
    nonce = sys.stdin.readline().strip()
    mem_bytes = int(sys.argv[1])
    entry = sys.argv[2]
    cwd = os.path.realpath(os.getcwd())
    if mem_bytes > 0:
        try:
            import resource
            resource.setrlimit(resource.RLIMIT_AS, (mem_bytes, mem_bytes))
        except Exception as exc:
            print("sandbox: memory cap unavailable: %s" % exc, file=sys.stderr)
    with open("candidate.py") as f:
        candidate = f.read()
    with open("tests.py") as f:
        tests = f.read()
    violations = open("violations.log", "a", buffering=1)
    verdict = open("verdict.txt", "w")

    def inside(path):
        if isinstance(path, int):
            return True
        p = os.path.realpath(os.fsdecode(path))
        return p == cwd or p.startswith(cwd + os.sep) or p == os.devnull

    def deny(msg):
        violations.write(msg + "\n")
        raise PermissionError("sandbox: " + msg)

    def hook(event, args):
        if event == "open":
            path, mode, flags = args
            writing = (mode is not None and any(c in mode for c in "wax+")) or bool(flags & WRITE_FLAGS)
            if writing and not inside(path):
                deny("write outside sandbox: %s" % (path,))
        elif event in PATH_EVENTS:
            for p in args[:2]:
                if isinstance(p, (str, bytes, os.PathLike)) and not inside(p):
                    deny("%s outside sandbox: %s" % (event, p))
        elif event == "socket.__new__":
            import socket
            if args[1] in (socket.AF_INET, socket.AF_INET6):
                deny("network socket opened")
        elif event in DENIED_EVENTS:
            deny("%s denied" % event)

    def finish(status, code):
        verdict.write("%s %s\n" % (nonce, status))
        verdict.flush()
        sys.stdout.flush()
        sys.stderr.flush()
        os._exit(code)

    ns = {"__name__": "__candidate__"}
    sys.addaudithook(hook)
    try:
        compiled = compile(candidate, "candidate.py", "exec")
        exec(compiled, ns)
    except BaseException:
        traceback.print_exc()
        finish("error", 2)
    if entry not in ns:
        print("candidate does not define `%s`" % entry, file=sys.stderr)
        finish("error", 2)
    try:
        compiled = compile(tests, "tests.py", "exec")
    except BaseException:
        traceback.print_exc()
        finish("error", 2)
    try:
        exec(compiled, ns)
        check = ns.get("check")
        if callable(check):
            check(ns[entry])
    except BaseException:
        traceback.print_exc()
        finish("fail", 1)
    finish("pass", 0)


main()
"#;

#[derive(Debug, thiserror::Error)]
pub enum SandboxError {
    #[error("cannot start interpreter `{python}`: {source}")]
    Spawn {
        python: String,
        #[source]
        source: std::io::Error,
    },
    #[error("sandbox i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxConfig {
    pub python: String,
    /// Address-space cap for the child, in MiB.
    pub memory_limit_mb: Option<u64>,
    /// Bytes kept from the end of stderr/stdout.
    pub excerpt_bytes: usize,
    /// Overrides each task's own timeout when set.
    pub timeout_override: Option<f64>,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            python: "python3".into(),
            memory_limit_mb: None,
            excerpt_bytes: 2000,
            timeout_override: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecOutcome {
    pub status: Status,
    pub duration_ms: f64,
    pub stderr_excerpt: String,
    pub stdout_excerpt: String,
    pub violations: Vec<String>,
}

impl ExecOutcome {
    fn skipped(reason: String) -> Self {
        Self {
            status: Status::SkippedMissingDep,
            duration_ms: 0.0,
            stderr_excerpt: reason,
            stdout_excerpt: String::new(),
            violations: Vec::new(),
        }
    }
}

/// Runs one candidate against one task.
pub trait Executor: Send + Sync {
    /// Returns the first unmet requirement, if any.
    fn missing_requirement(&self, task: &BenchmarkTask) -> Option<String>;
    fn execute(&self, task: &BenchmarkTask, code: &str) -> Result<ExecOutcome, SandboxError>;
}

#[derive(Debug, Default)]
pub struct PythonSandbox {
    config: SandboxConfig,
    available: Mutex<HashMap<String, bool>>,
}

impl PythonSandbox {
    pub fn new(config: SandboxConfig) -> Self {
        Self {
            config,
            available: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    /// Whether `module` is importable by the configured interpreter.
    pub fn has_module(&self, module: &str) -> bool {
        if let Some(&known) = self.available.lock().unwrap().get(module) {
            return known;
        }
        let found = Command::new(&self.config.python)
            .args([
                "-c",
                "import importlib.util, sys; sys.exit(0 if importlib.util.find_spec(sys.argv[1]) else 1)",
                module,
            ])
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map(|s| s.success())
            .unwrap_or(false);
        self.available
            .lock()
            .unwrap()
            .insert(module.to_string(), found);
        found
    }

    fn timeout(&self, task: &BenchmarkTask) -> Duration {
        Duration::from_secs_f64(self.config.timeout_override.unwrap_or(task.timeout))
    }
}

/// Maps requirement names to importable modules.
fn module_for(requirement: &str) -> &str {
    match requirement {
        "quantum-framework" => "pennylane",
        other => other,
    }
}

fn excerpt(path: &Path, max: usize) -> String {
    let mut bytes = Vec::new();
    if let Ok(mut f) = File::open(path) {
        let _ = f.read_to_end(&mut bytes);
    }
    let start = bytes.len().saturating_sub(max);
    String::from_utf8_lossy(&bytes[start..]).into_owned()
}

fn kill_group(pid: u32) {
    // SAFETY: plain syscall on a process group we created.
    unsafe {
        libc::killpg(pid as libc::pid_t, libc::SIGKILL);
    }
}

impl Executor for PythonSandbox {
    fn missing_requirement(&self, task: &BenchmarkTask) -> Option<String> {
        task.requires
            .iter()
            .find(|r| !self.has_module(module_for(r)))
            .cloned()
    }

    fn execute(&self, task: &BenchmarkTask, code: &str) -> Result<ExecOutcome, SandboxError> {
        if let Some(dep) = self.missing_requirement(task) {
            return Ok(ExecOutcome::skipped(format!("missing dependency: {dep}")));
        }
        let dir = tempfile::Builder::new().prefix("qcoder-sbx-").tempdir()?;
        let root = dir.path();
        fs::write(root.join("driver.py"), DRIVER)?;
        fs::write(root.join("candidate.py"), code)?;
        fs::write(root.join("tests.py"), &task.test_code)?;
        let nonce = format!("{:016x}", rand::random::<u64>());
        let mem = self.config.memory_limit_mb.map_or(0, |mb| mb * 1024 * 1024);

        let started = Instant::now();
        let mut child = Command::new(&self.config.python)
            .arg("-B")
            .arg("driver.py")
            .arg(mem.to_string())
            .arg(&task.entry_point)
            .current_dir(root)
            .env_clear()
            .env(
                "PATH",
                std::env::var_os("PATH").unwrap_or_else(|| "/usr/bin:/bin".into()),
            )
            .env("HOME", root)
            .env("TMPDIR", root)
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .env("PYTHONHASHSEED", "0")
            .env("MPLBACKEND", "Agg")
            .stdin(Stdio::piped())
            .stdout(File::create(root.join("stdout.txt"))?)
            .stderr(File::create(root.join("stderr.txt"))?)
            .process_group(0)
            .spawn()
            .map_err(|source| SandboxError::Spawn {
                python: self.config.python.clone(),
                source,
            })?;
        if let Some(mut stdin) = child.stdin.take() {
            // A candidate that never reads stdin is fine; ignore EPIPE.
            let _ = writeln!(stdin, "{nonce}");
        }

        let deadline = started + self.timeout(task);
        let mut timed_out = false;
        loop {
            if child.try_wait()?.is_some() {
                break;
            }
            if Instant::now() >= deadline {
                kill_group(child.id());
                let _ = child.wait();
                timed_out = true;
                break;
            }
            thread::sleep(Duration::from_millis(5));
        }
        // Reap anything the candidate left behind in its group.
        kill_group(child.id());
        let duration_ms = started.elapsed().as_secs_f64() * 1e3;

        let verdict = fs::read_to_string(root.join("verdict.txt")).unwrap_or_default();
        let mut stderr_excerpt = excerpt(&root.join("stderr.txt"), self.config.excerpt_bytes);
        let status = if timed_out {
            Status::Timeout
        } else {
            match verdict.trim().split_once(' ') {
                Some((n, s)) if n == nonce => match s {
                    "pass" => Status::Pass,
                    "fail" => Status::Fail,
                    _ => Status::Error,
                },
                _ => {
                    stderr_excerpt.push_str("\nsandbox: interpreter exited without a verdict");
                    Status::Error
                }
            }
        };
        let violations = fs::read_to_string(root.join("violations.log"))
            .unwrap_or_default()
            .lines()
            .map(String::from)
            .collect();
        Ok(ExecOutcome {
            status,
            duration_ms,
            stderr_excerpt,
            stdout_excerpt: excerpt(&root.join("stdout.txt"), self.config.excerpt_bytes),
            violations,
        })
    }
}
