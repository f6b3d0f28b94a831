//! Hermetic invocation of the `git` binary.

use std::io::Read;
use std::path::Path;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum GitError {
    #[error("could not run git: {0}")]
    Spawn(#[from] std::io::Error),
    #[error("git {args} timed out after {secs}s")]
    Timeout { args: String, secs: u64 },
    #[error("git {args} exited with {code}: {stderr}")]
    Failed { args: String, code: i32, stderr: String },
}

/// Runs git in `dir` with no system or global config, a fixed identity, and
/// repository discovery stopped at `ceiling`.
pub fn run(dir: &Path, ceiling: &Path, args: &[&str], timeout: Duration) -> Result<String, GitError> {
    let mut child = Command::new("git")
        .args(["-c", "user.name=PerOS", "-c", "user.email=peros@localhost", "-c", "init.defaultBranch=main"])
        .args(["-c", "commit.gpgsign=false", "-c", "core.autocrlf=false", "-c", "gc.auto=0"])
        .args(args)
        .current_dir(dir)
        .env("GIT_CONFIG_NOSYSTEM", "1")
        .env("GIT_CONFIG_GLOBAL", "/dev/null")
        .env("GIT_CEILING_DIRECTORIES", ceiling)
        .env("GIT_TERMINAL_PROMPT", "0")
        .env("GIT_AUTHOR_DATE", "2024-01-01T00:00:00Z")
        .env("GIT_COMMITTER_DATE", "2024-01-01T00:00:00Z")
        .env_remove("GIT_DIR")
        .env_remove("GIT_WORK_TREE")
        .env_remove("GIT_INDEX_FILE")
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()?;
    let mut stdout = child.stdout.take().expect("piped");
    let mut stderr = child.stderr.take().expect("piped");
    let out_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stdout.read_to_end(&mut buf);
        buf
    });
    let err_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stderr.read_to_end(&mut buf);
        buf
    });
    let started = Instant::now();
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if started.elapsed() >= timeout {
            let _ = child.kill();
            let _ = child.wait();
            return Err(GitError::Timeout { args: args.join(" "), secs: timeout.as_secs() });
        }
        thread::sleep(Duration::from_millis(2));
    };
    let out = String::from_utf8_lossy(&out_reader.join().unwrap_or_default()).into_owned();
    let err = String::from_utf8_lossy(&err_reader.join().unwrap_or_default()).into_owned();
    if !status.success() {
        return Err(GitError::Failed {
            args: args.join(" "),
            code: status.code().unwrap_or(-1),
            stderr: err.trim().to_string(),
        });
    }
    Ok(out)
}

pub fn is_repo(dir: &Path) -> bool {
    dir.join(".git").exists()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_and_fail_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        run(dir.path(), dir.path(), &["init", "-q"], DEFAULT_TIMEOUT).unwrap();
        assert!(is_repo(dir.path()));
        let err = run(dir.path(), dir.path(), &["rev-parse", "HEAD~5"], DEFAULT_TIMEOUT).unwrap_err();
        assert!(matches!(err, GitError::Failed { .. }));
    }
}
