//! Implementations of the registered operations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use globset::GlobBuilder;
use serde::{Deserialize, Serialize};

use crate::git::{self, GitError};
use crate::model::{ArgValue, Args};
use crate::workspace::{join_inside, resolve, walk, SandboxError, STATE_DIR};

/// Where backup and placement settings live, relative to the root.
pub const SETTINGS_DIR: &str = ".settings";

#[derive(Debug)]
pub enum OpError {
    Sandbox(String),
    Failed(String),
}

impl From<SandboxError> for OpError {
    fn from(e: SandboxError) -> Self {
        match e {
            SandboxError::Escape(p) => OpError::Sandbox(p),
            SandboxError::Io { path, source } => OpError::Failed(format!("{path}: {source}")),
        }
    }
}

impl From<std::io::Error> for OpError {
    fn from(e: std::io::Error) -> Self {
        OpError::Failed(e.to_string())
    }
}

impl From<GitError> for OpError {
    fn from(e: GitError) -> Self {
        OpError::Failed(e.to_string())
    }
}

type OpResult = Result<String, OpError>;

pub(crate) struct Ctx<'a> {
    pub root: &'a Path,
    pub cwd: String,
    pub timeout: Duration,
}

fn is_internal(rel: &str) -> bool {
    rel.split('/').any(|part| part == STATE_DIR)
}

fn has_glob(s: &str) -> bool {
    s.contains(['*', '?', '[', '{'])
}

impl<'a> Ctx<'a> {
    pub fn new(root: &'a Path, args: &Args, timeout: Duration) -> Result<Self, OpError> {
        let cwd = match args.get("cwd").and_then(ArgValue::as_str) {
            Some(c) => join_inside("", c)?,
            None => String::new(),
        };
        let ctx = Ctx { root, cwd, timeout };
        let abs = ctx.checked(&ctx.cwd)?;
        if !abs.is_dir() {
            return Err(OpError::Failed(format!("working directory `{}` does not exist", ctx.cwd)));
        }
        Ok(ctx)
    }

    fn rel(&self, arg: &str) -> Result<String, OpError> {
        let rel = join_inside(&self.cwd, arg)?;
        if is_internal(&rel) {
            return Err(OpError::Sandbox(arg.to_string()));
        }
        Ok(rel)
    }

    /// Sandbox-checks a root-relative path; returns the lexical absolute path.
    fn checked(&self, rel: &str) -> Result<PathBuf, OpError> {
        resolve(self.root, rel)?;
        Ok(if rel.is_empty() { self.root.to_path_buf() } else { self.root.join(rel) })
    }

    fn path(&self, arg: &str) -> Result<(String, PathBuf), OpError> {
        let rel = self.rel(arg)?;
        let abs = self.checked(&rel)?;
        Ok((rel, abs))
    }

    fn git(&self, args: &[&str]) -> OpResult {
        let dir = self.checked(&self.cwd)?;
        Ok(git::run(&dir, self.root, args, self.timeout)?)
    }

    /// Root-relative files selected by a literal path or a glob relative to
    /// the working directory, filtered by minimum size.
    fn select(&self, pattern: &str, min_size: Option<u64>) -> Result<Vec<String>, OpError> {
        if !has_glob(pattern) {
            let (rel, abs) = self.path(pattern)?;
            let meta =
                fs::symlink_metadata(&abs).map_err(|_| OpError::Failed(format!("`{pattern}` does not exist")))?;
            if min_size.is_some_and(|m| meta.len() < m) {
                return Ok(vec![]);
            }
            return Ok(vec![rel]);
        }
        let matcher = GlobBuilder::new(pattern.trim_start_matches("./"))
            .literal_separator(true)
            .build()
            .map_err(|e| OpError::Failed(format!("bad pattern `{pattern}`: {e}")))?
            .compile_matcher();
        let base = self.checked(&self.cwd)?;
        let skip = |rel: &str| {
            let name = rel.rsplit('/').next().unwrap_or(rel);
            name == ".git" || name == STATE_DIR || name.ends_with(".git")
        };
        let mut out = Vec::new();
        for (rel, meta) in walk(&base, &skip)? {
            if meta.is_file() && matcher.is_match(&rel) && min_size.is_none_or(|m| meta.len() >= m) {
                let full = join_inside(&self.cwd, &rel)?;
                self.checked(&full)?;
                out.push(full);
            }
        }
        Ok(out)
    }

    fn display(&self, rel: &str) -> String {
        if self.cwd.is_empty() {
            rel.to_string()
        } else if rel == self.cwd {
            String::new()
        } else {
            rel.strip_prefix(&format!("{}/", self.cwd)).unwrap_or(rel).to_string()
        }
    }
}

fn s<'a>(args: &'a Args, key: &str) -> Result<&'a str, OpError> {
    args.get(key).and_then(ArgValue::as_str).ok_or_else(|| OpError::Failed(format!("missing `{key}`")))
}

fn size(args: &Args, key: &str) -> Option<u64> {
    args.get(key).and_then(ArgValue::as_bytes)
}

fn flag(args: &Args, key: &str) -> bool {
    args.get(key).and_then(ArgValue::as_flag).unwrap_or(false)
}

pub(crate) fn run(api: &str, args: &Args, root: &Path, timeout: Duration) -> OpResult {
    let ctx = Ctx::new(root, args, timeout)?;
    match api {
        "fs.list" => fs_list(&ctx, s(args, "path")?),
        "fs.find" => {
            let found = ctx.select(s(args, "pattern")?, size(args, "min_size"))?;
            Ok(found.iter().map(|p| ctx.display(p)).collect::<Vec<_>>().join("\n"))
        }
        "fs.mkdir" => {
            let (rel, abs) = ctx.path(s(args, "path")?)?;
            if abs.exists() && !abs.is_dir() {
                return Err(OpError::Failed(format!("`{rel}` exists and is not a directory")));
            }
            fs::create_dir_all(&abs)?;
            Ok(format!("created {}", ctx.display(&rel)))
        }
        "fs.write" => {
            let (rel, abs) = ctx.path(s(args, "path")?)?;
            if abs.is_dir() {
                return Err(OpError::Failed(format!("`{rel}` is a directory")));
            }
            if let Some(parent) = abs.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&abs, s(args, "content")?)?;
            Ok(format!("wrote {}", ctx.display(&rel)))
        }
        "fs.copy" => transfer(&ctx, s(args, "src")?, s(args, "dst")?, None, false),
        "fs.move" => transfer(&ctx, s(args, "src")?, s(args, "dst")?, size(args, "min_size"), true),
        "fs.remove" => fs_remove(&ctx, args),
        "fs.rename_suffix" => rename_suffix(&ctx, s(args, "pattern")?, s(args, "suffix")?, size(args, "min_size")),
        "fs.touch" => {
            let (rel, abs) = ctx.path(s(args, "path")?)?;
            if !abs.exists() {
                if let Some(parent) = abs.parent() {
                    fs::create_dir_all(parent)?;
                }
                fs::write(&abs, b"")?;
            }
            Ok(format!("touched {}", ctx.display(&rel)))
        }
        "fs.append" => {
            use std::io::Write;
            let (rel, abs) = ctx.path(s(args, "path")?)?;
            let mut f = fs::OpenOptions::new().create(true).append(true).open(&abs)?;
            writeln!(f, "{}", args.get("text").and_then(ArgValue::as_str).unwrap_or(""))?;
            Ok(format!("appended to {}", ctx.display(&rel)))
        }
        "fs.truncate" => {
            let (rel, abs) = ctx.path(s(args, "path")?)?;
            let f =
                fs::OpenOptions::new().write(true).open(&abs).map_err(|e| OpError::Failed(format!("{rel}: {e}")))?;
            f.set_len(size(args, "size").unwrap_or(0))?;
            Ok(format!("truncated {}", ctx.display(&rel)))
        }
        "git.status" => ctx.git(&["status", "--short", "--branch"]),
        "git.log" => {
            let n = match args.get("count") {
                Some(ArgValue::Integer(n)) => *n,
                _ => 10,
            };
            ctx.git(&["log", "--oneline", "-n", &n.to_string()])
        }
        "git.undo_last_commit" => {
            ctx.git(&["reset", "-q", "--soft", "HEAD~1"])?;
            Ok(ctx.git(&["log", "--oneline", "-n", "1"])?.trim().to_string())
        }
        "git.rm_cached" => rm_cached(&ctx, s(args, "pattern")?, size(args, "min_size")),
        "git.ignore" => git_ignore(&ctx, s(args, "path")?),
        "git.add" => {
            let (rel, _) = ctx.path(s(args, "path")?)?;
            let target = ctx.display(&rel);
            ctx.git(&["add", "--", if target.is_empty() { "." } else { &target }])?;
            Ok(format!("staged {target}"))
        }
        "git.commit" => {
            ctx.git(&["commit", "-q", "-m", s(args, "message")?])?;
            Ok(ctx.git(&["log", "--oneline", "-n", "1"])?.trim().to_string())
        }
        "git.commit_amend" => {
            match args.get("message").and_then(ArgValue::as_str) {
                Some(m) if !flag(args, "no_edit") => ctx.git(&["commit", "-q", "--amend", "-m", m])?,
                _ => ctx.git(&["commit", "-q", "--amend", "--no-edit"])?,
            };
            Ok(ctx.git(&["log", "--oneline", "-n", "1"])?.trim().to_string())
        }
        "git.push" => git_push(&ctx, s(args, "remote")?, s(args, "branch")?, flag(args, "force")),
        "backup.add" => settings_update(&ctx, "backup.json", s(args, "path")?, |entry| {
            entry.insert("enrolled".into(), "true".into());
            if let Some(label) = args.get("label").and_then(ArgValue::as_str) {
                entry.insert("label".into(), label.into());
            }
        }),
        "backup.schedule" => {
            let freq = s(args, "frequency")?.to_string();
            settings_update(&ctx, "backup.json", s(args, "path")?, |entry| {
                entry.insert("frequency".into(), freq.clone());
            })
        }
        "storage.pin_local" => {
            let device = s(args, "device")?.to_string();
            settings_update(&ctx, "storage.json", s(args, "path")?, |entry| {
                entry.insert("placement".into(), "local".into());
                entry.insert("device".into(), device.clone());
            })
        }
        other => Err(OpError::Failed(format!("no implementation for `{other}`"))),
    }
}

fn fs_list(ctx: &Ctx, path: &str) -> OpResult {
    let (rel, abs) = ctx.path(path)?;
    if !abs.is_dir() {
        return Err(OpError::Failed(format!("`{}` is not a directory", ctx.display(&rel))));
    }
    let mut names: Vec<String> = fs::read_dir(&abs)?
        .filter_map(|e| e.ok())
        .map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            if e.path().is_dir() {
                format!("{name}/")
            } else {
                name
            }
        })
        .filter(|n| n.trim_end_matches('/') != STATE_DIR)
        .collect();
    names.sort();
    Ok(names.join("\n"))
}

fn copy_any(src: &Path, dst: &Path) -> std::io::Result<()> {
    let meta = fs::symlink_metadata(src)?;
    if meta.file_type().is_symlink() {
        std::os::unix::fs::symlink(fs::read_link(src)?, dst)
    } else if meta.is_dir() {
        crate::workspace::copy_tree(src, dst)
    } else {
        fs::copy(src, dst).map(|_| ())
    }
}

fn transfer(ctx: &Ctx, src: &str, dst: &str, min_size: Option<u64>, remove_src: bool) -> OpResult {
    let sources = ctx.select(src, min_size)?;
    if sources.is_empty() {
        return Err(OpError::Failed(format!("nothing matches `{src}`")));
    }
    let (dst_rel, dst_abs) = ctx.path(dst)?;
    let into_dir = dst.ends_with('/') || dst_abs.is_dir() || sources.len() > 1;
    if into_dir {
        if dst_abs.exists() && !dst_abs.is_dir() {
            return Err(OpError::Failed(format!("`{dst}` is not a directory")));
        }
        fs::create_dir_all(&dst_abs)?;
    } else if let Some(parent) = dst_abs.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut lines = Vec::new();
    for rel in sources {
        let from = ctx.checked(&rel)?;
        let name = rel.rsplit('/').next().unwrap_or(&rel);
        let (to_rel, to) = if into_dir {
            let r = if dst_rel.is_empty() { name.to_string() } else { format!("{dst_rel}/{name}") };
            (r.clone(), ctx.checked(&r)?)
        } else {
            (dst_rel.clone(), dst_abs.clone())
        };
        if to_rel == rel {
            continue;
        }
        if to_rel.starts_with(&format!("{rel}/")) {
            return Err(OpError::Failed(format!("cannot place `{rel}` inside itself")));
        }
        if fs::symlink_metadata(&to).is_ok() {
            return Err(OpError::Failed(format!("`{}` already exists", ctx.display(&to_rel))));
        }
        if remove_src {
            fs::rename(&from, &to)?;
        } else {
            copy_any(&from, &to)?;
        }
        lines.push(format!("{} -> {}", ctx.display(&rel), ctx.display(&to_rel)));
    }
    Ok(lines.join("\n"))
}

fn fs_remove(ctx: &Ctx, args: &Args) -> OpResult {
    let paths: Vec<String> = match args.get("paths") {
        Some(ArgValue::Paths(p)) => p.clone(),
        Some(ArgValue::Path(p)) | Some(ArgValue::String(p)) => vec![p.clone()],
        _ => return Err(OpError::Failed("missing `paths`".into())),
    };
    let mut targets = Vec::new();
    for p in &paths {
        let found = ctx.select(p, None)?;
        if found.is_empty() {
            return Err(OpError::Failed(format!("nothing matches `{p}`")));
        }
        targets.extend(found);
    }
    targets.sort();
    targets.dedup();
    for rel in &targets {
        if rel.is_empty() || rel == &ctx.cwd {
            return Err(OpError::Failed("refusing to remove the working directory".into()));
        }
    }
    for rel in &targets {
        let abs = ctx.checked(rel)?;
        match fs::symlink_metadata(&abs) {
            Ok(m) if m.is_dir() => fs::remove_dir_all(&abs)?,
            Ok(_) => fs::remove_file(&abs)?,
            // already gone with a removed parent
            Err(_) => {}
        }
    }
    Ok(targets.iter().map(|t| format!("removed {}", ctx.display(t))).collect::<Vec<_>>().join("\n"))
}

fn with_suffix(name: &str, suffix: &str) -> String {
    match name.rfind('.') {
        Some(i) if i > 0 => format!("{}{suffix}{}", &name[..i], &name[i..]),
        _ => format!("{name}{suffix}"),
    }
}

fn rename_suffix(ctx: &Ctx, pattern: &str, suffix: &str, min_size: Option<u64>) -> OpResult {
    let files = ctx.select(pattern, min_size)?;
    if files.is_empty() {
        return Err(OpError::Failed(format!("nothing matches `{pattern}`")));
    }
    let mut lines = Vec::new();
    for rel in files {
        let (dir, name) = match rel.rfind('/') {
            Some(i) => (&rel[..i + 1], &rel[i + 1..]),
            None => ("", rel.as_str()),
        };
        let to_rel = format!("{dir}{}", with_suffix(name, suffix));
        let to = ctx.checked(&to_rel)?;
        if fs::symlink_metadata(&to).is_ok() {
            return Err(OpError::Failed(format!("`{}` already exists", ctx.display(&to_rel))));
        }
        fs::rename(ctx.checked(&rel)?, &to)?;
        lines.push(format!("{} -> {}", ctx.display(&rel), ctx.display(&to_rel)));
    }
    Ok(lines.join("\n"))
}

fn rm_cached(ctx: &Ctx, pattern: &str, min_size: Option<u64>) -> OpResult {
    let listed = ctx.git(&["ls-files", "-z", "--cached"])?;
    let matcher = GlobBuilder::new(pattern.trim_start_matches("./"))
        .literal_separator(true)
        .build()
        .map_err(|e| OpError::Failed(format!("bad pattern `{pattern}`: {e}")))?
        .compile_matcher();
    let mut chosen = Vec::new();
    for path in listed.split('\0').filter(|p| !p.is_empty()) {
        if !matcher.is_match(path) {
            continue;
        }
        if let Some(min) = min_size {
            let on_disk = fs::metadata(ctx.checked(&join_inside(&ctx.cwd, path)?)?).map(|m| m.len()).ok();
            let size = match on_disk {
                Some(s) => s,
                None => ctx.git(&["cat-file", "-s", &format!(":{path}")])?.trim().parse().unwrap_or(0),
            };
            if size < min {
                continue;
            }
        }
        chosen.push(path.to_string());
    }
    if chosen.is_empty() {
        return Err(OpError::Failed(format!("no tracked files match `{pattern}`")));
    }
    let mut argv = vec!["rm", "--cached", "-q", "--"];
    argv.extend(chosen.iter().map(String::as_str));
    ctx.git(&argv)?;
    Ok(chosen.iter().map(|p| format!("untracked {p}")).collect::<Vec<_>>().join("\n"))
}

fn git_ignore(ctx: &Ctx, path: &str) -> OpResult {
    let (rel, _) = ctx.path(path)?;
    let mut entry = ctx.display(&rel);
    if path.ends_with('/') && !entry.ends_with('/') {
        entry.push('/');
    }
    let file_rel = join_inside(&ctx.cwd, ".gitignore")?;
    let file = ctx.checked(&file_rel)?;
    let mut text = fs::read_to_string(&file).unwrap_or_default();
    if text.lines().any(|l| l.trim() == entry) {
        return Ok(format!("{entry} already ignored"));
    }
    if !text.is_empty() && !text.ends_with('\n') {
        text.push('\n');
    }
    text.push_str(&entry);
    text.push('\n');
    fs::write(&file, text)?;
    ctx.git(&["add", "--", ".gitignore"])?;
    Ok(format!("ignored {entry}"))
}

fn git_push(ctx: &Ctx, remote: &str, branch: &str, force: bool) -> OpResult {
    let url = ctx.git(&["remote", "get-url", remote])?.trim().to_string();
    if url.contains("://") || url.contains('@') || url.contains(':') {
        return Err(OpError::Sandbox(format!("remote `{remote}` points at {url}")));
    }
    let top = ctx.git(&["rev-parse", "--show-toplevel"])?.trim().to_string();
    let top_rel = Path::new(&top)
        .strip_prefix(std::fs::canonicalize(ctx.root)?)
        .map(|p| p.to_string_lossy().into_owned())
        .map_err(|_| OpError::Sandbox(top.clone()))?;
    let target = join_inside(&top_rel, &url)?;
    ctx.checked(&target)?;
    let refspec = format!("HEAD:refs/heads/{branch}");
    let mut argv = vec!["push", "-q"];
    if force {
        argv.push("--force");
    }
    argv.extend([remote, refspec.as_str()]);
    ctx.git(&argv)?;
    let head = ctx.git(&["rev-parse", "--short", "HEAD"])?;
    Ok(format!("pushed {} to {remote}/{branch}", head.trim()))
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Settings {
    entries: BTreeMap<String, BTreeMap<String, String>>,
}

fn settings_update(ctx: &Ctx, file: &str, path: &str, edit: impl FnOnce(&mut BTreeMap<String, String>)) -> OpResult {
    let (rel, abs) = ctx.path(path)?;
    if !abs.exists() {
        return Err(OpError::Failed(format!("`{path}` does not exist")));
    }
    let dir = ctx.checked(SETTINGS_DIR)?;
    fs::create_dir_all(&dir)?;
    let target = dir.join(file);
    let mut settings: Settings = match fs::read(&target) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| OpError::Failed(format!("{file}: {e}")))?,
        Err(_) => Settings::default(),
    };
    edit(settings.entries.entry(rel.clone()).or_default());
    let mut text = serde_json::to_string_pretty(&settings).expect("settings serialize");
    text.push('\n');
    fs::write(&target, text)?;
    let summary = settings.entries[&rel].iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(", ");
    Ok(format!("{rel}: {summary}"))
}
