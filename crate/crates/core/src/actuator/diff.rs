//! Git-style previews of tree changes.

use serde::{Deserialize, Serialize};
use similar::TextDiff;

use crate::workspace::{Entry, Manifest};

/// Files above this size are summarized rather than diffed line by line.
pub const TEXT_DIFF_LIMIT: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileStatus {
    Added,
    Removed,
    Modified,
    Renamed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDiff {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub old_path: Option<String>,
    pub status: FileStatus,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffSummary {
    pub added: usize,
    pub removed: usize,
    pub modified: usize,
    pub moved: usize,
    pub bytes_moved: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreviewDiff {
    pub files: Vec<FileDiff>,
    pub summary: DiffSummary,
}

impl PreviewDiff {
    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn text(&self) -> String {
        self.files.iter().map(|f| f.text.as_str()).collect()
    }

    pub fn touches(&self, path: &str) -> bool {
        self.files.iter().any(|f| f.path == path || f.old_path.as_deref() == Some(path))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Before,
    After,
}

/// Repository internals and bare repositories stay out of previews.
pub fn is_repo_internal(path: &str) -> bool {
    path.split('/').any(|part| part == ".git" || part.ends_with(".git"))
}

fn comparable(entry: &Entry) -> Option<(&str, u32)> {
    match entry {
        Entry::File { sha, mode, .. } => Some((sha, *mode)),
        Entry::Link { target } => Some((target, 0o120000)),
        Entry::Dir { .. } => None,
    }
}

fn strip<'a>(path: &'a str, prefix: &str) -> &'a str {
    if prefix.is_empty() {
        path
    } else {
        path.strip_prefix(prefix).and_then(|p| p.strip_prefix('/')).unwrap_or(path)
    }
}

fn git_mode(mode: u32) -> String {
    if mode == 0o120000 {
        "120000".into()
    } else {
        format!("100{:03o}", mode & 0o777)
    }
}

fn short(id: &str) -> &str {
    &id[..id.len().min(7)]
}

/// Reads the bytes of one side of a changed entry, if still available.
pub type ContentLoader<'a> = dyn Fn(Side, &str, &Entry) -> Option<Vec<u8>> + 'a;

/// Diffs two manifests. `load` supplies file bytes for each side; paths in the
/// rendered text are shown relative to `display_prefix`.
pub fn diff_manifests(before: &Manifest, after: &Manifest, display_prefix: &str, load: &ContentLoader) -> PreviewDiff {
    let visible = |m: &Manifest| -> Vec<(String, Entry)> {
        m.iter()
            .filter(|(p, e)| !is_repo_internal(p) && comparable(e).is_some())
            .map(|(p, e)| (p.clone(), e.clone()))
            .collect()
    };
    let b = visible(before);
    let a = visible(after);
    let b_map: std::collections::BTreeMap<_, _> = b.iter().cloned().collect();
    let a_map: std::collections::BTreeMap<_, _> = a.iter().cloned().collect();
    let mut removed: Vec<&String> = b_map.keys().filter(|p| !a_map.contains_key(*p)).collect();
    let mut added: Vec<&String> = a_map.keys().filter(|p| !b_map.contains_key(*p)).collect();

    let mut files = Vec::new();
    let mut summary = DiffSummary::default();

    let mut renames = Vec::new();
    removed.retain(|old| {
        let key = comparable(&b_map[*old]);
        if let Some(pos) = added.iter().position(|new| comparable(&a_map[*new]) == key) {
            renames.push(((*old).clone(), added.remove(pos).clone()));
            false
        } else {
            true
        }
    });
    for (old, new) in renames {
        let (o, n) = (strip(&old, display_prefix), strip(&new, display_prefix));
        summary.moved += 1;
        summary.bytes_moved += b_map[&old].size();
        files.push(FileDiff {
            path: new.clone(),
            old_path: Some(old.clone()),
            status: FileStatus::Renamed,
            text: format!(
                "diff --git a/{o} b/{n}\nsimilarity index 100%\nrename from {o}\nrename to {n}\n--- a/{o}\n+++ b/{n}\n"
            ),
        });
    }
    for path in added {
        summary.added += 1;
        let entry = &a_map[path];
        files.push(FileDiff {
            path: path.clone(),
            old_path: None,
            status: FileStatus::Added,
            text: render(display_prefix, path, None, Some(entry), load),
        });
    }
    for path in removed {
        summary.removed += 1;
        let entry = &b_map[path];
        files.push(FileDiff {
            path: path.clone(),
            old_path: None,
            status: FileStatus::Removed,
            text: render(display_prefix, path, Some(entry), None, load),
        });
    }
    for (path, old) in &b_map {
        if let Some(new) = a_map.get(path) {
            if old != new {
                summary.modified += 1;
                files.push(FileDiff {
                    path: path.clone(),
                    old_path: None,
                    status: FileStatus::Modified,
                    text: render(display_prefix, path, Some(old), Some(new), load),
                });
            }
        }
    }
    files.sort_by(|x, y| x.path.cmp(&y.path));
    PreviewDiff { files, summary }
}

fn text_of(bytes: &[u8]) -> Option<&str> {
    if bytes.contains(&0) {
        return None;
    }
    std::str::from_utf8(bytes).ok()
}

fn render(prefix: &str, path: &str, before: Option<&Entry>, after: Option<&Entry>, load: &ContentLoader) -> String {
    let p = strip(path, prefix);
    let mut out = format!("diff --git a/{p} b/{p}\n");
    let id = |e: Option<&Entry>| {
        e.and_then(comparable).map(|(s, _)| short(s).to_string()).unwrap_or_else(|| "0000000".into())
    };
    let mode = |e: Option<&Entry>| e.and_then(comparable).map(|(_, m)| m).unwrap_or(0);
    match (before, after) {
        (None, Some(_)) => out.push_str(&format!("new file mode {}\n", git_mode(mode(after)))),
        (Some(_), None) => out.push_str(&format!("deleted file mode {}\n", git_mode(mode(before)))),
        _ => {
            if mode(before) != mode(after) {
                out.push_str(&format!("old mode {}\nnew mode {}\n", git_mode(mode(before)), git_mode(mode(after))));
            }
        }
    }
    let same_content = before.and_then(comparable).map(|c| c.0) == after.and_then(comparable).map(|c| c.0);
    if same_content {
        return out;
    }
    out.push_str(&format!("index {}..{}", id(before), id(after)));
    if before.is_some() && after.is_some() {
        out.push_str(&format!(" {}", git_mode(mode(after))));
    }
    out.push('\n');
    let from = if before.is_some() { format!("a/{p}") } else { "/dev/null".into() };
    let to = if after.is_some() { format!("b/{p}") } else { "/dev/null".into() };
    let too_big =
        before.map(Entry::size).unwrap_or(0) > TEXT_DIFF_LIMIT || after.map(Entry::size).unwrap_or(0) > TEXT_DIFF_LIMIT;
    let fetch = |side, e: Option<&Entry>| match e {
        Some(e) if !too_big => load(side, path, e).unwrap_or_default(),
        _ => Vec::new(),
    };
    let old_bytes = fetch(Side::Before, before);
    let new_bytes = fetch(Side::After, after);
    match (too_big, text_of(&old_bytes), text_of(&new_bytes)) {
        (false, Some(old), Some(new)) => {
            let diff = TextDiff::from_lines(old, new);
            out.push_str(&diff.unified_diff().context_radius(3).header(&from, &to).to_string());
        }
        _ => out.push_str(&format!("Binary files {from} and {to} differ\n")),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(sha: &str, size: u64) -> Entry {
        Entry::File { mode: 0o644, sha: sha.into(), size }
    }

    #[test]
    fn rename_is_detected_by_content() {
        let before: Manifest = [("HappyDog/dogs.csv".to_string(), file("aa", 12))].into();
        let after: Manifest = [("HappyDog/data/dogs_large.csv".to_string(), file("aa", 12))].into();
        let d = diff_manifests(&before, &after, "HappyDog", &|_, _, _| None);
        assert_eq!(d.files.len(), 1);
        assert_eq!(d.summary.moved, 1);
        assert_eq!(d.summary.bytes_moved, 12);
        let text = d.text();
        assert!(text.contains("--- a/dogs.csv\n+++ b/data/dogs_large.csv\n"), "{text}");
    }

    #[test]
    fn modified_text_gets_unified_hunk() {
        let before: Manifest = [("n.txt".to_string(), file("aa", 4))].into();
        let after: Manifest = [("n.txt".to_string(), file("bb", 4))].into();
        let d = diff_manifests(&before, &after, "", &|side, _, _| {
            Some(if side == Side::Before { b"one\n".to_vec() } else { b"two\n".to_vec() })
        });
        let text = d.text();
        assert!(text.contains("index aa..bb 100644"));
        assert!(text.contains("-one\n+two\n"), "{text}");
    }

    #[test]
    fn internals_are_hidden_and_identity_is_empty() {
        let m: Manifest = [("p/.git/index".to_string(), file("aa", 1))].into();
        let d = diff_manifests(&Manifest::new(), &m, "", &|_, _, _| None);
        assert!(d.is_empty());
        assert!(diff_manifests(&m, &m, "", &|_, _, _| None).is_empty());
    }
}
