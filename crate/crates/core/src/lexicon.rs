//! Grammar rules and the verb→API mapping table, versioned together.
//!
//! A lexicon directory holds `grammar.vN.json` and `mapping.vN.json` pairs;
//! the highest version with both files present is the live one.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ApiRegistry;

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("grammar load error: {0}")]
    GrammarLoad(String),
    #[error("no lexicon versions found in {0}")]
    NoVersions(PathBuf),
    #[error("lexicon io: {0}")]
    Io(#[from] std::io::Error),
}

/// One grammar rule as stored on disk.
///
/// Rules with a `verb` are matched against a whole clause and emit a task.
/// Rules without a verb are context rules: they are searched in every clause
/// and only update context variables (`sets`); one that matches a clause in
/// full consumes it as filler.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleDef {
    pub pattern: String,
    pub verb: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sets: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Rule {
    pub def: RuleDef,
    pub regex: Regex,
}

#[derive(Debug, Clone)]
pub struct Grammar {
    pub rules: Vec<Rule>,
}

impl Grammar {
    pub fn from_defs(defs: Vec<RuleDef>) -> Result<Self, LexiconError> {
        let mut rules = Vec::with_capacity(defs.len());
        for def in defs {
            let regex = RegexBuilder::new(&def.pattern)
                .case_insensitive(true)
                .build()
                .map_err(|e| LexiconError::GrammarLoad(format!("rule `{}`: {e}", def.pattern)))?;
            for tpl in def.params.values().chain(def.sets.values()).chain(def.object.iter()) {
                Template::parse(tpl).map_err(LexiconError::GrammarLoad)?;
            }
            rules.push(Rule { def, regex });
        }
        Ok(Grammar { rules })
    }

    pub fn from_json(text: &str) -> Result<Self, LexiconError> {
        let defs: Vec<RuleDef> = serde_json::from_str(text).map_err(|e| LexiconError::GrammarLoad(e.to_string()))?;
        Self::from_defs(defs)
    }

    pub fn defs(&self) -> Vec<RuleDef> {
        self.rules.iter().map(|r| r.def.clone()).collect()
    }

    /// A copy without any rule emitting `verb`.
    pub fn without_verb(&self, verb: &str) -> Grammar {
        Grammar { rules: self.rules.iter().filter(|r| r.def.verb.as_deref() != Some(verb)).cloned().collect() }
    }

    pub fn verb_rules(&self) -> impl Iterator<Item = &Rule> {
        self.rules.iter().filter(|r| r.def.verb.is_some())
    }

    pub fn context_rules(&self) -> impl Iterator<Item = &Rule> {
        self.rules.iter().filter(|r| r.def.verb.is_none())
    }
}

/// Where candidate answers for a slot come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateSource {
    RemoteBranches,
}

/// A named question that binds one or more API params at once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotDef {
    pub name: String,
    pub params: Vec<String>,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<CandidateSource>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiBinding {
    pub api: String,
    /// task param → api param
    pub params: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slots: Vec<SlotDef>,
}

impl ApiBinding {
    /// The slot that owns `param`, or an implicit single-param slot.
    pub fn slot_for(&self, param: &str) -> SlotDef {
        self.slots.iter().find(|s| s.params.iter().any(|p| p == param)).cloned().unwrap_or_else(|| SlotDef {
            name: param.to_string(),
            params: vec![param.to_string()],
            question: format!("What value should I use for {}?", param.replace('_', " ")),
            candidates: None,
        })
    }
}

pub type VerbMap = BTreeMap<String, Vec<ApiBinding>>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SelectError {
    #[error("no registered api for verb `{0}`")]
    Unmappable(String),
    #[error("verb `{verb}` is ambiguous between {apis:?}")]
    Tie { verb: String, apis: Vec<String> },
}

#[derive(Debug, Clone)]
pub struct Lexicon {
    pub version: u32,
    pub grammar: Grammar,
    pub mapping: VerbMap,
}

impl Lexicon {
    pub fn from_json(version: u32, grammar: &str, mapping: &str) -> Result<Self, LexiconError> {
        let grammar = Grammar::from_json(grammar)?;
        let mapping: VerbMap =
            serde_json::from_str(mapping).map_err(|e| LexiconError::GrammarLoad(format!("mapping: {e}")))?;
        Ok(Lexicon { version, grammar, mapping })
    }

    /// The lexicon shipped with the crate: version 1 covers the base
    /// registry, version 2 adds the three extension operations.
    pub fn builtin(version: u32) -> Self {
        let (g, m) = match version {
            1 => (include_str!("../data/lexicon/grammar.v1.json"), include_str!("../data/lexicon/mapping.v1.json")),
            2 => (include_str!("../data/lexicon/grammar.v2.json"), include_str!("../data/lexicon/mapping.v2.json")),
            other => panic!("no builtin lexicon v{other}"),
        };
        Self::from_json(version, g, m).expect("shipped lexicon is valid")
    }

    pub fn builtin_files(version: u32) -> (&'static str, &'static str) {
        match version {
            1 => (include_str!("../data/lexicon/grammar.v1.json"), include_str!("../data/lexicon/mapping.v1.json")),
            2 => (include_str!("../data/lexicon/grammar.v2.json"), include_str!("../data/lexicon/mapping.v2.json")),
            other => panic!("no builtin lexicon v{other}"),
        }
    }

    /// Picks the binding for a task: among registered candidates, the one
    /// consuming the most of the task's params wins; a tie is an error.
    pub fn select<'a>(
        &'a self,
        verb: &str,
        task_params: &BTreeMap<String, String>,
        registry: &ApiRegistry,
    ) -> Result<&'a ApiBinding, SelectError> {
        let candidates = self.mapping.get(verb).ok_or_else(|| SelectError::Unmappable(verb.to_string()))?;
        let mut scored: Vec<(usize, &ApiBinding)> = candidates
            .iter()
            .filter_map(|b| {
                let spec = registry.get(&b.api).ok()?;
                let bound = task_params
                    .keys()
                    .filter(|k| b.params.get(*k).is_some_and(|api_param| spec.param(api_param).is_some()))
                    .count();
                Some((bound, b))
            })
            .collect();
        if scored.is_empty() {
            return Err(SelectError::Unmappable(verb.to_string()));
        }
        scored.sort_by_key(|s| std::cmp::Reverse(s.0));
        let best = scored[0].0;
        let top: Vec<_> = scored.iter().take_while(|(s, _)| *s == best).collect();
        if top.len() > 1 {
            return Err(SelectError::Tie {
                verb: verb.to_string(),
                apis: top.iter().map(|(_, b)| b.api.clone()).collect(),
            });
        }
        Ok(scored[0].1)
    }
}

/// Versioned lexicon directory.
#[derive(Debug, Clone)]
pub struct LexiconStore {
    dir: PathBuf,
}

impl LexiconStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        LexiconStore { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes a builtin version's files into the store.
    pub fn install_builtin(&self, version: u32) -> Result<(), LexiconError> {
        std::fs::create_dir_all(&self.dir)?;
        let (g, m) = Lexicon::builtin_files(version);
        std::fs::write(self.dir.join(format!("grammar.v{version}.json")), g)?;
        std::fs::write(self.dir.join(format!("mapping.v{version}.json")), m)?;
        Ok(())
    }

    pub fn versions(&self) -> Result<Vec<u32>, LexiconError> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&self.dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(v) = name.strip_prefix("grammar.v").and_then(|s| s.strip_suffix(".json")) {
                if let Ok(v) = v.parse::<u32>() {
                    if self.dir.join(format!("mapping.v{v}.json")).exists() {
                        out.push(v);
                    }
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    pub fn load(&self, version: u32) -> Result<Lexicon, LexiconError> {
        let g = std::fs::read_to_string(self.dir.join(format!("grammar.v{version}.json")))?;
        let m = std::fs::read_to_string(self.dir.join(format!("mapping.v{version}.json")))?;
        Lexicon::from_json(version, &g, &m)
    }

    pub fn load_latest(&self) -> Result<Lexicon, LexiconError> {
        let latest = *self.versions()?.last().ok_or_else(|| LexiconError::NoVersions(self.dir.clone()))?;
        self.load(latest)
    }
}

/// Parameter template: literal text with `{name}` holes.
///
/// Hole forms: `{x}` capture or `$var`; `{x|lower}`; `{x=default}`;
/// `{x?text}` (text when x is present). A plain hole whose value is absent
/// makes the whole template absent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    parts: Vec<Part>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Part {
    Lit(String),
    Hole { name: String, op: HoleOp },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum HoleOp {
    Plain,
    Lower,
    Default(String),
    IfPresent(String),
}

impl Template {
    pub fn parse(src: &str) -> Result<Self, String> {
        let mut parts = Vec::new();
        let mut rest = src;
        while let Some(open) = rest.find('{') {
            if open > 0 {
                parts.push(Part::Lit(rest[..open].to_string()));
            }
            let close = rest[open..].find('}').ok_or_else(|| format!("unclosed hole in `{src}`"))? + open;
            let body = &rest[open + 1..close];
            let (name, op) = if let Some((n, d)) = body.split_once('=') {
                (n, HoleOp::Default(d.to_string()))
            } else if let Some((n, t)) = body.split_once('?') {
                (n, HoleOp::IfPresent(t.to_string()))
            } else if let Some((n, f)) = body.split_once('|') {
                if f != "lower" {
                    return Err(format!("unknown filter `{f}` in `{src}`"));
                }
                (n, HoleOp::Lower)
            } else {
                (body, HoleOp::Plain)
            };
            let bare = name.strip_prefix('$').unwrap_or(name);
            if bare.is_empty() || !bare.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(format!("bad hole name `{name}` in `{src}`"));
            }
            parts.push(Part::Hole { name: name.to_string(), op });
            rest = &rest[close + 1..];
        }
        if !rest.is_empty() {
            parts.push(Part::Lit(rest.to_string()));
        }
        Ok(Template { parts })
    }

    /// Renders with `lookup`; `None` when a required hole is unbound or the
    /// result is empty.
    pub fn render<'a>(&self, lookup: impl Fn(&str) -> Option<&'a str>) -> Option<String> {
        let mut out = String::new();
        for part in &self.parts {
            match part {
                Part::Lit(s) => out.push_str(s),
                Part::Hole { name, op } => {
                    let value = lookup(name).filter(|v| !v.is_empty());
                    match op {
                        HoleOp::Plain => out.push_str(value?),
                        HoleOp::Lower => out.push_str(&value?.to_lowercase()),
                        HoleOp::Default(d) => out.push_str(value.unwrap_or(d)),
                        HoleOp::IfPresent(t) => {
                            if value.is_some() {
                                out.push_str(t)
                            }
                        }
                    }
                }
            }
        }
        (!out.is_empty()).then_some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_forms() {
        let vars: BTreeMap<&str, &str> = [("ext", "CSV"), ("$dir", "data"), ("force", "force ")].into();
        let get = |k: &str| vars.get(k).copied();
        assert_eq!(Template::parse("*.{ext|lower}").unwrap().render(get).as_deref(), Some("*.csv"));
        assert_eq!(Template::parse("{$dir}/").unwrap().render(get).as_deref(), Some("data/"));
        assert_eq!(Template::parse("{path=.}").unwrap().render(get).as_deref(), Some("."));
        assert_eq!(Template::parse("{force?true}").unwrap().render(get).as_deref(), Some("true"));
        assert_eq!(Template::parse("{nope?true}").unwrap().render(get), None);
        assert_eq!(Template::parse("{$missing}/x").unwrap().render(get), None);
        assert!(Template::parse("{x|upper}").is_err());
        assert!(Template::parse("{x").is_err());
    }

    #[test]
    fn builtin_lexicons_load() {
        let v1 = Lexicon::builtin(1);
        let v2 = Lexicon::builtin(2);
        assert!(v2.grammar.rules.len() > v1.grammar.rules.len());
        assert!(v2.mapping.contains_key("touch") && !v1.mapping.contains_key("touch"));
    }

    #[test]
    fn most_specific_binding_wins() {
        let lex = Lexicon::builtin(1);
        let reg = ApiRegistry::builtin();
        let p = |pairs: &[(&str, &str)]| pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        assert_eq!(lex.select("list", &p(&[("path", ".")]), &reg).unwrap().api, "fs.list");
        assert_eq!(lex.select("list", &p(&[("pattern", "*.csv"), ("min_size", "1 MB")]), &reg).unwrap().api, "fs.find");
        assert!(matches!(lex.select("list", &p(&[]), &reg), Err(SelectError::Tie { .. })));
        assert!(matches!(lex.select("frobnicate", &p(&[]), &reg), Err(SelectError::Unmappable(_))));
    }

    #[test]
    fn store_picks_latest_complete_version_and_rejects_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let store = LexiconStore::new(dir.path());
        store.install_builtin(1).unwrap();
        store.install_builtin(2).unwrap();
        std::fs::write(dir.path().join("grammar.v3.json"), "[]").unwrap();
        assert_eq!(store.versions().unwrap(), vec![1, 2]);
        assert_eq!(store.load_latest().unwrap().version, 2);
        std::fs::write(dir.path().join("mapping.v3.json"), "{}").unwrap();
        std::fs::write(dir.path().join("grammar.v3.json"), "[{\"pattern\": \"(\"}]").unwrap();
        assert!(matches!(store.load_latest(), Err(LexiconError::GrammarLoad(_))));
    }
}
