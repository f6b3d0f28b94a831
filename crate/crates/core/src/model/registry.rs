//! Whitelisted operation schemas and the versioned registry that holds them.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("api `{0}` is already registered")]
    DuplicateName(String),
    #[error("api `{0}` is not registered")]
    UnknownApi(String),
    #[error("malformed api spec `{name}`: {reason}")]
    Malformed { name: String, reason: String },
    #[error("registry io: {0}")]
    Io(#[from] std::io::Error),
    #[error("registry json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Value kind accepted by an API parameter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    String,
    Path,
    Integer,
    SizeBytes,
    Flag,
    Enum(Vec<String>),
}

impl ParamKind {
    pub fn label(&self) -> &'static str {
        match self {
            ParamKind::String => "string",
            ParamKind::Path => "path",
            ParamKind::Integer => "integer",
            ParamKind::SizeBytes => "size-bytes",
            ParamKind::Flag => "flag",
            ParamKind::Enum(_) => "enum",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    #[serde(default)]
    pub required: bool,
    /// A variadic parameter accepts a list of paths.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub variadic: bool,
}

impl ParamSpec {
    pub fn new(name: &str, kind: ParamKind, required: bool) -> Self {
        Self { name: name.to_string(), kind, required, variadic: false }
    }
}

/// Side-effect class of an API. Drives checkpoint placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Effect {
    ReadOnly,
    Mutating,
    Network,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiSpec {
    /// Dotted identifier such as `git.push`.
    pub name: String,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
    pub effect: Effect,
    #[serde(default)]
    pub description: String,
}

impl ApiSpec {
    pub fn new(name: &str, effect: Effect, params: Vec<ParamSpec>) -> Self {
        Self { name: name.to_string(), params, effect, description: String::new() }
    }

    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn required_params(&self) -> impl Iterator<Item = &ParamSpec> {
        self.params.iter().filter(|p| p.required)
    }

    /// Checks the structural invariants of a spec.
    pub fn check(&self) -> Result<(), RegistryError> {
        let bad = |reason: &str| RegistryError::Malformed { name: self.name.clone(), reason: reason.to_string() };
        let ident_ok = |s: &str| {
            !s.is_empty()
                && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
                && !s.starts_with(|c: char| c.is_ascii_digit())
        };
        let mut parts = self.name.split('.');
        if self.name.split('.').count() < 2 || !parts.all(ident_ok) {
            return Err(bad("name must be a dotted identifier"));
        }
        let mut seen = BTreeSet::new();
        let mut variadic = 0;
        for p in &self.params {
            if !ident_ok(&p.name) {
                return Err(bad(&format!("bad param name `{}`", p.name)));
            }
            if !seen.insert(p.name.as_str()) {
                return Err(bad(&format!("param `{}` declared twice", p.name)));
            }
            if let ParamKind::Enum(values) = &p.kind {
                if values.is_empty() {
                    return Err(bad(&format!("enum param `{}` has no values", p.name)));
                }
            }
            if p.variadic {
                if p.kind != ParamKind::Path {
                    return Err(bad(&format!("variadic param `{}` must be a path", p.name)));
                }
                variadic += 1;
            }
        }
        if variadic > 1 {
            return Err(bad("at most one variadic path param"));
        }
        Ok(())
    }
}

/// The controlled API surface. `version` bumps on every mutation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ApiRegistry {
    version: u64,
    apis: BTreeMap<String, ApiSpec>,
}

#[derive(Serialize, Deserialize)]
struct RegistryDoc {
    version: u64,
    apis: Vec<ApiSpec>,
}

impl ApiRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.apis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.apis.is_empty()
    }

    pub fn register(&mut self, spec: ApiSpec) -> Result<u64, RegistryError> {
        spec.check()?;
        if self.apis.contains_key(&spec.name) {
            return Err(RegistryError::DuplicateName(spec.name));
        }
        self.apis.insert(spec.name.clone(), spec);
        self.version += 1;
        Ok(self.version)
    }

    /// Value-style registration: returns the updated registry.
    pub fn with(mut self, spec: ApiSpec) -> Result<Self, RegistryError> {
        self.register(spec)?;
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Result<&ApiSpec, RegistryError> {
        self.apis.get(name).ok_or_else(|| RegistryError::UnknownApi(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.apis.contains_key(name)
    }

    pub fn apis(&self) -> impl Iterator<Item = &ApiSpec> {
        self.apis.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.apis.keys().map(String::as_str)
    }

    pub fn to_json(&self) -> String {
        let doc = RegistryDoc { version: self.version, apis: self.apis.values().cloned().collect() };
        serde_json::to_string_pretty(&doc).expect("registry serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, RegistryError> {
        let doc: RegistryDoc = serde_json::from_str(text)?;
        let mut reg = ApiRegistry::new();
        for spec in doc.apis {
            reg.register(spec)?;
        }
        // a persisted version may be ahead of the number of entries
        reg.version = reg.version.max(doc.version);
        Ok(reg)
    }

    pub fn load(path: &Path) -> Result<Self, RegistryError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), RegistryError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// The curated 20-operation registry shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_json(include_str!("../../data/registry.json")).expect("shipped registry is valid")
    }

    /// The three operations used by the registry-growth experiment.
    pub fn extension_specs() -> Vec<ApiSpec> {
        let doc: RegistryDoc = serde_json::from_str(include_str!("../../data/registry_ext.json"))
            .expect("shipped extension registry is valid");
        doc.apis
    }
}
