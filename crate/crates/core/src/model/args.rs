//! Typed argument values and normalization of raw strings against a spec.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::registry::{ApiSpec, ParamKind, ParamSpec};

/// A fully typed argument. Raw strings never reach the actuator.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArgValue {
    String(String),
    Path(String),
    Paths(Vec<String>),
    Integer(i64),
    SizeBytes(u64),
    Flag(bool),
    Enum(String),
}

pub type Args = BTreeMap<String, ArgValue>;

impl ArgValue {
    /// Whether this value is acceptable for a parameter.
    pub fn fits(&self, param: &ParamSpec) -> bool {
        match (&param.kind, self) {
            (ParamKind::String, ArgValue::String(_)) => true,
            (ParamKind::Path, ArgValue::Path(_)) => !param.variadic,
            (ParamKind::Path, ArgValue::Paths(v)) => param.variadic && !v.is_empty(),
            (ParamKind::Integer, ArgValue::Integer(_)) => true,
            (ParamKind::SizeBytes, ArgValue::SizeBytes(_)) => true,
            (ParamKind::Flag, ArgValue::Flag(_)) => true,
            (ParamKind::Enum(values), ArgValue::Enum(v)) => values.contains(v),
            _ => false,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ArgValue::String(s) | ArgValue::Path(s) | ArgValue::Enum(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_flag(&self) -> Option<bool> {
        match self {
            ArgValue::Flag(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_bytes(&self) -> Option<u64> {
        match self {
            ArgValue::SizeBytes(n) => Some(*n),
            _ => None,
        }
    }
}

impl fmt::Display for ArgValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArgValue::String(s) | ArgValue::Path(s) | ArgValue::Enum(s) => f.write_str(s),
            ArgValue::Paths(v) => f.write_str(&v.join(" ")),
            ArgValue::Integer(n) => write!(f, "{n}"),
            ArgValue::SizeBytes(n) => write!(f, "{n}B"),
            ArgValue::Flag(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ArgError {
    #[error("missing required argument `{0}`")]
    MissingArg(String),
    #[error("argument `{param}`: expected {expected}, got `{raw}`")]
    TypeMismatch { param: String, expected: String, raw: String },
    #[error("unknown argument `{0}`")]
    UnknownParam(String),
}

/// Parses a decimal or binary size such as `10 MB`, `1.5GiB` or `512`.
///
/// `KB/MB/GB/TB` are powers of 1000; `KiB/MiB/GiB/TiB` are powers of 1024.
pub fn parse_size(raw: &str) -> Option<u64> {
    let s = raw.trim();
    let split = s.find(|c: char| !(c.is_ascii_digit() || c == '.')).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let unit = unit.trim().to_ascii_lowercase();
    let mult: u128 = match unit.as_str() {
        "" | "b" => 1,
        "k" | "kb" => 1_000,
        "m" | "mb" => 1_000_000,
        "g" | "gb" => 1_000_000_000,
        "t" | "tb" => 1_000_000_000_000,
        "kib" => 1 << 10,
        "mib" => 1 << 20,
        "gib" => 1 << 30,
        "tib" => 1 << 40,
        _ => return None,
    };
    if num.is_empty() {
        return None;
    }
    let (int_part, frac_part) = match num.split_once('.') {
        Some((i, f)) if !f.contains('.') => (i, f),
        Some(_) => return None,
        None => (num, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    let int: u128 = if int_part.is_empty() { 0 } else { int_part.parse().ok()? };
    let scale = 10u128.checked_pow(frac_part.len() as u32)?;
    let frac: u128 = if frac_part.is_empty() { 0 } else { frac_part.parse().ok()? };
    let total = int.checked_mul(scale)?.checked_add(frac)?.checked_mul(mult)?;
    // fractional sizes must land on a whole byte
    if total % scale != 0 {
        return None;
    }
    u64::try_from(total / scale).ok()
}

fn parse_flag(raw: &str) -> Option<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "y" | "1" | "on" => Some(true),
        "false" | "no" | "n" | "0" | "off" => Some(false),
        _ => None,
    }
}

/// Converts one raw string into the parameter's typed value.
pub fn parse_value(param: &ParamSpec, raw: &str) -> Result<ArgValue, ArgError> {
    let mismatch = || ArgError::TypeMismatch {
        param: param.name.clone(),
        expected: param.kind.label().to_string(),
        raw: raw.to_string(),
    };
    let trimmed = raw.trim();
    match &param.kind {
        ParamKind::String => Ok(ArgValue::String(raw.to_string())),
        ParamKind::Path if param.variadic => {
            let items: Vec<String> = trimmed
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect();
            if items.is_empty() || items.iter().any(|p| p.contains('\0')) {
                return Err(mismatch());
            }
            Ok(ArgValue::Paths(items))
        }
        ParamKind::Path => {
            if trimmed.is_empty() || trimmed.contains('\0') {
                return Err(mismatch());
            }
            Ok(ArgValue::Path(trimmed.to_string()))
        }
        ParamKind::Integer => trimmed.parse().map(ArgValue::Integer).map_err(|_| mismatch()),
        ParamKind::SizeBytes => parse_size(trimmed).map(ArgValue::SizeBytes).ok_or_else(mismatch),
        ParamKind::Flag => parse_flag(trimmed).map(ArgValue::Flag).ok_or_else(mismatch),
        ParamKind::Enum(values) => values
            .iter()
            .find(|v| v.eq_ignore_ascii_case(trimmed))
            .map(|v| ArgValue::Enum(v.clone()))
            .ok_or_else(mismatch),
    }
}

/// Result of binding whatever raw values are usable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PartialArgs {
    pub args: Args,
    pub missing: Vec<String>,
    pub invalid: Vec<ArgError>,
}

/// Binds every parseable raw value; collects missing required params (in
/// declaration order) and rejected values instead of failing.
pub fn normalize_partial(spec: &ApiSpec, raw: &BTreeMap<String, String>) -> PartialArgs {
    let mut out = PartialArgs::default();
    for (name, value) in raw {
        match spec.param(name) {
            None => out.invalid.push(ArgError::UnknownParam(name.clone())),
            Some(param) => match parse_value(param, value) {
                Ok(v) => {
                    out.args.insert(name.clone(), v);
                }
                Err(e) => out.invalid.push(e),
            },
        }
    }
    for param in spec.required_params() {
        if !out.args.contains_key(&param.name) {
            out.missing.push(param.name.clone());
        }
    }
    out
}

/// Strict normalization: every required param bound and every value typed.
pub fn normalize_args(spec: &ApiSpec, raw: &BTreeMap<String, String>) -> Result<Args, ArgError> {
    let partial = normalize_partial(spec, raw);
    if let Some(err) = partial.invalid.into_iter().next() {
        return Err(err);
    }
    if let Some(name) = partial.missing.into_iter().next() {
        return Err(ArgError::MissingArg(name));
    }
    Ok(partial.args)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ApiRegistry;
    use proptest::prelude::*;

    fn raw(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn size_units() {
        assert_eq!(parse_size("10 MB"), Some(10_000_000));
        assert_eq!(parse_size("10 MiB"), Some(10_485_760));
        assert_eq!(parse_size("10mb"), Some(10_000_000));
        assert_eq!(parse_size("1.5 GB"), Some(1_500_000_000));
        assert_eq!(parse_size("0"), Some(0));
        assert_eq!(parse_size("512 B"), Some(512));
        assert_eq!(parse_size("0.5 B"), None);
        assert_eq!(parse_size("MB"), None);
        assert_eq!(parse_size("ten MB"), None);
        assert_eq!(parse_size("10 XB"), None);
    }

    #[test]
    fn rm_cached_listing_args() {
        let reg = ApiRegistry::builtin();
        let args =
            normalize_args(reg.get("git.rm_cached").unwrap(), &raw(&[("pattern", "*.csv"), ("min_size", "10 MB")]))
                .unwrap();
        assert_eq!(args["pattern"], ArgValue::Path("*.csv".into()));
        assert_eq!(args["min_size"], ArgValue::SizeBytes(10_000_000));
    }

    #[test]
    fn missing_dst() {
        let reg = ApiRegistry::builtin();
        let err = normalize_args(reg.get("fs.move").unwrap(), &raw(&[("src", "a.txt")])).unwrap_err();
        assert_eq!(err, ArgError::MissingArg("dst".into()));
    }

    #[test]
    fn zero_size_accepted() {
        let reg = ApiRegistry::builtin();
        let args = normalize_args(reg.get("git.rm_cached").unwrap(), &raw(&[("pattern", "*.csv"), ("min_size", "0")]))
            .unwrap();
        assert_eq!(args["min_size"], ArgValue::SizeBytes(0));
    }

    #[test]
    fn type_mismatch_and_enum_canonicalized() {
        let reg = ApiRegistry::builtin();
        let sched = reg.get("backup.schedule").unwrap();
        let args = normalize_args(sched, &raw(&[("path", "Docs"), ("frequency", "Weekly")])).unwrap();
        assert_eq!(args["frequency"], ArgValue::Enum("weekly".into()));
        let err = normalize_args(sched, &raw(&[("path", "Docs"), ("frequency", "hourly")])).unwrap_err();
        assert!(matches!(err, ArgError::TypeMismatch { .. }));
        let log = reg.get("git.log").unwrap();
        assert!(normalize_args(log, &raw(&[("count", "many")])).is_err());
    }

    #[test]
    fn variadic_paths_split() {
        let reg = ApiRegistry::builtin();
        let args = normalize_args(reg.get("fs.remove").unwrap(), &raw(&[("paths", "a.txt, b.txt")])).unwrap();
        assert_eq!(args["paths"], ArgValue::Paths(vec!["a.txt".into(), "b.txt".into()]));
    }

    proptest! {
        #[test]
        fn decimal_and_binary_sizes(n in 0u64..1_000_000, unit in 0usize..8) {
            let (suffix, mult) = [
                ("B", 1u64), ("KB", 1_000), ("MB", 1_000_000), ("GB", 1_000_000_000),
                ("KiB", 1 << 10), ("MiB", 1 << 20), ("GiB", 1 << 30), ("", 1),
            ][unit];
            prop_assert_eq!(parse_size(&format!("{n} {suffix}")), Some(n * mult));
        }
    }
}
