//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are dotted
//! (`lm.steps`, `model.d_model`); every key must be known.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses the file body into ordered key/value pairs, rejecting duplicates.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::config(format!("line {}: empty key", i + 1)));
        }
        if out.insert(k.to_string(), (i + 1, v.trim().to_string())).is_some() {
            return Err(Error::config(format!("line {}: duplicate key {k}", i + 1)));
        }
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<BTreeMap<String, (usize, String)>> {
    parse_kv(&std::fs::read_to_string(path)?)
}

/// Parses one value, naming the key and line on failure.
pub fn value<T: FromStr>(key: &str, line: usize, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::config(format!("line {line}: cannot parse `{raw}` for {key}")))
}

pub fn flag(key: &str, line: usize, raw: &str) -> Result<bool> {
    match raw {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("line {line}: expected a boolean for {key}, got `{raw}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let kv = parse_kv("# c\n\n lm.steps = 10 \nmodel.d_model=32\n").unwrap();
        assert_eq!(kv["lm.steps"], (3, "10".to_string()));
        assert_eq!(kv["model.d_model"].1, "32");
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(parse_kv("steps 10").is_err());
        assert!(parse_kv("a = 1\na = 2").is_err());
        assert!(parse_kv(" = 2").is_err());
        assert!(value::<usize>("k", 1, "x").is_err());
        assert!(flag("k", 1, "maybe").is_err());
    }
}
