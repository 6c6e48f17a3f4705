//! Flat `key = value` run configuration.
//!
//! Commands read settings through a [`Reader`] that records every key it
//! resolves (whether from the file, a flag override, or a default). The
//! recorded set doubles as the provenance echo — writing it back out yields a
//! complete config that reproduces the run — and as the schema for rejecting
//! unknown keys with a nearest-key suggestion.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parse `key = value` lines. `#` starts a comment; blank lines are ignored;
/// duplicate keys are fatal.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some(eq) = line.find('=') else {
            return Err(Error::InvalidConfig(format!(
                "line {}: expected `key = value`, got `{line}`",
                lineno + 1
            )));
        };
        let key = line[..eq].trim().to_string();
        let value = line[eq + 1..].trim().to_string();
        if key.is_empty() {
            return Err(Error::InvalidConfig(format!("line {}: empty key", lineno + 1)));
        }
        if out.iter().any(|(k, _)| *k == key) {
            return Err(Error::InvalidConfig(format!(
                "line {}: duplicate key `{key}`",
                lineno + 1
            )));
        }
        out.push((key, value));
    }
    Ok(out)
}

pub fn serialize_kv(pairs: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

fn levenshtein(a: &str, b: &str) -> usize {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, &ca) in a.iter().enumerate() {
        let mut cur = vec![i + 1];
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur.push(sub.min(prev[j + 1] + 1).min(cur[j] + 1));
        }
        prev = cur;
    }
    prev[b.len()]
}

fn nearest<'a>(key: &str, known: impl Iterator<Item = &'a str>) -> Option<&'a str> {
    known.min_by_key(|k| levenshtein(key, k))
}

/// Resolves settings from a parsed file plus overrides, with defaults.
pub struct Reader {
    values: BTreeMap<String, String>,
    /// keys in resolution order with their resolved values — the echo
    resolved: Vec<(String, String)>,
}

impl Reader {
    pub fn new(pairs: Vec<(String, String)>) -> Self {
        Reader {
            values: pairs.into_iter().collect(),
            resolved: Vec::new(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
        })?;
        Ok(Self::new(parse_kv(&text)?))
    }

    pub fn empty() -> Self {
        Self::new(Vec::new())
    }

    /// Flag override: takes precedence over the file.
    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_string(), value.to_string());
    }

    fn record(&mut self, key: &str, value: String) {
        debug_assert!(
            !self.resolved.iter().any(|(k, _)| k == key),
            "key `{key}` resolved twice"
        );
        self.resolved.push((key.to_string(), value));
    }

    /// Resolve a scalar: file/override value if present, else the default.
    pub fn get<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr + Display,
    {
        match self.values.get(key).cloned() {
            Some(raw) => {
                let v: T = raw.parse().map_err(|_| {
                    Error::InvalidConfig(format!(
                        "key `{key}`: cannot parse `{raw}` as {}",
                        std::any::type_name::<T>()
                    ))
                })?;
                self.record(key, v.to_string());
                Ok(v)
            }
            None => {
                self.record(key, default.to_string());
                Ok(default)
            }
        }
    }

    /// Resolve a comma-separated list of floats.
    pub fn get_f64_list(&mut self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.values.get(key).cloned() {
            Some(raw) => {
                let mut out = Vec::new();
                for part in raw.split(',') {
                    let part = part.trim();
                    out.push(part.parse::<f64>().map_err(|_| {
                        Error::InvalidConfig(format!(
                            "key `{key}`: cannot parse `{part}` as f64"
                        ))
                    })?);
                }
                self.record(key, join_f64(&out));
                Ok(out)
            }
            None => {
                self.record(key, join_f64(default));
                Ok(default.to_vec())
            }
        }
    }

    /// Resolve an optional string (no default to echo when absent).
    pub fn get_opt_string(&mut self, key: &str) -> Option<String> {
        let v = self.values.get(key).cloned();
        if let Some(ref s) = v {
            self.record(key, s.clone());
        }
        Some(v?)
    }

    /// Fail on any key that no getter consumed, naming the nearest valid key.
    pub fn finish(self) -> Result<Vec<(String, String)>> {
        for key in self.values.keys() {
            if !self.resolved.iter().any(|(k, _)| k == key) {
                let hint = nearest(key, self.resolved.iter().map(|(k, _)| k.as_str()))
                    .map(|n| format!("; nearest valid key: `{n}`"))
                    .unwrap_or_default();
                return Err(Error::InvalidConfig(format!("unknown key `{key}`{hint}")));
            }
        }
        Ok(self.resolved)
    }
}

fn join_f64(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_all_defaults_echoed() {
        let mut r = Reader::new(parse_kv("").unwrap());
        assert_eq!(r.get("epochs", 60usize).unwrap(), 60);
        assert_eq!(r.get("lr", 2e-4).unwrap(), 2e-4);
        let echo = r.finish().unwrap();
        assert_eq!(
            echo,
            vec![
                ("epochs".to_string(), "60".to_string()),
                ("lr".to_string(), "0.0002".to_string())
            ]
        );
    }

    #[test]
    fn list_key_parses_five_values() {
        let mut r = Reader::new(parse_kv("epsilon_grid = 0,0.005,0.01,0.05,0.25\n").unwrap());
        let grid = r.get_f64_list("epsilon_grid", &[]).unwrap();
        assert_eq!(grid, vec![0.0, 0.005, 0.01, 0.05, 0.25]);
        r.finish().unwrap();
    }

    #[test]
    fn unknown_key_names_nearest_valid_key() {
        let mut r = Reader::new(parse_kv("epsilonn = 0.1\n").unwrap());
        let _ = r.get("epsilon", 0.01).unwrap();
        let _ = r.get("sigma", 0.0).unwrap();
        let err = r.finish().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epsilonn"), "{msg}");
        assert!(msg.contains("`epsilon`"), "{msg}");
    }

    #[test]
    fn type_mismatch_is_fatal_and_named() {
        let mut r = Reader::new(parse_kv("epochs = sixty\n").unwrap());
        let err = r.get("epochs", 60usize).unwrap_err();
        assert!(err.to_string().contains("epochs"), "{err}");
    }

    #[test]
    fn duplicate_and_malformed_lines_rejected() {
        assert!(parse_kv("a = 1\na = 2\n").is_err());
        assert!(parse_kv("just words\n").is_err());
        assert!(parse_kv("= 3\n").is_err());
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let pairs = parse_kv("# header\n\nseed = 7  # trailing\n").unwrap();
        assert_eq!(pairs, vec![("seed".to_string(), "7".to_string())]);
    }

    #[test]
    fn echo_round_trips_identically() {
        let mut r = Reader::new(parse_kv("epochs = 3\nlr = 0.001\n").unwrap());
        let _ = r.get("epochs", 60usize).unwrap();
        let _ = r.get("lr", 2e-4).unwrap();
        let _ = r.get("seed", 0u64).unwrap();
        let echo = r.finish().unwrap();
        let text = serialize_kv(&echo);
        let reparsed = parse_kv(&text).unwrap();
        assert_eq!(reparsed, echo);
        assert_eq!(serialize_kv(&reparsed), text);
    }

    #[test]
    fn overrides_beat_file_values() {
        let mut r = Reader::new(parse_kv("seed = 1\n").unwrap());
        r.set("seed", 9u64);
        assert_eq!(r.get("seed", 0u64).unwrap(), 9);
        r.finish().unwrap();
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein("epsilon", "epsilonn"), 1);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
    }
}
