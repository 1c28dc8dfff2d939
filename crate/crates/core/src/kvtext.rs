//! Line-oriented `key = value` text format shared by spec files, manifests,
//! config files, checkpoint headers, and reports.
//!
//! Rules: one pair per line, `#` starts a comment, blank lines are ignored,
//! keys are unique, values run to end of line. Floats are written with the
//! shortest representation that round-trips, so rewriting a document
//! reproduces it byte for byte.

use crate::error::{Error, Result};
use std::collections::HashSet;
use std::fmt::Write as _;

/// A parsed key-value document with strict-consumption tracking.
///
/// Callers read the keys they understand, then call [`KvDoc::finish`], which
/// rejects any key that was never consumed. This is what makes config typos
/// hard errors instead of silently ignored settings.
#[derive(Debug)]
pub struct KvDoc {
    entries: Vec<KvEntry>,
    used: HashSet<usize>,
}

#[derive(Debug)]
struct KvEntry {
    key: String,
    value: String,
    line: usize,
}

impl KvDoc {
    pub fn parse(text: &str) -> Result<KvDoc> {
        let mut entries: Vec<KvEntry> = Vec::new();
        let mut seen: HashSet<String> = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some(eq) = trimmed.find('=') else {
                return Err(Error::Format(format!(
                    "line {line}: expected `key = value`, got {trimmed:?}"
                )));
            };
            let key = trimmed[..eq].trim().to_string();
            let value = trimmed[eq + 1..].trim().to_string();
            if key.is_empty() {
                return Err(Error::Format(format!("line {line}: empty key")));
            }
            if !seen.insert(key.clone()) {
                return Err(Error::Format(format!(
                    "line {line}: duplicate key {key:?}"
                )));
            }
            entries.push(KvEntry { key, value, line });
        }
        Ok(KvDoc {
            entries,
            used: HashSet::new(),
        })
    }

    fn lookup(&mut self, key: &str) -> Option<(usize, &str)> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.key == key {
                self.used.insert(i);
                return Some((e.line, e.value.as_str()));
            }
        }
        None
    }

    pub fn has(&self, key: &str) -> bool {
        self.entries.iter().any(|e| e.key == key)
    }

    /// All present keys matching `prefix`, in file order (marks them used).
    pub fn keys_with_prefix(&mut self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.key.starts_with(prefix) {
                self.used.insert(i);
                out.push(e.key.clone());
            }
        }
        out
    }

    pub fn get_str(&mut self, key: &str) -> Result<String> {
        match self.lookup(key) {
            Some((_, v)) => Ok(v.to_string()),
            None => Err(Error::Format(format!("missing key {key:?}"))),
        }
    }

    pub fn get_str_opt(&mut self, key: &str) -> Option<String> {
        self.lookup(key).map(|(_, v)| v.to_string())
    }

    pub fn get_usize(&mut self, key: &str) -> Result<usize> {
        let (line, v) = self.require(key)?;
        v.parse().map_err(|_| {
            Error::Format(format!("line {line}: key {key:?}: invalid integer {v:?}"))
        })
    }

    pub fn get_u64(&mut self, key: &str) -> Result<u64> {
        let (line, v) = self.require(key)?;
        v.parse().map_err(|_| {
            Error::Format(format!("line {line}: key {key:?}: invalid integer {v:?}"))
        })
    }

    pub fn get_f64(&mut self, key: &str) -> Result<f64> {
        let (line, v) = self.require(key)?;
        v.parse().map_err(|_| {
            Error::Format(format!("line {line}: key {key:?}: invalid float {v:?}"))
        })
    }

    pub fn get_bool(&mut self, key: &str) -> Result<bool> {
        let (line, v) = self.require(key)?;
        match v.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::Format(format!(
                "line {line}: key {key:?}: expected true/false, got {other:?}"
            ))),
        }
    }

    /// Space-separated list of floats.
    pub fn get_f64_list(&mut self, key: &str) -> Result<Vec<f64>> {
        let (line, v) = self.require(key)?;
        v.split_whitespace()
            .map(|tok| {
                tok.parse().map_err(|_| {
                    Error::Format(format!(
                        "line {line}: key {key:?}: invalid float {tok:?}"
                    ))
                })
            })
            .collect()
    }

    fn require(&mut self, key: &str) -> Result<(usize, String)> {
        match self.lookup(key) {
            Some((line, v)) => Ok((line, v.to_string())),
            None => Err(Error::Format(format!("missing key {key:?}"))),
        }
    }

    /// Fails if any key in the document was never consumed, naming the first
    /// offender and its line.
    pub fn finish(self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if !self.used.contains(&i) {
                return Err(Error::Format(format!(
                    "line {}: unknown key {:?}",
                    e.line, e.key
                )));
            }
        }
        Ok(())
    }
}

/// Ordered writer for the same format.
#[derive(Default)]
pub struct KvWriter {
    buf: String,
}

impl KvWriter {
    pub fn new() -> KvWriter {
        KvWriter::default()
    }

    pub fn comment(&mut self, text: &str) {
        let _ = writeln!(self.buf, "# {text}");
    }

    pub fn blank(&mut self) {
        self.buf.push('\n');
    }

    pub fn put(&mut self, key: &str, value: impl std::fmt::Display) {
        debug_assert!(!key.contains('='), "key must not contain '='");
        let _ = writeln!(self.buf, "{key} = {value}");
    }

    pub fn put_f64(&mut self, key: &str, value: f64) {
        // `{}` on f64 prints the shortest string that parses back exactly.
        self.put(key, value);
    }

    pub fn put_f64_list(&mut self, key: &str, values: &[f64]) {
        let joined = values
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(" ");
        self.put(key, joined);
    }

    pub fn into_string(self) -> String {
        self.buf
    }

    pub fn as_str(&self) -> &str {
        &self.buf
    }
}
