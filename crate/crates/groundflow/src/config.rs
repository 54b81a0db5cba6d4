//! Flat key-value documents for scenario specs.
//!
//! Format: one `key = value` per line, `#` starts a comment. Keys are
//! consumed by typed getters; unknown or duplicate keys are rejected so that
//! a spec file is always complete and auditable.

use std::collections::BTreeMap;

use crate::error::{GfError, Result};

/// Parsed key-value document with strict consumption tracking.
pub struct KvDoc {
    entries: BTreeMap<String, String>,
    taken: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl KvDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(GfError::Config(format!(
                    "line {}: expected 'key = value', got '{line}'",
                    lineno + 1
                )));
            };
            let key = k.trim().to_string();
            let val = v.trim().to_string();
            if entries.insert(key.clone(), val).is_some() {
                return Err(GfError::Config(format!(
                    "line {}: duplicate key '{key}'",
                    lineno + 1
                )));
            }
        }
        Ok(KvDoc {
            entries,
            taken: Default::default(),
        })
    }

    pub fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn raw(&self, key: &str) -> Option<&str> {
        let v = self.entries.get(key).map(|s| s.as_str());
        if v.is_some() {
            self.taken.borrow_mut().insert(key.to_string());
        }
        v
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        self.raw(key).unwrap_or(default).to_string()
    }

    pub fn require_str(&self, key: &str) -> Result<String> {
        self.raw(key)
            .map(|s| s.to_string())
            .ok_or_else(|| GfError::Config(format!("missing required key '{key}'")))
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<f64>()
                .map_err(|e| GfError::Config(format!("key '{key}': '{v}' is not a number ({e})"))),
        }
    }

    pub fn get_opt_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<f64>()
                .map(Some)
                .map_err(|e| GfError::Config(format!("key '{key}': '{v}' is not a number ({e})"))),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse::<usize>().map_err(|e| {
                GfError::Config(format!("key '{key}': '{v}' is not a count ({e})"))
            }),
        }
    }

    pub fn get_opt_usize(&self, key: &str) -> Result<Option<usize>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse::<usize>().map(Some).map_err(|e| {
                GfError::Config(format!("key '{key}': '{v}' is not a count ({e})"))
            }),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<u64>()
                .map_err(|e| GfError::Config(format!("key '{key}': '{v}' is not a seed ({e})"))),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(GfError::Config(format!(
                "key '{key}': expected true/false, got '{v}'"
            ))),
        }
    }

    /// Errors if any key was never consumed by a getter.
    pub fn finish(&self) -> Result<()> {
        let taken = self.taken.borrow();
        let unknown: Vec<&String> = self
            .entries
            .keys()
            .filter(|k| !taken.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            let list = unknown
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ");
            Err(GfError::Config(format!("unknown key(s): {list}")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_defaults_and_types() {
        let doc = KvDoc::parse("a = 1.5 # inline\n# full line\nb = 7\nflag = true\nname = hi\n").unwrap();
        assert_eq!(doc.get_f64("a", 0.0).unwrap(), 1.5);
        assert_eq!(doc.get_usize("b", 0).unwrap(), 7);
        assert!(doc.get_bool("flag", false).unwrap());
        assert_eq!(doc.get_str("name", ""), "hi");
        assert_eq!(doc.get_f64("absent", 9.0).unwrap(), 9.0);
        doc.finish().unwrap();
    }

    #[test]
    fn rejects_unknown_keys() {
        let doc = KvDoc::parse("known = 1\nmystery = 2\n").unwrap();
        let _ = doc.get_f64("known", 0.0).unwrap();
        let err = doc.finish().unwrap_err();
        assert!(err.to_string().contains("mystery"));
    }

    #[test]
    fn rejects_duplicates_and_malformed_lines() {
        assert!(KvDoc::parse("a = 1\na = 2\n").is_err());
        assert!(KvDoc::parse("just words\n").is_err());
    }

    #[test]
    fn type_errors_name_the_key() {
        let doc = KvDoc::parse("n = abc\n").unwrap();
        let err = doc.get_usize("n", 0).unwrap_err();
        assert!(err.to_string().contains("'n'"));
    }
}
