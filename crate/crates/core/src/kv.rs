//! `key=value` text files: one pair per line, `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(
                    line,
                    format!("line {}: expected key=value", lineno + 1),
                ));
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::config("", format!("line {}: empty key", lineno + 1)));
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Later values win.
    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(Error::config(k, "unknown key")),
            None => Ok(()),
        }
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config(key, format!("cannot parse `{v}`"))),
        }
    }

    pub fn required<T: FromStr>(&self, key: &str) -> Result<T> {
        self.parsed(key)?
            .ok_or_else(|| Error::config(key, "missing required key"))
    }

    pub fn list_f64(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::config(key, format!("cannot parse `{v}` as a list")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }
}

pub fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let m = KvMap::parse("# header\n\na = 1\nb=x,y # trailing\n").unwrap();
        assert_eq!(m.get("a"), Some("1"));
        assert_eq!(m.get("b"), Some("x,y"));
        assert_eq!(m.required::<u32>("a").unwrap(), 1);
    }

    #[test]
    fn errors_name_the_key() {
        let m = KvMap::parse("lr=abc\nzzz=1").unwrap();
        match m.required::<f64>("lr") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "lr"),
            other => panic!("{other:?}"),
        }
        match m.reject_unknown(&["lr"]) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "zzz"),
            other => panic!("{other:?}"),
        }
        assert!(KvMap::parse("novalue").is_err());
    }

    #[test]
    fn text_round_trip_is_sorted() {
        let mut m = KvMap::new();
        m.set("b", 2);
        m.set("a", "x");
        assert_eq!(m.to_text(), "a=x\nb=2\n");
        assert_eq!(KvMap::parse(&m.to_text()).unwrap(), m);
    }
}
