//! Plain `key = value` text used for config files, experiment specs and
//! config echoes in checkpoints and manifests.
//!
//! Blank lines and lines starting with `#` are ignored. Later keys override
//! earlier ones.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvDoc {
    entries: BTreeMap<String, (String, usize)>,
}

impl KvDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::parse(i + 1, format!("expected `key = value`, got `{line}`")));
            };
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::parse(i + 1, "empty key"));
            }
            entries.insert(key.to_string(), (v.trim().to_string(), i + 1));
        }
        Ok(KvDoc { entries })
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), (value.to_string(), 0));
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Typed lookup; a present but unparsable value is an error naming the key.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, _)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}"))),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn apply<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &KvDoc) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, (v, _))| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_lookup() {
        let doc = KvDoc::parse("# comment\nseed = 7\n\nname=table3\nseed = 9\n").unwrap();
        assert_eq!(doc.get::<u64>("seed").unwrap(), Some(9));
        assert_eq!(doc.get_str("name"), Some("table3"));
        assert!(doc.get::<u64>("name").is_err());
        assert_eq!(doc.get::<u64>("missing").unwrap(), None);
        assert!(KvDoc::parse("a = 1\nnot a pair\n").is_err());
        let again = KvDoc::parse(&doc.to_text()).unwrap();
        assert_eq!(again.get_str("name"), Some("table3"));
    }
}
