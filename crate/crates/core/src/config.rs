//! Flat `key = value` configuration text.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed key-value pairs. `#` starts a comment; blank lines are ignored.
#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn require_str(&mut self, key: &str) -> Result<String> {
        self.take_str(key).ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.take_str(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| Error::BadValue {
                    key: key.to_string(),
                    msg: format!("`{v}`: {e}"),
                })
            })
            .transpose()
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.take(key)?.ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    /// Comma-separated list.
    pub fn require_list<T: FromStr>(&mut self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.require_str(key)?;
        parse_list(&raw).map_err(|msg| Error::BadValue {
            key: key.to_string(),
            msg,
        })
    }

    /// Fails on any key that was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

pub fn parse_list<T: FromStr>(raw: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("`{s}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    if items.is_empty() {
        return Err("empty list".into());
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_consume() {
        let mut kv = KeyValues::parse("a = 3\n# note\nlist = 0, 1.5 ,2\n\nname=x # trailing\n").unwrap();
        assert_eq!(kv.require::<u32>("a").unwrap(), 3);
        assert_eq!(kv.require_list::<f64>("list").unwrap(), vec![0.0, 1.5, 2.0]);
        assert_eq!(kv.require_str("name").unwrap(), "x");
        assert!(matches!(kv.require::<u32>("missing"), Err(Error::MissingKey(k)) if k == "missing"));
        kv.finish().unwrap();
    }

    #[test]
    fn errors_name_the_key() {
        let mut kv = KeyValues::parse("rate = fast\nextra = 1").unwrap();
        let err = kv.require::<f64>("rate").unwrap_err().to_string();
        assert!(err.contains("rate"), "{err}");
        assert!(kv.finish().unwrap_err().to_string().contains("extra"));
        assert!(KeyValues::parse("a=1\na=2").is_err());
        assert!(KeyValues::parse("novalue").is_err());
    }
}
