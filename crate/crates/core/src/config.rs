//! Line-based `key = value` configuration.
//!
//! Blank lines and text after `#` are ignored. Keys are namespaced by a
//! section prefix (`corpus.`, `model.`, `train.`, `speech.`, `sampler.`,
//! `eval.`); each typed section starts from its defaults and applies the keys
//! under its prefix. Unknown keys inside a known section are errors.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A configuration struct that can be read from and written to a section of
/// a [`Config`].
pub trait Section: Default + Sized {
    const PREFIX: &'static str;

    /// Applies one key (without the prefix).
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    /// Every key with its current value, in a stable order.
    fn entries(&self) -> Vec<(&'static str, String)>;
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || !k.contains('.') {
                return Err(Error::Config(format!(
                    "line {}: key `{k}` must be namespaced like `model.num_layers`",
                    lineno + 1
                )));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", lineno + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Builds section `S` from its defaults plus every `S::PREFIX.*` key.
    pub fn section<S: Section>(&self) -> Result<S> {
        let mut s = S::default();
        let prefix = format!("{}.", S::PREFIX);
        for (k, v) in &self.entries {
            if let Some(rest) = k.strip_prefix(&prefix) {
                s.set(rest, v)?;
            }
        }
        Ok(s)
    }

    /// Fails on keys whose prefix is not in `prefixes`.
    pub fn check_prefixes(&self, prefixes: &[&str]) -> Result<()> {
        for k in self.entries.keys() {
            let p = k.split('.').next().unwrap_or("");
            if !prefixes.contains(&p) {
                return Err(Error::Config(format!("unknown config section in key `{k}`")));
            }
        }
        Ok(())
    }

    pub fn corpus(&self) -> Result<crate::corpus::CorpusConfig> {
        self.section()
    }
}

/// Renders a section as `prefix.key = value` lines.
pub fn render<S: Section>(s: &S) -> String {
    let mut out = String::new();
    for (k, v) in s.entries() {
        out.push_str(&format!("{}.{k} = {v}\n", S::PREFIX));
    }
    out
}

/// Parses `value` for `key`, naming both in the error.
pub fn parse_value<T: FromStr>(prefix: &str, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{prefix}.{key}`")))
}

pub(crate) fn unknown_key(prefix: &str, key: &str) -> Error {
    Error::Config(format!("unknown key `{prefix}.{key}`"))
}

/// Formats a float so that parsing it back yields the same bits.
pub(crate) fn float(x: f64) -> String {
    format!("{x:?}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusConfig;

    #[test]
    fn parses_comments_and_whitespace() {
        let c = Config::parse("# header\n corpus.vocab_size = 5  # trailing\n\ncorpus.noise_std=0.1\n").unwrap();
        assert_eq!(c.get("corpus.vocab_size"), Some("5"));
        let cc = c.corpus().unwrap();
        assert_eq!(cc.vocab_size, 5);
        assert_eq!(cc.noise_std, 0.1);
        assert_eq!(cc.feature_dim, CorpusConfig::default().feature_dim);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(Config::parse("corpus.vocab_size 5").is_err());
        assert!(Config::parse("vocab_size = 5").is_err());
        assert!(Config::parse("a.b = 1\na.b = 2").is_err());
        assert!(Config::parse("corpus.nope = 1").unwrap().corpus().is_err());
        assert!(Config::parse("corpus.vocab_size = x").unwrap().corpus().is_err());
        assert!(Config::parse("zzz.a = 1").unwrap().check_prefixes(&["corpus"]).is_err());
    }

    #[test]
    fn render_round_trips() {
        let cc = CorpusConfig {
            noise_std: 0.1 + 0.2,
            seed: 99,
            ..CorpusConfig::default()
        };
        let back = Config::parse(&render(&cc)).unwrap().corpus().unwrap();
        assert_eq!(back, cc);
    }
}
