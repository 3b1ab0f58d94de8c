//! Line-oriented `key = value` documents used for parameter files,
//! discriminator checkpoints and training configs.
//!
//! Floats are written with 17 significant digits so every `f64` round-trips
//! exactly. `#` starts a comment line. Keys are unique; readers consume keys
//! and reject whatever is left over.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Formats an `f64` with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Default)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn comment(&mut self, text: &str) -> &mut Self {
        let _ = writeln!(self.out, "# {text}");
        self
    }

    pub fn raw(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.out, "{key} = {value}");
        self
    }

    pub fn f64(&mut self, key: &str, v: f64) -> &mut Self {
        self.raw(key, fmt_f64(v))
    }

    pub fn f64_list(&mut self, key: &str, vs: &[f64]) -> &mut Self {
        let _ = write!(self.out, "{key} =");
        for &v in vs {
            let _ = write!(self.out, " {}", fmt_f64(v));
        }
        self.out.push('\n');
        self
    }

    pub fn finish(&self) -> &str {
        &self.out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, &self.out).map_err(|e| Error::io(path, e))
    }
}

pub struct KvReader {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvReader {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: "expected `key = value`".into(),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "empty key".into(),
                });
            }
            if entries
                .insert(key.to_string(), (line_no, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn take_str(&mut self, key: &str) -> Result<String> {
        self.entries
            .remove(key)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::MissingField(key.to_string()))
    }

    pub fn take_opt_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(_, v)| v)
    }

    pub fn take<T: std::str::FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.take_str(key)?;
        v.parse().map_err(|e: T::Err| Error::InvalidValue {
            key: key.to_string(),
            msg: e.to_string(),
        })
    }

    pub fn take_opt<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.contains(key) {
            self.take(key).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn take_f64_list(&mut self, key: &str) -> Result<Vec<f64>> {
        let v = self.take_str(key)?;
        v.split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|e| Error::InvalidValue {
                    key: key.to_string(),
                    msg: e.to_string(),
                })
            })
            .collect()
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            Some((k, _)) => Err(Error::UnknownField(k)),
            None => Ok(()),
        }
    }
}
