//! UTF-8 `key = value` lines with `#` comments.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value {value:?} for {key}: {msg}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        msg: String,
    },
    #[error("missing key {0:?}")]
    Missing(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits `text` into entries. Blank lines and everything after `#` are
/// ignored; keys must be unique.
pub fn parse(text: &str) -> Result<Vec<Entry>, KvError> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body.split_once('=').ok_or_else(|| KvError::Syntax {
            line,
            text: raw.to_string(),
        })?;
        let (k, v) = (k.trim(), v.trim());
        let key_ok = !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
        if !key_ok || v.is_empty() {
            return Err(KvError::Syntax {
                line,
                text: raw.to_string(),
            });
        }
        if out.iter().any(|e| e.key == k) {
            return Err(KvError::Duplicate { line, key: k.to_string() });
        }
        out.push(Entry {
            line,
            key: k.to_string(),
            value: v.to_string(),
        });
    }
    Ok(out)
}

impl Entry {
    pub fn parse<V: std::str::FromStr>(&self) -> Result<V, KvError>
    where
        V::Err: std::fmt::Display,
    {
        self.value.parse::<V>().map_err(|e| KvError::BadValue {
            line: self.line,
            key: self.key.clone(),
            value: self.value.clone(),
            msg: e.to_string(),
        })
    }

    /// Parses a float that must be finite.
    pub fn finite(&self) -> Result<f64, KvError> {
        let v: f64 = self.parse()?;
        if !v.is_finite() {
            return Err(self.bad("must be finite"));
        }
        Ok(v)
    }

    pub fn bad(&self, msg: &str) -> KvError {
        KvError::BadValue {
            line: self.line,
            key: self.key.clone(),
            value: self.value.clone(),
            msg: msg.to_string(),
        }
    }

    pub fn unknown(&self) -> KvError {
        KvError::UnknownKey {
            line: self.line,
            key: self.key.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blanks() {
        let e = parse("# header\n\nalpha = 15 # weight\n beta=0.1\n").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].key.as_str(), e[0].value.as_str(), e[0].line), ("alpha", "15", 3));
        assert_eq!(e[1].value, "0.1");
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(
            parse("a = 1\nnonsense\n").unwrap_err(),
            KvError::Syntax {
                line: 2,
                text: "nonsense".into()
            }
        );
        assert!(matches!(parse("a = 1\na = 2").unwrap_err(), KvError::Duplicate { line: 2, .. }));
        assert!(parse("a b = 1").is_err());
        assert!(parse("a = ").is_err());
    }
}
