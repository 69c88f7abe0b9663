//! Flat `key = value` text with `#` comments.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    /// 1-based source line.
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits `text` into entries. Blank lines and lines starting with `#` are
/// skipped; a `#` after a value starts a comment. Keys must be unique.
pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut entries: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            return Err(Error::config(
                format!("line {line}"),
                "expected `key = value`",
            ));
        };
        let key = k.trim();
        if key.is_empty()
            || !key
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "_.-".contains(c))
        {
            return Err(Error::config(
                format!("line {line}"),
                format!("invalid key `{key}`"),
            ));
        }
        if entries.iter().any(|e| e.key == key) {
            return Err(Error::config(key, format!("duplicate key on line {line}")));
        }
        entries.push(Entry {
            line,
            key: key.to_string(),
            value: v.trim().to_string(),
        });
    }
    Ok(entries)
}
