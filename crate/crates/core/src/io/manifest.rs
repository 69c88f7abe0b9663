//! Dataset manifests: metadata keys plus `pair.NNN = clean degraded` lines.

use std::fmt::Write as _;

use super::kv;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    /// Metadata in file order.
    pub meta: Vec<(String, String)>,
    /// `(clean, degraded)` file names relative to the manifest's directory.
    pub pairs: Vec<(String, String)>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

fn check_name(key: &str, name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c));
    if ok {
        Ok(())
    } else {
        Err(Error::config(key, format!("invalid file name `{name}`")))
    }
}

impl Manifest {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let mut meta = Vec::new();
        let mut indexed = Vec::new();
        for e in kv::parse(text)? {
            if let Some(idx) = e.key.strip_prefix("pair.") {
                let i: usize = idx
                    .parse()
                    .map_err(|_| Error::config(&e.key, "pair index is not a number"))?;
                let mut parts = e.value.split_whitespace();
                let (Some(c), Some(d), None) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(Error::config(
                        &e.key,
                        "expected `clean degraded` file names",
                    ));
                };
                check_name(&e.key, c)?;
                check_name(&e.key, d)?;
                indexed.push((i, e.key.clone(), c.to_string(), d.to_string()));
            } else {
                meta.push((e.key, e.value));
            }
        }
        indexed.sort_by_key(|p| p.0);
        for (expect, (i, key, _, _)) in indexed.iter().enumerate() {
            if *i != expect {
                return Err(Error::config(
                    key,
                    format!("pair indices must run 0..n, found {i} at position {expect}"),
                ));
            }
        }
        if indexed.is_empty() {
            return Err(Error::config("pair.000", "manifest lists no pairs"));
        }
        let pairs = indexed.into_iter().map(|(_, _, c, d)| (c, d)).collect();
        Ok(Manifest { meta, pairs })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# dataset manifest\n");
        for (k, v) in &self.meta {
            let _ = writeln!(s, "{k} = {v}");
        }
        for (i, (c, d)) in self.pairs.iter().enumerate() {
            let _ = writeln!(s, "pair.{i:03} = {c} {d}");
        }
        s
    }
}
