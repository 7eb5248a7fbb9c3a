//! Root and top-level domain list backing the requested-domain check.

use std::collections::HashSet;

use thiserror::Error;

use crate::dns::{normalize_qname, rightmost_label};

const BUILTIN: &str = include_str!("../data/root_tlds.txt");

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TldError {
    #[error("TLD database has no entries")]
    EmptyDatabase,
    #[error("line {line}: {entry:?} is not a single label")]
    InvalidEntry { line: usize, entry: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TldDatabase {
    entries: HashSet<String>,
    includes_root: bool,
}

impl TldDatabase {
    /// The snapshot shipped with the crate.
    pub fn builtin() -> Self {
        load_tld_db(BUILTIN).expect("bundled TLD list is valid")
    }

    pub fn includes_root(&self) -> bool {
        self.includes_root
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty() && !self.includes_root
    }

    pub fn contains_label(&self, label: &str) -> bool {
        self.entries.contains(label)
    }

    /// True when `qname` is the root and the root is listed, or when its
    /// rightmost label is a listed TLD. Case-insensitive.
    pub fn matches(&self, qname: &str) -> bool {
        let name = normalize_qname(qname);
        match rightmost_label(&name) {
            None => self.includes_root,
            Some(tld) => self.entries.contains(tld),
        }
    }
}

/// Parses a line-oriented list: `#` starts a comment, one label per line,
/// and a line holding just `.` enables root matching.
pub fn load_tld_db(text: &str) -> Result<TldDatabase, TldError> {
    let mut entries = HashSet::new();
    let mut includes_root = false;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line == "." {
            includes_root = true;
            continue;
        }
        let label = line.trim_matches('.').to_ascii_lowercase();
        if label.is_empty() || label.contains('.') || label.contains(char::is_whitespace) {
            return Err(TldError::InvalidEntry {
                line: idx + 1,
                entry: line.to_string(),
            });
        }
        entries.insert(label);
    }
    if entries.is_empty() && !includes_root {
        return Err(TldError::EmptyDatabase);
    }
    Ok(TldDatabase {
        entries,
        includes_root,
    })
}

pub fn domain_in_db(db: &TldDatabase, qname: &str) -> bool {
    db.matches(qname)
}
