//! Name-keyed registries of interchangeable implementations.
//!
//! Heat strategies, variation methods and builtin generators are all trait
//! objects looked up by name at runtime, so configs and the CLI can select
//! them with a string.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<String, Arc<T>>,
    aliases: BTreeMap<String, String>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
            aliases: BTreeMap::new(),
        }
    }

    /// Registers `item` under `name`, replacing any previous entry.
    pub fn register(&mut self, name: &str, item: Arc<T>) -> &mut Self {
        self.entries.insert(name.to_string(), item);
        self
    }

    pub fn alias(&mut self, alias: &str, target: &str) -> &mut Self {
        self.aliases.insert(alias.to_string(), target.to_string());
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        let key = self.aliases.get(name).map(String::as_str).unwrap_or(name);
        self.entries.get(key).cloned().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown {} '{}' (known: {})",
                self.kind,
                name,
                self.names().join(", ")
            ))
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_ok()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }
}

impl<T: ?Sized> std::fmt::Debug for Registry<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registry")
            .field("kind", &self.kind)
            .field("entries", &self.entries.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// A parsed `name(a, b, ...)` or `name:a,b` selector, e.g. `cycle(512)`,
/// `flat_torus(16x16)` or `disk_indicator(0.2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Selector {
    pub name: String,
    pub params: Vec<f64>,
}

impl Selector {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, rest) = if let Some(open) = s.find('(') {
            if !s.ends_with(')') {
                return Err(Error::Parse(format!("unbalanced parentheses in '{s}'")));
            }
            (&s[..open], &s[open + 1..s.len() - 1])
        } else if let Some((n, r)) = s.split_once(':') {
            (n, r)
        } else {
            (s, "")
        };
        if name.is_empty() {
            return Err(Error::Parse(format!("missing name in '{s}'")));
        }
        let params = rest
            .split([',', 'x', '×'])
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad parameter '{p}' in '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: name.trim().to_string(),
            params,
        })
    }
}
