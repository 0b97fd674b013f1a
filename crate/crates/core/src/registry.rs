//! Name → strategy tables used to select variants at runtime.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Strategies of one family, keyed by name, iterated in name order.
pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<String, Box<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Registry {
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, strategy: Box<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Invalid(format!(
                "{} `{name}` registered twice",
                self.kind
            )));
        }
        self.entries.insert(name.to_string(), strategy);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&T> {
        self.entries
            .get(name)
            .map(Box::as_ref)
            .ok_or_else(|| Error::Unknown {
                kind: self.kind,
                name: format!("{name} (known: {})", self.names().join(", ")),
            })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}
