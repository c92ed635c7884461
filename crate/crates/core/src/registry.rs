//! Name-keyed registries of interchangeable implementations: selection
//! strategies, vote weightings and backend factories are all looked up here
//! from configuration strings.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown {kind} `{name}` (available: {available})")]
pub struct UnknownEntry {
    pub kind: &'static str,
    pub name: String,
    pub available: String,
}

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<String, Arc<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Registry {
            kind,
            entries: BTreeMap::new(),
        }
    }

    /// Adds or replaces an entry.
    pub fn register(&mut self, name: impl Into<String>, item: Arc<T>) -> &mut Self {
        self.entries.insert(name.into(), item);
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>, UnknownEntry> {
        self.entries.get(name).cloned().ok_or_else(|| UnknownEntry {
            kind: self.kind,
            name: name.to_string(),
            available: self.names().join(", "),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter: Send + Sync {
        fn greet(&self) -> String;
    }

    struct Plain;
    impl Greeter for Plain {
        fn greet(&self) -> String {
            "hi".into()
        }
    }

    #[test]
    fn lookup_and_unknown_names() {
        let mut r: Registry<dyn Greeter> = Registry::new("greeter");
        r.register("plain", Arc::new(Plain));
        assert_eq!(r.get("plain").unwrap().greet(), "hi");
        let err = r.get("fancy").err().unwrap();
        assert_eq!(err.to_string(), "unknown greeter `fancy` (available: plain)");
        assert_eq!(r.names(), vec!["plain"]);
    }

    #[test]
    fn closures_register_too() {
        let mut r: Registry<dyn Fn(u32) -> u32 + Send + Sync> = Registry::new("op");
        r.register("double", Arc::new(|x| x * 2));
        assert_eq!((r.get("double").unwrap())(4), 8);
    }
}
