//! Name-keyed registries of interchangeable strategies.

use std::fmt;

use crate::error::{Error, Result};

/// Strategies of one kind, looked up by name at runtime. Registration order
/// is preserved for listings.
pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: Vec<(&'static str, Box<T>)>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self { kind, entries: Vec::new() }
    }

    /// Adds `item` under `name`, replacing any earlier entry of that name.
    pub fn register(&mut self, name: &'static str, item: Box<T>) -> &mut Self {
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = item,
            None => self.entries.push((name, item)),
        }
        self
    }

    pub fn get(&self, name: &str) -> Result<&T> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, item)| item.as_ref())
            .ok_or_else(|| Error::Unknown {
                kind: self.kind,
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &T)> {
        self.entries.iter().map(|(n, item)| (*n, item.as_ref()))
    }
}

impl<T: ?Sized> fmt::Debug for Registry<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry").field("kind", &self.kind).field("names", &self.names()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter {
        fn greet(&self) -> String;
    }

    struct Fixed(&'static str);

    impl Greeter for Fixed {
        fn greet(&self) -> String {
            self.0.to_string()
        }
    }

    #[test]
    fn lookup_and_replacement() {
        let mut r: Registry<dyn Greeter> = Registry::new("greeter");
        r.register("a", Box::new(Fixed("hi"))).register("b", Box::new(Fixed("yo")));
        assert_eq!(r.get("b").unwrap().greet(), "yo");
        r.register("a", Box::new(Fixed("hello")));
        assert_eq!(r.names(), vec!["a", "b"]);
        assert_eq!(r.get("a").unwrap().greet(), "hello");
        let err = r.get("c").err().unwrap().to_string();
        assert!(err.contains("unknown greeter `c`") && err.contains("a, b"), "{err}");
    }
}
