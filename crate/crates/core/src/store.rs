// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Key-value storage that outlives individual script invocations.
//!
//! There is one global namespace shared by every script and one local namespace
//! per script id. Values are signed 64-bit scalars.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_CAPACITY: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Namespace {
    Global,
    Local(u32),
}

impl fmt::Display for Namespace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Namespace::Global => f.write_str("global"),
            Namespace::Local(id) => write!(f, "local:{id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid namespace `{0}`, expected `global` or `local:<id>`")]
pub struct ParseNamespaceError(pub String);

impl FromStr for Namespace {
    type Err = ParseNamespaceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "global" {
            return Ok(Namespace::Global);
        }
        s.strip_prefix("local:")
            .and_then(|id| id.parse().ok())
            .map(Namespace::Local)
            .ok_or_else(|| ParseNamespaceError(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("namespace {namespace} is full ({capacity} entries)")]
pub struct CapacityError {
    pub namespace: Namespace,
    pub capacity: usize,
}

/// Result of a lookup. Absent keys read as `(false, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lookup {
    pub present: bool,
    pub value: i64,
}

impl Lookup {
    const ABSENT: Lookup = Lookup {
        present: false,
        value: 0,
    };
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct Namespaces {
    global: BTreeMap<u32, i64>,
    locals: BTreeMap<u32, BTreeMap<u32, i64>>,
}

impl Namespaces {
    fn get(&self, ns: Namespace) -> Option<&BTreeMap<u32, i64>> {
        match ns {
            Namespace::Global => Some(&self.global),
            Namespace::Local(id) => self.locals.get(&id),
        }
    }

    fn get_mut(&mut self, ns: Namespace) -> &mut BTreeMap<u32, i64> {
        match ns {
            Namespace::Global => &mut self.global,
            Namespace::Local(id) => self.locals.entry(id).or_default(),
        }
    }
}

/// Thread-safe store. Each operation holds the lock for its whole duration, so
/// concurrent operations are linearizable.
#[derive(Debug)]
pub struct KeyValueStore {
    inner: Mutex<Namespaces>,
    capacity: usize,
}

impl Default for KeyValueStore {
    fn default() -> Self {
        KeyValueStore::new(DEFAULT_CAPACITY)
    }
}

/// Serializable copy of a store's contents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreSnapshot {
    pub capacity: usize,
    pub entries: Vec<(Namespace, u32, i64)>,
}

impl KeyValueStore {
    /// `capacity` bounds the number of keys per namespace.
    pub fn new(capacity: usize) -> Self {
        KeyValueStore {
            inner: Mutex::new(Namespaces::default()),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Namespaces> {
        // A panic while holding the lock cannot leave a map half-updated.
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Inserts or overwrites. Overwriting an existing key never fails.
    pub fn put(&self, ns: Namespace, key: u32, value: i64) -> Result<(), CapacityError> {
        let mut inner = self.lock();
        let map = inner.get_mut(ns);
        if map.len() >= self.capacity && !map.contains_key(&key) {
            return Err(CapacityError {
                namespace: ns,
                capacity: self.capacity,
            });
        }
        map.insert(key, value);
        Ok(())
    }

    pub fn get(&self, ns: Namespace, key: u32) -> Lookup {
        let inner = self.lock();
        match inner.get(ns).and_then(|m| m.get(&key)) {
            Some(&value) => Lookup {
                present: true,
                value,
            },
            None => Lookup::ABSENT,
        }
    }

    pub fn len(&self, ns: Namespace) -> usize {
        self.lock().get(ns).map_or(0, BTreeMap::len)
    }

    pub fn is_empty(&self) -> bool {
        let inner = self.lock();
        inner.global.is_empty() && inner.locals.values().all(BTreeMap::is_empty)
    }

    /// All entries, global first, then locals by script id, keys ascending.
    pub fn dump(&self) -> Vec<(Namespace, u32, i64)> {
        let inner = self.lock();
        let global = inner
            .global
            .iter()
            .map(|(&k, &v)| (Namespace::Global, k, v));
        let locals = inner
            .locals
            .iter()
            .flat_map(|(&id, map)| map.iter().map(move |(&k, &v)| (Namespace::Local(id), k, v)));
        global.chain(locals).collect()
    }

    /// Entries of a single namespace.
    pub fn dump_namespace(&self, ns: Namespace) -> Vec<(u32, i64)> {
        let inner = self.lock();
        inner
            .get(ns)
            .map(|m| m.iter().map(|(&k, &v)| (k, v)).collect())
            .unwrap_or_default()
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        StoreSnapshot {
            capacity: self.capacity,
            entries: self.dump(),
        }
    }

    pub fn from_snapshot(snapshot: &StoreSnapshot) -> Result<Self, CapacityError> {
        let store = KeyValueStore::new(snapshot.capacity);
        for &(ns, key, value) in &snapshot.entries {
            store.put(ns, key, value)?;
        }
        Ok(store)
    }
}
