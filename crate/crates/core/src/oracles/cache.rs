//! Content-addressed on-disk memoization of oracle results.

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};

use super::{Expander, Expansion, NliBackend, NliLabel, Relation};
use crate::error::Result;
use crate::util;

#[derive(Serialize, Deserialize)]
struct Entry {
    key: String,
    value: Value,
    created_at: DateTime<Utc>,
}

#[derive(Debug, Clone)]
pub struct OracleCache {
    dir: PathBuf,
}

impl OracleCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(OracleCache { dir })
    }

    pub fn key(backend: &str, op: &str, inputs: &Value) -> String {
        util::sha256_hex(json!([backend, op, inputs]).to_string().as_bytes())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    fn read(&self, key: &str, path: &Path) -> Option<std::result::Result<Value, String>> {
        let bytes = std::fs::read(path).ok()?;
        Some(match serde_json::from_slice::<Entry>(&bytes) {
            Ok(e) if e.key == key => Ok(e.value),
            Ok(_) => Err("key mismatch".into()),
            Err(e) => Err(e.to_string()),
        })
    }

    /// Returns the stored value for the key, or runs `compute`, persists its
    /// output and returns it. Unreadable entries are recomputed and replaced.
    pub fn get_or_compute<T, F>(&self, backend: &str, op: &str, inputs: &Value, compute: F) -> Result<T>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T>,
    {
        let key = Self::key(backend, op, inputs);
        let path = self.path(&key);
        match self.read(&key, &path) {
            Some(Ok(value)) => match serde_json::from_value(value) {
                Ok(v) => return Ok(v),
                Err(e) => log::warn!("cache entry {} unusable ({e}); recomputing", path.display()),
            },
            Some(Err(e)) => log::warn!("cache entry {} corrupt ({e}); recomputing", path.display()),
            None => {}
        }
        let value = compute()?;
        let entry = Entry { key, value: serde_json::to_value(&value)?, created_at: Utc::now() };
        util::atomic_write(&path, &serde_json::to_vec(&entry)?)?;
        Ok(value)
    }
}

pub struct CachedNli<B> {
    inner: B,
    cache: OracleCache,
}

impl<B: NliBackend> CachedNli<B> {
    pub fn new(inner: B, cache: OracleCache) -> Self {
        CachedNli { inner, cache }
    }
}

impl<B: NliBackend> NliBackend for CachedNli<B> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }

    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliLabel> {
        let inputs = json!({"premise": premise, "hypothesis": hypothesis});
        self.cache.get_or_compute(&self.inner.backend_id(), "nli", &inputs, || self.inner.classify(premise, hypothesis))
    }
}

pub struct CachedExpander<E> {
    inner: E,
    cache: OracleCache,
}

impl<E: Expander> CachedExpander<E> {
    pub fn new(inner: E, cache: OracleCache) -> Self {
        CachedExpander { inner, cache }
    }
}

impl<E: Expander> Expander for CachedExpander<E> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }

    fn expand(&self, text: &str, relations: &[Relation], max_attrs: usize) -> Result<Vec<Expansion>> {
        let names: Vec<&str> = relations.iter().map(|r| r.name()).collect();
        let inputs = json!({"text": text, "relations": names, "max_attrs": max_attrs});
        self.cache.get_or_compute(&self.inner.backend_id(), "expand", &inputs, || {
            self.inner.expand(text, relations, max_attrs)
        })
    }
}
