//! Image-embedding cache keyed by content hash.
//!
//! On disk each record is `<hash>.f32` (little-endian float32, length `d`)
//! plus a `<hash>.json` sidecar holding `{model_id, d}`. Writes go through a
//! temporary file and a rename, so concurrent writers of the same hash never
//! expose a torn record.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecordMeta {
    pub model_id: String,
    pub d: usize,
}

#[derive(Debug, Default)]
pub struct EmbeddingCache {
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<(String, String), Arc<Vec<f32>>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir: Some(dir),
            ..Self::default()
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn get(&self, model_id: &str, hash: &str) -> Option<Arc<Vec<f32>>> {
        let key = (model_id.to_string(), hash.to_string());
        if let Some(v) = self.memory.read().expect("cache lock").get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Some(v.clone());
        }
        if let Some(v) = self.read_disk(model_id, hash) {
            let v = Arc::new(v);
            self.memory
                .write()
                .expect("cache lock")
                .insert(key, v.clone());
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Some(v);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        None
    }

    pub fn insert(&self, model_id: &str, hash: &str, vector: Vec<f32>) -> Result<Arc<Vec<f32>>> {
        if let Some(dir) = &self.dir {
            write_record(dir, model_id, hash, &vector)?;
        }
        let v = Arc::new(vector);
        self.memory
            .write()
            .expect("cache lock")
            .insert((model_id.to_string(), hash.to_string()), v.clone());
        Ok(v)
    }

    pub fn get_or_try_insert(
        &self,
        model_id: &str,
        hash: &str,
        compute: impl FnOnce() -> Result<Vec<f32>>,
    ) -> Result<Arc<Vec<f32>>> {
        if let Some(v) = self.get(model_id, hash) {
            return Ok(v);
        }
        self.insert(model_id, hash, compute()?)
    }

    fn read_disk(&self, model_id: &str, hash: &str) -> Option<Vec<f32>> {
        let dir = self.dir.as_ref()?;
        let meta: CacheRecordMeta =
            serde_json::from_slice(&fs::read(dir.join(format!("{hash}.json"))).ok()?).ok()?;
        if meta.model_id != model_id {
            return None;
        }
        let raw = fs::read(dir.join(format!("{hash}.f32"))).ok()?;
        if raw.len() != meta.d * 4 {
            tracing::warn!(hash, "cache record has wrong length, ignoring");
            return None;
        }
        Some(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )
    }
}

fn write_record(dir: &Path, model_id: &str, hash: &str, vector: &[f32]) -> Result<()> {
    let raw: Vec<u8> = vector.iter().flat_map(|v| v.to_le_bytes()).collect();
    let meta = serde_json::to_vec(&CacheRecordMeta {
        model_id: model_id.to_string(),
        d: vector.len(),
    })?;
    atomic_write(&dir.join(format!("{hash}.f32")), &raw)?;
    atomic_write(&dir.join(format!("{hash}.json")), &meta)
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let tmp = path.with_extension(format!(
        "tmp{}-{}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_layout_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::on_disk(dir.path()).unwrap();
        cache.insert("m1", "abc", vec![1.0, -2.5, 3.0]).unwrap();
        let raw = fs::read(dir.path().join("abc.f32")).unwrap();
        assert_eq!(raw.len(), 12);
        assert_eq!(f32::from_le_bytes(raw[4..8].try_into().unwrap()), -2.5);
        let meta: CacheRecordMeta =
            serde_json::from_slice(&fs::read(dir.path().join("abc.json")).unwrap()).unwrap();
        assert_eq!(meta, CacheRecordMeta { model_id: "m1".into(), d: 3 });

        let fresh = EmbeddingCache::on_disk(dir.path()).unwrap();
        assert_eq!(*fresh.get("m1", "abc").unwrap(), vec![1.0, -2.5, 3.0]);
        assert!(fresh.get("other-model", "abc").is_none());
    }

    #[test]
    fn concurrent_inserts_and_lookups() {
        let cache = Arc::new(EmbeddingCache::in_memory());
        std::thread::scope(|s| {
            for t in 0..8 {
                let cache = cache.clone();
                s.spawn(move || {
                    for i in 0..50 {
                        let key = format!("h{}", i % 10);
                        let v = cache
                            .get_or_try_insert("m", &key, || Ok(vec![(i % 10) as f32; 4]))
                            .unwrap();
                        assert_eq!(v[0], (i % 10) as f32, "thread {t}");
                    }
                });
            }
        });
    }
}
