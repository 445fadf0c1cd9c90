//! Append-only score cache: one JSON record per line, keyed by a content
//! hash of (model, prompt, completion pair). An in-memory index is built on
//! load so lookups never rescan the file. Corrupt lines are skipped with a
//! warning; a compaction pass rewrites the file with one record per key.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::BackendError;

const CACHE_FILE: &str = "scores.jsonl";

/// Content-hash key over the full query identity. Parts are length-prefixed
/// so distinct inputs can never collide by concatenation.
pub fn cache_key(model: &str, prompt: &str, completion_a: &str, completion_b: &str) -> String {
    let mut hasher = Sha256::new();
    for part in [model, prompt, completion_a, completion_b] {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hex::encode(hasher.finalize())
}

/// One cached pair query result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub yes_loglik: f64,
    pub no_loglik: f64,
    pub created_at: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub records: u64,
}

struct Inner {
    index: HashMap<String, (f64, f64)>,
    /// Keys in first-seen order, for deterministic compaction output.
    order: Vec<String>,
    file: Option<File>,
}

/// Thread-safe cache handle: concurrent reads, serialized appends.
pub struct ScoreCache {
    path: Option<PathBuf>,
    inner: Mutex<Inner>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl ScoreCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            inner: Mutex::new(Inner {
                index: HashMap::new(),
                order: Vec::new(),
                file: None,
            }),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    /// Opens (creating if needed) the cache file under `dir` and indexes it.
    pub fn open(dir: &Path) -> Result<Self, BackendError> {
        std::fs::create_dir_all(dir).map_err(|e| BackendError::Cache(e.to_string()))?;
        let path = dir.join(CACHE_FILE);
        let mut index = HashMap::new();
        let mut order = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(|e| BackendError::Cache(e.to_string()))?);
            for (lineno, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| BackendError::Cache(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(rec) => {
                        if !index.contains_key(&rec.key) {
                            order.push(rec.key.clone());
                        }
                        index.insert(rec.key, (rec.yes_loglik, rec.no_loglik));
                    }
                    Err(e) => {
                        log::warn!(
                            "skipping corrupt cache line {} in {}: {}",
                            lineno + 1,
                            path.display(),
                            e
                        );
                    }
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| BackendError::Cache(e.to_string()))?;
        Ok(Self {
            path: Some(path),
            inner: Mutex::new(Inner {
                index,
                order,
                file: Some(file),
            }),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn get(&self, key: &str) -> Option<(f64, f64)> {
        let inner = self.inner.lock().unwrap();
        match inner.index.get(key) {
            Some(&pair) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                Some(pair)
            }
            None => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    /// Records a result. The first write for a key wins; re-puts of an
    /// already-known key are ignored so the file keeps one record per key.
    pub fn put(&self, key: &str, yes_loglik: f64, no_loglik: f64) -> Result<(), BackendError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.index.contains_key(key) {
            return Ok(());
        }
        inner.index.insert(key.to_string(), (yes_loglik, no_loglik));
        inner.order.push(key.to_string());
        if let Some(file) = inner.file.as_mut() {
            let record = CacheRecord {
                key: key.to_string(),
                yes_loglik,
                no_loglik,
                created_at: unix_now(),
            };
            let line = serde_json::to_string(&record).map_err(|e| BackendError::Cache(e.to_string()))?;
            writeln!(file, "{line}").map_err(|e| BackendError::Cache(e.to_string()))?;
        }
        Ok(())
    }

    /// Rewrites the cache file with exactly one record per key, in
    /// first-seen order.
    pub fn compact(&self) -> Result<(), BackendError> {
        let Some(path) = &self.path else { return Ok(()) };
        let mut inner = self.inner.lock().unwrap();
        let tmp = path.with_extension("jsonl.tmp");
        {
            let mut out = File::create(&tmp).map_err(|e| BackendError::Cache(e.to_string()))?;
            let now = unix_now();
            for key in &inner.order {
                let (yes, no) = inner.index[key];
                let record = CacheRecord {
                    key: key.clone(),
                    yes_loglik: yes,
                    no_loglik: no,
                    created_at: now,
                };
                let line = serde_json::to_string(&record).map_err(|e| BackendError::Cache(e.to_string()))?;
                writeln!(out, "{line}").map_err(|e| BackendError::Cache(e.to_string()))?;
            }
        }
        std::fs::rename(&tmp, path).map_err(|e| BackendError::Cache(e.to_string()))?;
        inner.file = Some(
            OpenOptions::new()
                .append(true)
                .open(path)
                .map_err(|e| BackendError::Cache(e.to_string()))?,
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            records: self.len() as u64,
        }
    }
}

/// Writes a record into the cache directory and reads it back through a
/// fresh index. The round trip must reproduce the stored values exactly.
pub fn cache_roundtrip(record: &CacheRecord, dir: &Path) -> Result<CacheRecord, BackendError> {
    {
        let cache = ScoreCache::open(dir)?;
        cache.put(&record.key, record.yes_loglik, record.no_loglik)?;
    }
    let reloaded = ScoreCache::open(dir)?;
    let (yes, no) = reloaded
        .get(&record.key)
        .ok_or_else(|| BackendError::Cache(format!("record {} missing after write", record.key)))?;
    Ok(CacheRecord {
        key: record.key.clone(),
        yes_loglik: yes,
        no_loglik: no,
        created_at: record.created_at,
    })
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
