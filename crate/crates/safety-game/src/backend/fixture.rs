//! Deterministic fixture backend for tests and offline runs. Pair queries
//! and generation lists are keyed by the same content hash the cache uses;
//! optionally, missing pair entries are synthesized pseudo-randomly from the
//! key so arbitrary corpora can run without a scripted fixture.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::cache::cache_key;
use super::{Backend, BackendError, GenParams};

/// Hash key for a generation script: (model, prompt).
pub fn generation_key(model: &str, prompt: &str) -> String {
    let mut hasher = Sha256::new();
    for part in [model, prompt] {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FixtureFile {
    /// key -> (loglik of completion a, loglik of completion b)
    #[serde(default)]
    pub pairs: BTreeMap<String, (f64, f64)>,
    /// key -> scripted raw samples, consumed in order across resampling
    #[serde(default)]
    pub generations: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Default)]
pub struct FixtureBackend {
    data: FixtureFile,
    synthesize_missing: bool,
}

impl FixtureBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidConfig(format!("fixture {}: {e}", path.display())))?;
        let data: FixtureFile = serde_json::from_str(&text)
            .map_err(|e| BackendError::InvalidConfig(format!("fixture {}: {e}", path.display())))?;
        Ok(Self {
            data,
            synthesize_missing: false,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), BackendError> {
        let text = serde_json::to_string_pretty(&self.data)
            .map_err(|e| BackendError::Cache(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| BackendError::Cache(e.to_string()))
    }

    pub fn set_synthesize_missing(&mut self, on: bool) {
        self.synthesize_missing = on;
    }

    pub fn insert_pair(&mut self, model: &str, prompt: &str, a: &str, b: &str, loglik_a: f64, loglik_b: f64) {
        let key = cache_key(model, prompt, a, b);
        self.data.pairs.insert(key, (loglik_a, loglik_b));
    }

    pub fn insert_generation(&mut self, model: &str, prompt: &str, samples: Vec<String>) {
        self.data.generations.insert(generation_key(model, prompt), samples);
    }
}

/// Deterministic pseudo log-likelihood in roughly [-6, -0.01], derived from
/// a slice of the key hash.
fn synthesize(key: &str, salt: u8) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(key.as_bytes());
    hasher.update([salt]);
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    let unit = (u64::from_le_bytes(bytes) as f64) / (u64::MAX as f64);
    -0.01 - 5.99 * unit
}

impl Backend for FixtureBackend {
    fn logprob_pair(
        &self,
        model: &str,
        prompt: &str,
        completion_a: &str,
        completion_b: &str,
    ) -> Result<(f64, f64), BackendError> {
        let key = cache_key(model, prompt, completion_a, completion_b);
        if let Some(&pair) = self.data.pairs.get(&key) {
            return Ok(pair);
        }
        if self.synthesize_missing {
            return Ok((synthesize(&key, 0), synthesize(&key, 1)));
        }
        Err(BackendError::MissingFixture(key))
    }

    fn generate(
        &self,
        model: &str,
        prompt: &str,
        _params: &GenParams,
        n: usize,
        seed: u64,
        offset: usize,
    ) -> Result<Vec<String>, BackendError> {
        let key = generation_key(model, prompt);
        if let Some(samples) = self.data.generations.get(&key) {
            let end = (offset + n).min(samples.len());
            if offset >= end {
                return Ok(Vec::new());
            }
            return Ok(samples[offset..end].to_vec());
        }
        if self.synthesize_missing {
            return Ok((0..n)
                .map(|i| format!("synthetic answer {} for seed {}<|return|>", offset + i, seed))
                .collect());
        }
        Err(BackendError::MissingFixture(key))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_pair_passthrough() {
        let mut fixture = FixtureBackend::new();
        fixture.insert_pair("m", "p", " Yes", " No", -0.2, -1.7);
        let got = fixture.logprob_pair("m", "p", " Yes", " No").unwrap();
        assert_eq!(got, (-0.2, -1.7));
        assert!(matches!(
            fixture.logprob_pair("m", "other", " Yes", " No"),
            Err(BackendError::MissingFixture(_))
        ));
    }

    #[test]
    fn scripted_generation_respects_offset() {
        let mut fixture = FixtureBackend::new();
        fixture.insert_generation("m", "p", vec!["a".into(), "b".into(), "c".into()]);
        let params = GenParams::default();
        assert_eq!(fixture.generate("m", "p", &params, 2, 0, 0).unwrap(), vec!["a", "b"]);
        assert_eq!(fixture.generate("m", "p", &params, 2, 0, 2).unwrap(), vec!["c"]);
        assert!(fixture.generate("m", "p", &params, 2, 0, 3).unwrap().is_empty());
    }

    #[test]
    fn synthesis_is_deterministic() {
        let mut fixture = FixtureBackend::new();
        fixture.set_synthesize_missing(true);
        let a = fixture.logprob_pair("m", "p", " Yes", " No").unwrap();
        let b = fixture.logprob_pair("m", "p", " Yes", " No").unwrap();
        assert_eq!(a, b);
        assert!(a.0 < 0.0 && a.0 > -6.5);
        let c = fixture.logprob_pair("m", "p2", " Yes", " No").unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.json");
        let mut fixture = FixtureBackend::new();
        fixture.insert_pair("m", "p", "a", "b", -1.0, -2.0);
        fixture.insert_generation("m", "g", vec!["x".into()]);
        fixture.save(&path).unwrap();
        let loaded = FixtureBackend::from_file(&path).unwrap();
        assert_eq!(loaded.logprob_pair("m", "p", "a", "b").unwrap(), (-1.0, -2.0));
        assert_eq!(
            loaded.generate("m", "g", &GenParams::default(), 1, 0, 0).unwrap(),
            vec!["x"]
        );
    }
}
