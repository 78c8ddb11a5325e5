//! Stage cache. Each stage result lives in `root/<stage>/<key>/`, where the
//! key hashes every input that determines it.

use std::path::{Path, PathBuf};

use pti_core::checkpoint::Container;
use pti_core::inversion::InversionResult;
use pti_core::pivotal::TuningResult;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bundle::{inversion_from_container, inversion_to_container, load_tuning, save_tuning};
use crate::config::hex;
use crate::error::{HarnessError, Result};

pub struct Cache {
    root: PathBuf,
}

impl Cache {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn key(stage: &str, inputs: &impl Serialize) -> String {
        let json = serde_json::to_string(inputs).expect("cache key serializes");
        let mut h = Sha256::new();
        h.update(stage.as_bytes());
        h.update([0]);
        h.update(json.as_bytes());
        hex(&h.finalize()[..16])
    }

    fn dir(&self, stage: &str, key: &str) -> PathBuf {
        self.root.join(stage).join(key)
    }

    /// Runs `compute` unless `stage/key` is present, writing through a
    /// temporary directory so a partial result is never read back.
    fn cached<T>(
        &self,
        stage: &str,
        key: &str,
        load: impl Fn(&Path) -> Result<T>,
        save: impl Fn(&Path, &T) -> Result<()>,
        compute: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        let dir = self.dir(stage, key);
        if dir.join(".done").exists() {
            return load(&dir);
        }
        let value = compute()?;
        let tmp = self.root.join(stage).join(format!(".{key}.tmp"));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| HarnessError::io(&tmp, e))?;
        }
        std::fs::create_dir_all(&tmp).map_err(|e| HarnessError::io(&tmp, e))?;
        save(&tmp, &value)?;
        std::fs::write(tmp.join(".done"), key).map_err(|e| HarnessError::io(&tmp, e))?;
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
        }
        std::fs::rename(&tmp, &dir).map_err(|e| HarnessError::io(&dir, e))?;
        Ok(value)
    }

    pub fn inversion(&self, key: &str, compute: impl FnOnce() -> Result<InversionResult>) -> Result<InversionResult> {
        self.cached(
            "inversion",
            key,
            |d| inversion_from_container(&Container::load(&d.join("result.ckpt"))?),
            |d, r| Ok(inversion_to_container(r).save(&d.join("result.ckpt"))?),
            compute,
        )
    }

    pub fn tuning(&self, key: &str, compute: impl FnOnce() -> Result<TuningResult>) -> Result<TuningResult> {
        self.cached("tuning", key, load_tuning, save_tuning, compute)
    }

    pub fn json<T: Serialize + DeserializeOwned>(
        &self,
        stage: &str,
        key: &str,
        compute: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        self.cached(
            stage,
            key,
            |d| {
                let p = d.join("value.json");
                let text = std::fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))?;
                Ok(serde_json::from_str(&text)?)
            },
            |d, v| {
                let p = d.join("value.json");
                std::fs::write(&p, serde_json::to_string(v)?).map_err(|e| HarnessError::io(&p, e))
            },
            compute,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn computes_once_then_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::new(dir.path());
        let key = Cache::key("s", &("a", 1));
        let mut calls = 0;
        let a: Vec<f64> = cache
            .json("s", &key, || {
                calls += 1;
                Ok(vec![0.1, 1.0 / 3.0])
            })
            .unwrap();
        let b: Vec<f64> = cache.json("s", &key, || panic!("recomputed")).unwrap();
        assert_eq!(a, b);
        assert_eq!(calls, 1);
    }

    #[test]
    fn keys_separate_stages_and_inputs() {
        assert_ne!(Cache::key("a", &1), Cache::key("b", &1));
        assert_ne!(Cache::key("a", &1), Cache::key("a", &2));
        assert_eq!(Cache::key("a", &1), Cache::key("a", &1));
    }

    #[test]
    fn failed_compute_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::new(dir.path());
        let r: Result<u32> = cache.json("s", "k", || Err(HarnessError::Config("boom".into())));
        assert!(r.is_err());
        assert!(!dir.path().join("s").join("k").exists());
    }
}
