//! On-disk layout of a sweep.
//!
//! ```text
//! {out_dir}/cache/scores.jsonl                         HTTP score cache
//! {out_dir}/{config_hash}/manifest.json                config snapshot + expected cells
//! {out_dir}/{config_hash}/{dataset}/pool/{seed}.jsonl  classified pool
//! {out_dir}/{config_hash}/{dataset}/fewshot/{proportion}/{seed}.json
//! {out_dir}/{config_hash}/{dataset}/{mode}/{proportion}/{seed}.jsonl
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{proportion_key, Mode, RunConfig};

/// One (dataset, mode, proportion, seed) unit of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub dataset: String,
    pub mode: Mode,
    pub proportion: f64,
    pub seed: u64,
}

impl CellKey {
    pub fn relative_path(&self) -> PathBuf {
        PathBuf::from(&self.dataset)
            .join(self.mode.as_str())
            .join(proportion_key(self.proportion))
            .join(format!("{}.jsonl", self.seed))
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.dataset,
            self.mode.as_str(),
            proportion_key(self.proportion),
            self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedCell {
    #[serde(flatten)]
    pub key: CellKey,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub backend_id: String,
    pub config: RunConfig,
    /// SHA-256 over each dataset's train, test and labels files.
    pub dataset_digests: BTreeMap<String, String>,
    pub cells: Vec<ExpectedCell>,
}

#[derive(Serialize)]
struct HashedConfig<'a> {
    config: serde_json::Value,
    dataset_digests: &'a BTreeMap<String, String>,
}

/// Config snapshot with machine-specific paths removed.
pub fn portable_config(config: &RunConfig) -> serde_json::Value {
    let mut v = serde_json::to_value(config).expect("config serializes");
    if let Some(obj) = v.as_object_mut() {
        obj.remove("out_dir");
        obj.remove("data_dir");
    }
    v
}

/// Content address of a sweep: the result-affecting config plus dataset digests.
pub fn config_hash(config: &RunConfig, dataset_digests: &BTreeMap<String, String>) -> String {
    let hashed = HashedConfig {
        config: portable_config(config),
        dataset_digests,
    };
    let bytes = serde_json::to_vec(&hashed).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))[..16].to_string()
}

pub fn digest_files(paths: &[PathBuf]) -> io::Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        let bytes = fs::read(p)?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Writes via a temporary sibling and rename, so readers never see partial files.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn cell_path(&self, key: &CellKey) -> PathBuf {
        self.root.join(key.relative_path())
    }

    pub fn pool_path(&self, dataset: &str, seed: u64) -> PathBuf {
        self.root.join(dataset).join("pool").join(format!("{seed}.jsonl"))
    }

    pub fn fewshot_path(&self, dataset: &str, proportion: f64, seed: u64) -> PathBuf {
        self.root
            .join(dataset)
            .join("fewshot")
            .join(proportion_key(proportion))
            .join(format!("{seed}.json"))
    }

    pub fn read_manifest(&self) -> io::Result<Manifest> {
        let body = fs::read_to_string(self.manifest_path())?;
        serde_json::from_str(&body).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    pub fn write_manifest(&self, m: &Manifest) -> io::Result<()> {
        let mut body = serde_json::to_string_pretty(m).expect("manifest serializes");
        body.push('\n');
        write_atomic(&self.manifest_path(), body.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_paths() {
        let key = CellKey {
            dataset: "trec".into(),
            mode: Mode::Cicl,
            proportion: 0.25,
            seed: 3,
        };
        assert_eq!(key.relative_path(), PathBuf::from("trec/cicl/0.25/3.jsonl"));
        assert_eq!(key.to_string(), "trec/cicl/0.25/3");
    }

    #[test]
    fn hash_ignores_paths_but_not_parameters() {
        let digests = BTreeMap::from([("d".to_string(), "abc".to_string())]);
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = "/elsewhere".into();
        b.data_dir = "/data2".into();
        assert_eq!(config_hash(&a, &digests), config_hash(&b, &digests));
        b.k = 4;
        b.proportions = vec![0.0, 0.5];
        assert_ne!(config_hash(&a, &digests), config_hash(&b, &digests));
        let other = BTreeMap::from([("d".to_string(), "abd".to_string())]);
        assert_ne!(config_hash(&a, &digests), config_hash(&a, &other));
    }

    #[test]
    fn atomic_write_leaves_no_tmp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b/c.json");
        write_atomic(&p, b"{}").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"{}");
        assert!(!dir.path().join("a/b/c.json.tmp").exists());
    }
}
