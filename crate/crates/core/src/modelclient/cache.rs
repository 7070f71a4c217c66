use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Serialize, Deserialize)]
struct Entry {
    key: String,
    score: f64,
}

/// `(backend id, SHA-256 of the prompt, normalization flag, label)` joined into one string.
pub fn cache_key(backend_id: &str, prompt_text: &str, label: &str, normalize: bool) -> String {
    let digest = hex::encode(Sha256::digest(prompt_text.as_bytes()));
    format!(
        "{backend_id}|{digest}|{}|{label}",
        if normalize { "norm" } else { "raw" }
    )
}

/// Append-only JSONL store of `{key, score}` lines.
///
/// Loaded fully on open; writes are serialized behind a mutex and flushed per
/// line, so an interrupted process loses at most the line being written.
#[derive(Debug)]
pub struct ScoreCache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<String, f64>>,
    writer: Mutex<Option<File>>,
}

impl ScoreCache {
    pub fn in_memory() -> Self {
        ScoreCache {
            path: None,
            entries: Mutex::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Entry>(&line) {
                    Ok(e) => {
                        entries.insert(e.key, e.score);
                    }
                    // A torn final line from an interrupted write.
                    Err(err) => log::warn!("{}:{}: skipping cache line: {err}", path.display(), n + 1),
                }
            }
        } else if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        let len = file.metadata()?.len();
        if len > 0 && !fs::read(path)?.ends_with(b"\n") {
            file.write_all(b"\n")?;
        }
        Ok(ScoreCache {
            path: Some(path.to_path_buf()),
            entries: Mutex::new(entries),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.lock().expect("cache lock").get(key).copied()
    }

    pub fn insert(&self, key: String, score: f64) -> std::io::Result<()> {
        let mut writer = self.writer.lock().expect("cache writer lock");
        {
            let mut entries = self.entries.lock().expect("cache lock");
            if entries.contains_key(&key) {
                return Ok(());
            }
            entries.insert(key.clone(), score);
        }
        if let Some(file) = writer.as_mut() {
            let mut line = serde_json::to_string(&Entry { key, score }).expect("entry serializes");
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_separates_normalization_and_backend() {
        let a = cache_key("m", "Text: x\nLabel:", "pos", false);
        assert_ne!(a, cache_key("m", "Text: x\nLabel:", "pos", true));
        assert_ne!(a, cache_key("n", "Text: x\nLabel:", "pos", false));
        assert_ne!(a, cache_key("m", "Text: y\nLabel:", "pos", false));
        assert_eq!(a, cache_key("m", "Text: x\nLabel:", "pos", false));
    }

    #[test]
    fn persists_and_survives_torn_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c/scores.jsonl");
        {
            let c = ScoreCache::open(&path).unwrap();
            c.insert("k1".into(), -0.5).unwrap();
            c.insert("k2".into(), -1.25).unwrap();
            c.insert("k1".into(), -9.0).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"key\":\"k3\",\"sc").unwrap();
        let c = ScoreCache::open(&path).unwrap();
        assert_eq!(c.get("k1"), Some(-0.5));
        assert_eq!(c.get("k2"), Some(-1.25));
        assert_eq!(c.get("k3"), None);
        assert_eq!(c.len(), 2);
        c.insert("k4".into(), -2.0).unwrap();
        drop(c);
        assert_eq!(ScoreCache::open(&path).unwrap().get("k4"), Some(-2.0));
    }
}
