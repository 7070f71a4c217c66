//! Canonical data types, dataset ingestion and run-configuration parsing.
//!
//! Datasets live on disk as a directory per dataset:
//!
//! ```text
//! {data_dir}/{name}/train.jsonl
//! {data_dir}/{name}/test.jsonl
//! {data_dir}/{name}/labels.txt
//! ```
//!
//! Each JSONL line is `{"id": ..., "text": ..., "label": ...}`. The labels file
//! holds one verbalization per line; its order is the argmax tie-breaking order.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::modelclient::BackendDescriptor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed JSONL record: {message}")]
    MalformedLine { path: String, line: usize, message: String },
    #[error("example {id:?} has label {label:?} which is not in the label set")]
    UnknownLabel { id: String, label: String },
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("example {0:?} has empty text")]
    EmptyText(String),
    #[error("dataset {0:?} contains no examples")]
    EmptyDataset(String),
    #[error("invalid label set: {0}")]
    InvalidLabelSet(String),
    #[error("label {label:?} never appears in the train split of {dataset:?}")]
    LabelNotInTrain { dataset: String, label: String },
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
}

/// Which half of a dataset a file holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// `test`/`dev` file stems map to [`Split::Test`], everything else to train.
    pub fn from_file_stem(stem: &str) -> Split {
        let stem = stem.to_ascii_lowercase();
        if stem.contains("test") || stem.contains("dev") {
            Split::Test
        } else {
            Split::Train
        }
    }
}

/// One labeled text instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub text: String,
    #[serde(rename = "label")]
    pub gold_label: String,
}

impl Example {
    pub fn new(id: impl Into<String>, text: impl Into<String>, gold: impl Into<String>) -> Self {
        Example {
            id: id.into(),
            text: text.into(),
            gold_label: gold.into(),
        }
    }
}

/// Ordered, duplicate-free label verbalizations.
///
/// Datasets require at least two labels; a bare candidate set used for scoring
/// may hold a single label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet(Vec<String>);

impl LabelSet {
    pub fn new<I, S>(labels: I) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(DataError::InvalidLabelSet("no labels".into()));
        }
        let mut seen = HashSet::new();
        for label in &labels {
            if label.trim().is_empty() {
                return Err(DataError::InvalidLabelSet("empty label".into()));
            }
            if !seen.insert(label.as_str()) {
                return Err(DataError::InvalidLabelSet(format!("duplicate label {label:?}")));
            }
        }
        Ok(LabelSet(labels))
    }

    /// Parses a labels file body: one verbalization per line, blank lines ignored.
    pub fn parse(body: &str) -> Result<Self, DataError> {
        let labels: Vec<&str> = body
            .lines()
            .map(|l| l.trim_end_matches('\r'))
            .filter(|l| !l.trim().is_empty())
            .collect();
        let set = LabelSet::new(labels)?;
        if set.len() < 2 {
            return Err(DataError::InvalidLabelSet("a dataset needs at least two labels".into()));
        }
        Ok(set)
    }

    pub fn labels(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.0.iter().any(|l| l == label)
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.0.iter().position(|l| l == label)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    /// Labels-file serialization (one per line, trailing newline).
    pub fn to_file_body(&self) -> String {
        let mut out = String::new();
        for l in &self.0 {
            out.push_str(l);
            out.push('\n');
        }
        out
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = DataError;
    fn try_from(v: Vec<String>) -> Result<Self, Self::Error> {
        LabelSet::new(v)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(s: LabelSet) -> Self {
        s.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<Example>,
    pub label_set: LabelSet,
    pub split: Split,
}

impl Dataset {
    /// Parses and validates a JSONL body against `label_set`. `source` is used
    /// only in error messages.
    pub fn from_jsonl(
        name: &str,
        source: &str,
        body: &str,
        label_set: LabelSet,
        split: Split,
    ) -> Result<Dataset, DataError> {
        let mut examples = Vec::new();
        let mut ids = HashSet::new();
        for (idx, line) in body.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let ex: Example = serde_json::from_str(line).map_err(|e| DataError::MalformedLine {
                path: source.to_string(),
                line: idx + 1,
                message: e.to_string(),
            })?;
            if ex.text.is_empty() {
                return Err(DataError::EmptyText(ex.id));
            }
            if !label_set.contains(&ex.gold_label) {
                return Err(DataError::UnknownLabel {
                    id: ex.id,
                    label: ex.gold_label,
                });
            }
            if !ids.insert(ex.id.clone()) {
                return Err(DataError::DuplicateId(ex.id));
            }
            examples.push(ex);
        }
        if examples.is_empty() {
            return Err(DataError::EmptyDataset(name.to_string()));
        }
        let ds = Dataset {
            name: name.to_string(),
            examples,
            label_set,
            split,
        };
        if split == Split::Train {
            for label in ds.label_set.iter() {
                if !ds.examples.iter().any(|e| e.gold_label == label) {
                    return Err(DataError::LabelNotInTrain {
                        dataset: ds.name.clone(),
                        label: label.to_string(),
                    });
                }
            }
        }
        Ok(ds)
    }

    /// JSONL serialization; re-parses to an identical dataset.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(ex).expect("example serializes"));
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

fn read(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a JSONL file validated against a sidecar labels file.
///
/// The dataset name is the parent directory's name and the split is inferred
/// from the file stem (`test`/`dev` → test, anything else → train).
pub fn load_dataset(path: &Path, label_path: &Path) -> Result<Dataset, DataError> {
    let labels = LabelSet::parse(&read(label_path)?)?;
    let body = read(path)?;
    let name = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    let split = Split::from_file_stem(
        &path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    );
    Dataset::from_jsonl(&name, &path.display().to_string(), &body, labels, split)
}

/// Train and test halves of one dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetPair {
    pub train: Dataset,
    pub test: Dataset,
}

impl DatasetPair {
    pub fn load(data_dir: &Path, name: &str) -> Result<DatasetPair, DataError> {
        let dir = data_dir.join(name);
        let labels = dir.join("labels.txt");
        let mut train = load_dataset(&dir.join("train.jsonl"), &labels)?;
        let mut test = load_dataset(&dir.join("test.jsonl"), &labels)?;
        train.name = name.to_string();
        test.name = name.to_string();
        train.split = Split::Train;
        test.split = Split::Test;
        Ok(DatasetPair { train, test })
    }

    pub fn label_set(&self) -> &LabelSet {
        &self.train.label_set
    }
}

/// Prompting mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Mode {
    Icl,
    Cicl,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Icl => "icl",
            Mode::Cicl => "cicl",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Mode::Icl => "ICL",
            Mode::Cicl => "CICL",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "icl" => Ok(Mode::Icl),
            "cicl" => Ok(Mode::Cicl),
            _ => Err(format!("unknown mode {s:?} (expected ICL or CICL)")),
        }
    }
}

impl TryFrom<String> for Mode {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Mode> for String {
    fn from(m: Mode) -> Self {
        m.display_name().to_string()
    }
}

/// A corrected-example proportion that has been checked against `k`.
pub fn corrected_count(proportion: f64, k: usize) -> Result<usize, ConfigError> {
    if !(0.0..=1.0).contains(&proportion) || !proportion.is_finite() {
        return Err(ConfigError::Invalid(format!("proportion {proportion} outside [0, 1]")));
    }
    let exact = proportion * k as f64;
    let rounded = exact.round();
    if (exact - rounded).abs() > 1e-9 {
        return Err(ConfigError::Invalid(format!("{proportion:.2}·{k} not integral")));
    }
    Ok(rounded as usize)
}

/// Canonical directory/key spelling of a proportion, e.g. `0.25`.
pub fn proportion_key(p: f64) -> String {
    format!("{p:.2}")
}

fn default_k() -> usize {
    8
}
fn default_proportions() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn default_modes() -> Vec<Mode> {
    vec![Mode::Icl, Mode::Cicl]
}
fn default_pool_size() -> usize {
    200
}
fn default_eval_cap() -> usize {
    500
}
fn default_error_budget() -> usize {
    3
}
fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// One experiment grid. Every field has a default, so an empty file is valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub datasets: Vec<String>,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub backend: BackendDescriptor,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_proportions")]
    pub proportions: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    /// Divide continuation log-probabilities by their token count.
    #[serde(default)]
    pub normalize: bool,
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    #[serde(default = "default_eval_cap")]
    pub eval_cap: usize,
    #[serde(default = "default_error_budget")]
    pub error_budget: usize,
    #[serde(default)]
    pub strict_proportion: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_toml_str("").expect("empty config is valid")
    }
}

impl RunConfig {
    pub fn from_toml_str(body: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = toml::from_str(body).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.k == 0 {
            return Err(ConfigError::Invalid("k must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("at least one seed is required".into()));
        }
        if self.modes.is_empty() {
            return Err(ConfigError::Invalid("at least one mode is required".into()));
        }
        if self.proportions.is_empty() {
            return Err(ConfigError::Invalid("at least one proportion is required".into()));
        }
        for &p in &self.proportions {
            corrected_count(p, self.k)?;
        }
        let mut seen = HashSet::new();
        for &p in &self.proportions {
            if !seen.insert(proportion_key(p)) {
                return Err(ConfigError::Invalid(format!("duplicate proportion {p}")));
            }
        }
        let mut seen = HashSet::new();
        for s in &self.seeds {
            if !seen.insert(s) {
                return Err(ConfigError::Invalid(format!("duplicate seed {s}")));
            }
        }
        if self.wants(Mode::Cicl) && self.k < 2 {
            return Err(ConfigError::Invalid(
                "CICL needs k >= 2 for leave-one-out predictions".into(),
            ));
        }
        if self.pool_size <= self.k {
            return Err(ConfigError::Invalid(format!(
                "pool_size {} must exceed k {}",
                self.pool_size, self.k
            )));
        }
        if self.eval_cap == 0 {
            return Err(ConfigError::Invalid("eval_cap must be at least 1".into()));
        }
        self.backend
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn wants(&self, mode: Mode) -> bool {
        self.modes.contains(&mode)
    }

    /// Modes in canonical order (ICL before CICL), deduplicated.
    pub fn ordered_modes(&self) -> Vec<Mode> {
        let mut modes = self.modes.clone();
        modes.sort();
        modes.dedup();
        modes
    }
}

pub fn load_run_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let body = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    RunConfig::from_toml_str(&body)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary() -> LabelSet {
        LabelSet::new(["positive", "negative"]).unwrap()
    }

    #[test]
    fn loads_valid_lines() {
        let body = r#"{"id":"1","text":"great","label":"positive"}
{"id":"2","text":"awful","label":"negative"}
{"id":"3","text":"fine","label":"positive"}
"#;
        let ds = Dataset::from_jsonl("toy", "toy", body, binary(), Split::Train).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.examples[1].gold_label, "negative");
    }

    #[test]
    fn unknown_label_names_offending_id() {
        let body = "{\"id\":\"a\",\"text\":\"x\",\"label\":\"positive\"}\n{\"id\":\"b\",\"text\":\"y\",\"label\":\"negative\"}\n{\"id\":\"zz9\",\"text\":\"meh\",\"label\":\"neutral\"}\n";
        let err = Dataset::from_jsonl("toy", "toy", body, binary(), Split::Train).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("zz9"), "{msg}");
        assert!(matches!(err, DataError::UnknownLabel { .. }));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let body = "{\"id\":\"a\",\"text\":\"x\",\"label\":\"positive\"}\n{not json\n";
        let err = Dataset::from_jsonl("toy", "f.jsonl", body, binary(), Split::Test).unwrap_err();
        assert!(matches!(err, DataError::MalformedLine { line: 2, .. }), "{err}");
    }

    #[test]
    fn duplicate_and_empty_are_rejected() {
        let body = "{\"id\":\"a\",\"text\":\"x\",\"label\":\"positive\"}\n{\"id\":\"a\",\"text\":\"y\",\"label\":\"negative\"}\n";
        assert!(matches!(
            Dataset::from_jsonl("toy", "toy", body, binary(), Split::Test),
            Err(DataError::DuplicateId(_))
        ));
        assert!(matches!(
            Dataset::from_jsonl("toy", "toy", "\n", binary(), Split::Test),
            Err(DataError::EmptyDataset(_))
        ));
    }

    #[test]
    fn train_split_must_cover_every_label() {
        let body = "{\"id\":\"a\",\"text\":\"x\",\"label\":\"positive\"}\n";
        assert!(matches!(
            Dataset::from_jsonl("toy", "toy", body, binary(), Split::Train),
            Err(DataError::LabelNotInTrain { .. })
        ));
        assert!(Dataset::from_jsonl("toy", "toy", body, binary(), Split::Test).is_ok());
    }

    #[test]
    fn label_file_rules() {
        assert!(LabelSet::parse("a\n").is_err());
        assert!(LabelSet::parse("a\na\n").is_err());
        let set = LabelSet::parse("abbreviation\nentity\ndescription\nhuman\nlocation\nnumeric\n").unwrap();
        assert_eq!(set.position("abbreviation"), Some(0));
        assert_eq!(set.len(), 6);
    }

    #[test]
    fn empty_config_gets_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.k, 8);
        assert_eq!(cfg.proportions, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(cfg.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(cfg.modes, vec![Mode::Icl, Mode::Cicl]);
        assert_eq!(cfg.pool_size, 200);
        assert_eq!(cfg.eval_cap, 500);
    }

    #[test]
    fn non_integral_proportion_is_rejected() {
        let err = RunConfig::from_toml_str("k = 8\nproportions = [0.30]\n").unwrap_err();
        assert_eq!(err.to_string(), "0.30·8 not integral");
    }

    #[test]
    fn quarter_of_four_is_one() {
        let cfg = RunConfig::from_toml_str("k = 4\nproportions = [0.25]\n").unwrap();
        assert_eq!(corrected_count(cfg.proportions[0], cfg.k).unwrap(), 1);
    }

    #[test]
    fn bad_modes_and_seeds() {
        assert!(RunConfig::from_toml_str("modes = [\"zero-shot\"]").is_err());
        assert!(RunConfig::from_toml_str("modes = []").is_err());
        assert!(RunConfig::from_toml_str("seeds = []").is_err());
        assert!(RunConfig::from_toml_str("k = 0").is_err());
        let cfg = RunConfig::from_toml_str("modes = [\"icl\"]").unwrap();
        assert_eq!(cfg.modes, vec![Mode::Icl]);
    }
}
