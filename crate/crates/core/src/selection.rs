//! Seeded exemplar selection.
//!
//! 1. [`classify_pool`] predicts every candidate exemplar with standard ICL
//!    (k random pool-mates as context), splitting the pool into correctly and
//!    incorrectly predicted entries.
//! 2. [`sample_fewshot`] draws `m = proportion·k` exemplars from the incorrect
//!    partition and `k − m` from the correct one, shuffles them, then recomputes
//!    each exemplar's prediction leave-one-out inside the chosen set. Those LOO
//!    predictions are the "predicted label" column of the corrective prompt.

use std::collections::HashMap;

use rand::seq::{index, SliceRandom};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datamodel::{corrected_count, proportion_key, Example, LabelSet};
use crate::modelclient::{predict, LabelScorer, ModelError};
use crate::parallel::ordered_map;
use crate::prompting::build_icl_prompt;

/// Upper bound on exemplar swaps in strict-proportion mode.
pub const MAX_STRICT_SWAPS: usize = 50;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("pool too small: {available} available, {required} required")]
    PoolTooSmall { available: usize, required: usize },
    #[error("insufficient {partition} pool entries: {available} available, {required} required")]
    Insufficient {
        partition: &'static str,
        available: usize,
        required: usize,
    },
    #[error("backend failed on example {example_id:?}: {source}")]
    Backend {
        example_id: String,
        #[source]
        source: ModelError,
    },
    #[error("{0}")]
    InvalidProportion(String),
    #[error("leave-one-out needs at least 2 exemplars and a valid index (index {index}, k {k})")]
    InvalidLoo { index: usize, k: usize },
    #[error(
        "strict proportion unattainable: requested {requested} corrected, achieved {achieved} after {swaps} swaps"
    )]
    StrictUnattainable {
        requested: usize,
        achieved: usize,
        swaps: usize,
    },
    #[error("pool file does not match the pool: {0}")]
    PoolMismatch(String),
}

/// Deterministic RNG derived from a domain tag and a list of key parts.
pub fn derived_rng(tag: &str, parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub example: Example,
    pub pool_prediction: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifiedPool {
    pub entries: Vec<PoolEntry>,
    pub context_seed: u64,
    pub backend_id: String,
    pub k_used: usize,
}

#[derive(Serialize, Deserialize)]
struct PoolLine {
    example_id: String,
    pool_prediction: String,
    correct: bool,
    seed: u64,
}

impl ClassifiedPool {
    pub fn correct_count(&self) -> usize {
        self.entries.iter().filter(|e| e.correct).count()
    }

    pub fn incorrect_count(&self) -> usize {
        self.entries.len() - self.correct_count()
    }

    /// Persisted form: one `{example_id, pool_prediction, correct, seed}` line per entry.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let line = PoolLine {
                example_id: e.example.id.clone(),
                pool_prediction: e.pool_prediction.clone(),
                correct: e.correct,
                seed: self.context_seed,
            };
            out.push_str(&serde_json::to_string(&line).expect("pool line serializes"));
            out.push('\n');
        }
        out
    }

    /// Rebuilds a pool from its persisted lines and the pool examples they refer to.
    pub fn from_jsonl(
        body: &str,
        pool: &[Example],
        backend_id: &str,
        k_used: usize,
    ) -> Result<ClassifiedPool, SelectionError> {
        let by_id: HashMap<&str, &Example> = pool.iter().map(|e| (e.id.as_str(), e)).collect();
        let mut entries = Vec::with_capacity(pool.len());
        let mut seed = None;
        for (n, line) in body.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let l: PoolLine =
                serde_json::from_str(line).map_err(|e| SelectionError::PoolMismatch(format!("line {}: {e}", n + 1)))?;
            let ex = by_id
                .get(l.example_id.as_str())
                .ok_or_else(|| SelectionError::PoolMismatch(format!("unknown id {:?}", l.example_id)))?;
            if l.correct != (l.pool_prediction == ex.gold_label) {
                return Err(SelectionError::PoolMismatch(format!(
                    "inconsistent correctness for {:?}",
                    l.example_id
                )));
            }
            if *seed.get_or_insert(l.seed) != l.seed {
                return Err(SelectionError::PoolMismatch("mixed seeds".into()));
            }
            entries.push(PoolEntry {
                example: (*ex).clone(),
                pool_prediction: l.pool_prediction,
                correct: l.correct,
            });
        }
        let ids_match = entries.len() == pool.len() && entries.iter().zip(pool).all(|(e, p)| e.example.id == p.id);
        if !ids_match {
            return Err(SelectionError::PoolMismatch("entries differ from the pool".into()));
        }
        Ok(ClassifiedPool {
            entries,
            context_seed: seed.unwrap_or_default(),
            backend_id: backend_id.to_string(),
            k_used,
        })
    }
}

/// Predicts every pool entry via ICL with `k` seeded-random pool-mates as context.
pub fn classify_pool(
    pool: &[Example],
    labels: &LabelSet,
    backend: &dyn LabelScorer,
    k: usize,
    seed: u64,
    workers: usize,
) -> Result<ClassifiedPool, SelectionError> {
    if pool.len() < k + 1 {
        return Err(SelectionError::PoolTooSmall {
            available: pool.len(),
            required: k + 1,
        });
    }
    let results = ordered_map(pool, workers, |i, ex| {
        let mut rng = derived_rng(
            "pool-context",
            &[&seed.to_le_bytes(), &(i as u64).to_le_bytes(), ex.id.as_bytes()],
        );
        let context: Vec<&Example> = index::sample(&mut rng, pool.len() - 1, k)
            .into_iter()
            .map(|j| if j >= i { &pool[j + 1] } else { &pool[j] })
            .collect();
        let prompt = build_icl_prompt(
            context.iter().map(|e| (e.text.as_str(), e.gold_label.as_str())),
            &ex.text,
            labels,
        );
        predict(&prompt, backend, Some(&ex.gold_label))
            .map(|(label, _)| PoolEntry {
                correct: label == ex.gold_label,
                example: ex.clone(),
                pool_prediction: label,
            })
            .map_err(|source| SelectionError::Backend {
                example_id: ex.id.clone(),
                source,
            })
    });
    let entries = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(ClassifiedPool {
        entries,
        context_seed: seed,
        backend_id: backend.backend_id().to_string(),
        k_used: k,
    })
}

/// Ordered exemplars with their leave-one-out predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSet {
    pub exemplars: Vec<Example>,
    pub loo_predictions: Vec<String>,
    pub requested_corrected: usize,
    pub achieved_corrected: usize,
}

impl FewShotSet {
    pub fn k(&self) -> usize {
        self.exemplars.len()
    }

    /// `(text, predicted, gold)` triplets for the corrective prompt.
    pub fn triplets(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.exemplars
            .iter()
            .zip(&self.loo_predictions)
            .map(|(e, p)| (e.text.as_str(), p.as_str(), e.gold_label.as_str()))
    }

    /// `(text, gold)` pairs for the standard prompt.
    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.exemplars.iter().map(|e| (e.text.as_str(), e.gold_label.as_str()))
    }

    /// Checks the structural invariants (lengths and the achieved count).
    pub fn is_consistent(&self) -> bool {
        self.exemplars.len() == self.loo_predictions.len()
            && self.achieved_corrected
                == self
                    .exemplars
                    .iter()
                    .zip(&self.loo_predictions)
                    .filter(|(e, p)| e.gold_label != **p)
                    .count()
    }
}

/// Predicts `exemplars[index]` with the other exemplars, in their original
/// order, as context.
pub fn loo_predict(
    exemplars: &[Example],
    index: usize,
    labels: &LabelSet,
    backend: &dyn LabelScorer,
) -> Result<String, SelectionError> {
    if exemplars.len() < 2 || index >= exemplars.len() {
        return Err(SelectionError::InvalidLoo {
            index,
            k: exemplars.len(),
        });
    }
    let query = &exemplars[index];
    let prompt = build_icl_prompt(
        exemplars
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != index)
            .map(|(_, e)| (e.text.as_str(), e.gold_label.as_str())),
        &query.text,
        labels,
    );
    predict(&prompt, backend, Some(&query.gold_label))
        .map(|(l, _)| l)
        .map_err(|source| SelectionError::Backend {
            example_id: query.id.clone(),
            source,
        })
}

fn loo_all(
    exemplars: &[Example],
    labels: &LabelSet,
    backend: &dyn LabelScorer,
    workers: usize,
) -> Result<Vec<String>, SelectionError> {
    ordered_map(exemplars, workers, |i, _| loo_predict(exemplars, i, labels, backend))
        .into_iter()
        .collect()
}

fn count_wrong(exemplars: &[Example], preds: &[String]) -> usize {
    exemplars.iter().zip(preds).filter(|(e, p)| e.gold_label != **p).count()
}

#[derive(Debug, Clone, Copy)]
pub struct SampleOptions {
    pub strict: bool,
    pub workers: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            strict: false,
            workers: 1,
        }
    }
}

/// Draws a stratified, shuffled few-shot set and computes its LOO predictions.
pub fn sample_fewshot(
    pool: &ClassifiedPool,
    k: usize,
    proportion: f64,
    seed: u64,
    labels: &LabelSet,
    backend: &dyn LabelScorer,
    opts: SampleOptions,
) -> Result<FewShotSet, SelectionError> {
    let m = corrected_count(proportion, k).map_err(|e| SelectionError::InvalidProportion(e.to_string()))?;
    let incorrect: Vec<usize> = (0..pool.entries.len()).filter(|&i| !pool.entries[i].correct).collect();
    let correct: Vec<usize> = (0..pool.entries.len()).filter(|&i| pool.entries[i].correct).collect();
    if incorrect.len() < m {
        return Err(SelectionError::Insufficient {
            partition: "incorrect",
            available: incorrect.len(),
            required: m,
        });
    }
    if correct.len() < k - m {
        return Err(SelectionError::Insufficient {
            partition: "correct",
            available: correct.len(),
            required: k - m,
        });
    }

    let mut rng = derived_rng(
        "fewshot",
        &[
            &seed.to_le_bytes(),
            &(k as u64).to_le_bytes(),
            proportion_key(proportion).as_bytes(),
        ],
    );
    // Permute each partition once: the prefix is the draw, the rest are spares for strict mode.
    let mut inc_order = incorrect.clone();
    inc_order.shuffle(&mut rng);
    let mut cor_order = correct.clone();
    cor_order.shuffle(&mut rng);
    let mut chosen: Vec<(usize, bool)> = inc_order[..m]
        .iter()
        .map(|&i| (i, true))
        .chain(cor_order[..k - m].iter().map(|&i| (i, false)))
        .collect();
    chosen.shuffle(&mut rng);
    let mut spare_inc = inc_order[m..].iter().copied();
    let mut spare_cor = cor_order[k - m..].iter().copied();

    let mut exemplars: Vec<Example> = chosen.iter().map(|&(i, _)| pool.entries[i].example.clone()).collect();
    let mut loo = loo_all(&exemplars, labels, backend, opts.workers)?;
    let mut achieved = count_wrong(&exemplars, &loo);

    if opts.strict {
        let mut swaps = 0;
        while achieved != m {
            if swaps == MAX_STRICT_SWAPS {
                return Err(SelectionError::StrictUnattainable {
                    requested: m,
                    achieved,
                    swaps,
                });
            }
            // Too few errors: replace a hard exemplar that LOO got right.
            // Too many: replace an easy exemplar that LOO got wrong.
            let want_hard = achieved < m;
            let candidates: Vec<usize> = (0..k)
                .filter(|&p| {
                    let (_, hard) = chosen[p];
                    let loo_wrong = loo[p] != exemplars[p].gold_label;
                    hard == want_hard && loo_wrong != want_hard
                })
                .collect();
            let replacement = if want_hard { spare_inc.next() } else { spare_cor.next() };
            let (Some(&pos), Some(new)) = (candidates.first(), replacement) else {
                return Err(SelectionError::StrictUnattainable {
                    requested: m,
                    achieved,
                    swaps,
                });
            };
            chosen[pos] = (new, want_hard);
            exemplars[pos] = pool.entries[new].example.clone();
            loo = loo_all(&exemplars, labels, backend, opts.workers)?;
            achieved = count_wrong(&exemplars, &loo);
            swaps += 1;
        }
    }

    Ok(FewShotSet {
        exemplars,
        loo_predictions: loo,
        requested_corrected: m,
        achieved_corrected: achieved,
    })
}
