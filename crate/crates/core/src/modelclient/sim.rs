use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{BackendDescriptor, BackendKind, LabelScorer, LabelScores, ModelError};
use crate::datamodel::{LabelSet, Mode};
use crate::prompting::{cicl_query_prediction, PromptSpec};

const CHOSEN: f64 = 0.0;
const OTHER: f64 = -1.0;

/// Deterministic stand-in for a language model.
///
/// * `sim-oracle` scores the gold label 0 and every other label −1.
/// * `sim-noisy` keeps the gold label with the per-class accuracy and otherwise
///   picks a uniformly random other label.
/// * `sim-copy` repeats the query's `Predicted label` on CICL prompts (with
///   `copy_probability`) and behaves as `sim-noisy` everywhere else.
///
/// Randomness comes from a ChaCha8 stream seeded with SHA-256 of the stream id
/// and the prompt bytes, so scores depend only on the prompt.
#[derive(Debug)]
pub struct SimBackend {
    kind: BackendKind,
    accuracy: f64,
    class_accuracy: BTreeMap<String, f64>,
    copy_probability: f64,
    stream: u64,
    id: String,
    calls: AtomicU64,
}

impl SimBackend {
    pub fn new(desc: &BackendDescriptor) -> Result<Self, ModelError> {
        if desc.kind == BackendKind::Http {
            return Err(ModelError::Config("not a simulated backend".into()));
        }
        desc.validate()?;
        Ok(SimBackend {
            kind: desc.kind,
            accuracy: desc.accuracy,
            class_accuracy: desc.class_accuracy.clone(),
            copy_probability: desc.copy_probability,
            stream: desc.stream,
            id: desc.backend_id(),
            calls: AtomicU64::new(0),
        })
    }

    fn rng(&self, prompt: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.stream.to_le_bytes());
        h.update(prompt.as_bytes());
        let seed: [u8; 32] = h.finalize().into();
        ChaCha8Rng::from_seed(seed)
    }

    fn noisy_choice<'a>(&self, rng: &mut ChaCha8Rng, labels: &'a LabelSet, gold: &'a str) -> &'a str {
        let acc = self.class_accuracy.get(gold).copied().unwrap_or(self.accuracy);
        let keep: f64 = rng.gen();
        let others: Vec<&str> = labels.iter().filter(|l| *l != gold).collect();
        if keep < acc || others.is_empty() {
            gold
        } else {
            others[rng.gen_range(0..others.len())]
        }
    }

    fn choose<'a>(&self, prompt: &'a PromptSpec, gold: Option<&'a str>) -> Result<&'a str, ModelError> {
        let labels = &prompt.candidate_labels;
        let need_gold = || -> Result<&'a str, ModelError> {
            let g = gold.ok_or(ModelError::MissingGold)?;
            if !labels.contains(g) {
                return Err(ModelError::UnknownLabel(g.to_string()));
            }
            Ok(g)
        };
        let mut rng = self.rng(&prompt.rendered_text);
        match self.kind {
            BackendKind::SimOracle => need_gold(),
            BackendKind::SimNoisy => Ok(self.noisy_choice(&mut rng, labels, need_gold()?)),
            BackendKind::SimCopy => {
                if prompt.mode == Mode::Cicl {
                    let predicted = cicl_query_prediction(&prompt.rendered_text)
                        .ok_or_else(|| ModelError::Config("CICL prompt has no predicted label".into()))?;
                    if !labels.contains(predicted) {
                        return Err(ModelError::UnknownLabel(predicted.to_string()));
                    }
                    let u: f64 = rng.gen();
                    if u < self.copy_probability {
                        return Ok(predicted);
                    }
                }
                Ok(self.noisy_choice(&mut rng, labels, need_gold()?))
            }
            BackendKind::Http => unreachable!("rejected in SimBackend::new"),
        }
    }
}

impl LabelScorer for SimBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn score_labels(&self, prompt: &PromptSpec, gold: Option<&str>) -> Result<LabelScores, ModelError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let chosen = self.choose(prompt, gold)?.to_string();
        LabelScores::from_fn(&prompt.candidate_labels, &self.id, |l| {
            Ok(if l == chosen { CHOSEN } else { OTHER })
        })
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelclient::predict;
    use crate::prompting::{build_cicl_prompt, build_icl_prompt};

    fn trec() -> LabelSet {
        LabelSet::new(["abbreviation", "entity", "description", "human", "location", "numeric"]).unwrap()
    }

    #[test]
    fn oracle_scores_gold_zero_rest_minus_one() {
        let b = SimBackend::new(&BackendDescriptor::sim(BackendKind::SimOracle)).unwrap();
        let p = build_icl_prompt([("a", "entity")], "What are the stars made of?", &trec());
        let s = b.score_labels(&p, Some("entity")).unwrap();
        assert_eq!(s.len(), 6);
        for (l, v) in &s.scores {
            assert_eq!(*v, if l == "entity" { 0.0 } else { -1.0 });
        }
        assert!(matches!(b.score_labels(&p, None), Err(ModelError::MissingGold)));
    }

    #[test]
    fn single_candidate_is_forced() {
        let labels = LabelSet::new(["only"]).unwrap();
        let b = SimBackend::new(&BackendDescriptor::sim(BackendKind::SimNoisy)).unwrap();
        let p = build_icl_prompt([], "q", &labels);
        let (label, s) = predict(&p, &b, Some("only")).unwrap();
        assert_eq!(label, "only");
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn copy_backend_repeats_prediction() {
        // Brute force over every label as the query's initial prediction.
        let b = SimBackend::new(&BackendDescriptor::sim(BackendKind::SimCopy)).unwrap();
        let labels = trec();
        for pred in labels.iter() {
            let p = build_cicl_prompt([("x", "human", "entity")], "What are the stars made of?", pred, &labels);
            let s = b.score_labels(&p, Some("entity")).unwrap();
            let top = s.scores.values().cloned().fold(f64::NEG_INFINITY, f64::max);
            let winners: Vec<&str> = labels.iter().filter(|l| s.get(l) == Some(top)).collect();
            assert_eq!(winners, vec![pred]);
            assert_eq!(predict(&p, &b, Some("entity")).unwrap().0, pred);
        }
    }

    #[test]
    fn noisy_is_deterministic_per_prompt_and_stream() {
        let mut d = BackendDescriptor::sim(BackendKind::SimNoisy);
        d.accuracy = 0.3;
        let a = SimBackend::new(&d).unwrap();
        let b = SimBackend::new(&d).unwrap();
        let labels = trec();
        let outcomes: Vec<String> = (0..50)
            .map(|i| {
                let p = build_icl_prompt([], &format!("query {i}"), &labels);
                let x = predict(&p, &a, Some("human")).unwrap();
                let y = predict(&p, &b, Some("human")).unwrap();
                assert_eq!(x, y);
                x.0
            })
            .collect();
        let kept = outcomes.iter().filter(|l| *l == "human").count();
        assert!(kept > 3 && kept < 30, "kept {kept}");
        d.stream = 7;
        let c = SimBackend::new(&d).unwrap();
        let differ = (0..50).any(|i| {
            let p = build_icl_prompt([], &format!("query {i}"), &labels);
            predict(&p, &c, Some("human")).unwrap().0 != outcomes[i]
        });
        assert!(differ);
    }

    #[test]
    fn full_accuracy_noisy_matches_oracle() {
        let mut d = BackendDescriptor::sim(BackendKind::SimNoisy);
        d.accuracy = 1.0;
        let noisy = SimBackend::new(&d).unwrap();
        let oracle = SimBackend::new(&BackendDescriptor::sim(BackendKind::SimOracle)).unwrap();
        let labels = trec();
        for (i, gold) in labels.labels().iter().cycle().take(20).enumerate() {
            let p = build_icl_prompt([], &format!("toy {i}"), &labels);
            let a = noisy.score_labels(&p, Some(gold)).unwrap();
            let b = oracle.score_labels(&p, Some(gold)).unwrap();
            assert_eq!(a.scores, b.scores);
        }
    }
}
