//! Byte-exact ICL and CICL prompt rendering.
//!
//! ICL block:   `Text: {text}\nLabel: {gold}\n\n`
//! CICL block:  `Text: {text}\nPredicted label: {pred}\nCorrect label: {gold}\n\n`
//!
//! The query block ends with `Label:` (ICL) or `Correct label:` (CICL) and no
//! trailing whitespace; each candidate label is scored as the continuation
//! `" {label}"`. No task instruction is ever emitted.

use serde::{Deserialize, Serialize};

use crate::datamodel::{LabelSet, Mode};

pub const TEXT_PREFIX: &str = "Text: ";
pub const LABEL_PREFIX: &str = "Label:";
pub const PREDICTED_PREFIX: &str = "Predicted label:";
pub const CORRECT_PREFIX: &str = "Correct label:";
pub const BLOCK_SEPARATOR: &str = "\n\n";

/// Sequences whose presence inside an input text makes the rendered prompt ambiguous.
pub const MARKERS: [&str; 3] = ["\nLabel:", "\nPredicted label:", "\nCorrect label:"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub rendered_text: String,
    pub candidate_labels: LabelSet,
    pub mode: Mode,
}

/// The string appended to a prompt when scoring `label`.
pub fn continuation(label: &str) -> String {
    format!(" {label}")
}

/// True when `text` contains a template marker sequence.
pub fn collides_with_template(text: &str) -> bool {
    MARKERS.iter().any(|m| text.contains(m)) || text.starts_with("Label:")
}

fn warn_on_collision(text: &str) {
    if collides_with_template(text) {
        log::warn!("input text contains a template marker and will render ambiguously: {text:?}");
    }
}

/// Renders a standard ICL prompt from `(text, gold)` exemplars and a query.
pub fn render_icl<'a, I>(exemplars: I, query_text: &str) -> String
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut out = String::new();
    for (text, gold) in exemplars {
        warn_on_collision(text);
        out.push_str(TEXT_PREFIX);
        out.push_str(text);
        out.push('\n');
        out.push_str(LABEL_PREFIX);
        out.push(' ');
        out.push_str(gold);
        out.push_str(BLOCK_SEPARATOR);
    }
    warn_on_collision(query_text);
    out.push_str(TEXT_PREFIX);
    out.push_str(query_text);
    out.push('\n');
    out.push_str(LABEL_PREFIX);
    out
}

/// Renders a CICL prompt from `(text, predicted, gold)` triplets and the query
/// with its initial prediction.
pub fn render_cicl<'a, I>(triplets: I, query_text: &str, query_predicted: &str) -> String
where
    I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
{
    let mut out = String::new();
    for (text, pred, gold) in triplets {
        warn_on_collision(text);
        out.push_str(TEXT_PREFIX);
        out.push_str(text);
        out.push('\n');
        out.push_str(PREDICTED_PREFIX);
        out.push(' ');
        out.push_str(pred);
        out.push('\n');
        out.push_str(CORRECT_PREFIX);
        out.push(' ');
        out.push_str(gold);
        out.push_str(BLOCK_SEPARATOR);
    }
    warn_on_collision(query_text);
    out.push_str(TEXT_PREFIX);
    out.push_str(query_text);
    out.push('\n');
    out.push_str(PREDICTED_PREFIX);
    out.push(' ');
    out.push_str(query_predicted);
    out.push('\n');
    out.push_str(CORRECT_PREFIX);
    out
}

pub fn build_icl_prompt<'a, I>(exemplars: I, query_text: &str, labels: &LabelSet) -> PromptSpec
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    PromptSpec {
        rendered_text: render_icl(exemplars, query_text),
        candidate_labels: labels.clone(),
        mode: Mode::Icl,
    }
}

pub fn build_cicl_prompt<'a, I>(triplets: I, query_text: &str, query_predicted: &str, labels: &LabelSet) -> PromptSpec
where
    I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
{
    PromptSpec {
        rendered_text: render_cicl(triplets, query_text, query_predicted),
        candidate_labels: labels.clone(),
        mode: Mode::Cicl,
    }
}

/// An ICL prompt split back into its parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedIcl {
    pub exemplars: Vec<(String, String)>,
    pub query: String,
}

/// A CICL prompt split back into its parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCicl {
    pub triplets: Vec<(String, String, String)>,
    pub query: String,
    pub query_predicted: String,
}

fn split_field<'a>(block: &'a str, sep: &str) -> Option<(&'a str, &'a str)> {
    let at = block.rfind(sep)?;
    Some((&block[..at], &block[at + sep.len()..]))
}

/// Inverts [`render_icl`] for texts that avoid the template markers.
pub fn parse_icl(prompt: &str) -> Option<ParsedIcl> {
    let body = prompt.strip_suffix("\nLabel:")?;
    let mut exemplars = Vec::new();
    let mut rest = body;
    // Every exemplar block ends with "\nLabel: {gold}\n\n".
    while let Some(end) = rest.find("\n\nText: ") {
        let block = rest[..end].strip_prefix(TEXT_PREFIX)?;
        let (text, gold) = split_field(block, "\nLabel: ")?;
        exemplars.push((text.to_string(), gold.to_string()));
        rest = &rest[end + 2..];
    }
    let query = rest.strip_prefix(TEXT_PREFIX)?;
    Some(ParsedIcl {
        exemplars,
        query: query.to_string(),
    })
}

/// Inverts [`render_cicl`] for texts that avoid the template markers.
pub fn parse_cicl(prompt: &str) -> Option<ParsedCicl> {
    let body = prompt.strip_suffix("\nCorrect label:")?;
    let mut triplets = Vec::new();
    let mut rest = body;
    while let Some(end) = rest.find("\n\nText: ") {
        let block = rest[..end].strip_prefix(TEXT_PREFIX)?;
        let (head, gold) = split_field(block, "\nCorrect label: ")?;
        let (text, pred) = split_field(head, "\nPredicted label: ")?;
        triplets.push((text.to_string(), pred.to_string(), gold.to_string()));
        rest = &rest[end + 2..];
    }
    let last = rest.strip_prefix(TEXT_PREFIX)?;
    let (query, pred) = split_field(last, "\nPredicted label: ")?;
    Some(ParsedCicl {
        triplets,
        query: query.to_string(),
        query_predicted: pred.to_string(),
    })
}

/// The query's `Predicted label` field of a CICL prompt (last occurrence).
pub fn cicl_query_prediction(prompt: &str) -> Option<&str> {
    let body = prompt.strip_suffix("\nCorrect label:")?;
    let at = body.rfind("\nPredicted label: ")?;
    Some(&body[at + "\nPredicted label: ".len()..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_shot_icl() {
        assert_eq!(render_icl([], "hi"), "Text: hi\nLabel:");
    }

    #[test]
    fn one_exemplar_icl() {
        assert_eq!(render_icl([("a", "x")], "b"), "Text: a\nLabel: x\n\nText: b\nLabel:");
    }

    #[test]
    fn one_triplet_cicl() {
        assert_eq!(
            render_cicl([("a", "x", "x")], "b", "x"),
            "Text: a\nPredicted label: x\nCorrect label: x\n\nText: b\nPredicted label: x\nCorrect label:"
        );
    }

    #[test]
    fn wrong_prediction_has_no_marker() {
        let p = render_cicl([("a", "x", "y")], "b", "x");
        assert!(p.starts_with("Text: a\nPredicted label: x\nCorrect label: y\n\n"));
        assert!(!p.contains('*'));
        assert!(!p.to_lowercase().contains("wrong"));
    }

    #[test]
    fn query_prediction_is_recoverable() {
        let p = render_cicl([("a", "x", "y")], "b", "description");
        assert_eq!(cicl_query_prediction(&p), Some("description"));
        assert_eq!(cicl_query_prediction("Text: a\nLabel:"), None);
    }

    #[test]
    fn collisions_are_detected() {
        assert!(collides_with_template("foo\nLabel: bar"));
        assert!(!collides_with_template("Label this"));
    }

    fn text() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9 ,.?!:]{1,20}"
    }
    fn label() -> impl Strategy<Value = String> {
        "[a-z]{1,8}"
    }

    proptest! {
        #[test]
        fn icl_round_trips(ex in prop::collection::vec((text(), label()), 0..6), q in text()) {
            let p = render_icl(ex.iter().map(|(t, l)| (t.as_str(), l.as_str())), &q);
            prop_assert!(p.ends_with("Label:"));
            prop_assert_eq!(p.matches("Text: ").count(), ex.len() + 1);
            prop_assert_eq!(p.matches("Label:").count(), ex.len() + 1);
            let parsed = parse_icl(&p).unwrap();
            prop_assert_eq!(parsed.exemplars, ex);
            prop_assert_eq!(parsed.query, q);
        }

        #[test]
        fn cicl_round_trips(ex in prop::collection::vec((text(), label(), label()), 0..6), q in text(), qp in label()) {
            let p = render_cicl(ex.iter().map(|(t, a, b)| (t.as_str(), a.as_str(), b.as_str())), &q, &qp);
            prop_assert!(p.ends_with("Correct label:"));
            prop_assert_eq!(p.matches("Predicted label:").count(), ex.len() + 1);
            let parsed = parse_cicl(&p).unwrap();
            prop_assert_eq!(parsed.triplets, ex);
            prop_assert_eq!(parsed.query, q);
            prop_assert_eq!(parsed.query_predicted, qp);
        }

        #[test]
        fn order_changes_bytes(ex in prop::collection::vec((text(), label()), 2..5), q in text()) {
            let mut rev = ex.clone();
            rev.reverse();
            let a = render_icl(ex.iter().map(|(t, l)| (t.as_str(), l.as_str())), &q);
            let b = render_icl(rev.iter().map(|(t, l)| (t.as_str(), l.as_str())), &q);
            prop_assert_eq!(a == b, ex == rev);
        }
    }
}
