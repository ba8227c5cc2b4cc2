//! Seeded synthetic corpora and classification tasks for desk-scale runs.
//!
//! Two text domains with different vocabularies and layouts: `prose` reads
//! like simple narrative sentences, `records` like log entries. Records
//! invent a few names per document and repeat them, so a model that adapts
//! to what it has already read can predict them better.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fewshot::{LabeledText, TaskSpec};

const NOUNS: &[&str] = &[
    "river", "garden", "window", "teacher", "village", "letter", "forest", "kitchen", "mountain",
    "sailor", "market", "candle", "harbor", "painter", "meadow", "bridge", "lantern", "orchard",
];
const ADJECTIVES: &[&str] = &[
    "quiet", "old", "bright", "small", "golden", "cold", "gentle", "narrow", "distant", "heavy",
];
const VERBS: &[&str] = &[
    "watched", "followed", "found", "carried", "remembered", "opened", "crossed", "painted",
    "visited", "described",
];
const CONNECTIVES: &[&str] = &["and then", "while", "because", "after that", "so"];

const ACTIONS: &[&str] = &["login", "upload", "restart", "sync", "delete", "query", "backup"];
const LEVELS: &[&str] = &["INFO", "WARN", "ERROR", "DEBUG"];

fn sentence(rng: &mut impl Rng, topic: &str) -> String {
    let noun = |rng: &mut dyn rand::RngCore| *NOUNS.choose(rng).expect("non-empty");
    let subject = if rng.gen_bool(0.4) { topic } else { noun(rng) };
    let mut s = format!(
        "the {} {} {} the {}",
        ADJECTIVES.choose(rng).expect("non-empty"),
        subject,
        VERBS.choose(rng).expect("non-empty"),
        noun(rng)
    );
    if rng.gen_bool(0.3) {
        let _ = write!(
            s,
            " {} the {} {}",
            CONNECTIVES.choose(rng).expect("non-empty"),
            topic,
            VERBS.choose(rng).expect("non-empty")
        );
    }
    s.push_str(". ");
    s
}

/// Narrative-style text of at least `bytes` bytes.
pub fn prose(seed: u64, bytes: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(bytes + 256);
    while out.len() < bytes {
        let topic = *NOUNS.choose(&mut rng).expect("non-empty");
        for _ in 0..rng.gen_range(3..8) {
            out.push_str(&sentence(&mut rng, topic));
        }
        out.push('\n');
    }
    out
}

fn invented_name(rng: &mut impl Rng) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let syllables = rng.gen_range(2..4);
    (0..syllables)
        .flat_map(|_| [*C.choose(rng).expect("non-empty"), *V.choose(rng).expect("non-empty")])
        .map(char::from)
        .collect()
}

/// Log-style records of at least `bytes` bytes. Each document draws a few
/// user and host names and reuses them on every line.
pub fn records(seed: u64, bytes: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(bytes + 256);
    while out.len() < bytes {
        let users: Vec<String> = (0..2).map(|_| invented_name(&mut rng)).collect();
        let host = invented_name(&mut rng);
        let code = rng.gen_range(100..1000);
        for _ in 0..rng.gen_range(6..14) {
            let _ = writeln!(
                out,
                "[{}] {} {} on {}: code {}",
                LEVELS.choose(&mut rng).expect("non-empty"),
                users.choose(&mut rng).expect("non-empty"),
                ACTIONS.choose(&mut rng).expect("non-empty"),
                host,
                code
            );
        }
        out.push('\n');
    }
    out
}

const WARM: &[&str] = &["sun", "fire", "sand", "honey", "amber", "flame", "summer", "ember"];
const COOL: &[&str] = &["snow", "rain", "frost", "river", "mist", "winter", "ocean", "ice"];

/// Two-class task whose texts draw words from class-specific lists.
pub fn separable_task() -> TaskSpec {
    TaskSpec {
        classes: vec!["warm".into(), "cool".into()],
        template: "words: {text}\nlabel: {label}".into(),
        separator: "\n".into(),
        max_example_tokens: 35,
    }
}

pub fn separable_examples(seed: u64, n: usize) -> Vec<LabeledText> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let label = rng.gen_range(0..2);
            let words = if label == 0 { WARM } else { COOL };
            let count = rng.gen_range(2..5);
            let text = (0..count)
                .map(|_| *words.choose(&mut rng).expect("non-empty"))
                .collect::<Vec<_>>()
                .join(" ");
            LabeledText { label, text }
        })
        .collect()
}

/// Two-class task whose label is the letter repeated in the text.
pub fn copy_task() -> TaskSpec {
    TaskSpec {
        classes: vec!["k".into(), "z".into()],
        template: "seq: {text}\nlabel: {label}".into(),
        separator: "\n".into(),
        max_example_tokens: 35,
    }
}

pub fn copy_examples(seed: u64, n: usize) -> Vec<LabeledText> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let label = rng.gen_range(0..2);
            let letter = if label == 0 { "k" } else { "z" };
            let text = vec![letter; rng.gen_range(2..6)].join(" ");
            LabeledText { label, text }
        })
        .collect()
}

/// Renders examples in the task's format, one per line group, for
/// pretraining a model that knows the format.
pub fn render_corpus(task: &TaskSpec, examples: &[LabeledText]) -> String {
    let mut out = String::new();
    for e in examples {
        out.push_str(
            &task
                .template
                .replace("{text}", &e.text)
                .replace("{label}", &task.classes[e.label]),
        );
        out.push_str(&task.separator);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpora_are_seeded_and_sized() {
        assert_eq!(prose(1, 500), prose(1, 500));
        assert_ne!(prose(1, 500), prose(2, 500));
        assert!(records(3, 2000).len() >= 2000);
        assert!(records(3, 2000).is_ascii());
    }

    #[test]
    fn records_repeat_names_within_documents() {
        let text = records(4, 500);
        let doc = text.split("\n\n").next().unwrap();
        let first_line = doc.lines().next().unwrap();
        let host = first_line.split(" on ").nth(1).unwrap().split(':').next().unwrap();
        assert!(doc.matches(host).count() >= 6);
    }

    #[test]
    fn tasks_validate_and_render() {
        for (t, ex) in [(separable_task(), separable_examples(0, 10)), (copy_task(), copy_examples(0, 10))] {
            t.validate().unwrap();
            let corpus = render_corpus(&t, &ex);
            assert_eq!(corpus.matches("label: ").count(), 10);
        }
    }
}
