//! Deterministic synthetic corpora for tests, demos and benches.

use std::collections::HashMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotate::normalize_phrase;
use crate::corpus::{Split, StanceExample};
use crate::label::StanceLabel;

pub const SYNTHETIC_TARGETS: [&str; 5] =
    ["atheism", "climate change", "feminist movement", "hillary clinton", "legalization of abortion"];

const POSITIVE: [&str; 6] = ["wonderful", "brilliant", "great", "excellent", "inspiring", "fantastic"];
const NEGATIVE: [&str; 6] = ["awful", "terrible", "dreadful", "disastrous", "pathetic", "horrible"];
const NEUTRAL: [&str; 6] = [
    "the weather is cloudy today",
    "lunch was fine",
    "the train was quiet this morning",
    "my cat is asleep",
    "the game ended early",
    "traffic is ordinary tonight",
];

/// The bundled 60-example corpus: 12 per target, 4 of each label.
/// Per target one example of each label goes to the test split.
pub fn synthetic60() -> Vec<StanceExample> {
    let mut out = Vec::with_capacity(60);
    for (t, target) in SYNTHETIC_TARGETS.iter().enumerate() {
        for k in 0..12 {
            let label = StanceLabel::ALL[k % 3];
            let v = (t + k) % 6;
            let text = match label {
                StanceLabel::Favor => format!("{target} is {} and the critics are {}", POSITIVE[v], NEGATIVE[(v + 1) % 6]),
                StanceLabel::Against => format!("{target} is {} and the supporters are {}", NEGATIVE[v], NEGATIVE[(v + 2) % 6]),
                StanceLabel::None => format!("{} #{}", NEUTRAL[v], k),
            };
            out.push(StanceExample {
                id: format!("syn-{t:02}-{k:02}"),
                text,
                target: target.to_string(),
                gold: Some(label),
                split: if k >= 9 { Split::Test } else { Split::Train },
                corpus_name: "synthetic60".into(),
            });
        }
    }
    out
}

/// Rival entity pairs for [`two_domain`].
pub const RIVALS: [(&str, &str); 5] = [
    ("solar energy", "coal"),
    ("public transit", "highways"),
    ("remote work", "office work"),
    ("vinyl records", "streaming"),
    ("electric cars", "gas guzzlers"),
];

/// Words used only for rival entities.
const RIVAL_POSITIVE: [&str; 6] = ["underrated", "solid", "reliable", "sturdy", "handy", "decent"];
const RIVAL_NEGATIVE: [&str; 6] = ["overrated", "clunky", "outdated", "bloated", "shoddy", "flimsy"];

#[derive(Debug, Clone)]
pub struct TwoDomain {
    /// Labeled toward the first entity of each pair.
    pub source: Vec<StanceExample>,
    /// Labeled toward the second entity, which the text never names.
    pub heldout: Vec<StanceExample>,
    /// Oracle stance of each source text toward the rival entity, keyed by
    /// (example id, normalized phrase).
    pub phrase_labels: HashMap<(String, String), StanceLabel>,
}

/// Two domains built from rival pairs. Source texts praise one entity and
/// attack its rival (or the reverse) and are labeled toward the first
/// entity. Rivals are described with their own vocabulary, so what a source
/// text says about the rival only becomes usable training signal once the
/// rival is queried as a target. Held-out texts only talk about the first
/// entity but are labeled toward its rival, so their target is implicit.
pub fn two_domain(seed: u64, per_pair_source: usize, per_pair_heldout: usize) -> TwoDomain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut source = Vec::new();
    let mut heldout = Vec::new();
    let mut phrase_labels = HashMap::new();
    for (p, (a, b)) in RIVALS.iter().enumerate() {
        for k in 0..per_pair_source {
            let label = StanceLabel::ALL[k % 3];
            let pos = POSITIVE.choose(&mut rng).expect("non-empty");
            let neg = NEGATIVE.choose(&mut rng).expect("non-empty");
            let rpos = RIVAL_POSITIVE.choose(&mut rng).expect("non-empty");
            let rneg = RIVAL_NEGATIVE.choose(&mut rng).expect("non-empty");
            let text = match label {
                StanceLabel::Favor if rng.random_bool(0.5) => format!("{a} is {pos} but {b} is {rneg}"),
                StanceLabel::Favor => format!("{b} is {rneg} while {a} is {pos}"),
                StanceLabel::Against if rng.random_bool(0.5) => format!("{a} is {neg} but {b} is {rpos}"),
                StanceLabel::Against => format!("{b} is {rpos} while {a} is {neg}"),
                StanceLabel::None => NEUTRAL.choose(&mut rng).expect("non-empty").to_string(),
            };
            let id = format!("src-{p}-{k:03}");
            if label != StanceLabel::None {
                phrase_labels.insert((id.clone(), normalize_phrase(b)), label.reversed());
            }
            source.push(StanceExample {
                id,
                text,
                target: a.to_string(),
                gold: Some(label),
                split: Split::Train,
                corpus_name: "two-domain-source".into(),
            });
        }
        for k in 0..per_pair_heldout {
            let toward_a = StanceLabel::ALL[k % 3];
            let text = match toward_a {
                StanceLabel::Favor => format!("honestly {a} is {} these days", POSITIVE.choose(&mut rng).expect("non-empty")),
                StanceLabel::Against => format!("honestly {a} is {} these days", NEGATIVE.choose(&mut rng).expect("non-empty")),
                StanceLabel::None => NEUTRAL.choose(&mut rng).expect("non-empty").to_string(),
            };
            heldout.push(StanceExample {
                id: format!("held-{p}-{k:03}"),
                text,
                target: b.to_string(),
                gold: Some(toward_a.reversed()),
                split: Split::Test,
                corpus_name: "two-domain-heldout".into(),
            });
        }
    }
    TwoDomain { source, heldout, phrase_labels }
}

/// Three classes with disjoint vocabularies; `n` samples, labels cycling.
pub fn separable(n: usize, seed: u64) -> Vec<(String, String, StanceLabel)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = StanceLabel::ALL[i % 3];
            let prefix = ["fav", "aga", "neu"][label.index()];
            let len = rng.random_range(4..9);
            let words: Vec<String> = (0..len).map(|_| format!("{prefix}{}", rng.random_range(0..20))).collect();
            ("topic".to_string(), words.join(" "), label)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic60_shape() {
        let c = synthetic60();
        assert_eq!(c.len(), 60);
        for l in StanceLabel::ALL {
            assert_eq!(c.iter().filter(|e| e.gold == Some(l)).count(), 20);
        }
        assert_eq!(c.iter().filter(|e| e.split == Split::Test).count(), 15);
        assert_eq!(synthetic60(), c);
    }

    #[test]
    fn bundled_fixture_matches_generator() {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthetic60.jsonl");
        let c = crate::corpus::load_corpus(&path, crate::corpus::Format::Jsonl, "synthetic60").unwrap();
        assert_eq!(c.examples, synthetic60());
    }

    #[test]
    fn heldout_targets_are_implicit() {
        let d = two_domain(1, 30, 15);
        assert_eq!(d.source.len(), 150);
        assert_eq!(d.heldout.len(), 75);
        let source_targets: Vec<&str> = d.source.iter().map(|e| e.target.as_str()).collect();
        for e in &d.heldout {
            assert!(!source_targets.contains(&e.target.as_str()));
            assert!(!e.text.contains(&e.target));
        }
        for e in &d.source {
            if e.gold != Some(StanceLabel::None) {
                assert!(e.text.contains(&e.target));
            }
        }
        assert_eq!(d.phrase_labels.len(), 100);
    }

    #[test]
    fn separable_vocabularies_are_disjoint() {
        let s = separable(30, 2);
        for (_, text, l) in &s {
            let prefix = ["fav", "aga", "neu"][l.index()];
            assert!(text.split(' ').all(|w| w.starts_with(prefix)));
        }
    }
}
