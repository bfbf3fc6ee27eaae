//! Mapping free-form generations onto the closed label set.
//!
//! Two rules, in precedence order:
//!
//! 1. `stance_prefix`: a label word directly after `stance`, `stance:` or
//!    `stance is`, or a label word leading the generation (optionally after a
//!    `Stance:`, `Answer:` or `Label:` prefix). Earliest such match wins.
//! 2. `first_standalone`: otherwise the earliest whole-word occurrence of any
//!    label word or synonym.
//!
//! Matching is case-insensitive. For reversed targets Favor and Against are
//! swapped after matching. Negation is not handled: "not in favor" decodes
//! as Favor.

use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::label::{Decoded, StanceLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeRule {
    StancePrefix,
    FirstStandalone,
    NoneFound,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub label: Decoded,
    /// Character (not byte) offsets of the matched label word.
    pub matched_span: Option<(usize, usize)>,
    pub rule_fired: DecodeRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndecodablePolicy {
    /// Treat as None so every example has a prediction (evaluation).
    AsNone,
    /// Skip the example (training data).
    Drop,
}

pub fn resolve_undecodable(result: &DecodeResult, policy: UndecodablePolicy) -> Option<StanceLabel> {
    match (result.label, policy) {
        (Decoded::Label(l), _) => Some(l),
        (Decoded::Undecodable, UndecodablePolicy::AsNone) => Some(StanceLabel::None),
        (Decoded::Undecodable, UndecodablePolicy::Drop) => None,
    }
}

pub const DEFAULT_SYNONYMS: [(&str, StanceLabel); 9] = [
    ("favor", StanceLabel::Favor),
    ("support", StanceLabel::Favor),
    ("pro", StanceLabel::Favor),
    ("against", StanceLabel::Against),
    ("oppose", StanceLabel::Against),
    ("con", StanceLabel::Against),
    ("none", StanceLabel::None),
    ("neutral", StanceLabel::None),
    ("neither", StanceLabel::None),
];

/// Extra synonyms layered over [`DEFAULT_SYNONYMS`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    #[serde(default)]
    pub extra_synonyms: BTreeMap<String, StanceLabel>,
}

#[derive(Debug, Clone)]
pub struct LabelDecoder {
    words: BTreeMap<String, StanceLabel>,
    stance_re: Regex,
    leading_re: Regex,
    word_re: Regex,
}

impl Default for LabelDecoder {
    fn default() -> Self {
        Self::new(&DecoderConfig::default())
    }
}

impl LabelDecoder {
    pub fn new(config: &DecoderConfig) -> Self {
        let mut words: BTreeMap<String, StanceLabel> =
            DEFAULT_SYNONYMS.iter().map(|(w, l)| (w.to_string(), *l)).collect();
        for (w, l) in &config.extra_synonyms {
            let w = w.trim().to_lowercase();
            if !w.is_empty() {
                words.insert(w, *l);
            }
        }
        // Longest first so multi-word synonyms beat their prefixes.
        let mut alts: Vec<&String> = words.keys().collect();
        alts.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        let alt = alts.iter().map(|w| regex::escape(w)).collect::<Vec<_>>().join("|");
        let stance_re = Regex::new(&format!(
            r#"(?i)\bstance\b[\s:]*(?:is\b[\s:]*)?["'*“]*(?P<label>{alt})\b"#
        ))
        .expect("stance pattern");
        let leading_re = Regex::new(&format!(
            r#"(?i)^[\s"'*“]*(?:(?:stance|answer|label)\s*:[\s"'*“]*)?(?P<label>{alt})\b"#
        ))
        .expect("leading pattern");
        let word_re = Regex::new(&format!(r"(?i)\b(?P<label>{alt})\b")).expect("word pattern");
        LabelDecoder { words, stance_re, leading_re, word_re }
    }

    fn lookup(&self, word: &str) -> StanceLabel {
        self.words[&word.to_lowercase()]
    }

    pub fn decode(&self, raw: &str, reversed: bool) -> DecodeResult {
        let prefix = self
            .leading_re
            .captures(raw)
            .or_else(|| self.stance_re.captures(raw))
            .and_then(|c| c.name("label"))
            .map(|m| (m, DecodeRule::StancePrefix));
        let hit = prefix.or_else(|| {
            self.word_re
                .captures(raw)
                .and_then(|c| c.name("label"))
                .map(|m| (m, DecodeRule::FirstStandalone))
        });
        match hit {
            Some((m, rule)) => {
                let label = self.lookup(m.as_str());
                let label = if reversed { label.reversed() } else { label };
                let start = raw[..m.start()].chars().count();
                let end = start + m.as_str().chars().count();
                DecodeResult { label: Decoded::Label(label), matched_span: Some((start, end)), rule_fired: rule }
            }
            None => DecodeResult { label: Decoded::Undecodable, matched_span: None, rule_fired: DecodeRule::NoneFound },
        }
    }
}

/// Convenience wrapper over the default decoder.
pub fn decode_label(raw: &str, reversed: bool) -> DecodeResult {
    thread_local! {
        static DEFAULT: LabelDecoder = LabelDecoder::default();
    }
    DEFAULT.with(|d| d.decode(raw, reversed))
}

/// One line of a decoder regression fixture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderCase {
    pub line: usize,
    pub raw: String,
    pub reversed: bool,
    pub expected: Decoded,
    pub rule: Option<DecodeRule>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("fixture line {line}: {message}")]
pub struct FixtureError {
    pub line: usize,
    pub message: String,
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

/// Parses a fixture suite: tab-separated `raw  reversed  expected  [rule]`
/// lines, `#` comments, with `\n`, `\t`, `\\` escapes in the raw column.
pub fn parse_fixture_suite(text: &str) -> Result<Vec<DecoderCase>, FixtureError> {
    let mut cases = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| FixtureError { line: line_no, message };
        let cols: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&cols.len()) {
            return Err(err(format!("expected 3 or 4 columns, found {}", cols.len())));
        }
        let reversed = match cols[1].trim() {
            "true" => true,
            "false" => false,
            other => return Err(err(format!("bad reversed flag {other:?}"))),
        };
        let expected: Decoded = serde_json::from_value(serde_json::Value::String(cols[2].trim().to_string()))
            .map_err(|e| err(e.to_string()))?;
        let rule = match cols.get(3).map(|s| s.trim()) {
            None | Some("") => None,
            Some(r) => Some(
                serde_json::from_value(serde_json::Value::String(r.to_string())).map_err(|e| err(e.to_string()))?,
            ),
        };
        cases.push(DecoderCase { line: line_no, raw: unescape(cols[0]), reversed, expected, rule });
    }
    Ok(cases)
}
