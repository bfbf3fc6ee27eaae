//! Multi-target augmentation.
//!
//! Noun phrases found in a training text are asked about as targets of
//! their own. A phrase whose machine label is the Favor/Against opposite of
//! the example's label becomes an extra training sample with the same text.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotate::{normalize_phrase, AnnotateError, Annotator};
use crate::corpus::{Split, StanceExample};
use crate::label::{Decoded, StanceLabel};
use crate::prompt::PromptAxes;

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("phrase sidecar {0} does not exist")]
    SidecarMissing(PathBuf),
    #[error("external extractor needs a sidecar path")]
    SidecarNotConfigured,
    #[error("sidecar {path} line {line}: {message}")]
    SidecarFormat { path: PathBuf, line: usize, message: String },
    #[error("max_per_example must be at least 1")]
    ZeroCap,
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseCandidate {
    pub phrase: String,
    pub source_example_id: String,
    /// Character offsets into the source text, end exclusive.
    pub char_span: (usize, usize),
}

/// True iff the two labels are Favor and Against in some order.
pub fn is_contrary(a: StanceLabel, b: StanceLabel) -> bool {
    matches!(
        (a, b),
        (StanceLabel::Favor, StanceLabel::Against) | (StanceLabel::Against, StanceLabel::Favor)
    )
}

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "my", "your", "his", "her", "its", "our", "their", "some",
    "any", "every", "each", "no",
];

const STOPWORDS: &[&str] = &[
    // pronouns
    "i", "me", "you", "he", "she", "it", "we", "they", "him", "them", "us", "myself", "yourself", "itself",
    "themselves", "who", "whom", "whose", "what", "which", "there", "here", "i'm", "you're", "it's", "we're",
    "they're", "that's", "there's", "let's",
    // prepositions and conjunctions
    "and", "or", "but", "nor", "so", "yet", "of", "in", "on", "at", "to", "for", "with", "by", "from", "about",
    "as", "into", "onto", "over", "under", "than", "then", "if", "because", "while", "when", "where", "why", "how",
    "after", "before", "until", "through", "against", "without", "within", "between", "via", "like", "unlike",
    // adverbs and particles
    "not", "very", "just", "also", "too", "all", "only", "even", "still", "again", "up", "down", "out", "off",
    "never", "always", "ever", "more", "most", "much", "many", "really", "now", "please", "rt", "amp", "yes",
    // auxiliaries and verb cues
    "is", "are", "was", "were", "be", "been", "being", "am", "do", "does", "did", "don't", "doesn't", "didn't",
    "have", "has", "had", "will", "would", "can", "could", "should", "shall", "may", "might", "must", "can't",
    "won't", "isn't", "aren't", "wasn't", "get", "gets", "got", "make", "makes", "made", "think", "thinks", "know",
    "knows", "want", "wants", "need", "needs", "say", "says", "said", "see", "go", "goes", "going", "let", "keep",
    "love", "loves", "hate", "hates", "believe", "believes", "stand", "stands", "vote", "voting",
];

fn is_stop(tok: &str) -> bool {
    STOPWORDS.contains(&tok)
}

fn is_determiner(tok: &str) -> bool {
    DETERMINERS.contains(&tok)
}

#[derive(Debug, Clone, Copy)]
enum Piece {
    Word { start: usize, end: usize },
    Break,
}

fn word_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '#' | '@' | '_' | '\'' | '-')
}

/// Words with char spans; punctuation becomes a chunk break, URLs are dropped.
fn scan(text: &str) -> Vec<(Piece, String)> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if !word_char(c) {
            out.push((Piece::Break, String::new()));
            i += 1;
            continue;
        }
        let rest: String = chars[i..chars.len().min(i + 8)].iter().collect::<String>().to_lowercase();
        if rest.starts_with("http://") || rest.starts_with("https://") || rest.starts_with("www.") {
            while i < chars.len() && !chars[i].is_whitespace() {
                i += 1;
            }
            out.push((Piece::Break, String::new()));
            continue;
        }
        let start = i;
        while i < chars.len() && word_char(chars[i]) {
            i += 1;
        }
        // Trim quote and dash characters off the edges.
        let (mut s, mut e) = (start, i);
        while s < e && matches!(chars[s], '\'' | '-') {
            s += 1;
        }
        while e > s && matches!(chars[e - 1], '\'' | '-') {
            e -= 1;
        }
        let word: String = chars[s..e].iter().collect();
        let lower = word.to_lowercase();
        if word.chars().any(char::is_alphanumeric) {
            out.push((Piece::Word { start: s, end: e }, lower));
        }
    }
    out
}

/// Shallow chunker: one optional determiner followed by a maximal run of
/// tokens outside the stopword/verb-cue list, capped at six tokens (the
/// rightmost are kept).
pub fn heuristic_chunks(example_id: &str, text: &str) -> Vec<PhraseCandidate> {
    const CAP: usize = 6;
    let chars: Vec<char> = text.chars().collect();
    let pieces = scan(text);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut emit = |run: &[(usize, usize)]| {
        if run.is_empty() {
            return;
        }
        let run = &run[run.len().saturating_sub(CAP)..];
        let (start, end) = (run[0].0, run[run.len() - 1].1);
        let phrase: String = chars[start..end].iter().collect();
        if seen.insert(phrase.to_lowercase()) {
            out.push(PhraseCandidate { phrase, source_example_id: example_id.to_string(), char_span: (start, end) });
        }
    };
    let mut det: Option<(usize, usize)> = None;
    let mut run: Vec<(usize, usize)> = Vec::new();
    for (piece, lower) in &pieces {
        match piece {
            Piece::Word { start, end } if !is_stop(lower) && !is_determiner(lower) => {
                if run.is_empty() {
                    if let Some(d) = det.take() {
                        run.push(d);
                    }
                }
                run.push((*start, *end));
            }
            Piece::Word { start, end } if is_determiner(lower) => {
                emit(&run);
                run.clear();
                det = Some((*start, *end));
            }
            _ => {
                emit(&run);
                run.clear();
                det = None;
            }
        }
    }
    emit(&run);
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    #[default]
    Heuristic,
    /// Phrases read from a sidecar produced by an external parser.
    External,
}

#[derive(Debug, Deserialize)]
struct SidecarLine {
    example_id: String,
    phrase: String,
}

/// Phrases per example id from a JSONL sidecar of `{example_id, phrase}`.
#[derive(Debug, Clone, Default)]
pub struct Sidecar(HashMap<String, Vec<String>>);

impl Sidecar {
    pub fn load(path: &Path) -> Result<Self, SamplerError> {
        if !path.exists() {
            return Err(SamplerError::SidecarMissing(path.to_path_buf()));
        }
        let mut map: HashMap<String, Vec<String>> = HashMap::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SidecarLine = serde_json::from_str(&line).map_err(|e| SamplerError::SidecarFormat {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            map.entry(rec.example_id).or_default().push(rec.phrase);
        }
        Ok(Sidecar(map))
    }

    /// Sidecar phrases for one example, located in its text. Phrases that
    /// do not occur in the text are skipped.
    pub fn candidates(&self, example_id: &str, text: &str) -> Vec<PhraseCandidate> {
        let lower = text.to_lowercase();
        let same_len = lower.len() == text.len();
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for p in self.0.get(example_id).into_iter().flatten() {
            let p = p.trim();
            if p.is_empty() || !seen.insert(p.to_lowercase()) {
                continue;
            }
            let hit = if same_len { lower.find(&p.to_lowercase()) } else { text.find(p) };
            match hit {
                Some(b) => {
                    let start = text[..b].chars().count();
                    let end = start + text[b..b + p.len()].chars().count();
                    out.push(PhraseCandidate {
                        phrase: text[b..b + p.len()].to_string(),
                        source_example_id: example_id.to_string(),
                        char_span: (start, end),
                    });
                }
                None => tracing::debug!("sidecar phrase {p:?} not found in {example_id}"),
            }
        }
        out
    }
}

pub enum Extractor {
    Heuristic,
    External(Sidecar),
}

impl Extractor {
    pub fn from_config(kind: &ExtractorKind, sidecar: Option<&Path>) -> Result<Self, SamplerError> {
        match kind {
            ExtractorKind::Heuristic => Ok(Extractor::Heuristic),
            ExtractorKind::External => {
                Ok(Extractor::External(Sidecar::load(sidecar.ok_or(SamplerError::SidecarNotConfigured)?)?))
            }
        }
    }
}

/// Deduplicated candidates in first-occurrence order.
pub fn extract_noun_phrases(example_id: &str, text: &str, extractor: &Extractor) -> Vec<PhraseCandidate> {
    match extractor {
        Extractor::Heuristic => heuristic_chunks(example_id, text),
        Extractor::External(s) => s.candidates(example_id, text),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OriginalLabelSource {
    /// Gold label when present, else the machine label.
    #[default]
    GoldThenMachine,
    /// Always the machine label.
    Machine,
}

fn default_cap() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_cap")]
    pub max_per_example: usize,
    #[serde(default)]
    pub extractor: ExtractorKind,
    #[serde(default)]
    pub sidecar: Option<PathBuf>,
    #[serde(default)]
    pub original_label_source: OriginalLabelSource,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            max_per_example: default_cap(),
            extractor: ExtractorKind::Heuristic,
            sidecar: None,
            original_label_source: OriginalLabelSource::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub original_target: String,
    pub original_label: StanceLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiTargetSample {
    pub example_id: String,
    pub text: String,
    pub target: String,
    pub label: StanceLabel,
    pub provenance: Provenance,
}

impl MultiTargetSample {
    pub fn to_example(&self, corpus_name: &str) -> StanceExample {
        StanceExample {
            id: self.example_id.clone(),
            text: self.text.clone(),
            target: self.target.clone(),
            gold: Some(self.label),
            split: Split::Train,
            corpus_name: corpus_name.to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerStats {
    pub examples: usize,
    pub eligible: usize,
    pub candidates: usize,
    pub phrase_queries: usize,
    pub failed_queries: usize,
    pub emitted: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerOutput {
    pub samples: Vec<MultiTargetSample>,
    pub stats: SamplerStats,
}

/// Builds contrary-label samples.
///
/// `machine_labels` maps example ids to labels from an earlier annotation
/// run with the same axes; examples lacking both a usable gold label and a
/// machine label are annotated on their original target first. Phrase
/// queries ignore any target override in `axes` since the phrase is the
/// target.
pub fn build_multitarget_samples(
    examples: &[StanceExample],
    axes: &PromptAxes,
    annotator: &Annotator<'_>,
    config: &SamplerConfig,
    extractor: &Extractor,
    machine_labels: Option<&HashMap<String, Decoded>>,
) -> Result<SamplerOutput, SamplerError> {
    if config.max_per_example == 0 {
        return Err(SamplerError::ZeroCap);
    }
    let mut stats = SamplerStats { examples: examples.len(), ..SamplerStats::default() };

    let use_gold = config.original_label_source == OriginalLabelSource::GoldThenMachine;
    let mut labels: Vec<Option<StanceLabel>> = examples
        .iter()
        .map(|e| {
            let gold = if use_gold { e.gold } else { None };
            gold.or_else(|| machine_labels.and_then(|m| m.get(&e.id)).and_then(|d| d.label()))
        })
        .collect();
    let missing: Vec<usize> = (0..examples.len())
        .filter(|&i| labels[i].is_none() && machine_labels.is_none_or(|m| !m.contains_key(&examples[i].id)))
        .collect();
    if !missing.is_empty() {
        let batch: Vec<StanceExample> = missing.iter().map(|&i| examples[i].clone()).collect();
        for (i, rec) in missing.iter().zip(annotator.annotate_corpus(&batch, axes)?) {
            labels[*i] = rec.decoded.label();
        }
    }

    let phrase_axes = PromptAxes { target_override: None, ..axes.clone() };
    // (example index, phrase) pairs in phrase order.
    let mut queries: Vec<(usize, StanceExample)> = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let Some(orig) = labels[i] else { continue };
        if orig == StanceLabel::None {
            continue;
        }
        stats.eligible += 1;
        let own = normalize_phrase(&ex.target);
        for cand in extract_noun_phrases(&ex.id, &ex.text, extractor) {
            stats.candidates += 1;
            let norm = normalize_phrase(&cand.phrase);
            if norm.is_empty() || norm == own {
                continue;
            }
            queries.push((i, StanceExample { target: cand.phrase, gold: None, ..ex.clone() }));
        }
    }
    stats.phrase_queries = queries.len();
    let batch: Vec<StanceExample> = queries.iter().map(|(_, e)| e.clone()).collect();
    let records = annotator.annotate_corpus(&batch, &phrase_axes)?;

    let mut per_example: HashMap<usize, usize> = HashMap::new();
    let mut samples = Vec::new();
    for ((i, q), rec) in queries.iter().zip(records) {
        if rec.error.is_some() {
            stats.failed_queries += 1;
            continue;
        }
        let orig = labels[*i].expect("eligible");
        let Some(label) = rec.decoded.label() else { continue };
        if !is_contrary(label, orig) {
            continue;
        }
        let k = per_example.entry(*i).or_default();
        if *k >= config.max_per_example {
            continue;
        }
        *k += 1;
        let src = &examples[*i];
        samples.push(MultiTargetSample {
            example_id: format!("{}#mt{}", src.id, k),
            text: src.text.clone(),
            target: q.target.clone(),
            label,
            provenance: Provenance { original_target: src.target.clone(), original_label: orig },
        });
    }
    stats.emitted = samples.len();
    Ok(SamplerOutput { samples, stats })
}

/// Writes samples in the normalized corpus layout (`id`, `text`, `target`,
/// `gold`, `split`) plus a `provenance` object, so the file loads as a
/// regular training corpus.
pub fn write_samples(samples: &[MultiTargetSample], path: &Path) -> std::io::Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        id: &'a str,
        text: &'a str,
        target: &'a str,
        gold: StanceLabel,
        split: Split,
        provenance: &'a Provenance,
    }
    let mut out = BufWriter::new(File::create(path)?);
    for s in samples {
        let line = Line {
            id: &s.example_id,
            text: &s.text,
            target: &s.target,
            gold: s.label,
            split: Split::Train,
            provenance: &s.provenance,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
