//! Loading, validating and summarizing stance corpora.
//!
//! Every corpus is normalized into [`StanceExample`] records. Benchmark files
//! disagree on column names and label strings, so each source format is read
//! through an [`Adapter`] that names the relevant columns. A default adapter
//! table ships in `adapters.toml`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::label::StanceLabel;

const DEFAULT_ADAPTERS: &str = include_str!("../adapters.toml");

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("record {record}: missing required field {field:?}")]
    MissingField { record: usize, field: String },
    #[error("record {record}: label {value:?} does not map to favor/against/none")]
    BadLabel { record: usize, value: String },
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("record {record}: unknown split {value:?}")]
    BadSplit { record: usize, value: String },
    #[error("record {record}: {message}")]
    Malformed { record: usize, message: String },
    #[error("unknown adapter {0:?}")]
    UnknownAdapter(String),
    #[error("adapter table: {0}")]
    AdapterTable(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" | "training" => Ok(Split::Train),
            "valid" | "val" | "dev" | "validation" => Ok(Split::Valid),
            "test" | "testing" => Ok(Split::Test),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Csv,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "ndjson" | "json" => Ok(Format::Jsonl),
            "csv" | "tsv" => Ok(Format::Csv),
            other => Err(format!("unknown corpus format {other:?}")),
        }
    }
}

/// One (text, target, optional gold label) unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StanceExample {
    pub id: String,
    pub text: String,
    pub target: String,
    pub gold: Option<StanceLabel>,
    pub split: Split,
    pub corpus_name: String,
}

/// On-disk shape of a normalized record: exactly these five fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedRecord {
    pub id: String,
    pub text: String,
    pub target: String,
    pub gold: Option<StanceLabel>,
    pub split: Split,
}

impl From<&StanceExample> for NormalizedRecord {
    fn from(e: &StanceExample) -> Self {
        NormalizedRecord {
            id: e.id.clone(),
            text: e.text.clone(),
            target: e.target.clone(),
            gold: e.gold,
            split: e.split,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    pub examples: Vec<StanceExample>,
}

impl Corpus {
    /// Builds a corpus, rejecting duplicate ids and blank text/target.
    pub fn new(name: impl Into<String>, examples: Vec<StanceExample>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::with_capacity(examples.len());
        for (i, e) in examples.iter().enumerate() {
            if e.text.trim().is_empty() {
                return Err(CorpusError::MissingField { record: i + 1, field: "text".into() });
            }
            if e.target.trim().is_empty() {
                return Err(CorpusError::MissingField { record: i + 1, field: "target".into() });
            }
            if !seen.insert(e.id.as_str()) {
                return Err(CorpusError::DuplicateId(e.id.clone()));
            }
        }
        Ok(Corpus { name: name.into(), examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&StanceExample> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// A sub-corpus holding only one split, in load order.
    pub fn split(&self, split: Split) -> Corpus {
        Corpus {
            name: self.name.clone(),
            examples: self.examples.iter().filter(|e| e.split == split).cloned().collect(),
        }
    }
}

/// Column mapping for one source format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Adapter {
    /// Id column. When absent ids are synthesized as `<corpus>-<row>`.
    #[serde(default)]
    pub id_field: Option<String>,
    pub text_field: String,
    pub target_field: String,
    #[serde(default)]
    pub label_field: Option<String>,
    #[serde(default)]
    pub split_field: Option<String>,
    #[serde(default = "default_split")]
    pub default_split: Split,
    /// Field delimiter for delimited files; `,` when unset.
    #[serde(default)]
    pub delimiter: Option<char>,
    /// Extra label strings beyond the built-in synonyms (e.g. numeric codes).
    #[serde(default)]
    pub label_aliases: BTreeMap<String, StanceLabel>,
}

fn default_split() -> Split {
    Split::Train
}

impl Default for Adapter {
    fn default() -> Self {
        Adapter {
            id_field: Some("id".into()),
            text_field: "text".into(),
            target_field: "target".into(),
            label_field: Some("gold".into()),
            split_field: Some("split".into()),
            default_split: Split::Train,
            delimiter: None,
            label_aliases: BTreeMap::new(),
        }
    }
}

impl Adapter {
    fn map_label(&self, raw: &str) -> Option<StanceLabel> {
        let key = raw.trim();
        self.label_aliases
            .iter()
            .find(|(alias, _)| alias.eq_ignore_ascii_case(key))
            .map(|(_, l)| *l)
            .or_else(|| StanceLabel::from_synonym(key))
    }
}

/// Named adapters, keyed by format id (`normalized`, `semeval`, ...).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterTable(pub BTreeMap<String, Adapter>);

impl AdapterTable {
    pub fn builtin() -> Self {
        Self::from_toml(DEFAULT_ADAPTERS).expect("bundled adapter table is valid")
    }

    pub fn from_toml(s: &str) -> Result<Self, CorpusError> {
        toml::from_str(s)
            .map(AdapterTable)
            .map_err(|e| CorpusError::AdapterTable(e.to_string()))
    }

    /// Built-in table overlaid with entries from `path`.
    pub fn with_overrides(path: &Path) -> Result<Self, CorpusError> {
        let mut table = Self::builtin();
        let extra = Self::from_toml(&std::fs::read_to_string(path)?)?;
        table.0.extend(extra.0);
        Ok(table)
    }

    pub fn get(&self, name: &str) -> Result<&Adapter, CorpusError> {
        self.0.get(name).ok_or_else(|| CorpusError::UnknownAdapter(name.to_string()))
    }
}

/// Loads a normalized corpus file.
pub fn load_corpus(path: &Path, format: Format, corpus_name: &str) -> Result<Corpus, CorpusError> {
    load_corpus_with(path, format, corpus_name, &Adapter::default())
}

/// Loads a corpus file through an explicit column adapter.
pub fn load_corpus_with(
    path: &Path,
    format: Format,
    corpus_name: &str,
    adapter: &Adapter,
) -> Result<Corpus, CorpusError> {
    let rows = match format {
        Format::Jsonl => read_jsonl_rows(path)?,
        Format::Csv => read_csv_rows(path, adapter.delimiter.unwrap_or(','))?,
    };
    let mut examples = Vec::with_capacity(rows.len());
    for (idx, row) in rows.into_iter().enumerate() {
        examples.push(row_to_example(idx, &row, corpus_name, adapter)?);
    }
    Corpus::new(corpus_name, examples)
}

type Row = BTreeMap<String, String>;

fn lookup<'a>(row: &'a Row, field: &str) -> Option<&'a str> {
    row.get(field)
        .or_else(|| row.iter().find(|(k, _)| k.eq_ignore_ascii_case(field)).map(|(_, v)| v))
        .map(String::as_str)
}

fn row_to_example(
    idx: usize,
    row: &Row,
    corpus_name: &str,
    adapter: &Adapter,
) -> Result<StanceExample, CorpusError> {
    let record = idx + 1;
    let required = |field: &str| -> Result<String, CorpusError> {
        match lookup(row, field) {
            Some(v) if !v.trim().is_empty() => Ok(v.to_string()),
            _ => Err(CorpusError::MissingField { record, field: field.to_string() }),
        }
    };
    let text = required(&adapter.text_field)?;
    let target = required(&adapter.target_field)?;
    let id = adapter
        .id_field
        .as_deref()
        .and_then(|f| lookup(row, f))
        .filter(|v| !v.trim().is_empty())
        .map(str::to_string)
        .unwrap_or_else(|| format!("{corpus_name}-{idx}"));
    let gold = match adapter.label_field.as_deref().and_then(|f| lookup(row, f)) {
        Some(raw) if !raw.trim().is_empty() => Some(
            adapter
                .map_label(raw)
                .ok_or_else(|| CorpusError::BadLabel { record, value: raw.to_string() })?,
        ),
        _ => None,
    };
    let split = match adapter.split_field.as_deref().and_then(|f| lookup(row, f)) {
        Some(raw) if !raw.trim().is_empty() => raw
            .parse()
            .map_err(|value| CorpusError::BadSplit { record, value })?,
        _ => adapter.default_split,
    };
    Ok(StanceExample { id, text, target, gold, split, corpus_name: corpus_name.to_string() })
}

fn read_jsonl_rows(path: &Path) -> Result<Vec<Row>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = rows.len() + 1;
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Malformed { record, message: e.to_string() })?;
        let serde_json::Value::Object(map) = value else {
            return Err(CorpusError::Malformed { record, message: "expected a JSON object".into() });
        };
        let row = map
            .into_iter()
            .filter_map(|(k, v)| {
                let v = match v {
                    serde_json::Value::Null => return None,
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                Some((k, v))
            })
            .collect();
        rows.push(row);
    }
    Ok(rows)
}

fn read_csv_rows(path: &Path, delimiter: char) -> Result<Vec<Row>, CorpusError> {
    // Tab-separated dumps carry raw tweets with unbalanced quotes.
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter as u8)
        .quoting(delimiter != '\t')
        .flexible(false)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        rows.push(headers.iter().map(str::to_string).zip(rec.iter().map(str::to_string)).collect());
    }
    Ok(rows)
}

/// Writes the normalized five-field line-delimited form.
pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let mut out = BufWriter::new(File::create(path)?);
    for e in &corpus.examples {
        let line = serde_json::to_string(&NormalizedRecord::from(e)).expect("record serializes");
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub favor: usize,
    pub against: usize,
    pub none: usize,
}

impl LabelCounts {
    pub fn add(&mut self, label: StanceLabel) {
        match label {
            StanceLabel::Favor => self.favor += 1,
            StanceLabel::Against => self.against += 1,
            StanceLabel::None => self.none += 1,
        }
    }

    pub fn get(&self, label: StanceLabel) -> usize {
        match label {
            StanceLabel::Favor => self.favor,
            StanceLabel::Against => self.against,
            StanceLabel::None => self.none,
        }
    }

    pub fn total(&self) -> usize {
        self.favor + self.against + self.none
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetCount {
    pub target: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub name: String,
    pub total: usize,
    pub per_split: BTreeMap<Split, usize>,
    pub labels: LabelCounts,
    pub unlabeled: usize,
    /// Distinct targets, sorted lexicographically.
    pub targets: Vec<TargetCount>,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut per_split: BTreeMap<Split, usize> = Split::ALL.iter().map(|s| (*s, 0)).collect();
    let mut labels = LabelCounts::default();
    let mut unlabeled = 0;
    let mut targets: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &corpus.examples {
        *per_split.entry(e.split).or_default() += 1;
        match e.gold {
            Some(l) => labels.add(l),
            None => unlabeled += 1,
        }
        *targets.entry(e.target.as_str()).or_default() += 1;
    }
    CorpusStats {
        name: corpus.name.clone(),
        total: corpus.len(),
        per_split,
        labels,
        unlabeled,
        targets: targets
            .into_iter()
            .map(|(t, count)| TargetCount { target: t.to_string(), count })
            .collect(),
    }
}

/// Published size of a benchmark corpus, used to sanity-check full ingests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchmarkReference {
    pub name: &'static str,
    pub targets: &'static [&'static str],
    pub train: Option<usize>,
    pub valid: Option<usize>,
    pub test: Option<usize>,
}

pub const BENCHMARKS: [BenchmarkReference; 5] = [
    BenchmarkReference {
        name: "semeval16_a",
        targets: &[
            "Atheism",
            "Climate Change",
            "Feminist Movement",
            "Hillary Clinton",
            "Legalization of Abortion",
        ],
        train: Some(2914),
        valid: None,
        test: Some(1249),
    },
    BenchmarkReference {
        name: "semeval16_b",
        targets: &["Donald Trump"],
        train: None,
        valid: None,
        test: Some(707),
    },
    BenchmarkReference {
        name: "pstance",
        targets: &["Donald Trump", "Joe Biden", "Bernie Sanders"],
        train: Some(19228),
        valid: Some(2462),
        test: Some(2374),
    },
    BenchmarkReference {
        name: "vast",
        targets: &[],
        train: Some(13477),
        valid: Some(2062),
        test: Some(3006),
    },
    BenchmarkReference {
        name: "tweet_covid",
        targets: &["Keeping Schools Closed", "Dr. Fauci", "Stay at Home Orders", "Wearing a Face Mask"],
        train: Some(4533),
        valid: Some(800),
        test: Some(800),
    },
];

pub fn benchmark_reference(name: &str) -> Option<&'static BenchmarkReference> {
    BENCHMARKS.iter().find(|b| b.name == name)
}

impl BenchmarkReference {
    /// Lists every split count that disagrees with the published size.
    pub fn mismatches(&self, stats: &CorpusStats) -> Vec<String> {
        let mut out = Vec::new();
        for (split, expected) in [(Split::Train, self.train), (Split::Valid, self.valid), (Split::Test, self.test)] {
            let got = stats.per_split.get(&split).copied().unwrap_or(0);
            match expected {
                Some(n) if got != 0 && got != n => out.push(format!("{split}: expected {n}, found {got}")),
                _ => {}
            }
        }
        out
    }
}
