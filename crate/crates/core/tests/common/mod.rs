#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};

use annostance::corpus::{corpus_stats, load_corpus_with, AdapterTable, Format};
use annostance::{Corpus, Split, StanceLabel};
use serde::Deserialize;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

/// Prints a status line that bypasses the test harness capture, then fails
/// the test if `outcome` is an error.
pub fn report(n: u32, title: &str, outcome: Result<String, String>) {
    let line = match &outcome {
        Ok(detail) => format!("criterion {n} PASS  {title}: {detail}\n"),
        Err(detail) => format!("criterion {n} FAIL  {title}: {detail}\n"),
    };
    let _ = std::io::stdout().write_all(line.as_bytes());
    if let Err(detail) = outcome {
        panic!("criterion {n} ({title}) failed: {detail}");
    }
}

#[derive(Debug, Deserialize)]
pub struct Manifest {
    pub fixture: Vec<FixtureSpec>,
}

#[derive(Debug, Deserialize)]
pub struct FixtureSpec {
    pub file: String,
    pub adapter: String,
    pub format: String,
    pub split: Option<Split>,
    pub total: usize,
    pub favor: usize,
    pub against: usize,
    pub none: usize,
    pub targets: Vec<String>,
}

pub fn manifest() -> Manifest {
    toml::from_str(&std::fs::read_to_string(fixtures().join("manifest.toml")).unwrap()).unwrap()
}

pub fn load_fixture(spec: &FixtureSpec) -> Corpus {
    let mut adapter = AdapterTable::builtin().get(&spec.adapter).unwrap().clone();
    if let Some(split) = spec.split {
        adapter.default_split = split;
    }
    let format: Format = spec.format.parse().unwrap();
    load_corpus_with(&fixtures().join(&spec.file), format, &spec.file, &adapter).unwrap()
}

/// Differences between a fixture's ingest statistics and its manifest entry.
pub fn manifest_mismatches(spec: &FixtureSpec, corpus: &Corpus) -> Vec<String> {
    let s = corpus_stats(corpus);
    let mut out = Vec::new();
    let mut check = |what: &str, got: usize, want: usize| {
        if got != want {
            out.push(format!("{}: {what} {got} != {want}", spec.file));
        }
    };
    check("total", s.total, spec.total);
    check("favor", s.labels.get(StanceLabel::Favor), spec.favor);
    check("against", s.labels.get(StanceLabel::Against), spec.against);
    check("none", s.labels.get(StanceLabel::None), spec.none);
    if let Some(split) = spec.split {
        check("split rows", s.per_split[&split], spec.total);
    }
    let targets: Vec<String> = s.targets.iter().map(|t| t.target.clone()).collect();
    if targets != spec.targets {
        out.push(format!("{}: targets {targets:?} != {:?}", spec.file, spec.targets));
    }
    out
}
