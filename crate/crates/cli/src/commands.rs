//! Subcommand implementations. Each reads its upstream artifacts from the
//! output directory and writes its own under a fixed sub-directory.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use annostance::annotate::{
    build_backend, read_records, write_records, AnnotationRecord, Annotator, Backend, BackendKind, Cache, MockOracle,
    PhrasePolicy,
};
use annostance::corpus::{
    benchmark_reference, corpus_stats, load_corpus, load_corpus_with, write_corpus, AdapterTable, CorpusStats, Format,
};
use annostance::decoder::LabelDecoder;
use annostance::exec::Execution;
use annostance::metrics::{render_grid, sensitivity_report, EvalReport, Prf, SensitivityReport};
use annostance::multitarget::{build_multitarget_samples, write_samples, Extractor, SamplerStats};
use annostance::prompt::{PromptAxes, TemplateSet};
use annostance::student::{self, export_training_file, featurize, featurize_all, predict_many, ExportRecord, StudentModel};
use annostance::{Corpus, Decoded, Split, StanceExample, StanceLabel};
use serde::Serialize;

use crate::artifacts::Artifacts;
use crate::config::{MockPhrases, Resolved, ScoreMetric, TrainSource};
use crate::error::CliError;

pub struct Ctx {
    pub cfg: Resolved,
    pub exec: Execution,
}

fn corpus_file(name: &str) -> String {
    format!("corpora/{name}.jsonl")
}

fn annotation_file(name: &str) -> String {
    format!("annotations/{name}.jsonl")
}

fn samples_file(name: &str) -> String {
    format!("samples/{name}.jsonl")
}

fn model_file(corpus: &str, source: TrainSource) -> String {
    format!("models/{corpus}.{}.json", source.name())
}

fn infer_format(path: &Path) -> Result<Format, CliError> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default();
    ext.parse().map_err(|_| CliError::Config(format!("cannot infer the format of {}; set `format`", path.display())))
}

fn require(path: PathBuf, producer: &'static str) -> Result<PathBuf, CliError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::MissingUpstream { path, producer })
    }
}

impl Ctx {
    fn artifacts(&self, command: &'static str) -> Artifacts {
        Artifacts::new(self.cfg.out_dir(), &self.cfg.digest, command)
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.cfg.out_dir().join(rel)
    }

    fn ingested(&self, name: &str) -> Result<Corpus, CliError> {
        let path = require(self.out(&corpus_file(name)), "ingest")?;
        Ok(load_corpus(&path, Format::Jsonl, name)?)
    }

    fn annotations(&self, name: &str) -> Result<Vec<AnnotationRecord>, CliError> {
        let path = require(self.out(&annotation_file(name)), "annotate")?;
        read_records(&path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))
    }

    fn machine_labels(&self, name: &str) -> Result<HashMap<String, Decoded>, CliError> {
        let axes = &self.cfg.config.annotate.axes;
        Ok(self
            .annotations(name)?
            .into_iter()
            .filter(|r| &r.axes == axes)
            .map(|r| (r.example_id, r.decoded))
            .collect())
    }

    fn backend(&self, oracle: &[StanceExample]) -> Result<Box<dyn Backend>, CliError> {
        let b = &self.cfg.backend;
        let mock = &self.cfg.config.mock;
        if b.kind == BackendKind::Mock {
            let policy = match mock.phrases {
                MockPhrases::Random => PhrasePolicy::Random,
                MockPhrases::None => PhrasePolicy::AnswerNone,
            };
            let m = MockOracle::from_examples(oracle, mock.noise_rate, self.cfg.config.seed)?
                .with_backend_id(&b.backend_id)
                .with_phrase_policy(policy);
            return Ok(Box::new(m));
        }
        Ok(build_backend(b, None, 0.0, self.cfg.config.seed)?)
    }

    fn templates(&self) -> Result<TemplateSet, CliError> {
        match &self.cfg.config.prompt.templates {
            Some(p) => Ok(TemplateSet::load(&self.cfg.resolve(p))?),
            None => Ok(TemplateSet::default()),
        }
    }

    fn cache(&self) -> Result<Cache, CliError> {
        Ok(Cache::open(&self.cfg.cache_path())?)
    }

    fn annotator<'a>(&self, backend: &'a dyn Backend, cache: &'a Cache) -> Result<Annotator<'a>, CliError> {
        Ok(Annotator::new(backend, cache)
            .templates(self.templates()?)
            .decoder(LabelDecoder::new(&self.cfg.config.decoder))
            .max_in_flight(self.cfg.backend.max_in_flight)
            .strict(self.cfg.config.strict)
            .execution(self.exec))
    }
}

// ---------------------------------------------------------------- ingest

#[derive(Serialize)]
struct IngestReport<'a> {
    stats: &'a CorpusStats,
    /// Split sizes that disagree with the published benchmark of the same name.
    reference_mismatches: Vec<String>,
}

pub fn ingest(ctx: &Ctx) -> Result<(), CliError> {
    let art = ctx.artifacts("ingest");
    let table = match &ctx.cfg.config.adapters {
        Some(p) => AdapterTable::with_overrides(&ctx.cfg.resolve(p))?,
        None => AdapterTable::builtin(),
    };
    let mut table_text = String::new();
    let _ = writeln!(table_text, "{:<24}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}{:>9}", "corpus", "total", "train", "valid", "test", "favor", "against", "none", "targets");
    for entry in &ctx.cfg.config.corpus {
        let files = entry.files();
        let mut examples = Vec::new();
        for (i, f) in files.iter().enumerate() {
            let path = ctx.cfg.resolve(&f.path);
            let format = match entry.format {
                Some(fmt) => fmt,
                None => infer_format(&path)?,
            };
            let mut adapter = table.get(&entry.adapter)?.clone();
            if let Some(split) = f.split {
                adapter.default_split = split;
            }
            // Synthesized ids must stay unique across files.
            let scope = if files.len() == 1 { entry.name.clone() } else { format!("{}-{i}", entry.name) };
            let part = load_corpus_with(&path, format, &scope, &adapter)?;
            examples.extend(part.examples.into_iter().map(|e| StanceExample { corpus_name: entry.name.clone(), ..e }));
        }
        let corpus = Corpus::new(entry.name.clone(), examples)?;
        let stats = corpus_stats(&corpus);
        let reference_mismatches = benchmark_reference(&entry.name).map(|b| b.mismatches(&stats)).unwrap_or_default();
        for m in &reference_mismatches {
            tracing::warn!("{}: {m}", entry.name);
        }
        art.write_with(&corpus_file(&entry.name), |p| write_corpus(&corpus, p))?;
        art.write_json(&format!("corpora/{}.stats.json", entry.name), &IngestReport { stats: &stats, reference_mismatches })?;
        let _ = writeln!(
            table_text,
            "{:<24}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}{:>9}",
            entry.name,
            stats.total,
            stats.per_split[&Split::Train],
            stats.per_split[&Split::Valid],
            stats.per_split[&Split::Test],
            stats.labels.get(StanceLabel::Favor),
            stats.labels.get(StanceLabel::Against),
            stats.labels.get(StanceLabel::None),
            stats.targets.len()
        );
        tracing::info!("ingested {} ({} examples)", entry.name, stats.total);
    }
    art.write_text("corpora/stats.txt", &table_text)?;
    Ok(())
}

// ---------------------------------------------------------------- annotate

#[derive(Serialize)]
struct AnnotateSummary {
    corpora: BTreeMap<String, AnnotateCounts>,
}

#[derive(Serialize)]
struct AnnotateCounts {
    examples: usize,
    favor: usize,
    against: usize,
    none: usize,
    undecodable: usize,
    errors: usize,
}

fn counts(records: &[AnnotationRecord]) -> AnnotateCounts {
    let n = |d: Decoded| records.iter().filter(|r| r.decoded == d).count();
    AnnotateCounts {
        examples: records.len(),
        favor: n(Decoded::Label(StanceLabel::Favor)),
        against: n(Decoded::Label(StanceLabel::Against)),
        none: n(Decoded::Label(StanceLabel::None)),
        undecodable: n(Decoded::Undecodable),
        errors: records.iter().filter(|r| r.error.is_some()).count(),
    }
}

pub fn annotate(ctx: &Ctx) -> Result<(), CliError> {
    let art = ctx.artifacts("annotate");
    let cache = ctx.cache()?;
    let splits = &ctx.cfg.config.annotate.splits;
    let axes = &ctx.cfg.config.annotate.axes;
    let mut summary = AnnotateSummary { corpora: BTreeMap::new() };
    for name in ctx.cfg.corpus_names() {
        let corpus = ctx.ingested(&name)?;
        let examples: Vec<StanceExample> =
            corpus.examples.iter().filter(|e| splits.contains(&e.split)).cloned().collect();
        let backend = ctx.backend(&corpus.examples)?;
        let records = ctx.annotator(backend.as_ref(), &cache)?.annotate_corpus(&examples, axes)?;
        art.write_with(&annotation_file(&name), |p| write_records(&records, p))?;
        tracing::info!("annotated {name}: {} examples, {} backend calls", records.len(), backend.request_count());
        summary.corpora.insert(name, counts(&records));
    }
    art.write_json("annotations/summary.json", &summary)?;
    Ok(())
}

// ---------------------------------------------------------------- sensitivity

#[derive(Serialize)]
struct CellScore {
    axes: PromptAxes,
    score: f64,
    macro3: Prf,
    macro2: Prf,
    n_undecodable: usize,
}

#[derive(Serialize)]
struct SensitivityFile<'a> {
    corpus: &'a str,
    split: Split,
    metric: ScoreMetric,
    cells: Vec<CellScore>,
    report: SensitivityReport,
}

fn score_records(examples: &[StanceExample], records: &[AnnotationRecord], ctx: &Ctx) -> EvalReport {
    let pairs: Vec<(StanceLabel, Decoded)> =
        examples.iter().zip(records).filter_map(|(e, r)| e.gold.map(|g| (g, r.decoded))).collect();
    EvalReport::evaluate(&pairs, ctx.cfg.config.evaluate.two_class)
}

pub fn sensitivity(ctx: &Ctx) -> Result<(), CliError> {
    let art = ctx.artifacts("sensitivity");
    let cache = ctx.cache()?;
    let s = &ctx.cfg.config.sensitivity;
    let cells = ctx.cfg.config.prompt.grid.cells()?;
    for name in ctx.cfg.selected(&s.corpora) {
        let corpus = ctx.ingested(&name)?;
        let examples: Vec<StanceExample> =
            corpus.examples.iter().filter(|e| e.split == s.split && e.gold.is_some()).cloned().collect();
        if examples.is_empty() {
            return Err(CliError::Config(format!("corpus {name} has no labeled {} rows to score", s.split)));
        }
        let backend = ctx.backend(&corpus.examples)?;
        let annotator = ctx.annotator(backend.as_ref(), &cache)?;
        let mut scored = Vec::with_capacity(cells.len());
        for axes in &cells {
            let records = annotator.annotate_corpus(&examples, axes)?;
            let report = score_records(&examples, &records, ctx);
            let score = match s.metric {
                ScoreMetric::Macro3 => report.macro3.f1,
                ScoreMetric::Macro2 => report.macro2.f1,
            };
            scored.push(CellScore {
                axes: axes.clone(),
                score,
                macro3: report.macro3,
                macro2: report.macro2,
                n_undecodable: report.n_undecodable,
            });
        }
        let runs: Vec<(PromptAxes, f64)> = scored.iter().map(|c| (c.axes.clone(), c.score)).collect();
        let report = sensitivity_report(&runs)?;
        let mut text = format!("corpus {name}, split {}, {} cells\n\n", s.split, scored.len());
        text.push_str(&report.to_table());
        art.write_text(&format!("sensitivity/{name}.txt"), &text)?;
        art.write_text(&format!("sensitivity/{name}.csv"), &report.to_csv())?;
        art.write_json(
            &format!("sensitivity/{name}.json"),
            &SensitivityFile { corpus: &name, split: s.split, metric: s.metric, cells: scored, report },
        )?;
        tracing::info!("sensitivity sweep of {name}: {} cells", cells.len());
    }
    Ok(())
}

// ---------------------------------------------------------------- sample-multitarget

#[derive(Serialize)]
struct SamplerFile<'a> {
    corpus: &'a str,
    stats: SamplerStats,
}

pub fn sample_multitarget(ctx: &Ctx) -> Result<(), CliError> {
    let art = ctx.artifacts("sample-multitarget");
    let cache = ctx.cache()?;
    let sampler = &ctx.cfg.config.sampler;
    let extractor = Extractor::from_config(&sampler.extractor, sampler.sidecar.as_deref().map(|p| ctx.cfg.resolve(p)).as_deref())?;
    for name in ctx.cfg.selected(&ctx.cfg.config.train.corpora) {
        let corpus = ctx.ingested(&name)?;
        let train: Vec<StanceExample> = corpus.split(Split::Train).examples;
        let machine = if ctx.out(&annotation_file(&name)).is_file() { Some(ctx.machine_labels(&name)?) } else { None };
        let backend = ctx.backend(&corpus.examples)?;
        let annotator = ctx.annotator(backend.as_ref(), &cache)?;
        let out = build_multitarget_samples(
            &train,
            &ctx.cfg.config.annotate.axes,
            &annotator,
            sampler,
            &extractor,
            machine.as_ref(),
        )?;
        art.write_with(&samples_file(&name), |p| write_samples(&out.samples, p))?;
        art.write_json(&format!("samples/{name}.stats.json"), &SamplerFile { corpus: &name, stats: out.stats })?;
        tracing::info!("{name}: {} multi-target samples", out.samples.len());
    }
    Ok(())
}

// ---------------------------------------------------------------- train / export

/// Labeled (id, target, text, label) rows for one training source.
fn training_records(ctx: &Ctx, name: &str, source: TrainSource) -> Result<Vec<ExportRecord>, CliError> {
    let corpus = ctx.ingested(name)?;
    let train = corpus.split(Split::Train);
    let mut out = Vec::new();
    match source {
        TrainSource::Gold => {
            out.extend(train.examples.iter().filter_map(|e| ExportRecord::try_from(e).ok()));
        }
        TrainSource::Machine | TrainSource::MachineMultiTarget => {
            let labels = ctx.machine_labels(name)?;
            for e in &train.examples {
                if let Some(Decoded::Label(l)) = labels.get(&e.id) {
                    out.push(ExportRecord { id: e.id.clone(), target: e.target.clone(), text: e.text.clone(), label: *l });
                }
            }
            if source == TrainSource::MachineMultiTarget {
                let path = require(ctx.out(&samples_file(name)), "sample-multitarget")?;
                let extra = load_corpus(&path, Format::Jsonl, name)?;
                out.extend(extra.examples.iter().filter_map(|e| ExportRecord::try_from(e).ok()));
            }
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct TrainFile<'a> {
    corpus: &'a str,
    source: TrainSource,
    samples: usize,
    hyperparams: student::Hyperparams,
    loss_history: &'a [f64],
    train_accuracy: f64,
}

pub fn train(ctx: &Ctx) -> Result<(), CliError> {
    let art = ctx.artifacts("train");
    let hp = ctx.cfg.config.student.hyperparams(ctx.cfg.config.seed);
    let dim = ctx.cfg.config.student.dim;
    for name in ctx.cfg.selected(&ctx.cfg.config.train.corpora) {
        for &source in &ctx.cfg.config.train.sources {
            let records = training_records(ctx, &name, source)?;
            if records.is_empty() {
                return Err(CliError::Training(format!("{name}/{}: no labeled training rows", source.name())));
            }
            let fvs = featurize_all(records.iter().map(|r| (r.target.as_str(), r.text.as_str())), dim, ctx.exec)?;
            let data: Vec<_> = fvs.into_iter().zip(records.iter().map(|r| r.label)).collect();
            let model = student::train(&data, hp, ctx.exec)?;
            let acc = student::accuracy(&model, &data, ctx.exec)?;
            let rel = model_file(&name, source);
            art.write_with(&rel, |p| model.save(p))?;
            art.write_json(
                &rel.replace(".json", ".train.json"),
                &TrainFile {
                    corpus: &name,
                    source,
                    samples: data.len(),
                    hyperparams: hp,
                    loss_history: &model.loss_history,
                    train_accuracy: acc,
                },
            )?;
            tracing::info!("trained {name}/{} on {} rows, train accuracy {acc:.4}", source.name(), data.len());
        }
    }
    Ok(())
}

pub fn export(ctx: &Ctx) -> Result<(), CliError> {
    let art = ctx.artifacts("export");
    for name in ctx.cfg.selected(&ctx.cfg.config.train.corpora) {
        for &source in &ctx.cfg.config.train.sources {
            let records = training_records(ctx, &name, source)?;
            art.write_with(&format!("export/{name}.{}.jsonl", source.name()), |p| export_training_file(&records, p))?;
            tracing::info!("exported {name}/{}: {} rows", source.name(), records.len());
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Serialize)]
struct EvalCell {
    source: String,
    test_set: String,
    report: EvalReport,
}

#[derive(Serialize)]
struct EvalSummary {
    sources: Vec<String>,
    test_sets: Vec<String>,
    cells: Vec<EvalCell>,
}

const ANNOTATOR: &str = "annotator";

pub fn evaluate(ctx: &Ctx) -> Result<(), CliError> {
    let art = ctx.artifacts("evaluate");
    let scheme = ctx.cfg.config.evaluate.two_class;
    let dim = ctx.cfg.config.student.dim;

    let mut test_sets: Vec<(String, Vec<StanceExample>)> = Vec::new();
    for name in ctx.cfg.selected(&ctx.cfg.config.evaluate.corpora) {
        let test: Vec<StanceExample> =
            ctx.ingested(&name)?.split(Split::Test).examples.into_iter().filter(|e| e.gold.is_some()).collect();
        if !test.is_empty() {
            test_sets.push((name, test));
        }
    }
    if test_sets.is_empty() {
        return Err(CliError::Config("no corpus has labeled test rows".into()));
    }

    let mut models: Vec<(String, StudentModel)> = Vec::new();
    for name in ctx.cfg.selected(&ctx.cfg.config.train.corpora) {
        for &source in &ctx.cfg.config.train.sources {
            let path = require(ctx.out(&model_file(&name, source)), "train")?;
            let model = StudentModel::load(&path)?;
            if model.dim != dim {
                return Err(CliError::Training(format!("{} has dimension {}, config says {dim}", path.display(), model.dim)));
            }
            models.push((format!("{name}.{}", source.name()), model));
        }
    }

    let mut cells = Vec::new();
    for (test_name, test) in &test_sets {
        // Machine labels from the annotation run, when that run covered the test split.
        if ctx.out(&annotation_file(test_name)).is_file() {
            let labels = ctx.machine_labels(test_name)?;
            let pairs: Option<Vec<(StanceLabel, Decoded)>> =
                test.iter().map(|e| labels.get(&e.id).map(|d| (e.gold.expect("labeled"), *d))).collect();
            if let Some(pairs) = pairs {
                cells.push(EvalCell {
                    source: ANNOTATOR.into(),
                    test_set: test_name.clone(),
                    report: EvalReport::evaluate(&pairs, scheme),
                });
            }
        }
        let fvs: Vec<_> = test
            .iter()
            .map(|e| featurize(&e.target, &e.text, dim))
            .collect::<Result<_, _>>()?;
        for (model_name, model) in &models {
            let preds = predict_many(model, &fvs, ctx.exec)?;
            let pairs: Vec<(StanceLabel, Decoded)> =
                test.iter().zip(preds).map(|(e, p)| (e.gold.expect("labeled"), Decoded::Label(p.label))).collect();
            cells.push(EvalCell {
                source: model_name.clone(),
                test_set: test_name.clone(),
                report: EvalReport::evaluate(&pairs, scheme),
            });
        }
    }

    let mut sources: Vec<String> = Vec::new();
    if cells.iter().any(|c| c.source == ANNOTATOR) {
        sources.push(ANNOTATOR.into());
    }
    sources.extend(models.iter().map(|(n, _)| n.clone()));
    let names: Vec<String> = test_sets.iter().map(|(n, _)| n.clone()).collect();
    let lookup = |src: &str, t: &str| cells.iter().find(|c| c.source == src && c.test_set == t).map(|c| &c.report);

    let mut grid = render_grid("macro-averaged, 3 classes", &sources, &names, |s, t| lookup(s, t).map(|r| r.macro3));
    grid.push('\n');
    grid.push_str(&render_grid(
        &format!("macro-averaged, favor/against ({})", serde_json::to_string(&scheme).unwrap_or_default().trim_matches('"')),
        &sources,
        &names,
        |s, t| lookup(s, t).map(|r| r.macro2),
    ));
    art.write_text("evaluate/grid.txt", &grid)?;
    for c in &cells {
        let mut text = format!("source {}, test set {}\n\n", c.source, c.test_set);
        text.push_str(&c.report.to_table());
        art.write_text(&format!("evaluate/{}__{}.txt", c.source, c.test_set), &text)?;
        art.write_json(&format!("evaluate/{}__{}.json", c.source, c.test_set), c)?;
    }
    art.write_json("evaluate/summary.json", &EvalSummary { sources, test_sets: names, cells })?;
    Ok(())
}

/// Runs every stage in order.
pub fn pipeline(ctx: &Ctx) -> Result<(), CliError> {
    ingest(ctx)?;
    annotate(ctx)?;
    sample_multitarget(ctx)?;
    train(ctx)?;
    evaluate(ctx)?;
    export(ctx)
}
