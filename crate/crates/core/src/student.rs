//! Hashed n-gram multinomial logistic regression student.
//!
//! Input pairs are featurized like the `<s> target </s> <s> context </s>`
//! encoder input: unigrams and bigrams of the target and of the text are
//! tagged with their field (`t:` / `c:`) and hashed into `[0, D)`. Every
//! (target unigram, text unigram) pair also adds a conjunction feature
//! (`x:`), standing in for the encoder's cross-attention: without it a
//! linear model cannot let the same words mean different things for
//! different targets.
//!
//! Feature hash (portable across implementations): 64-bit FNV-1a over the
//! UTF-8 bytes of the tagged feature string, followed by the SplitMix64
//! finalizer, truncated to the low `log2(D)` bits.
//!
//! Training minimizes mean cross-entropy plus `l2 / 2 * ||W||^2` (bias not
//! penalized) with seeded mini-batch SGD. Batch order is fixed by a ChaCha8
//! stream seeded from `seed`; per-sample forward passes may run in parallel
//! but gradients are always accumulated in batch order, so the update
//! sequence is identical under either execution strategy.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::StanceExample;
use crate::exec::Execution;
use crate::label::StanceLabel;
use crate::multitarget::MultiTargetSample;

pub const DEFAULT_DIM: usize = 1 << 18;
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StudentError {
    #[error("dimension {0} is not a power of two")]
    InvalidDimension(usize),
    #[error("target is empty")]
    EmptyTarget,
    #[error("training set is empty")]
    EmptyDataset,
    #[error("loss became non-finite at epoch {epoch}; lower the learning rate")]
    NonFiniteLoss { epoch: usize },
    #[error("feature vector has dimension {got}, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("record {0:?} has no label")]
    UnlabeledRecord(String),
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("model file: {0}")]
    ModelFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sparse non-negative count vector over `[0, dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    dim: usize,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl FeatureVector {
    /// Builds a vector from (index, value) pairs, summing repeats and
    /// dropping non-positive values.
    pub fn from_pairs(dim: usize, pairs: impl IntoIterator<Item = (u32, f64)>) -> Result<Self, StudentError> {
        if !dim.is_power_of_two() {
            return Err(StudentError::InvalidDimension(dim));
        }
        let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
        for (i, v) in pairs {
            if (i as usize) >= dim {
                return Err(StudentError::DimensionMismatch { expected: dim, got: i as usize + 1 });
            }
            *acc.entry(i).or_default() += v;
        }
        let (indices, values) = acc.into_iter().filter(|(_, v)| *v > 0.0).unzip();
        Ok(FeatureVector { dim, indices, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().map(|&i| i as usize).zip(self.values.iter().copied())
    }
}

pub fn feature_hash(feature: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in feature.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Case-folded word tokens; `#` and `@` prefixes stay attached.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || matches!(c, '#' | '@' | '_' | '\'')))
        .map(|t| t.trim_matches('\''))
        .filter(|t| !t.is_empty() && t.chars().any(char::is_alphanumeric))
        .map(str::to_lowercase)
        .collect()
}

fn push_ngrams(tag: &str, tokens: &[String], mask: u64, out: &mut Vec<(u32, f64)>) {
    for t in tokens {
        out.push(((feature_hash(&format!("{tag}:{t}")) & mask) as u32, 1.0));
    }
    for w in tokens.windows(2) {
        out.push(((feature_hash(&format!("{tag}:{} {}", w[0], w[1])) & mask) as u32, 1.0));
    }
}

fn push_conjunctions(target: &[String], text: &[String], mask: u64, out: &mut Vec<(u32, f64)>) {
    for t in target {
        for w in text {
            out.push(((feature_hash(&format!("x:{t}|{w}")) & mask) as u32, 1.0));
        }
    }
}

pub fn featurize(target: &str, text: &str, dim: usize) -> Result<FeatureVector, StudentError> {
    if !dim.is_power_of_two() {
        return Err(StudentError::InvalidDimension(dim));
    }
    let target_tokens = tokenize(target);
    if target_tokens.is_empty() {
        return Err(StudentError::EmptyTarget);
    }
    let mask = (dim - 1) as u64;
    let mut pairs = Vec::new();
    push_ngrams("t", &target_tokens, mask, &mut pairs);
    let text_tokens = tokenize(text);
    push_ngrams("c", &text_tokens, mask, &mut pairs);
    push_conjunctions(&target_tokens, &text_tokens, mask, &mut pairs);
    FeatureVector::from_pairs(dim, pairs)
}

fn default_lr() -> f64 {
    0.1
}
fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    32
}
fn default_l2() -> f64 {
    1e-5
}
fn default_seed() -> u64 {
    13
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_l2")]
    pub l2: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Reshuffle the sample order every epoch.
    #[serde(default = "default_true")]
    pub shuffle: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lr: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            l2: default_l2(),
            seed: default_seed(),
            shuffle: true,
        }
    }
}

/// Linear softmax classifier. Rows are ordered Favor, Against, None.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub dim: usize,
    /// Feature-major: the weight of class `c` for feature `j` is `weights[3 * j + c]`.
    pub weights: Vec<f64>,
    pub bias: [f64; 3],
    pub seed: u64,
    pub hyperparams: Hyperparams,
    /// Full-data objective before training, then after every epoch.
    pub loss_history: Vec<f64>,
}

impl StudentModel {
    /// All-zero parameters. Training always starts here.
    pub fn init(dim: usize, hyperparams: Hyperparams) -> Result<Self, StudentError> {
        if !dim.is_power_of_two() {
            return Err(StudentError::InvalidDimension(dim));
        }
        Ok(StudentModel {
            dim,
            weights: vec![0.0; 3 * dim],
            bias: [0.0; 3],
            seed: hyperparams.seed,
            hyperparams,
            loss_history: Vec::new(),
        })
    }

    pub fn weight(&self, class: StanceLabel, feature: usize) -> f64 {
        self.weights[3 * feature + class.index()]
    }

    pub fn logits(&self, fv: &FeatureVector) -> Result<[f64; 3], StudentError> {
        self.check_dim(fv)?;
        Ok(logits_scaled(&self.weights, 1.0, &self.bias, fv))
    }

    fn check_dim(&self, fv: &FeatureVector) -> Result<(), StudentError> {
        if fv.dim != self.dim {
            return Err(StudentError::DimensionMismatch { expected: self.dim, got: fv.dim });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), StudentError> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, &ModelFile::from(self)).map_err(|e| StudentError::ModelFormat(e.to_string()))?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StudentError> {
        let file: ModelFile = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))
            .map_err(|e| StudentError::ModelFormat(e.to_string()))?;
        file.try_into()
    }
}

/// On-disk model: header fields plus the non-zero weight rows.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    dim: usize,
    seed: u64,
    hyperparams: Hyperparams,
    bias: [f64; 3],
    loss_history: Vec<f64>,
    /// `[feature, w_favor, w_against, w_none]` for every feature with a non-zero weight.
    weights: Vec<(usize, f64, f64, f64)>,
}

impl From<&StudentModel> for ModelFile {
    fn from(m: &StudentModel) -> Self {
        let weights = m
            .weights
            .chunks_exact(3)
            .enumerate()
            .filter(|(_, w)| w.iter().any(|x| *x != 0.0))
            .map(|(j, w)| (j, w[0], w[1], w[2]))
            .collect();
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            dim: m.dim,
            seed: m.seed,
            hyperparams: m.hyperparams,
            bias: m.bias,
            loss_history: m.loss_history.clone(),
            weights,
        }
    }
}

impl TryFrom<ModelFile> for StudentModel {
    type Error = StudentError;

    fn try_from(f: ModelFile) -> Result<Self, StudentError> {
        if f.format_version != MODEL_FORMAT_VERSION {
            return Err(StudentError::ModelFormat(format!("unsupported version {}", f.format_version)));
        }
        let mut m = StudentModel::init(f.dim, f.hyperparams)?;
        m.seed = f.seed;
        m.bias = f.bias;
        m.loss_history = f.loss_history;
        for (j, a, b, c) in f.weights {
            if j >= m.dim {
                return Err(StudentError::ModelFormat(format!("feature {j} out of range")));
            }
            m.weights[3 * j..3 * j + 3].copy_from_slice(&[a, b, c]);
        }
        Ok(m)
    }
}

fn logits_scaled(weights: &[f64], scale: f64, bias: &[f64; 3], fv: &FeatureVector) -> [f64; 3] {
    let mut z = [0.0; 3];
    for (j, x) in fv.iter() {
        let w = &weights[3 * j..3 * j + 3];
        z[0] += w[0] * x;
        z[1] += w[1] * x;
        z[2] += w[2] * x;
    }
    [scale * z[0] + bias[0], scale * z[1] + bias[1], scale * z[2] + bias[2]]
}

pub fn softmax(z: [f64; 3]) -> [f64; 3] {
    let m = z[0].max(z[1]).max(z[2]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp(), (z[2] - m).exp()];
    let s = e[0] + e[1] + e[2];
    [e[0] / s, e[1] / s, e[2] / s]
}

fn argmax(p: &[f64; 3]) -> StanceLabel {
    let mut best = 0;
    for c in 1..3 {
        if p[c] > p[best] {
            best = c;
        }
    }
    StanceLabel::from_index(best).expect("three classes")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: StanceLabel,
    pub probs: [f64; 3],
}

/// Softmax probabilities and the argmax label (ties go to the earlier class).
pub fn predict(model: &StudentModel, fv: &FeatureVector) -> Result<Prediction, StudentError> {
    let probs = softmax(model.logits(fv)?);
    Ok(Prediction { label: argmax(&probs), probs })
}

pub fn predict_many(
    model: &StudentModel,
    fvs: &[FeatureVector],
    exec: Execution,
) -> Result<Vec<Prediction>, StudentError> {
    exec.map(fvs, |fv| predict(model, fv)).into_iter().collect()
}

fn cross_entropy(z: [f64; 3], y: StanceLabel) -> f64 {
    let m = z[0].max(z[1]).max(z[2]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp() + (z[2] - m).exp()).ln();
    lse - z[y.index()]
}

/// Mean cross-entropy over `data` plus `l2 / 2 * ||W||^2`.
pub fn objective(model: &StudentModel, data: &[(FeatureVector, StanceLabel)], exec: Execution) -> f64 {
    let ce: Vec<f64> = exec.map(data, |(fv, y)| cross_entropy(logits_scaled(&model.weights, 1.0, &model.bias, fv), *y));
    let mean = ce.iter().sum::<f64>() / data.len().max(1) as f64;
    let sq: f64 = model.weights.iter().map(|w| w * w).sum();
    mean + 0.5 * model.hyperparams.l2 * sq
}

/// Analytic gradient of [`objective`]: (dense weight gradient in the
/// model's feature-major layout, bias gradient).
pub fn gradient(model: &StudentModel, data: &[(FeatureVector, StanceLabel)]) -> (Vec<f64>, [f64; 3]) {
    let n = data.len().max(1) as f64;
    let mut gw: Vec<f64> = model.weights.iter().map(|w| model.hyperparams.l2 * w).collect();
    let mut gb = [0.0; 3];
    for (fv, y) in data {
        let p = softmax(logits_scaled(&model.weights, 1.0, &model.bias, fv));
        for c in 0..3 {
            let r = (p[c] - if c == y.index() { 1.0 } else { 0.0 }) / n;
            gb[c] += r;
            for (j, x) in fv.iter() {
                gw[3 * j + c] += r * x;
            }
        }
    }
    (gw, gb)
}

/// Seeded mini-batch SGD. See the module docs for the objective.
pub fn train(
    data: &[(FeatureVector, StanceLabel)],
    hp: Hyperparams,
    exec: Execution,
) -> Result<StudentModel, StudentError> {
    let dim = data.first().ok_or(StudentError::EmptyDataset)?.0.dim;
    if hp.batch_size == 0 || !(hp.lr > 0.0) || !(hp.l2 >= 0.0) || hp.lr * hp.l2 >= 1.0 {
        return Err(StudentError::InvalidHyperparams(format!(
            "need batch_size >= 1, lr > 0, 0 <= l2 < 1/lr (got {hp:?})"
        )));
    }
    if let Some((fv, _)) = data.iter().find(|(fv, _)| fv.dim != dim) {
        return Err(StudentError::DimensionMismatch { expected: dim, got: fv.dim });
    }
    let mut model = StudentModel::init(dim, hp)?;
    let initial = objective(&model, data, exec);
    model.loss_history.push(initial);

    // W = scale * v lets the L2 shrink touch only one scalar per step.
    let mut v = std::mem::take(&mut model.weights);
    let mut scale = 1.0f64;
    let decay = 1.0 - hp.lr * hp.l2;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);

    for epoch in 0..hp.epochs {
        if hp.shuffle {
            order.shuffle(&mut rng);
        }
        for batch in order.chunks(hp.batch_size) {
            let bias = model.bias;
            let v_ref = &v;
            let residuals: Vec<[f64; 3]> = exec.map(batch, |&i| {
                let (fv, y) = &data[i];
                let mut p = softmax(logits_scaled(v_ref, scale, &bias, fv));
                p[y.index()] -= 1.0;
                p
            });
            let step = hp.lr / batch.len() as f64;
            scale *= decay;
            for (&i, r) in batch.iter().zip(&residuals) {
                for (j, x) in data[i].0.iter() {
                    for c in 0..3 {
                        v[3 * j + c] -= step * r[c] * x / scale;
                    }
                }
                for c in 0..3 {
                    model.bias[c] -= step * r[c];
                }
            }
            if scale < 1e-6 {
                v.iter_mut().for_each(|w| *w *= scale);
                scale = 1.0;
            }
        }
        model.weights = v.iter().map(|w| w * scale).collect();
        let loss = objective(&model, data, exec);
        if !loss.is_finite() {
            return Err(StudentError::NonFiniteLoss { epoch: epoch + 1 });
        }
        model.loss_history.push(loss);
        model.weights = Vec::new();
    }
    model.weights = v.into_iter().map(|w| w * scale).collect();
    Ok(model)
}

pub fn accuracy(model: &StudentModel, data: &[(FeatureVector, StanceLabel)], exec: Execution) -> Result<f64, StudentError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<bool> = exec
        .map(data, |(fv, y)| predict(model, fv).map(|p| p.label == *y))
        .into_iter()
        .collect::<Result<_, _>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / data.len() as f64)
}

/// Featurizes (target, text) pairs in input order.
pub fn featurize_all<'a, I>(pairs: I, dim: usize, exec: Execution) -> Result<Vec<FeatureVector>, StudentError>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
    exec.map(&pairs, |(t, x)| featurize(t, x, dim)).into_iter().collect()
}

/// One line of a training-ready export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub id: String,
    pub target: String,
    pub text: String,
    pub label: StanceLabel,
}

impl TryFrom<&StanceExample> for ExportRecord {
    type Error = StudentError;

    fn try_from(e: &StanceExample) -> Result<Self, StudentError> {
        Ok(ExportRecord {
            id: e.id.clone(),
            target: e.target.clone(),
            text: e.text.clone(),
            label: e.gold.ok_or_else(|| StudentError::UnlabeledRecord(e.id.clone()))?,
        })
    }
}

impl From<&MultiTargetSample> for ExportRecord {
    fn from(s: &MultiTargetSample) -> Self {
        ExportRecord { id: s.example_id.clone(), target: s.target.clone(), text: s.text.clone(), label: s.label }
    }
}

/// Writes `{id, target, text, label}` lines in the given order.
pub fn export_training_file(records: &[ExportRecord], path: &Path) -> Result<(), StudentError> {
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(StudentError::DuplicateId(r.id.clone()));
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| StudentError::ModelFormat(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_pinned() {
        // Frozen so feature ids stay portable.
        assert_eq!(feature_hash(""), {
            let mut z: u64 = 0xcbf2_9ce4_8422_2325;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^ (z >> 31)
        });
        assert_ne!(feature_hash("t:atheism"), feature_hash("c:atheism"));
    }

    #[test]
    fn tokenizer_keeps_hashtags() {
        assert_eq!(tokenize("God's LOVE, #SemST @user!"), vec!["god's", "love", "#semst", "@user"]);
        assert!(tokenize("  ... ").is_empty());
    }

    #[test]
    fn featurize_counts() {
        let fv = featurize("atheism", "pray", 1 << 18).unwrap();
        assert_eq!(fv.nnz(), 3);
        assert!(matches!(featurize("  ", "  ", 1 << 18), Err(StudentError::EmptyTarget)));
        assert!(matches!(featurize("a", "b", 1000), Err(StudentError::InvalidDimension(1000))));
        // "a b a": unigrams a(2) b(1), bigrams "a b" "b a", one conjunction per text token.
        let fv = featurize("x", "a b a", 1 << 18).unwrap();
        assert_eq!(fv.values().iter().sum::<f64>(), 1.0 + 3.0 + 2.0 + 3.0);
    }

    #[test]
    fn conjunctions_pair_target_and_text_unigrams() {
        let dim = 1 << 18;
        let fv = featurize("gas guzzlers", "coal is fine", dim).unwrap();
        // Target 2+1, text 3+2, conjunctions 2*3.
        assert_eq!(fv.values().iter().sum::<f64>(), 3.0 + 5.0 + 6.0);
        let x = |t: &str, w: &str| (feature_hash(&format!("x:{t}|{w}")) & (dim as u64 - 1)) as u32;
        assert!(fv.indices().contains(&x("guzzlers", "fine")));
        let other = featurize("coal", "coal is fine", dim).unwrap();
        assert!(!other.indices().contains(&x("guzzlers", "fine")));
        assert!(other.indices().contains(&x("coal", "fine")));
    }

    #[test]
    fn featurize_deterministic_and_field_tagged() {
        let a = featurize("atheism", "Pray without ceasing", DEFAULT_DIM).unwrap();
        assert_eq!(a, featurize("atheism", "Pray without ceasing", DEFAULT_DIM).unwrap());
        let b = featurize("religion", "Pray without ceasing", DEFAULT_DIM).unwrap();
        assert_ne!(a, b);
        assert!(a.indices().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = StudentModel::init(16, Hyperparams::default()).unwrap();
        let fv = FeatureVector::from_pairs(16, [(3, 1.0)]).unwrap();
        let p = predict(&m, &fv).unwrap();
        for q in p.probs {
            assert!((q - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(p.label, StanceLabel::Favor);
        let other = FeatureVector::from_pairs(32, [(3, 1.0)]).unwrap();
        assert!(matches!(predict(&m, &other), Err(StudentError::DimensionMismatch { .. })));
    }

    #[test]
    fn softmax_hand_computed() {
        // Two features x = (1, 2); w_favor = (0.5, 0), w_against = (0, 0.25), w_none = 0;
        // bias = (0, 0, 0.5). Logits: 0.5, 0.5, 0.5 -> uniform.
        // Change bias_none to 0: logits 0.5, 0.5, 0 ->
        // p_none = 1 / (2e^0.5 + 1).
        let mut m = StudentModel::init(4, Hyperparams::default()).unwrap();
        m.weights[0] = 0.5; // feature 0, favor
        m.weights[3 + 1] = 0.25; // feature 1, against
        let fv = FeatureVector::from_pairs(4, [(0, 1.0), (1, 2.0)]).unwrap();
        let p = predict(&m, &fv).unwrap().probs;
        let e = 0.5f64.exp();
        let pn = 1.0 / (2.0 * e + 1.0);
        assert!((p[2] - pn).abs() < 1e-15);
        assert!((p[0] - e * pn).abs() < 1e-15);
        assert!((p[0] + p[1] + p[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shift_invariance() {
        let mut m = StudentModel::init(8, Hyperparams::default()).unwrap();
        m.weights[3] = 0.7;
        m.weights[4] = -1.1;
        m.bias = [0.2, -0.4, 0.1];
        let fv = FeatureVector::from_pairs(8, [(1, 2.0), (5, 1.0)]).unwrap();
        let p = predict(&m, &fv).unwrap().probs;
        m.bias = [0.2 + 7.5, -0.4 + 7.5, 0.1 + 7.5];
        let q = predict(&m, &fv).unwrap().probs;
        for c in 0..3 {
            assert!((p[c] - q[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let data = vec![(featurize("a", "b", 16).unwrap(), StanceLabel::Against)];
        let hp = Hyperparams { epochs: 0, ..Hyperparams::default() };
        let m = train(&data, hp, Execution::Sequential).unwrap();
        let init = StudentModel::init(16, hp).unwrap();
        assert_eq!(m.weights, init.weights);
        assert_eq!(m.bias, init.bias);
        assert_eq!(m.loss_history.len(), 1);
    }

    #[test]
    fn training_errors() {
        assert!(matches!(train(&[], Hyperparams::default(), Execution::Sequential), Err(StudentError::EmptyDataset)));
        let data = vec![(featurize("a", "b", 16).unwrap(), StanceLabel::Favor)];
        let hp = Hyperparams { lr: 1e6, ..Hyperparams::default() };
        assert!(matches!(train(&data, hp, Execution::Sequential), Err(StudentError::InvalidHyperparams(_))));
    }

    #[test]
    fn diverging_lr_is_reported() {
        let data: Vec<_> = (0..6)
            .map(|i| {
                let fv = FeatureVector::from_pairs(8, [(i % 4, 1e200)]).unwrap();
                (fv, StanceLabel::from_index(i as usize % 3).unwrap())
            })
            .collect();
        let hp = Hyperparams { lr: 1e3, l2: 0.0, ..Hyperparams::default() };
        assert!(matches!(train(&data, hp, Execution::Sequential), Err(StudentError::NonFiniteLoss { .. })));
    }

    #[test]
    fn full_batch_step_follows_gradient() {
        let data: Vec<_> = [("x", "good day", StanceLabel::Favor), ("x", "bad day", StanceLabel::Against), ("x", "a day", StanceLabel::None)]
            .iter()
            .map(|(t, x, y)| (featurize(t, x, 64).unwrap(), *y))
            .collect();
        let hp = Hyperparams { lr: 0.5, epochs: 1, batch_size: 3, l2: 0.01, seed: 1, shuffle: false };
        let init = StudentModel::init(64, hp).unwrap();
        let (gw, gb) = gradient(&init, &data);
        let m = train(&data, hp, Execution::Sequential).unwrap();
        for (w, g) in m.weights.iter().zip(&gw) {
            assert!((w - (-hp.lr * g)).abs() < 1e-12);
        }
        for c in 0..3 {
            assert!((m.bias[c] - (-hp.lr * gb[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_samples_match_doubled_batches() {
        // Each sample twice in a row with batch 2b and no shuffling yields
        // the same batch means as the original data with batch b.
        let base: Vec<_> = (0..12)
            .map(|i| {
                let fv = FeatureVector::from_pairs(16, [((i % 10) as u32, 1.0), (((i * 3) % 10) as u32, 2.0)]).unwrap();
                (fv, StanceLabel::from_index(i % 3).unwrap())
            })
            .collect();
        let doubled: Vec<_> = base.iter().flat_map(|s| [s.clone(), s.clone()]).collect();
        let hp = Hyperparams { lr: 0.3, epochs: 4, batch_size: 4, l2: 1e-3, seed: 5, shuffle: false };
        let a = train(&base, hp, Execution::Sequential).unwrap();
        let b = train(&doubled, Hyperparams { batch_size: 8, ..hp }, Execution::Sequential).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-12);
        }
        for c in 0..3 {
            assert!((a.bias[c] - b.bias[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn execution_strategies_agree_bitwise() {
        let data: Vec<_> = (0..100)
            .map(|i| (featurize("t", &format!("w{} w{} z{}", i % 7, i % 5, i % 3), 256).unwrap(), StanceLabel::from_index(i % 3).unwrap()))
            .collect();
        let hp = Hyperparams { epochs: 3, ..Hyperparams::default() };
        let a = train(&data, hp, Execution::Sequential).unwrap();
        let b = train(&data, hp, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn model_file_round_trip() {
        let data: Vec<_> = (0..30)
            .map(|i| (featurize("t", &format!("w{} v{}", i % 4, i % 6), 1024).unwrap(), StanceLabel::from_index(i % 3).unwrap()))
            .collect();
        let m = train(&data, Hyperparams::default(), Execution::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert_eq!(StudentModel::load(&p).unwrap(), m);
    }

    #[test]
    fn export_rules() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        export_training_file(&[], &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "");
        let r = ExportRecord { id: "a#mt1".into(), target: "t".into(), text: "x".into(), label: StanceLabel::Favor };
        assert!(matches!(export_training_file(&[r.clone(), r], &p), Err(StudentError::DuplicateId(_))));
        let unl = StanceExample {
            id: "u".into(),
            text: "x".into(),
            target: "t".into(),
            gold: None,
            split: crate::corpus::Split::Train,
            corpus_name: "c".into(),
        };
        assert!(matches!(ExportRecord::try_from(&unl), Err(StudentError::UnlabeledRecord(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn probabilities_form_a_distribution(
                w in prop::collection::vec(-50.0f64..50.0, 24),
                b in prop::array::uniform3(-30.0f64..30.0),
                feats in prop::collection::vec((0u32..8, 0.1f64..20.0), 0..8),
            ) {
                let mut m = StudentModel::init(8, Hyperparams::default()).unwrap();
                m.weights = w;
                m.bias = b;
                let fv = FeatureVector::from_pairs(8, feats).unwrap();
                let p = predict(&m, &fv).unwrap().probs;
                prop_assert!(p.iter().all(|q| *q >= 0.0));
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }

            #[test]
            fn class_permutation_equivariance(
                w in prop::collection::vec(-5.0f64..5.0, 24),
                b in prop::array::uniform3(-3.0f64..3.0),
                feats in prop::collection::vec((0u32..8, 0.1f64..5.0), 1..8),
                perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
            ) {
                let mut m = StudentModel::init(8, Hyperparams::default()).unwrap();
                m.weights = w;
                m.bias = b;
                // Class c of the original moves to row perm[c].
                let mut pm = m.clone();
                for j in 0..8 {
                    for c in 0..3 {
                        pm.weights[3 * j + perm[c]] = m.weights[3 * j + c];
                    }
                }
                for c in 0..3 {
                    pm.bias[perm[c]] = m.bias[c];
                }
                let fv = FeatureVector::from_pairs(8, feats).unwrap();
                let p = predict(&m, &fv).unwrap();
                let q = predict(&pm, &fv).unwrap();
                let sorted = { let mut s = p.probs; s.sort_by(|a, b| a.partial_cmp(b).unwrap()); s };
                prop_assume!(sorted[2] - sorted[1] > 1e-9);
                prop_assert_eq!(q.label.index(), perm[p.label.index()]);
            }
        }
    }
}
