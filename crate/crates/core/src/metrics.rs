//! Confusion matrices, macro-averaged scores and prompt-sensitivity spreads.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::label::{Decoded, StanceLabel};
use crate::prompt::{Axis, PromptAxes};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("class set is empty")]
    EmptyClassSet,
    #[error("no runs to summarize")]
    NoRuns,
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
}

/// Counts indexed `[gold][predicted]` in Favor, Against, None order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
}

impl ConfusionMatrix {
    pub fn record(&mut self, gold: StanceLabel, pred: StanceLabel) {
        self.counts[gold.index()][pred.index()] += 1;
    }

    pub fn get(&self, gold: StanceLabel, pred: StanceLabel) -> u64 {
        self.counts[gold.index()][pred.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Column sum: how often `label` was predicted.
    pub fn predicted(&self, label: StanceLabel) -> u64 {
        self.counts.iter().map(|row| row[label.index()]).sum()
    }

    /// Row sum: how often `label` is the gold label.
    pub fn actual(&self, label: StanceLabel) -> u64 {
        self.counts[label.index()].iter().sum()
    }

    /// Drops every pair whose gold label is `label`.
    pub fn without_gold(&self, label: StanceLabel) -> ConfusionMatrix {
        let mut m = *self;
        m.counts[label.index()] = [0; 3];
        m
    }
}

impl Add for ConfusionMatrix {
    type Output = ConfusionMatrix;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, rhs: Self) {
        for g in 0..3 {
            for p in 0..3 {
                self.counts[g][p] += rhs.counts[g][p];
            }
        }
    }
}

pub fn confusion(pairs: &[(StanceLabel, StanceLabel)]) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::default();
    for &(g, p) in pairs {
        m.record(g, p);
    }
    m
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 of one class; any zero denominator scores 0.
pub fn class_scores(m: &ConfusionMatrix, label: StanceLabel) -> Prf {
    let tp = m.get(label, label);
    let precision = ratio(tp, m.predicted(label));
    let recall = ratio(tp, m.actual(label));
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf { precision, recall, f1 }
}

/// Unweighted means of per-class P, R and F1 over `classes`.
pub fn macro_scores(m: &ConfusionMatrix, classes: &[StanceLabel]) -> Result<Prf, MetricsError> {
    let mut uniq: Vec<StanceLabel> = classes.to_vec();
    uniq.sort();
    uniq.dedup();
    if uniq.is_empty() {
        return Err(MetricsError::EmptyClassSet);
    }
    let n = uniq.len() as f64;
    let mut acc = Prf::default();
    for c in uniq {
        let s = class_scores(m, c);
        acc.precision += s.precision;
        acc.recall += s.recall;
        acc.f1 += s.f1;
    }
    Ok(Prf { precision: acc.precision / n, recall: acc.recall / n, f1: acc.f1 / n })
}

pub const THREE_CLASS: [StanceLabel; 3] = StanceLabel::ALL;
pub const TWO_CLASS: [StanceLabel; 2] = [StanceLabel::Favor, StanceLabel::Against];

/// How the two-class (Favor/Against) scores treat gold-None examples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoClassScheme {
    /// Keep every pair; only the averaging set shrinks to Favor and Against.
    #[default]
    KeepAll,
    /// Remove gold-None examples before scoring.
    DropGoldNone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub matrix: ConfusionMatrix,
    pub per_class: BTreeMap<StanceLabel, Prf>,
    pub macro3: Prf,
    pub macro2: Prf,
    pub two_class_scheme: TwoClassScheme,
    pub n_scored: usize,
    pub n_undecodable: usize,
}

impl EvalReport {
    pub fn from_matrix(matrix: ConfusionMatrix, n_undecodable: usize, scheme: TwoClassScheme) -> Self {
        let per_class = StanceLabel::ALL.iter().map(|&l| (l, class_scores(&matrix, l))).collect();
        let macro3 = macro_scores(&matrix, &THREE_CLASS).expect("non-empty");
        let two = match scheme {
            TwoClassScheme::KeepAll => matrix,
            TwoClassScheme::DropGoldNone => matrix.without_gold(StanceLabel::None),
        };
        let macro2 = macro_scores(&two, &TWO_CLASS).expect("non-empty");
        EvalReport {
            matrix,
            per_class,
            macro3,
            macro2,
            two_class_scheme: scheme,
            n_scored: matrix.total() as usize,
            n_undecodable,
        }
    }

    /// Scores (gold, prediction) pairs; undecodable predictions count as None.
    pub fn evaluate(pairs: &[(StanceLabel, Decoded)], scheme: TwoClassScheme) -> Self {
        let mut m = ConfusionMatrix::default();
        let mut undecodable = 0;
        for &(g, p) in pairs {
            let p = match p {
                Decoded::Label(l) => l,
                Decoded::Undecodable => {
                    undecodable += 1;
                    StanceLabel::None
                }
            };
            m.record(g, p);
        }
        Self::from_matrix(m, undecodable, scheme)
    }

    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10}{:>10}{:>10}{:>10}", "gold\\pred", "Favor", "Against", "None");
        for g in StanceLabel::ALL {
            let _ = writeln!(
                s,
                "{:<10}{:>10}{:>10}{:>10}",
                g.word(),
                self.matrix.get(g, StanceLabel::Favor),
                self.matrix.get(g, StanceLabel::Against),
                self.matrix.get(g, StanceLabel::None)
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<10}{:>10}{:>10}{:>10}", "class", "P", "R", "F1");
        for (l, p) in &self.per_class {
            let _ = writeln!(s, "{:<10}{:>10.4}{:>10.4}{:>10.4}", l.word(), p.precision, p.recall, p.f1);
        }
        let _ = writeln!(s, "{:<10}{:>10.4}{:>10.4}{:>10.4}", "macro-3", self.macro3.precision, self.macro3.recall, self.macro3.f1);
        let _ = writeln!(s, "{:<10}{:>10.4}{:>10.4}{:>10.4}", "macro-2", self.macro2.precision, self.macro2.recall, self.macro2.f1);
        let _ = writeln!(s, "scored {}  undecodable {}", self.n_scored, self.n_undecodable);
        s
    }
}

/// Renders a test-set × training-source grid of (F1, P, R) triples.
pub fn render_grid<F>(title: &str, sources: &[String], test_sets: &[String], cell: F) -> String
where
    F: Fn(&str, &str) -> Option<Prf>,
{
    let name_w = test_sets.iter().map(|t| t.len()).max().unwrap_or(8).max(8) + 2;
    let group_w = 30;
    let mut s = String::new();
    let _ = writeln!(s, "{title}");
    let _ = write!(s, "{:<name_w$}", "test set");
    for src in sources {
        let _ = write!(s, "| {:^w$}", src, w = group_w - 2);
    }
    let _ = writeln!(s);
    let _ = write!(s, "{:<name_w$}", "");
    for _ in sources {
        let _ = write!(s, "| {:>8}{:>10}{:>10}", "F1", "P", "R");
    }
    let _ = writeln!(s);
    for t in test_sets {
        let _ = write!(s, "{t:<name_w$}");
        for src in sources {
            match cell(src, t) {
                Some(p) => {
                    let _ = write!(s, "| {:>8.4}{:>10.4}{:>10.4}", p.f1, p.precision, p.recall);
                }
                None => {
                    let _ = write!(s, "| {:>8}{:>10}{:>10}", "-", "-", "-");
                }
            }
        }
        let _ = writeln!(s);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadStats {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub range: f64,
}

impl SpreadStats {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(SpreadStats { n, mean, std: var.sqrt(), min, max, range: max - min })
    }
}

/// Scores across the values of one axis with every other axis fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisGroup {
    pub axis: Axis,
    /// Values of the other axes, `name=value` joined by `, `.
    pub context: String,
    pub values: Vec<(String, f64)>,
    pub stats: SpreadStats,
}

/// Per-axis roll-up over its groups: mean of group means, mean of group
/// standard deviations, overall min and max, and mean of group ranges.
/// With a single group these are exactly that group's statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisSummary {
    pub axis: Axis,
    pub n_groups: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub axes: Vec<AxisSummary>,
    pub groups: Vec<AxisGroup>,
}

fn context_key(axes: &PromptAxes, skip: Axis) -> String {
    Axis::ALL
        .iter()
        .filter(|&&a| a != skip)
        .map(|&a| format!("{}={}", a.name(), axes.axis_value(a)))
        .collect::<Vec<_>>()
        .join(", ")
}

/// One-axis-at-a-time spread of scores. Repeated runs of the same cell are
/// averaged first; axes that never vary inside a fixed context are omitted.
pub fn sensitivity_report(runs: &[(PromptAxes, f64)]) -> Result<SensitivityReport, MetricsError> {
    if runs.is_empty() {
        return Err(MetricsError::NoRuns);
    }
    let mut cells: BTreeMap<&PromptAxes, (f64, usize)> = BTreeMap::new();
    for (axes, score) in runs {
        if !(0.0..=1.0).contains(score) {
            return Err(MetricsError::ScoreOutOfRange(*score));
        }
        let e = cells.entry(axes).or_insert((0.0, 0));
        e.0 += score;
        e.1 += 1;
    }
    let cells: Vec<(&PromptAxes, f64)> = cells.into_iter().map(|(a, (s, n))| (a, s / n as f64)).collect();

    let mut summaries = Vec::new();
    let mut all_groups = Vec::new();
    for axis in Axis::ALL {
        // BTreeMap over cells keeps values in axis order within each context.
        let mut by_context: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        for (axes, score) in &cells {
            by_context
                .entry(context_key(axes, axis))
                .or_default()
                .push((axes.axis_value(axis), *score));
        }
        let groups: Vec<AxisGroup> = by_context
            .into_iter()
            .filter(|(_, values)| values.len() >= 2)
            .map(|(context, values)| {
                let scores: Vec<f64> = values.iter().map(|(_, s)| *s).collect();
                let stats = SpreadStats::of(&scores).expect("non-empty group");
                AxisGroup { axis, context, values, stats }
            })
            .collect();
        if groups.is_empty() {
            continue;
        }
        let k = groups.len() as f64;
        summaries.push(AxisSummary {
            axis,
            n_groups: groups.len(),
            mean: groups.iter().map(|g| g.stats.mean).sum::<f64>() / k,
            std: groups.iter().map(|g| g.stats.std).sum::<f64>() / k,
            min: groups.iter().map(|g| g.stats.min).fold(f64::INFINITY, f64::min),
            max: groups.iter().map(|g| g.stats.max).fold(f64::NEG_INFINITY, f64::max),
            range: groups.iter().map(|g| g.stats.range).sum::<f64>() / k,
        });
        all_groups.extend(groups);
    }
    Ok(SensitivityReport { axes: summaries, groups: all_groups })
}

impl SensitivityReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<13}{:>8}{:>9}{:>9}{:>9}{:>9}{:>9}", "axis", "groups", "mean", "std", "min", "max", "range");
        for a in &self.axes {
            let _ = writeln!(
                s,
                "{:<13}{:>8}{:>9.4}{:>9.4}{:>9.4}{:>9.4}{:>9.4}",
                a.axis.name(),
                a.n_groups,
                a.mean,
                a.std,
                a.min,
                a.max,
                a.range
            );
        }
        s
    }

    /// One row per (axis, context, value) for external plotting.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["axis", "context", "value", "score"]).expect("in-memory write");
        for g in &self.groups {
            for (value, score) in &g.values {
                w.write_record([g.axis.name(), &g.context, value, &format!("{score:.6}")])
                    .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{InstructionVariant, LabelOrder};
    use StanceLabel::{Against as A, Favor as F, None as N};

    #[test]
    fn empty_and_single() {
        assert_eq!(confusion(&[]).total(), 0);
        let m = confusion(&[(F, F)]);
        assert_eq!(m.get(F, F), 1);
        assert_eq!(m.total(), 1);
    }

    #[test]
    fn hand_tally() {
        // (F,F) (F,A) (A,A) (A,N) (N,N) (N,F), counted by hand:
        // row F: 1 1 0 / row A: 0 1 1 / row N: 1 0 1
        let m = confusion(&[(F, F), (F, A), (A, A), (A, N), (N, N), (N, F)]);
        assert_eq!(m.counts, [[1, 1, 0], [0, 1, 1], [1, 0, 1]]);
    }

    #[test]
    fn perfect_and_zero() {
        let m = confusion(&[(F, F), (A, A), (N, N)]);
        let s = macro_scores(&m, &THREE_CLASS).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));

        let m = confusion(&[(F, A), (F, A)]);
        assert_eq!(macro_scores(&m, &TWO_CLASS).unwrap().f1, 0.0);
        assert_eq!(macro_scores(&m, &[]), Err(MetricsError::EmptyClassSet));
    }

    #[test]
    fn known_matrix() {
        // rows gold F/A/N: [[2,1,0],[0,3,1],[1,0,2]]
        let m = ConfusionMatrix { counts: [[2, 1, 0], [0, 3, 1], [1, 0, 2]] };
        // Favor: P=2/3 R=2/3; Against: P=3/4 R=3/4; None: P=2/3 R=2/3.
        let s = macro_scores(&m, &THREE_CLASS).unwrap();
        let expect = (2.0 / 3.0 + 3.0 / 4.0 + 2.0 / 3.0) / 3.0;
        assert!((s.precision - expect).abs() < 1e-12);
        assert!((s.recall - expect).abs() < 1e-12);
        assert!((s.f1 - expect).abs() < 1e-12);
    }

    #[test]
    fn two_class_keeps_none_predictions() {
        // Gold Favor predicted None still lowers Favor recall.
        let pairs = [(F, Decoded::Label(F)), (F, Decoded::Undecodable), (A, Decoded::Label(A)), (N, Decoded::Label(F))];
        let r = EvalReport::evaluate(&pairs, TwoClassScheme::KeepAll);
        assert_eq!(r.n_undecodable, 1);
        assert_eq!(r.per_class[&F].recall, 0.5);
        assert_eq!(r.per_class[&F].precision, 0.5);
        let dropped = EvalReport::evaluate(&pairs, TwoClassScheme::DropGoldNone);
        assert!(dropped.macro2.precision > r.macro2.precision);
        assert_eq!(dropped.macro3, r.macro3);
    }

    fn axes(i: InstructionVariant, o: LabelOrder) -> PromptAxes {
        PromptAxes { instruction: i, label_order: o, ..PromptAxes::default() }
    }

    #[test]
    fn sensitivity_basic() {
        assert_eq!(sensitivity_report(&[]), Err(MetricsError::NoRuns));
        let flat: Vec<_> = InstructionVariant::ALL.iter().map(|&i| (axes(i, LabelOrder::A), 0.6)).collect();
        let r = sensitivity_report(&flat).unwrap();
        assert!(!r.axes.is_empty());
        for a in &r.axes {
            assert_eq!(a.std, 0.0);
            assert_eq!(a.range, 0.0);
        }

        let two = [(axes(InstructionVariant::A, LabelOrder::A), 0.5), (axes(InstructionVariant::B, LabelOrder::A), 0.7)];
        let r = sensitivity_report(&two).unwrap();
        assert_eq!(r.axes.len(), 1);
        assert!((r.axes[0].range - 0.2).abs() < 1e-12);
        assert!((r.axes[0].mean - 0.6).abs() < 1e-12);
        assert!(sensitivity_report(&[(PromptAxes::default(), 1.5)]).is_err());
    }

    #[test]
    fn sensitivity_three_by_three() {
        // score = row effect + column effect; instruction adds 0/0.1/0.2,
        // label order adds 0/0.03/0.06 on a 0.4 base.
        let inst = InstructionVariant::ALL;
        let orders = [LabelOrder::A, LabelOrder::B, LabelOrder::C];
        let mut runs = Vec::new();
        for (i, &iv) in inst.iter().enumerate() {
            for (j, &o) in orders.iter().enumerate() {
                runs.push((axes(iv, o), 0.4 + 0.1 * i as f64 + 0.03 * j as f64));
            }
        }
        let r = sensitivity_report(&runs).unwrap();
        let get = |a: Axis| r.axes.iter().find(|s| s.axis == a).unwrap().clone();
        let ins = get(Axis::Instruction);
        let lab = get(Axis::LabelOrder);
        assert_eq!(ins.n_groups, 3);
        assert_eq!(lab.n_groups, 3);
        // Within each fixed label order the instruction scores are
        // {b, b+0.1, b+0.2}: population std = 0.1*sqrt(2/3), range 0.2.
        assert!((ins.std - 0.1 * (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((ins.range - 0.2).abs() < 1e-12);
        assert!((lab.std - 0.03 * (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((lab.range - 0.06).abs() < 1e-12);
        // Grand mean 0.4 + 0.1 + 0.03.
        assert!((ins.mean - 0.53).abs() < 1e-12);
        assert!((ins.min - 0.4).abs() < 1e-12);
        assert!((ins.max - 0.66).abs() < 1e-12);
        assert!(r.to_csv().lines().count() == 1 + 18);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pairs() -> impl Strategy<Value = Vec<(StanceLabel, StanceLabel)>> {
            prop::collection::vec((0usize..3, 0usize..3), 0..80).prop_map(|v| {
                v.into_iter()
                    .map(|(g, p)| (StanceLabel::from_index(g).unwrap(), StanceLabel::from_index(p).unwrap()))
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn merge_is_entrywise_sum(a in pairs(), b in pairs()) {
                let mut ab = a.clone();
                ab.extend(b.iter().copied());
                prop_assert_eq!(confusion(&ab), confusion(&a) + confusion(&b));
            }

            #[test]
            fn macro_f1_between_class_extremes(p in pairs()) {
                let m = confusion(&p);
                let f1s: Vec<f64> = StanceLabel::ALL.iter().map(|&l| class_scores(&m, l).f1).collect();
                let lo = f1s.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = f1s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mf = macro_scores(&m, &THREE_CLASS).unwrap().f1;
                prop_assert!(lo - 1e-12 <= mf && mf <= hi + 1e-12);
                for s in [mf, macro_scores(&m, &TWO_CLASS).unwrap().f1] {
                    prop_assert!((0.0..=1.0).contains(&s));
                }
            }

            #[test]
            fn class_symmetry(p in pairs(), perm in Just(vec![0usize, 1, 2]).prop_shuffle()) {
                let map = |l: StanceLabel| StanceLabel::from_index(perm[l.index()]).unwrap();
                let permuted: Vec<_> = p.iter().map(|&(g, q)| (map(g), map(q))).collect();
                let m = confusion(&p);
                let mp = confusion(&permuted);
                for l in StanceLabel::ALL {
                    prop_assert_eq!(class_scores(&m, l), class_scores(&mp, map(l)));
                }
                let a = macro_scores(&m, &THREE_CLASS).unwrap();
                let b = macro_scores(&mp, &THREE_CLASS).unwrap();
                prop_assert!((a.f1 - b.f1).abs() < 1e-12);
            }
        }
    }
}
