//! Evaluation: fold plans, metrics, calibration, drift diagnostics,
//! baselines, bootstrap intervals and latency.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{percentile_sorted, FeatureTable};
use crate::linalg::{cholesky, column_moments, forward_substitute, Matrix};

/// FPR operating points reported by [`detection_metrics`].
pub const FPR_POINTS: [f64; 4] = [0.005, 0.01, 0.0116, 0.05];
pub const DEFAULT_ECE_BINS: usize = 10;
pub const DEFAULT_MI_BINS: usize = 16;
pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 1000;
pub const LARGE_EFFECT: f64 = 0.8;
const POOLED_STD_FLOOR: f64 = 1e-12;
const RIDGE_FRACTION: f64 = 1e-3;

// ---------------------------------------------------------------- folds

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum FoldMode {
    Loco,
    Random,
    CrossRun,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_id: usize,
    pub mode: FoldMode,
    pub train_cycles: Vec<u32>,
    pub test_cycles: Vec<u32>,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

impl FoldPlan {
    /// Cycles the training fold must not contain.
    pub fn holdout_cycles(&self) -> Vec<u32> {
        match self.mode {
            FoldMode::Random => Vec::new(),
            _ => self.test_cycles.clone(),
        }
    }
}

fn cycles_of(table: &FeatureTable, rows: &[usize]) -> Vec<u32> {
    rows.iter().map(|&i| table.rows[i].cycle_index).collect::<BTreeSet<_>>().into_iter().collect()
}

/// One fold per cycle; fold `c` tests on cycle `c` and trains on the rest.
pub fn loco_folds(table: &FeatureTable) -> Result<Vec<FoldPlan>> {
    let cycles: BTreeSet<u32> = table.rows.iter().map(|r| r.cycle_index).collect();
    if cycles.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "leave-one-cycle-out needs at least 2 cycles, found {}",
            cycles.len()
        )));
    }
    Ok(cycles
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..table.len()).partition(|&i| table.rows[i].cycle_index == c);
            FoldPlan {
                fold_id: k,
                mode: FoldMode::Loco,
                train_cycles: cycles.iter().copied().filter(|&x| x != c).collect(),
                test_cycles: vec![c],
                train_rows: train,
                test_rows: test,
            }
        })
        .collect())
}

/// `k` folds of whole records assigned at random, ignoring cycles.
pub fn random_folds(table: &FeatureTable, k: usize, seed: u64) -> Result<Vec<FoldPlan>> {
    let groups = table.record_groups();
    if k < 2 || groups.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{k} random folds over {} records",
            groups.len()
        )));
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut fold_of = vec![0; groups.len()];
    for (pos, &g) in order.iter().enumerate() {
        fold_of[g] = pos % k;
    }
    Ok((0..k)
        .map(|f| {
            let mut test = Vec::new();
            let mut train = Vec::new();
            for (g, (_, rows)) in groups.iter().enumerate() {
                if fold_of[g] == f { &mut test } else { &mut train }.extend_from_slice(rows);
            }
            test.sort_unstable();
            train.sort_unstable();
            FoldPlan {
                fold_id: f,
                mode: FoldMode::Random,
                train_cycles: cycles_of(table, &train),
                test_cycles: cycles_of(table, &test),
                train_rows: train,
                test_rows: test,
            }
        })
        .collect())
}

/// Trains on one set of cycles (one run) and tests on another.
pub fn cross_run_fold(table: &FeatureTable, train_cycles: &[u32], test_cycles: &[u32]) -> Result<FoldPlan> {
    if train_cycles.iter().any(|c| test_cycles.contains(c)) {
        return Err(Error::Leakage("cross-run train and test cycles overlap".into()));
    }
    let train: Vec<usize> = (0..table.len()).filter(|&i| train_cycles.contains(&table.rows[i].cycle_index)).collect();
    let test: Vec<usize> = (0..table.len()).filter(|&i| test_cycles.contains(&table.rows[i].cycle_index)).collect();
    if train.is_empty() || test.is_empty() {
        return Err(Error::Empty("cross-run fold"));
    }
    Ok(FoldPlan {
        fold_id: 0,
        mode: FoldMode::CrossRun,
        train_cycles: cycles_of(table, &train),
        test_cycles: cycles_of(table, &test),
        train_rows: train,
        test_rows: test,
    })
}

// ------------------------------------------------------ classification

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub classes: Vec<String>,
    pub accuracy: f64,
    /// Mean F1 over classes present in `y_true`.
    pub macro_f1: f64,
    /// `None` for classes absent from `y_true`.
    pub per_class_f1: Vec<Option<f64>>,
    pub support: Vec<usize>,
    /// `confusion[t][p]`: rows are true classes.
    pub confusion: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
}

pub fn classification_metrics(y_true: &[usize], y_pred: &[usize], classes: &[String]) -> Result<ClassificationReport> {
    if y_true.len() != y_pred.len() {
        return Err(Error::DimensionMismatch { expected: y_true.len(), got: y_pred.len() });
    }
    if y_true.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let k = classes.len();
    if let Some(&bad) = y_true.iter().chain(y_pred).find(|&&c| c >= k) {
        return Err(Error::ClassMismatch(format!("class index {bad} outside {k} classes")));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        confusion[t][p] += 1;
    }
    let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
    let mut warnings = Vec::new();
    let per_class_f1: Vec<Option<f64>> = (0..k)
        .map(|c| {
            if support[c] == 0 {
                warnings.push(format!("class `{}` absent from y_true; F1 undefined", classes[c]));
                return None;
            }
            let tp = confusion[c][c] as f64;
            let predicted: usize = (0..k).map(|t| confusion[t][c]).sum();
            let denom = support[c] as f64 + predicted as f64;
            Some(if denom > 0.0 { 2.0 * tp / denom } else { 0.0 })
        })
        .collect();
    for w in &warnings {
        log::warn!("{w}");
    }
    let defined: Vec<f64> = per_class_f1.iter().flatten().copied().collect();
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    Ok(ClassificationReport {
        classes: classes.to_vec(),
        accuracy: correct as f64 / y_true.len() as f64,
        macro_f1: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class_f1,
        support,
        confusion,
        warnings,
    })
}

// ----------------------------------------------------------- detection

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: scores.len(), got: labels.len() });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("ROC analysis needs both positive and negative labels".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    Ok((pos, neg))
}

/// ROC-AUC as the Mann–Whitney statistic with midranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            if labels[o] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Operating points for "score ≥ threshold", one per distinct score, from
/// the strictest threshold down, starting at (0, 0).
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(RocPoint { threshold: s, fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 });
    }
    Ok(out)
}

pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>> {
    let (pos, _) = check_scores(scores, labels)?;
    let roc = roc_curve(scores, labels)?;
    let neg = labels.len() - pos;
    let mut out = vec![PrPoint { threshold: f64::INFINITY, recall: 0.0, precision: 1.0 }];
    for p in &roc[1..] {
        let tp = p.tpr * pos as f64;
        let fp = p.fpr * neg as f64;
        out.push(PrPoint { threshold: p.threshold, recall: p.tpr, precision: tp / (tp + fp) });
    }
    Ok(out)
}

/// Area under the precision–recall curve by the trapezoid rule.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pr = pr_curve(scores, labels)?;
    Ok(pr.windows(2).map(|w| (w[1].recall - w[0].recall) * 0.5 * (w[1].precision + w[0].precision)).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TprAtFpr {
    pub target_fpr: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub threshold: f64,
}

/// Highest TPR over thresholds whose FPR does not exceed `target_fpr`.
pub fn tpr_at_fpr(scores: &[f64], labels: &[bool], target_fpr: f64) -> Result<TprAtFpr> {
    let roc = roc_curve(scores, labels)?;
    let best = roc
        .iter()
        .filter(|p| p.fpr <= target_fpr + 1e-12)
        .max_by(|a, b| a.tpr.total_cmp(&b.tpr).then(b.fpr.total_cmp(&a.fpr)))
        .copied()
        .unwrap_or(roc[0]);
    Ok(TprAtFpr { target_fpr, tpr: best.tpr, fpr: best.fpr, threshold: best.threshold })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub tpr_at_fpr: Vec<TprAtFpr>,
    pub roc: Vec<RocPoint>,
    pub pr: Vec<PrPoint>,
}

pub fn detection_metrics(scores: &[f64], labels: &[bool]) -> Result<DetectionReport> {
    Ok(DetectionReport {
        roc_auc: roc_auc(scores, labels)?,
        pr_auc: pr_auc(scores, labels)?,
        tpr_at_fpr: FPR_POINTS.iter().map(|&f| tpr_at_fpr(scores, labels, f)).collect::<Result<_>>()?,
        roc: roc_curve(scores, labels)?,
        pr: pr_curve(scores, labels)?,
    })
}

// --------------------------------------------------------- calibration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub brier: f64,
    pub ece: f64,
    /// Non-empty bins only.
    pub bins: Vec<ReliabilityBin>,
}

/// Brier score and expected calibration error of positive-class
/// probabilities over `n_bins` equal-width bins.
pub fn calibration_metrics(prob: &[f64], labels: &[bool], n_bins: usize) -> Result<CalibrationReport> {
    if n_bins < 2 {
        return Err(Error::InvalidArgument("calibration needs at least 2 bins".into()));
    }
    if prob.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: prob.len(), got: labels.len() });
    }
    if prob.is_empty() {
        return Err(Error::Empty("probabilities"));
    }
    if prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidArgument("probabilities must lie in [0, 1]".into()));
    }
    let n = prob.len() as f64;
    let y = |l: bool| if l { 1.0 } else { 0.0 };
    let brier = prob.iter().zip(labels).map(|(p, &l)| (p - y(l)).powi(2)).sum::<f64>() / n;
    let mut sums = vec![(0usize, 0.0, 0.0); n_bins];
    for (p, &l) in prob.iter().zip(labels) {
        let b = ((p * n_bins as f64) as usize).min(n_bins - 1);
        sums[b].0 += 1;
        sums[b].1 += p;
        sums[b].2 += y(l);
    }
    let mut ece = 0.0;
    let mut bins = Vec::new();
    for (b, (count, sp, sy)) in sums.into_iter().enumerate() {
        if count == 0 {
            continue;
        }
        let (conf, acc) = (sp / count as f64, sy / count as f64);
        ece += count as f64 / n * (acc - conf).abs();
        bins.push(ReliabilityBin {
            lo: b as f64 / n_bins as f64,
            hi: (b + 1) as f64 / n_bins as f64,
            count,
            mean_confidence: conf,
            accuracy: acc,
        });
    }
    Ok(CalibrationReport { brier, ece, bins })
}

// ------------------------------------------------- mutual information

/// Equal-frequency bin index per value; equal values share a bin.
pub fn equal_frequency_bins(x: &[f64], bins: usize) -> Vec<usize> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0; n];
    let mut i = 0;
    while i < n {
        let b = (i * bins / n).min(bins - 1);
        let v = x[order[i]];
        while i < n && x[order[i]] == v {
            out[order[i]] = b;
            i += 1;
        }
    }
    out
}

/// Plug-in mutual information, in bits, between two discrete sequences.
pub fn discrete_mi(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut pa: BTreeMap<usize, f64> = BTreeMap::new();
    let mut pb: BTreeMap<usize, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0;
        *pa.entry(x).or_default() += 1.0;
        *pb.entry(y).or_default() += 1.0;
    }
    joint
        .iter()
        .map(|(&(x, y), &c)| c / n * (c * n / (pa[&x] * pb[&y])).log2())
        .sum::<f64>()
        .max(0.0)
}

/// Shannon entropy, in bits, of a discrete sequence.
pub fn entropy_bits(a: &[usize]) -> f64 {
    let n = a.len() as f64;
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    for &x in a {
        *counts.entry(x).or_default() += 1.0;
    }
    -counts.values().map(|c| c / n * (c / n).log2()).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiReport {
    pub bins: usize,
    pub mi_cycle: Vec<f64>,
    pub mi_skill: Vec<f64>,
    pub mean_mi_cycle: f64,
    pub mean_mi_skill: f64,
    /// `mean_mi_cycle / mean_mi_skill`.
    pub ratio: f64,
}

/// Per-feature MI with the cycle label and with the skill label.
pub fn mi_cycle_leakage(x: &Matrix, cycles: &[u32], skills: &[usize], bins: usize) -> Result<MiReport> {
    if cycles.len() != x.n_rows || skills.len() != x.n_rows {
        return Err(Error::DimensionMismatch { expected: x.n_rows, got: cycles.len().min(skills.len()) });
    }
    if cycles.iter().collect::<BTreeSet<_>>().len() < 2 || skills.iter().collect::<BTreeSet<_>>().len() < 2 {
        return Err(Error::InvalidArgument("MI diagnosis needs at least 2 cycles and 2 skills".into()));
    }
    let cyc: Vec<usize> = cycles.iter().map(|&c| c as usize).collect();
    let (mut mc, mut ms) = (Vec::new(), Vec::new());
    for j in 0..x.n_cols {
        let col = x.column(j);
        if col.iter().all(|v| *v == col[0]) {
            mc.push(0.0);
            ms.push(0.0);
            continue;
        }
        let b = equal_frequency_bins(&col, bins);
        mc.push(discrete_mi(&b, &cyc));
        ms.push(discrete_mi(&b, skills));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (a, b) = (mean(&mc), mean(&ms));
    Ok(MiReport {
        bins,
        ratio: if b > 0.0 { a / b } else { f64::INFINITY },
        mean_mi_cycle: a,
        mean_mi_skill: b,
        mi_cycle: mc,
        mi_skill: ms,
    })
}

// --------------------------------------------------------- effect size

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectSizeReport {
    pub d: Vec<f64>,
    pub n_large: usize,
    pub max_abs_d: f64,
}

/// Cohen's d per column with pooled sample standard deviation.
pub fn effect_size_drift(a: &Matrix, b: &Matrix) -> Result<EffectSizeReport> {
    if a.n_rows == 0 || b.n_rows == 0 {
        return Err(Error::Empty("effect-size run"));
    }
    if a.n_cols != b.n_cols {
        return Err(Error::DimensionMismatch { expected: a.n_cols, got: b.n_cols });
    }
    let (ma, sa) = column_moments(a);
    let (mb, sb) = column_moments(b);
    let (na, nb) = (a.n_rows as f64, b.n_rows as f64);
    let dof = (na + nb - 2.0).max(1.0);
    let d: Vec<f64> = (0..a.n_cols)
        .map(|j| {
            // column_moments gives population std; convert to sums of squares.
            let pooled = ((na * sa[j] * sa[j] + nb * sb[j] * sb[j]) / dof).sqrt().max(POOLED_STD_FLOOR);
            (ma[j] - mb[j]) / pooled
        })
        .collect();
    Ok(EffectSizeReport {
        n_large: d.iter().filter(|v| v.abs() >= LARGE_EFFECT).count(),
        max_abs_d: d.iter().fold(0.0, |m, v| m.max(v.abs())),
        d,
    })
}

// -------------------------------------------------------- separability

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSeparability {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    /// Mean over classes of the mean distance of per-cycle class means from
    /// the class mean.
    pub nuisance_scale: f64,
    pub pairs: Vec<PairSeparability>,
    /// Classes observed in a single cycle; excluded from the nuisance scale.
    pub single_cycle_classes: Vec<usize>,
}

fn mean_rows(x: &Matrix, rows: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; x.n_cols];
    for &i in rows {
        for (a, v) in m.iter_mut().zip(x.row(i)) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|a| *a /= rows.len() as f64);
    m
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Class-mean distances relative to cross-cycle dispersion of class means.
pub fn separability_ratio(x: &Matrix, skills: &[usize], cycles: &[u32]) -> Result<SeparabilityReport> {
    if skills.len() != x.n_rows || cycles.len() != x.n_rows {
        return Err(Error::DimensionMismatch { expected: x.n_rows, got: skills.len().min(cycles.len()) });
    }
    let mut by_class: BTreeMap<usize, BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
    for i in 0..x.n_rows {
        by_class.entry(skills[i]).or_default().entry(cycles[i]).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::SingleClass(skills.first().copied().unwrap_or(0)));
    }
    let mut means = BTreeMap::new();
    let mut dispersions = Vec::new();
    let mut single = Vec::new();
    for (&c, per_cycle) in &by_class {
        let all: Vec<usize> = per_cycle.values().flatten().copied().collect();
        let m = mean_rows(x, &all);
        if per_cycle.len() < 2 {
            single.push(c);
        } else {
            let d: f64 = per_cycle.values().map(|rows| euclid(&mean_rows(x, rows), &m)).sum::<f64>()
                / per_cycle.len() as f64;
            dispersions.push(d);
        }
        means.insert(c, m);
    }
    if dispersions.is_empty() {
        return Err(Error::InvalidArgument("no class is observed in more than one cycle".into()));
    }
    let nuisance = dispersions.iter().sum::<f64>() / dispersions.len() as f64;
    let keys: Vec<usize> = means.keys().copied().collect();
    let mut pairs = Vec::new();
    for (i, &a) in keys.iter().enumerate() {
        for &b in &keys[i + 1..] {
            let distance = euclid(&means[&a], &means[&b]);
            pairs.push(PairSeparability { a, b, distance, ratio: distance / nuisance.max(1e-12) });
        }
    }
    Ok(SeparabilityReport { nuisance_scale: nuisance, pairs, single_cycle_classes: single })
}

// ----------------------------------------------------------- Mahalanobis

/// Distance to the benign mean under a ridge-regularized covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MahalanobisModel {
    pub mean: Vec<f64>,
    pub ridge: f64,
    chol: Vec<f64>,
}

impl MahalanobisModel {
    pub fn fit(train: &Matrix) -> Result<Self> {
        if train.n_rows < 2 {
            return Err(Error::InvalidArgument("Mahalanobis baseline needs at least 2 training rows".into()));
        }
        let d = train.n_cols;
        let (mean, _) = column_moments(train);
        let mut cov = vec![0.0; d * d];
        for r in train.rows() {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in 0..=i {
                    cov[i * d + j] += di * (r[j] - mean[j]);
                }
            }
        }
        let n1 = (train.n_rows - 1) as f64;
        for i in 0..d {
            for j in 0..=i {
                cov[i * d + j] /= n1;
                cov[j * d + i] = cov[i * d + j];
            }
        }
        let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
        let ridge = (RIDGE_FRACTION * trace / d as f64).max(1e-12);
        for i in 0..d {
            cov[i * d + i] += ridge;
        }
        Ok(MahalanobisModel { chol: cholesky(&cov, d)?, mean, ridge })
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        let mut v: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        forward_substitute(&self.chol, d, &mut v);
        v.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyBaseline {
    pub scores: Vec<f64>,
    pub auc: Option<f64>,
}

/// Scores `test` rows against benign training data; AUC when labels given.
pub fn mahalanobis_anomaly(train_benign: &Matrix, test: &Matrix, labels: Option<&[bool]>) -> Result<AnomalyBaseline> {
    let m = MahalanobisModel::fit(train_benign)?;
    let scores: Vec<f64> = test.rows().map(|r| m.score(r)).collect();
    let auc = labels.map(|l| roc_auc(&scores, l)).transpose()?;
    Ok(AnomalyBaseline { scores, auc })
}

// ------------------------------------------------------------ bootstrap

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub n_resamples: usize,
    pub seed: u64,
}

/// Percentile interval of `metric` over resamples of `units` (records).
pub fn bootstrap_ci<T>(
    units: &[T],
    metric: impl Fn(&[&T]) -> f64,
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapCi> {
    if n_resamples < 100 {
        return Err(Error::InvalidArgument(format!("{n_resamples} resamples; at least 100 required")));
    }
    if units.len() < 2 {
        return Err(Error::InvalidArgument("bootstrap needs at least 2 records".into()));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level {level} outside (0, 1)")));
    }
    let all: Vec<&T> = units.iter().collect();
    let point = metric(&all);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats: Vec<f64> = (0..n_resamples)
        .map(|_| {
            let sample: Vec<&T> = (0..units.len()).map(|_| &units[rng.random_range(0..units.len())]).collect();
            metric(&sample)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok(BootstrapCi {
        point,
        lo: percentile_sorted(&stats, alpha),
        hi: percentile_sorted(&stats, 1.0 - alpha),
        level,
        n_resamples,
        seed,
    })
}

// -------------------------------------------------------------- latency

pub const BATCH_REPEATS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub n_records: usize,
    pub median_ms: f64,
    pub p99_ms: f64,
    pub batched_amortized_ms: f64,
    pub hardware: String,
}

/// CPU model, logical core count and target triple.
pub fn hardware_descriptor() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{model}; {cores} logical cores; {}-{}", std::env::consts::ARCH, std::env::consts::OS)
}

/// Times `single(i)` for every record and `batch()` over all of them. The
/// batch pass runs [`BATCH_REPEATS`] times and its median is reported, so
/// both figures are medians and a single interrupt cannot decide the order.
pub fn latency_profile(n_records: usize, mut single: impl FnMut(usize), mut batch: impl FnMut()) -> Result<LatencyReport> {
    if n_records < 100 {
        return Err(Error::InvalidArgument(format!("{n_records} timed records; at least 100 required")));
    }
    let mut ms: Vec<f64> = (0..n_records)
        .map(|i| {
            let t = Instant::now();
            single(i);
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    ms.sort_by(f64::total_cmp);
    let mut runs: Vec<f64> = (0..BATCH_REPEATS)
        .map(|_| {
            let t = Instant::now();
            batch();
            t.elapsed().as_secs_f64() * 1e3 / n_records as f64
        })
        .collect();
    runs.sort_by(f64::total_cmp);
    let batched = percentile_sorted(&runs, 0.5);
    Ok(LatencyReport {
        n_records,
        median_ms: percentile_sorted(&ms, 0.5),
        p99_ms: percentile_sorted(&ms, 0.99),
        batched_amortized_ms: batched,
        hardware: hardware_descriptor(),
    })
}

// --------------------------------------------------------------- report

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_id: usize,
    pub test_cycles: Vec<u32>,
    pub n_test_records: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleAccuracy {
    pub cycle_index: u32,
    pub accuracy: f64,
    pub n: usize,
}

pub fn per_cycle_accuracy(cycles: &[u32], y_true: &[usize], y_pred: &[usize]) -> Vec<CycleAccuracy> {
    let mut acc: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for ((c, t), p) in cycles.iter().zip(y_true).zip(y_pred) {
        let e = acc.entry(*c).or_default();
        e.0 += (t == p) as usize;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(c, (ok, n))| CycleAccuracy { cycle_index: c, accuracy: ok as f64 / n as f64, n })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub mode: FoldMode,
    pub classification: Option<ClassificationReport>,
    pub folds: Vec<FoldResult>,
    pub per_cycle_accuracy: Vec<CycleAccuracy>,
    pub macro_f1_ci: Option<BootstrapCi>,
    pub detection: Option<DetectionReport>,
    pub calibration: Option<CalibrationReport>,
    pub baseline_auc: Option<f64>,
    pub mi: Option<MiReport>,
    pub latency: Option<LatencyReport>,
}

impl MetricsReport {
    pub fn new(config_hash: impl Into<String>, mode: FoldMode) -> Self {
        MetricsReport {
            config_hash: config_hash.into(),
            mode,
            classification: None,
            folds: Vec::new(),
            per_cycle_accuracy: Vec::new(),
            macro_f1_ci: None,
            detection: None,
            calibration: None,
            baseline_auc: None,
            mi: None,
            latency: None,
        }
    }
}

/// CSV writer whose first line is `# config_hash=<hash>`.
fn csv_file(dir: &Path, name: &str, hash: &str, header: &str) -> Result<std::io::BufWriter<std::fs::File>> {
    let path = dir.join(name);
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = std::io::BufWriter::new(f);
    writeln!(w, "# config_hash={hash}\n{header}").map_err(|e| Error::io(&path, e))?;
    Ok(w)
}

/// Writes `metrics.json` plus plot-data CSVs into `dir`. Returns the file
/// names written.
pub fn write_report(dir: &Path, report: &MetricsReport) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = vec!["metrics.json".to_string()];
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(dir.join("metrics.json"), json + "\n").map_err(|e| Error::io(dir.join("metrics.json"), e))?;
    let h = &report.config_hash;
    let io = |e: std::io::Error| Error::io(dir, e);
    if let Some(c) = &report.classification {
        let mut w = csv_file(dir, "confusion.csv", h, &format!("true\\pred,{}", c.classes.join(",")))?;
        for (i, row) in c.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{}", c.classes[i], cells.join(",")).map_err(io)?;
        }
        written.push("confusion.csv".into());
    }
    if !report.folds.is_empty() {
        let mut w = csv_file(dir, "folds.csv", h, "fold_id,test_cycles,n_test_records,accuracy,macro_f1")?;
        for f in &report.folds {
            let cycles: Vec<String> = f.test_cycles.iter().map(|c| c.to_string()).collect();
            writeln!(w, "{},{},{},{},{}", f.fold_id, cycles.join(";"), f.n_test_records, f.accuracy, f.macro_f1)
                .map_err(io)?;
        }
        written.push("folds.csv".into());
    }
    if !report.per_cycle_accuracy.is_empty() {
        let mut w = csv_file(dir, "per_cycle_accuracy.csv", h, "cycle_index,accuracy,n")?;
        for c in &report.per_cycle_accuracy {
            writeln!(w, "{},{},{}", c.cycle_index, c.accuracy, c.n).map_err(io)?;
        }
        written.push("per_cycle_accuracy.csv".into());
    }
    if let Some(d) = &report.detection {
        let mut w = csv_file(dir, "roc.csv", h, "threshold,fpr,tpr")?;
        for p in &d.roc {
            writeln!(w, "{},{},{}", p.threshold, p.fpr, p.tpr).map_err(io)?;
        }
        let mut w = csv_file(dir, "pr.csv", h, "threshold,recall,precision")?;
        for p in &d.pr {
            writeln!(w, "{},{},{}", p.threshold, p.recall, p.precision).map_err(io)?;
        }
        written.extend(["roc.csv".into(), "pr.csv".into()]);
    }
    if let Some(c) = &report.calibration {
        let mut w = csv_file(dir, "reliability.csv", h, "lo,hi,count,mean_confidence,accuracy")?;
        for b in &c.bins {
            writeln!(w, "{},{},{},{},{}", b.lo, b.hi, b.count, b.mean_confidence, b.accuracy).map_err(io)?;
        }
        written.push("reliability.csv".into());
    }
    if let Some(m) = &report.mi {
        let mut w = csv_file(dir, "mi.csv", h, "feature,mi_cycle_bits,mi_skill_bits")?;
        for (j, (a, b)) in m.mi_cycle.iter().zip(&m.mi_skill).enumerate() {
            writeln!(w, "{j},{a},{b}").map_err(io)?;
        }
        written.push("mi.csv".into());
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let classes = vec!["a".to_string(), "b".to_string()];
        let r = classification_metrics(&[0, 1, 1, 0], &[0, 1, 1, 0], &classes).unwrap();
        assert_eq!((r.macro_f1, r.accuracy), (1.0, 1.0));
        assert_eq!(roc_auc(&[0.1, 0.9, 0.8, 0.2], &[false, true, true, false]).unwrap(), 1.0);
    }

    #[test]
    fn absent_class_is_excluded_with_warning() {
        let classes = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let r = classification_metrics(&[0, 0, 1], &[0, 2, 1], &classes).unwrap();
        assert_eq!(r.per_class_f1[2], None);
        assert_eq!(r.warnings.len(), 1);
        assert!((r.macro_f1 - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
        assert_eq!(r.confusion[0], vec![1, 0, 1]);
    }

    #[test]
    fn tied_scores_get_half_credit() {
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
    }

    #[test]
    fn tpr_at_fpr_respects_the_budget() {
        let s = [0.9, 0.8, 0.7, 0.6, 0.5];
        let l = [true, false, true, true, false];
        let p = tpr_at_fpr(&s, &l, 0.0).unwrap();
        assert!((p.tpr - 1.0 / 3.0).abs() < 1e-12);
        let p = tpr_at_fpr(&s, &l, 0.5).unwrap();
        assert_eq!(p.tpr, 1.0);
    }

    #[test]
    fn calibration_closed_forms() {
        let c = calibration_metrics(&[1.0, 0.0, 1.0], &[true, false, true], 10).unwrap();
        assert_eq!((c.brier, c.ece), (0.0, 0.0));
        let c = calibration_metrics(&[0.5; 4], &[true, false, true, false], 10).unwrap();
        assert_eq!(c.brier, 0.25);
        assert!(c.ece.abs() < 1e-12);
    }

    #[test]
    fn constant_feature_has_no_information() {
        let x = Matrix::from_rows(&[[1.0], [1.0], [1.0], [1.0]]).unwrap();
        let r = mi_cycle_leakage(&x, &[0, 0, 1, 1], &[0, 1, 0, 1], 16).unwrap();
        assert_eq!((r.mi_cycle[0], r.mi_skill[0]), (0.0, 0.0));
    }

    #[test]
    fn identical_runs_have_zero_effect() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 2.0]]).unwrap();
        let r = effect_size_drift(&a, &a).unwrap();
        assert_eq!((r.n_large, r.max_abs_d), (0, 0.0));
    }

    #[test]
    fn mahalanobis_of_mean_is_zero() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.5], [0.0, -0.5], [0.0, 0.0]]).unwrap();
        let m = MahalanobisModel::fit(&x).unwrap();
        assert!(m.score(&m.mean.clone()).abs() < 1e-12);
        assert!(MahalanobisModel::fit(&Matrix::from_rows(&[[1.0]]).unwrap()).is_err());
    }

    #[test]
    fn constant_metric_has_zero_width_ci() {
        let ci = bootstrap_ci(&[1.0, 2.0, 3.0], |_| 0.7, 200, 0.95, 9).unwrap();
        assert_eq!((ci.lo, ci.hi, ci.seed, ci.n_resamples), (0.7, 0.7, 9, 200));
        assert!(bootstrap_ci(&[1.0], |_| 0.0, 200, 0.95, 0).is_err());
    }

    #[test]
    fn latency_orders_statistics() {
        let r = latency_profile(100, |_| { std::hint::black_box((0..100).sum::<u64>()); }, || {}).unwrap();
        assert!(r.p99_ms >= r.median_ms);
        assert!(!r.hardware.is_empty());
        assert!(latency_profile(10, |_| {}, || {}).is_err());
    }
}
