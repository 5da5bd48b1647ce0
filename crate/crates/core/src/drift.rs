//! Leakage-controlled preprocessing.
//!
//! Fitted on a training fold only, applied in a fixed order:
//!
//! 1. cycle-local normalization `x̃ = (x − μ_c)/(σ_c + ε)`,
//! 2. removal of a degree-`d` polynomial in temperature, fit by least squares,
//! 3. ANOVA F-statistic top-`k` selection,
//! 4. standard scaling of the selected columns.
//!
//! Cycles absent from the training fold are normalized with statistics of
//! their own windows in the batch being transformed; no labels are used.

use std::collections::{BTreeMap, BTreeSet};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureTable;
use crate::linalg::{cholesky, cholesky_solve, column_moments, Matrix};

pub const MODEL_VERSION: u32 = 1;
pub const DEFAULT_EPSILON: f64 = 1e-6;
/// Floor on the within-class variance of the F statistic.
pub const WITHIN_VARIANCE_FLOOR: f64 = 1e-12;
const STD_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    pub degree: usize,
    pub k_sel: usize,
    pub epsilon: f64,
    /// Disable to study the effect of cycle drift without normalization.
    #[serde(default = "yes")]
    pub normalize_cycles: bool,
}

fn yes() -> bool {
    true
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig { degree: 1, k_sel: 65, epsilon: DEFAULT_EPSILON, normalize_cycles: true }
    }
}

impl DriftConfig {
    /// Selection size for larger skill sets.
    pub fn large() -> Self {
        DriftConfig { k_sel: 80, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_sel == 0 {
            return Err(Error::InvalidArgument("k_sel must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub n_windows: usize,
}

/// Per-cycle, per-feature mean and population std.
pub fn fit_cycle_stats(x: &Matrix, cycles: &[u32]) -> Result<BTreeMap<u32, CycleStats>> {
    if cycles.len() != x.n_rows {
        return Err(Error::DimensionMismatch { expected: x.n_rows, got: cycles.len() });
    }
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, c) in cycles.iter().enumerate() {
        groups.entry(*c).or_default().push(i);
    }
    let mut out = BTreeMap::new();
    for (c, idx) in groups {
        if idx.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "cycle {c} has {} window(s); at least 2 are needed",
                idx.len()
            )));
        }
        let (mean, std) = column_moments(&x.select_rows(&idx));
        out.insert(c, CycleStats { mean, std, n_windows: idx.len() });
    }
    Ok(out)
}

/// Applies cycle-local normalization; every row's cycle must have stats.
pub fn apply_cycle_normalize(
    x: &Matrix,
    cycles: &[u32],
    stats: &BTreeMap<u32, CycleStats>,
    epsilon: f64,
) -> Result<Matrix> {
    if cycles.len() != x.n_rows {
        return Err(Error::DimensionMismatch { expected: x.n_rows, got: cycles.len() });
    }
    let mut out = x.clone();
    for (i, c) in cycles.iter().enumerate() {
        let s = stats.get(c).ok_or(Error::UnknownCycle(*c))?;
        for ((v, m), sd) in out.row_mut(i).iter_mut().zip(&s.mean).zip(&s.std) {
            *v = (*v - m) / (sd + epsilon);
        }
    }
    Ok(out)
}

/// Polynomial temperature trend per feature, in standardized temperature
/// `u = (T − t0)/ts`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detrend {
    pub requested_degree: usize,
    pub degree: usize,
    pub t0: f64,
    pub ts: f64,
    /// `coef[k][ℓ]` multiplies `u^ℓ` for feature `k`.
    pub coef: Vec<Vec<f64>>,
}

impl Detrend {
    fn basis(&self, t: f64) -> Vec<f64> {
        let mut b = vec![0.0; self.degree + 1];
        self.basis_into(t, &mut b);
        b
    }

    fn basis_into(&self, t: f64, out: &mut [f64]) {
        let u = (t - self.t0) / self.ts;
        for (l, b) in out.iter_mut().enumerate() {
            *b = u.powi(l as i32);
        }
    }

    pub fn apply(&self, x: &Matrix, temps: &[f64]) -> Result<Matrix> {
        if temps.len() != x.n_rows {
            return Err(Error::DimensionMismatch { expected: x.n_rows, got: temps.len() });
        }
        if x.n_cols != self.coef.len() {
            return Err(Error::DimensionMismatch { expected: self.coef.len(), got: x.n_cols });
        }
        let mut out = x.clone();
        for (i, t) in temps.iter().enumerate() {
            let b = self.basis(*t);
            for (v, c) in out.row_mut(i).iter_mut().zip(&self.coef) {
                *v -= c.iter().zip(&b).map(|(a, p)| a * p).sum::<f64>();
            }
        }
        Ok(out)
    }
}

/// Least-squares fit of a degree-`degree` polynomial in temperature to
/// every column. With fewer distinct temperatures than needed the degree is
/// reduced and a warning logged.
pub fn fit_temperature_detrend(x: &Matrix, temps: &[f64], degree: usize) -> Result<(Detrend, Option<String>)> {
    if temps.len() != x.n_rows {
        return Err(Error::DimensionMismatch { expected: x.n_rows, got: temps.len() });
    }
    if x.n_rows == 0 {
        return Err(Error::Empty("detrend training rows"));
    }
    let distinct: BTreeSet<u64> = temps.iter().map(|t| t.to_bits()).collect();
    let eff = degree.min(distinct.len() - 1);
    let warning = (eff < degree).then(|| {
        let w = format!(
            "only {} distinct temperature value(s); detrend degree reduced from {degree} to {eff}",
            distinct.len()
        );
        log::warn!("{w}");
        w
    });
    let n = temps.len() as f64;
    let t0 = temps.iter().sum::<f64>() / n;
    let sd = (temps.iter().map(|t| (t - t0).powi(2)).sum::<f64>() / n).sqrt();
    let ts = if sd > 0.0 { sd } else { 1.0 };
    let mut model = Detrend { requested_degree: degree, degree: eff, t0, ts, coef: Vec::new() };
    let p = eff + 1;
    let basis: Vec<Vec<f64>> = temps.iter().map(|t| model.basis(*t)).collect();
    let mut gram = vec![0.0; p * p];
    for b in &basis {
        for r in 0..p {
            for c in 0..p {
                gram[r * p + c] += b[r] * b[c];
            }
        }
    }
    let l = cholesky(&gram, p)?;
    model.coef = (0..x.n_cols)
        .map(|k| {
            let mut rhs = vec![0.0; p];
            for (i, b) in basis.iter().enumerate() {
                let y = x.get(i, k);
                for r in 0..p {
                    rhs[r] += b[r] * y;
                }
            }
            cholesky_solve(&l, p, &mut rhs);
            let mut coef = rhs;
            coef.resize(degree + 1, 0.0);
            coef
        })
        .collect();
    Ok((model, warning))
}

/// One-way ANOVA F statistic per column. Constant columns get 0.
pub fn anova_f(x: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    if labels.len() != x.n_rows {
        return Err(Error::DimensionMismatch { expected: x.n_rows, got: labels.len() });
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(*l).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::SingleClass(groups.keys().next().copied().unwrap_or(0)));
    }
    if let Some((c, g)) = groups.iter().find(|(_, g)| g.len() < 2) {
        return Err(Error::InvalidArgument(format!(
            "class {c} has {} sample(s); ANOVA needs at least 2",
            g.len()
        )));
    }
    let n = x.n_rows as f64;
    let k = groups.len() as f64;
    let (grand, _) = column_moments(x);
    let mut ssb = vec![0.0; x.n_cols];
    let mut ssw = vec![0.0; x.n_cols];
    for idx in groups.values() {
        let (m, s) = column_moments(&x.select_rows(idx));
        let ng = idx.len() as f64;
        for j in 0..x.n_cols {
            ssb[j] += ng * (m[j] - grand[j]).powi(2);
            ssw[j] += ng * s[j] * s[j];
        }
    }
    Ok((0..x.n_cols)
        .map(|j| {
            if ssb[j] + ssw[j] <= 0.0 || ssb[j] <= 0.0 {
                return 0.0;
            }
            let within = (ssw[j] / (n - k)).max(WITHIN_VARIANCE_FLOOR);
            (ssb[j] / (k - 1.0)) / within
        })
        .collect())
}

/// Indices of the `k_sel` largest F statistics, ties to the lower index,
/// returned ascending.
pub fn anova_select(x: &Matrix, labels: &[usize], k_sel: usize) -> Result<Vec<usize>> {
    if k_sel == 0 || k_sel > x.n_cols {
        return Err(Error::InvalidArgument(format!(
            "k_sel {k_sel} outside [1, {}]",
            x.n_cols
        )));
    }
    let f = anova_f(x, labels)?;
    Ok(top_k(&f, k_sel))
}

fn top_k(f: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..f.len()).collect();
    order.sort_by(|&a, &b| f[b].total_cmp(&f[a]).then(a.cmp(&b)));
    let mut mask = order[..k].to_vec();
    mask.sort_unstable();
    mask
}

/// Which data a model was fitted on and which cycles were declared held out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldFingerprint {
    pub train_cycles: Vec<u32>,
    pub holdout_cycles: Vec<u32>,
    pub train_records: Vec<String>,
    /// SHA-256 over the sorted training record ids.
    pub digest: String,
}

impl FoldFingerprint {
    fn new(train: &FeatureTable, holdout_cycles: &[u32]) -> Self {
        let cycles: BTreeSet<u32> = train.rows.iter().map(|r| r.cycle_index).collect();
        let records: BTreeSet<String> = train.rows.iter().map(|r| r.record_id.clone()).collect();
        let train_records: Vec<String> = records.into_iter().collect();
        let mut holdout = holdout_cycles.to_vec();
        holdout.sort_unstable();
        holdout.dedup();
        FoldFingerprint {
            train_cycles: cycles.into_iter().collect(),
            holdout_cycles: holdout,
            digest: crate::config::hash_json(&train_records),
            train_records,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftPipelineModel {
    pub version: u32,
    pub config: DriftConfig,
    pub n_features: usize,
    pub cycle_stats: BTreeMap<u32, CycleStats>,
    pub detrend: Detrend,
    pub f_stats: Vec<f64>,
    pub mask: Vec<usize>,
    pub scaler_mean: Vec<f64>,
    pub scaler_std: Vec<f64>,
    pub fingerprint: FoldFingerprint,
    pub warnings: Vec<String>,
}

fn table_matrix(t: &FeatureTable) -> Matrix {
    Matrix { n_rows: t.len(), n_cols: t.n_features, data: t.values.clone() }
}

/// Fits the full pipeline on `train`. Errors if any training row belongs to
/// a cycle listed in `holdout_cycles`.
pub fn fit_pipeline(
    train: &FeatureTable,
    labels: &[usize],
    config: &DriftConfig,
    holdout_cycles: &[u32],
) -> Result<DriftPipelineModel> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training fold"));
    }
    if labels.len() != train.len() {
        return Err(Error::DimensionMismatch { expected: train.len(), got: labels.len() });
    }
    if let Some(r) = train.rows.iter().find(|r| holdout_cycles.contains(&r.cycle_index)) {
        return Err(Error::Leakage(format!(
            "training row from `{}` belongs to held-out cycle {}",
            r.record_id, r.cycle_index
        )));
    }
    let x = table_matrix(train);
    let cycles: Vec<u32> = train.rows.iter().map(|r| r.cycle_index).collect();
    let temps: Vec<f64> = train.rows.iter().map(|r| r.temperature_c).collect();
    let (cycle_stats, xn) = if config.normalize_cycles {
        let stats = fit_cycle_stats(&x, &cycles)?;
        let xn = apply_cycle_normalize(&x, &cycles, &stats, config.epsilon)?;
        (stats, xn)
    } else {
        (BTreeMap::new(), x)
    };
    let (detrend, warning) = fit_temperature_detrend(&xn, &temps, config.degree)?;
    let xd = detrend.apply(&xn, &temps)?;
    let f_stats = anova_f(&xd, labels)?;
    if config.k_sel > xd.n_cols {
        return Err(Error::InvalidArgument(format!("k_sel {} exceeds {} features", config.k_sel, xd.n_cols)));
    }
    let mask = top_k(&f_stats, config.k_sel);
    let (scaler_mean, std) = column_moments(&xd.select_columns(&mask));
    let scaler_std = std.into_iter().map(|s| if s > STD_FLOOR { s } else { 1.0 }).collect();
    Ok(DriftPipelineModel {
        version: MODEL_VERSION,
        config: config.clone(),
        n_features: train.n_features,
        cycle_stats,
        detrend,
        f_stats,
        mask,
        scaler_mean,
        scaler_std,
        fingerprint: FoldFingerprint::new(train, holdout_cycles),
        warnings: warning.into_iter().collect(),
    })
}

impl DriftPipelineModel {
    /// Applies normalize → detrend → select → scale. Rows of cycles not seen
    /// in training are normalized with their own batch statistics.
    pub fn transform(&self, data: &FeatureTable) -> Result<Matrix> {
        if data.n_features != self.n_features {
            return Err(Error::DimensionMismatch { expected: self.n_features, got: data.n_features });
        }
        // Only the selected columns are computed; every step is per column,
        // so this matches normalizing, detrending and selecting the full matrix.
        let mut unseen: BTreeMap<u32, CycleStats> = BTreeMap::new();
        if self.config.normalize_cycles {
            let cycles: BTreeSet<u32> = data.rows.iter().map(|r| r.cycle_index).collect();
            for c in cycles.into_iter().filter(|c| !self.cycle_stats.contains_key(c)) {
                let idx: Vec<usize> = (0..data.len()).filter(|&i| data.rows[i].cycle_index == c).collect();
                if idx.len() < 2 {
                    log::warn!("cycle {c} self-normalized from a single window");
                }
                let (mean, std) = column_moments(&table_matrix(&data.select(&idx)));
                unseen.insert(c, CycleStats { mean, std, n_windows: idx.len() });
            }
        }
        let k = self.mask.len();
        let mut out = Matrix::zeros(data.len(), k);
        let mut basis = vec![0.0; self.detrend.degree + 1];
        for (i, r) in data.rows.iter().enumerate() {
            let x = data.row(i);
            let stats = if self.config.normalize_cycles {
                let c = r.cycle_index;
                Some(self.cycle_stats.get(&c).or_else(|| unseen.get(&c)).ok_or(Error::UnknownCycle(c))?)
            } else {
                None
            };
            self.detrend.basis_into(r.temperature_c, &mut basis);
            for (j, (o, &col)) in out.row_mut(i).iter_mut().zip(&self.mask).enumerate() {
                let mut v = x[col];
                if let Some(s) = stats {
                    v = (v - s.mean[col]) / (s.std[col] + self.config.epsilon);
                }
                v -= self.detrend.coef[col].iter().zip(&basis).map(|(a, p)| a * p).sum::<f64>();
                *o = (v - self.scaler_mean[j]) / self.scaler_std[j];
            }
        }
        Ok(out)
    }

    /// [`transform`](Self::transform) for evaluation data: errors if any
    /// row comes from a training record.
    pub fn transform_holdout(&self, data: &FeatureTable) -> Result<Matrix> {
        for r in &data.rows {
            if self.fingerprint.train_records.binary_search(&r.record_id).is_ok() {
                return Err(Error::Leakage(format!(
                    "record `{}` was part of the training fold",
                    r.record_id
                )));
            }
        }
        self.transform(data)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.version != MODEL_VERSION {
            return Err(Error::Format(format!("drift model version {} unsupported", m.version)));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emcorpus::RecordLabel;
    use crate::features::RowMeta;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meta(record: usize, cycle: u32, temp: f64) -> RowMeta {
        RowMeta {
            record_id: format!("r{record}"),
            window_index: 0,
            cycle_index: cycle,
            start_s: 0.0,
            temperature_c: temp,
            skill: String::new(),
            record_label: RecordLabel::Normal,
            attack: false,
        }
    }

    #[test]
    fn constant_feature_normalizes_to_zero() {
        let x = Matrix::from_rows(&[[3.0, 1.0], [3.0, 2.0], [3.0, 4.0]]).unwrap();
        let s = fit_cycle_stats(&x, &[0, 0, 0]).unwrap();
        let y = apply_cycle_normalize(&x, &[0, 0, 0], &s, 1e-6).unwrap();
        assert!(y.column(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn offsets_are_centred_per_cycle() {
        let x = Matrix::from_rows(&[[5.0], [6.0], [-5.0], [-4.0]]).unwrap();
        let c = [1, 1, 2, 2];
        let y = apply_cycle_normalize(&x, &c, &fit_cycle_stats(&x, &c).unwrap(), 1e-6).unwrap();
        assert!((y.get(0, 0) + y.get(1, 0)).abs() < 1e-12);
        assert!((y.get(2, 0) + y.get(3, 0)).abs() < 1e-12);
    }

    #[test]
    fn unknown_cycle_errors_without_fallback() {
        let x = Matrix::from_rows(&[[1.0], [2.0]]).unwrap();
        let s = fit_cycle_stats(&x, &[0, 0]).unwrap();
        assert!(matches!(apply_cycle_normalize(&x, &[0, 9], &s, 1e-6), Err(Error::UnknownCycle(9))));
    }

    #[test]
    fn linear_feature_detrends_exactly() {
        let temps: Vec<f64> = (0..20).map(|i| 40.0 + i as f64 * 0.3).collect();
        let rows: Vec<Vec<f64>> = temps.iter().map(|t| vec![2.0 * t - 7.0, 5.0]).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let (d, w) = fit_temperature_detrend(&x, &temps, 1).unwrap();
        assert!(w.is_none());
        let r = d.apply(&x, &temps).unwrap();
        assert!(r.data.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn degree_zero_removes_the_mean() {
        let temps = [1.0, 2.0, 3.0];
        let x = Matrix::from_rows(&[[1.0], [2.0], [6.0]]).unwrap();
        let (d, _) = fit_temperature_detrend(&x, &temps, 0).unwrap();
        let r = d.apply(&x, &temps).unwrap();
        assert!((r.column(0).iter().sum::<f64>()).abs() < 1e-12);
        assert!((r.get(2, 0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_temperatures_reduce_degree() {
        let x = Matrix::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        let (d, w) = fit_temperature_detrend(&x, &[45.0; 3], 1).unwrap();
        assert_eq!(d.degree, 0);
        assert!(w.is_some());
        assert_eq!(d.coef[0][1], 0.0);
    }

    #[test]
    fn constant_feature_has_zero_f_and_separator_ranks_first() {
        let x = Matrix::from_rows(&[[1.0, 0.0, 0.3], [1.0, 0.0, 0.1], [1.0, 1.0, 0.2], [1.0, 1.0, 0.4]]).unwrap();
        let f = anova_f(&x, &[0, 0, 1, 1]).unwrap();
        assert_eq!(f[0], 0.0);
        assert!(f[1] > 1e9);
        assert_eq!(anova_select(&x, &[0, 0, 1, 1], 1).unwrap(), vec![1]);
        assert_eq!(anova_select(&x, &[0, 0, 1, 1], 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Matrix::from_rows(&[[1.0], [2.0]]).unwrap();
        assert!(matches!(anova_f(&x, &[3, 3]), Err(Error::SingleClass(3))));
    }

    fn table(n_cycles: u32, per: usize, seed: u64) -> (FeatureTable, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = FeatureTable::new(6);
        let mut y = Vec::new();
        for c in 0..n_cycles {
            let offset = rng.random_range(-3.0..3.0);
            for i in 0..per {
                let label = i % 3;
                let temp = 40.0 + rng.random_range(0.0..5.0);
                let v: Vec<f64> = (0..6)
                    .map(|k| offset + 0.2 * temp + if k < 2 { label as f64 } else { 0.0 } + rng.random_range(-0.5..0.5))
                    .collect();
                t.push(&v, meta(c as usize * 100 + i / 3, c, temp)).unwrap();
                y.push(label);
            }
        }
        (t, y)
    }

    #[test]
    fn pipeline_scales_training_data() {
        let (t, y) = table(3, 30, 1);
        let cfg = DriftConfig { k_sel: 3, ..DriftConfig::default() };
        let m = fit_pipeline(&t, &y, &cfg, &[]).unwrap();
        let z = m.transform(&t).unwrap();
        let (mean, std) = column_moments(&z);
        assert!(mean.iter().all(|v| v.abs() < 1e-9));
        assert!(std.iter().all(|v| (v - 1.0).abs() < 1e-9));
        assert!(m.mask.contains(&0) && m.mask.contains(&1));
        let back = DriftPipelineModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn unseen_cycle_uses_self_normalization() {
        let (t, y) = table(4, 30, 2);
        let train_idx: Vec<usize> = (0..t.len()).filter(|&i| t.rows[i].cycle_index != 3).collect();
        let test_idx: Vec<usize> = (0..t.len()).filter(|&i| t.rows[i].cycle_index == 3).collect();
        let train = t.select(&train_idx);
        let ytr: Vec<usize> = train_idx.iter().map(|&i| y[i]).collect();
        let m = fit_pipeline(&train, &ytr, &DriftConfig { k_sel: 4, ..Default::default() }, &[3]).unwrap();
        let z = m.transform_holdout(&t.select(&test_idx)).unwrap();
        assert_eq!(z.n_rows, test_idx.len());
        assert!(matches!(fit_pipeline(&t, &y, &m.config, &[3]), Err(Error::Leakage(_))));
        assert!(matches!(m.transform_holdout(&train), Err(Error::Leakage(_))));
    }
}
