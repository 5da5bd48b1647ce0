//! Orchestration shared by the CLI and the experiment suites: corpus plans,
//! window feature tables, per-fold training and scoring, report assembly.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::detector::{
    aggregate, pool_posteriors, Aggregation, PoolingRule, WindowEvidence, WindowState, STATE_CLASSES,
};
use crate::drift::{fit_pipeline, DriftConfig, DriftPipelineModel};
use crate::emcorpus::io::{load_record, IqFileReader, ManifestEntry};
use crate::emcorpus::{
    derive_seed, ActivitySegment, Component, render_record, AttackOverlay, ChannelModel, CycleContext, IqRecord, Receiver, RecordLabel,
    SkillProfile, TemperatureModel,
};
use crate::error::{Error, Result};
use crate::evalharness::{
    bootstrap_ci, calibration_metrics, classification_metrics, detection_metrics, per_cycle_accuracy,
    FoldMode, FoldPlan, FoldResult, MetricsReport,
};
use crate::features::{extract_v10, FeatureConfig, FeatureTable, RowMeta, V10_DIM};
use crate::forest::{argmax, encode_labels, train_forest, ForestModel, ForestParams};
use crate::linalg::Matrix;
use crate::windowing::{coarse_envelope, fine_windows, EnvelopeMode, FineWindow, DEFAULT_RHO_S, DEFAULT_TAU_S};

const PAYLOAD_MARGIN_S: f64 = 0.5;

/// Per-cycle nuisance drawn for every collection cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CycleDrift {
    pub enabled: bool,
    /// Standard deviation of the per-receiver coupling offset.
    pub gain_offset_std_db: f64,
    /// Standard deviation of the per-rail DC offset, 8-bit scale.
    pub dc_offset_std: f64,
    /// Initial temperatures are uniform in `mean ± spread`.
    pub temperature_spread_c: f64,
    pub thermal_gain_per_c: f64,
    #[serde(default)]
    pub temperature: TemperatureModel,
}

impl Default for CycleDrift {
    fn default() -> Self {
        CycleDrift {
            enabled: true,
            gain_offset_std_db: 2.0,
            dc_offset_std: 1.0,
            temperature_spread_c: 6.0,
            thermal_gain_per_c: 0.01,
            temperature: TemperatureModel::default(),
        }
    }
}

impl CycleDrift {
    pub fn disabled() -> Self {
        CycleDrift { enabled: false, ..CycleDrift::default() }
    }
}

/// Generator description of a whole synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    pub channels: [ChannelModel; 2],
    /// Normal skills; each is recorded `records_per_skill` times per cycle.
    pub skills: Vec<SkillProfile>,
    #[serde(default)]
    pub background: Option<SkillProfile>,
    #[serde(default)]
    pub background_per_cycle: u32,
    /// Attack payloads overlaid on normal skills.
    #[serde(default)]
    pub payloads: Vec<SkillProfile>,
    #[serde(default)]
    pub attacks_per_cycle: u32,
    #[serde(default)]
    pub payload_s: f64,
    pub cycles: u32,
    pub records_per_skill: u32,
    pub drift: CycleDrift,
    /// Relative std of a record's workload intensity, redrawn every 1–3 s.
    /// 0 keeps every run of a skill stationary.
    #[serde(default)]
    pub workload_variation: f64,
}

/// One record to render.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordPlan {
    pub cycle_index: u32,
    pub skill: String,
    /// Payload name and start time.
    pub payload: Option<(String, f64)>,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn sample_rate_hz(&self) -> f64 {
        self.channels[0].sample_rate_hz
    }

    pub fn validate(&self) -> Result<()> {
        if self.skills.is_empty() {
            return Err(Error::InvalidArgument("corpus needs at least one skill".into()));
        }
        let mut names = BTreeSet::new();
        let all = self.skills.iter().chain(&self.background).chain(&self.payloads);
        for p in all {
            p.validate()?;
            if !names.insert(p.name.as_str()) {
                return Err(Error::InvalidArgument(format!("profile name `{}` is not unique", p.name)));
            }
        }
        for c in &self.channels {
            c.validate()?;
        }
        if self.channels[0].receiver == self.channels[1].receiver {
            return Err(Error::InvalidArgument("channels must have distinct receiver ids".into()));
        }
        if self.background_per_cycle > 0 && self.background.is_none() {
            return Err(Error::InvalidArgument("background records requested without a background profile".into()));
        }
        if self.attacks_per_cycle > 0 {
            if self.payloads.is_empty() {
                return Err(Error::InvalidArgument("attack records requested without payloads".into()));
            }
            let shortest = self.skills.iter().map(|s| s.duration_s).fold(f64::INFINITY, f64::min);
            if !(self.payload_s > 0.0) || self.payload_s + 2.0 * PAYLOAD_MARGIN_S > shortest {
                return Err(Error::InvalidArgument(format!(
                    "payload length {} s does not fit a {shortest} s skill",
                    self.payload_s
                )));
            }
        }
        if self.cycles == 0 || self.records_per_skill == 0 {
            return Err(Error::InvalidArgument("cycles and records_per_skill must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.workload_variation) {
            return Err(Error::InvalidArgument(format!(
                "workload variation {} outside [0, 1]",
                self.workload_variation
            )));
        }
        if !(self.drift.gain_offset_std_db >= 0.0 && self.drift.dc_offset_std >= 0.0 && self.drift.temperature_spread_c >= 0.0) {
            return Err(Error::InvalidArgument("drift magnitudes must be >= 0".into()));
        }
        Ok(())
    }

    /// Nuisance state of cycle `c`; neutral when drift is disabled.
    pub fn cycle_context(&self, c: u32) -> CycleContext {
        let mut ctx = CycleContext::neutral(c);
        ctx.temperature = self.drift.temperature;
        ctx.reference_c = self.drift.temperature.mean_c;
        if !self.drift.enabled {
            return ctx;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[0xC1C1E, c as u64]));
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        for r in 0..2 {
            ctx.gain_offset_db[r] = self.drift.gain_offset_std_db * std_normal.sample(&mut rng);
            for k in 0..2 {
                ctx.dc_offset[r][k] = self.drift.dc_offset_std * std_normal.sample(&mut rng);
            }
        }
        let spread = self.drift.temperature_spread_c;
        ctx.temperature.initial_c = self.drift.temperature.mean_c + spread * (2.0 * rng.random::<f64>() - 1.0);
        ctx.thermal_gain_per_c = self.drift.thermal_gain_per_c;
        ctx
    }

    fn profile(&self, name: &str) -> Result<&SkillProfile> {
        self.skills
            .iter()
            .chain(&self.background)
            .chain(&self.payloads)
            .find(|p| p.name == name)
            .ok_or_else(|| Error::UnknownSkill(name.to_string()))
    }

    /// Records in rendering order: per cycle, the normal skills, then
    /// background, then attacks.
    pub fn plan(&self) -> Vec<RecordPlan> {
        let mut out = Vec::new();
        for c in 0..self.cycles {
            let mut k = 0u64;
            let mut seed = || {
                k += 1;
                derive_seed(self.seed, &[c as u64, k])
            };
            for s in &self.skills {
                for _ in 0..self.records_per_skill {
                    out.push(RecordPlan { cycle_index: c, skill: s.name.clone(), payload: None, seed: seed() });
                }
            }
            if let Some(bg) = &self.background {
                for _ in 0..self.background_per_cycle {
                    out.push(RecordPlan { cycle_index: c, skill: bg.name.clone(), payload: None, seed: seed() });
                }
            }
            for a in 0..self.attacks_per_cycle as usize {
                let base = &self.skills[(a + c as usize) % self.skills.len()];
                let payload = &self.payloads[a % self.payloads.len()];
                let s = seed();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s, &[0xA77AC]));
                let room = base.duration_s - self.payload_s - 2.0 * PAYLOAD_MARGIN_S;
                let start = PAYLOAD_MARGIN_S + room * rng.random::<f64>();
                out.push(RecordPlan {
                    cycle_index: c,
                    skill: base.name.clone(),
                    payload: Some((payload.name.clone(), start)),
                    seed: s,
                });
            }
        }
        out
    }

    pub fn render(&self, plan: &RecordPlan) -> Result<IqRecord> {
        let profile = self.profile(&plan.skill)?;
        let overlay = match &plan.payload {
            Some((name, start)) => Some(AttackOverlay {
                payload: self.profile(name)?.clone(),
                start_s: *start,
                len_s: self.payload_s,
            }),
            None => None,
        };
        let varied;
        let profile = if self.workload_variation > 0.0 {
            varied = vary_workload(profile, self.workload_variation, derive_seed(plan.seed, &[VARIATION_TAG]));
            &varied
        } else {
            profile
        };
        render_record(profile, &self.channels, &self.cycle_context(plan.cycle_index), plan.seed, overlay.as_ref())
    }
}

const VARIATION_TAG: u64 = 0x7A41;
const VARIATION_SEGMENT_S: (f64, f64) = (1.0, 3.0);

/// Splits a skill into segments of random length and scales every non-idle
/// constant activity by one intensity factor per segment. The burst rate
/// gets one factor for the whole record.
fn vary_workload(profile: &SkillProfile, variation: f64, seed: u64) -> SkillProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, variation).expect("variation validated");
    let mut out = profile.clone();
    out.burst.rate_hz *= (1.0 + normal.sample(&mut rng)).clamp(0.25, 2.0);
    let mut steps = Vec::new();
    let mut t = 0.0;
    while t < profile.duration_s {
        steps.push((t, (1.0 + normal.sample(&mut rng)).clamp(0.25, 2.0)));
        t += rng.random_range(VARIATION_SEGMENT_S.0..VARIATION_SEGMENT_S.1);
    }
    for c in out.components.iter_mut().filter(|c| c.component != Component::Idle && c.segments.len() == 1) {
        let alpha = c.segments[0].alpha;
        c.segments = steps
            .iter()
            .map(|&(start_s, f)| ActivitySegment { start_s, alpha: (alpha * f).min(1.0) })
            .collect();
    }
    out
}

/// Fine-window geometry and envelope source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct WindowingConfig {
    pub tau_s: f64,
    pub rho_s: f64,
    pub envelope: EnvelopeMode,
}

impl Default for WindowingConfig {
    fn default() -> Self {
        WindowingConfig { tau_s: DEFAULT_TAU_S, rho_s: DEFAULT_RHO_S, envelope: EnvelopeMode::EventAnchor }
    }
}

fn row_meta(record: &IqRecord, w: &FineWindow) -> RowMeta {
    let attack = record.payload_interval().is_some_and(|(p0, p1)| {
        let overlap = w.end_s().min(p1) - w.start_s.max(p0);
        overlap >= 0.5 * w.tau_s - 1e-9
    });
    RowMeta {
        record_id: record.record_id.clone(),
        window_index: w.index as u32,
        cycle_index: record.cycle_index,
        start_s: w.start_s,
        temperature_c: record.temperature_at(w.mid_s()),
        skill: record.skill_name.clone(),
        record_label: record.label,
        attack,
    }
}

/// Feature rows for every fine window of an in-memory record.
pub fn record_table(record: &IqRecord, windowing: &WindowingConfig, features: &FeatureConfig) -> Result<FeatureTable> {
    let env = coarse_envelope(record, windowing.envelope)?;
    let windows = fine_windows(&env, windowing.tau_s, windowing.rho_s)?;
    let rows = windows
        .par_iter()
        .map(|w| {
            let [cpu, ram] = w.slices(record)?;
            Ok((extract_v10(cpu, ram, features)?, row_meta(record, w)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut t = FeatureTable::new(V10_DIM);
    for (v, m) in rows {
        t.push(&v, m)?;
    }
    Ok(t)
}

/// One V10 vector over the whole coarse envelope of a record.
pub fn record_vector(record: &IqRecord, envelope: EnvelopeMode, features: &FeatureConfig) -> Result<(Vec<f64>, RowMeta)> {
    let env = coarse_envelope(record, envelope)?;
    let w = FineWindow { record_id: record.record_id.clone(), index: 0, start_s: env.a_s, tau_s: env.len_s() };
    let [cpu, ram] = w.slices(record)?;
    let mut meta = row_meta(record, &w);
    meta.attack = record.label == RecordLabel::Attack;
    Ok((extract_v10(cpu, ram, features)?, meta))
}

/// Feature rows of a persisted record, reading one window at a time.
pub fn stored_record_table(
    dir: &Path,
    entry: &ManifestEntry,
    windowing: &WindowingConfig,
    features: &FeatureConfig,
) -> Result<FeatureTable> {
    let record = load_record(dir, entry, false)?;
    let env = crate::windowing::coarse_envelope_from(&record.record_id, &record.events, entry.duration_s(), windowing.envelope)?;
    let windows = fine_windows(&env, windowing.tau_s, windowing.rho_s)?;
    let mut readers = [
        IqFileReader::open(&dir.join(&entry.iq_files[Receiver::CpuBand.index()]))?,
        IqFileReader::open(&dir.join(&entry.iq_files[Receiver::RamBand.index()]))?,
    ];
    let n = entry.n_samples;
    let mut bufs = [Vec::new(), Vec::new()];
    let mut t = FeatureTable::new(V10_DIM);
    for w in &windows {
        let r = w.sample_range(entry.sample_rate_hz);
        let len = r.len() as u64;
        let start = (r.start as u64).min(n.saturating_sub(len));
        for (rd, b) in readers.iter_mut().zip(bufs.iter_mut()) {
            rd.read_range(start, len as usize, b)?;
        }
        let v = extract_v10(&bufs[0], &bufs[1], features)?;
        t.push(&v, row_meta(&record, w))?;
    }
    Ok(t)
}

/// Window table, and optionally one whole-record row per record.
#[derive(Clone, Debug, Default)]
pub struct CorpusTables {
    pub windows: FeatureTable,
    pub records: Option<FeatureTable>,
}

/// Renders every planned record and extracts its features, without keeping
/// the IQ streams.
pub fn build_tables(
    spec: &CorpusSpec,
    windowing: &WindowingConfig,
    features: &FeatureConfig,
    whole_record: bool,
) -> Result<CorpusTables> {
    spec.validate()?;
    features.validate()?;
    let parts = spec
        .plan()
        .par_iter()
        .map(|p| {
            let rec = spec.render(p)?;
            let t = record_table(&rec, windowing, features)?;
            let whole = whole_record.then(|| record_vector(&rec, windowing.envelope, features)).transpose()?;
            Ok((t, whole))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut windows = FeatureTable::new(V10_DIM);
    let mut records = whole_record.then(|| FeatureTable::new(V10_DIM));
    for (t, whole) in parts {
        windows.extend(&t)?;
        if let (Some(r), Some((v, m))) = (records.as_mut(), whole) {
            r.push(&v, m)?;
        }
    }
    Ok(CorpusTables { windows, records })
}

// ---------------------------------------------------------------- stages

/// Stage 1 classifies skills; Stage 2 labels window states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Skill,
    State,
}

pub fn task_label(meta: &RowMeta, task: Task) -> &str {
    match task {
        Task::Skill => &meta.skill,
        Task::State if meta.attack => STATE_CLASSES[WindowState::Attack as usize],
        Task::State if meta.record_label == RecordLabel::Background => STATE_CLASSES[WindowState::Background as usize],
        Task::State => STATE_CLASSES[WindowState::Normal as usize],
    }
}

/// Rows a task trains and tests on: skill classification uses normal
/// records only.
pub fn task_rows(table: &FeatureTable, task: Task) -> Vec<usize> {
    (0..table.len())
        .filter(|&i| task == Task::State || table.rows[i].record_label == RecordLabel::Normal)
        .collect()
}

/// Restricts a fold to the rows of a task.
pub fn restrict_fold(fold: &FoldPlan, table: &FeatureTable, task: Task) -> FoldPlan {
    let keep: BTreeSet<usize> = task_rows(table, task).into_iter().collect();
    let mut f = fold.clone();
    f.train_rows.retain(|i| keep.contains(i));
    f.test_rows.retain(|i| keep.contains(i));
    f
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageModel {
    pub task: Task,
    pub pipeline: DriftPipelineModel,
    pub forest: ForestModel,
}

/// Fits drift pipeline and forest on `train`; `holdout_cycles` arms the
/// leakage guard.
pub fn train_stage(
    train: &FeatureTable,
    task: Task,
    drift: &DriftConfig,
    forest: &ForestParams,
    holdout_cycles: &[u32],
) -> Result<StageModel> {
    let names: Vec<&str> = train.rows.iter().map(|m| task_label(m, task)).collect();
    let (_, labels) = encode_labels(&names);
    let pipeline = fit_pipeline(train, &labels, drift, holdout_cycles)?;
    let x = pipeline.transform(train)?;
    let forest = train_forest(&x, &names, forest)?;
    if task == Task::State && forest.classes.iter().map(String::as_str).ne(STATE_CLASSES) {
        return Err(Error::ClassMismatch(format!(
            "state training fold has classes {:?}, expected {:?}",
            forest.classes, STATE_CLASSES
        )));
    }
    Ok(StageModel { task, pipeline, forest })
}

impl StageModel {
    /// Posteriors for held-out rows; errors if a row's record was trained on.
    pub fn predict_holdout(&self, test: &FeatureTable) -> Result<Matrix> {
        let x = self.pipeline.transform_holdout(test)?;
        self.forest.predict_proba_batch(&x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowPrediction {
    pub record_id: String,
    pub window_index: u32,
    pub cycle_index: u32,
    pub truth: String,
    pub posterior: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold_id: usize,
    pub mode: FoldMode,
    pub task: Task,
    pub test_cycles: Vec<u32>,
    pub classes: Vec<String>,
    pub windows: Vec<WindowPrediction>,
}

/// Trains a fold's model on its training rows. The forest seed is derived
/// from `forest.seed` and the fold id.
pub fn train_fold(
    table: &FeatureTable,
    fold: &FoldPlan,
    task: Task,
    drift: &DriftConfig,
    forest: &ForestParams,
) -> Result<StageModel> {
    let fold = restrict_fold(fold, table, task);
    let train = table.select(&fold.train_rows);
    let params = forest.clone().with_seed(derive_seed(forest.seed, &[fold.fold_id as u64]));
    train_stage(&train, task, drift, &params, &fold.holdout_cycles())
}

/// Predicts a fold's test rows with a model trained by [`train_fold`].
pub fn predict_fold(model: &StageModel, table: &FeatureTable, fold: &FoldPlan) -> Result<FoldOutcome> {
    let task = model.task;
    let fold = restrict_fold(fold, table, task);
    let test = table.select(&fold.test_rows);
    if test.is_empty() {
        return Err(Error::Empty("test fold"));
    }
    let post = model.predict_holdout(&test)?;
    let windows = test
        .rows
        .iter()
        .enumerate()
        .map(|(i, m)| WindowPrediction {
            record_id: m.record_id.clone(),
            window_index: m.window_index,
            cycle_index: m.cycle_index,
            truth: task_label(m, task).to_string(),
            posterior: post.row(i).to_vec(),
        })
        .collect();
    Ok(FoldOutcome {
        fold_id: fold.fold_id,
        mode: fold.mode,
        task,
        test_cycles: fold.test_cycles.clone(),
        classes: model.forest.classes.clone(),
        windows,
    })
}

/// Trains on a fold's training rows and predicts its test rows.
pub fn run_fold(
    table: &FeatureTable,
    fold: &FoldPlan,
    task: Task,
    drift: &DriftConfig,
    forest: &ForestParams,
) -> Result<(StageModel, FoldOutcome)> {
    if restrict_fold(fold, table, task).test_rows.is_empty() {
        return Err(Error::Empty("test fold"));
    }
    let model = train_fold(table, fold, task, drift, forest)?;
    let outcome = predict_fold(&model, table, fold)?;
    Ok((model, outcome))
}

pub fn run_folds(
    table: &FeatureTable,
    folds: &[FoldPlan],
    task: Task,
    drift: &DriftConfig,
    forest: &ForestParams,
) -> Result<Vec<FoldOutcome>> {
    folds.iter().map(|f| run_fold(table, f, task, drift, forest).map(|(_, o)| o)).collect()
}

fn by_record(windows: &[WindowPrediction]) -> Vec<Vec<&WindowPrediction>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&WindowPrediction>> = BTreeMap::new();
    for w in windows {
        let g = groups.entry(w.record_id.as_str()).or_default();
        if g.is_empty() {
            order.push(&w.record_id);
        }
        g.push(w);
    }
    order.into_iter().map(|r| groups.remove(r).unwrap_or_default()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordPrediction {
    pub record_id: String,
    pub cycle_index: u32,
    pub truth: String,
    pub predicted: String,
    pub posterior: Vec<f64>,
}

/// Pools each record's window posteriors.
pub fn pool_records(outcome: &FoldOutcome, rule: PoolingRule) -> Result<Vec<RecordPrediction>> {
    by_record(&outcome.windows)
        .into_iter()
        .map(|ws| {
            let posts: Vec<&[f64]> = ws.iter().map(|w| w.posterior.as_slice()).collect();
            let p = pool_posteriors(&posts, rule)?;
            Ok(RecordPrediction {
                record_id: ws[0].record_id.clone(),
                cycle_index: ws[0].cycle_index,
                truth: ws[0].truth.clone(),
                predicted: outcome.classes[p.predicted].clone(),
                posterior: p.posterior,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub record_id: String,
    pub cycle_index: u32,
    /// Record carries an attack payload.
    pub attack: bool,
    pub score: f64,
}

/// Window evidence of a state-task fold.
pub fn fold_evidence(outcome: &FoldOutcome) -> Vec<WindowEvidence> {
    outcome
        .windows
        .iter()
        .map(|w| WindowEvidence {
            record_id: w.record_id.clone(),
            window_index: w.window_index as usize,
            state: WindowState::ALL[argmax(&w.posterior)],
            score: w.posterior[WindowState::Attack as usize],
            posterior: w.posterior.clone(),
        })
        .collect()
}

/// Aggregate attack score `A` per record of a state-task fold. A record is
/// an attack record when any of its windows is.
pub fn record_scores(outcome: &FoldOutcome, table: &FeatureTable, aggregation: Aggregation) -> Result<Vec<RecordScore>> {
    let attack_records: BTreeSet<&str> = table
        .rows
        .iter()
        .filter(|m| m.record_label == RecordLabel::Attack)
        .map(|m| m.record_id.as_str())
        .collect();
    let ev = fold_evidence(outcome);
    let mut groups: Vec<(String, u32, Vec<WindowEvidence>)> = Vec::new();
    for (e, w) in ev.into_iter().zip(&outcome.windows) {
        match groups.last_mut() {
            Some(g) if g.0 == e.record_id => g.2.push(e),
            _ => groups.push((e.record_id.clone(), w.cycle_index, vec![e])),
        }
    }
    groups
        .into_iter()
        .map(|(rid, c, es)| {
            Ok(RecordScore {
                attack: attack_records.contains(rid.as_str()),
                score: aggregate(&es, aggregation)?,
                record_id: rid,
                cycle_index: c,
            })
        })
        .collect()
}

// --------------------------------------------------------------- reports

/// Skill-task report over folds: pooled record predictions, per-fold and
/// per-cycle accuracy, and a record-resampled macro-F1 interval.
pub fn skill_report(
    outcomes: &[FoldOutcome],
    rule: PoolingRule,
    config_hash: &str,
    bootstrap: Option<(usize, u64)>,
) -> Result<MetricsReport> {
    let first = outcomes.first().ok_or(Error::Empty("fold outcomes"))?;
    let classes = first.classes.clone();
    let index = |name: &str| {
        classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::ClassMismatch(format!("class `{name}` missing from fold classes")))
    };
    let mut report = MetricsReport::new(config_hash, first.mode);
    let mut all = Vec::new();
    for o in outcomes {
        if o.classes != classes {
            return Err(Error::ClassMismatch("folds disagree on the class set".into()));
        }
        let recs = pool_records(o, rule)?;
        let t: Vec<usize> = recs.iter().map(|r| index(&r.truth)).collect::<Result<_>>()?;
        let p: Vec<usize> = recs.iter().map(|r| index(&r.predicted)).collect::<Result<_>>()?;
        let m = classification_metrics(&t, &p, &classes)?;
        report.folds.push(FoldResult {
            fold_id: o.fold_id,
            test_cycles: o.test_cycles.clone(),
            n_test_records: recs.len(),
            accuracy: m.accuracy,
            macro_f1: m.macro_f1,
        });
        all.extend(recs.into_iter().zip(t).zip(p).map(|((r, t), p)| (r.cycle_index, t, p)));
    }
    let t: Vec<usize> = all.iter().map(|a| a.1).collect();
    let p: Vec<usize> = all.iter().map(|a| a.2).collect();
    let cycles: Vec<u32> = all.iter().map(|a| a.0).collect();
    report.classification = Some(classification_metrics(&t, &p, &classes)?);
    report.per_cycle_accuracy = per_cycle_accuracy(&cycles, &t, &p);
    if let Some((n, seed)) = bootstrap {
        let k = classes.len();
        report.macro_f1_ci = Some(bootstrap_ci(
            &all,
            |s| {
                let t: Vec<usize> = s.iter().map(|a| a.1).collect();
                let p: Vec<usize> = s.iter().map(|a| a.2).collect();
                let names: Vec<String> = (0..k).map(|i| i.to_string()).collect();
                classification_metrics(&t, &p, &names).map(|m| m.macro_f1).unwrap_or(f64::NAN)
            },
            n,
            0.95,
            seed,
        )?);
    }
    Ok(report)
}

/// State-task report: record-level detection and calibration of `A`.
pub fn state_report(
    outcomes: &[FoldOutcome],
    table: &FeatureTable,
    aggregation: Aggregation,
    ece_bins: usize,
    config_hash: &str,
) -> Result<MetricsReport> {
    let first = outcomes.first().ok_or(Error::Empty("fold outcomes"))?;
    let mut report = MetricsReport::new(config_hash, first.mode);
    let mut scores = Vec::new();
    for o in outcomes {
        scores.extend(record_scores(o, table, aggregation)?);
    }
    let s: Vec<f64> = scores.iter().map(|r| r.score).collect();
    let l: Vec<bool> = scores.iter().map(|r| r.attack).collect();
    report.detection = Some(detection_metrics(&s, &l)?);
    report.calibration = Some(calibration_metrics(&s, &l, ece_bins)?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emcorpus::{Component, ComponentActivity};

    fn spec() -> CorpusSpec {
        let fs = 1e6;
        CorpusSpec {
            seed: 3,
            channels: [
                ChannelModel::new(Receiver::CpuBand, 80.0, fs).with_gain(Component::Cpu, 20.0).with_noise(3.0),
                ChannelModel::new(Receiver::RamBand, 800.0, fs).with_gain(Component::Dram, 20.0).with_noise(3.0),
            ],
            skills: vec![
                SkillProfile::new("a", 2.0).with(ComponentActivity::constant(Component::Cpu, 0.8, [1.0, 1.0])),
                SkillProfile::new("b", 2.0).with(ComponentActivity::constant(Component::Dram, 0.8, [1.0, 1.0])),
            ],
            background: Some(SkillProfile::new("idle", 2.0)),
            background_per_cycle: 1,
            payloads: vec![SkillProfile::new("x", 0.2).with(ComponentActivity::constant(Component::Cpu, 1.0, [1.0, 1.0]))],
            attacks_per_cycle: 1,
            payload_s: 0.2,
            cycles: 2,
            records_per_skill: 2,
            drift: CycleDrift::default(),
            workload_variation: 0.0,
        }
    }

    #[test]
    fn plan_counts_and_determinism() {
        let s = spec();
        let p = s.plan();
        assert_eq!(p.len(), 2 * (2 * 2 + 1 + 1));
        assert_eq!(p, s.plan());
        assert_eq!(p.iter().filter(|r| r.payload.is_some()).count(), 2);
        assert_eq!(s.cycle_context(1), s.cycle_context(1));
        assert_ne!(s.cycle_context(0).gain_offset_db, s.cycle_context(1).gain_offset_db);
    }

    #[test]
    fn tables_label_attack_windows() {
        let s = spec();
        let w = WindowingConfig { tau_s: 0.2, rho_s: 0.1, envelope: EnvelopeMode::EventAnchor };
        let t = build_tables(&s, &w, &FeatureConfig::for_sample_rate(1e6), true).unwrap();
        assert_eq!(t.records.as_ref().unwrap().len(), 12);
        assert_eq!(t.windows.len(), 12 * 19);
        assert!(t.windows.rows.iter().any(|m| m.attack));
        assert!(t.windows.rows.iter().filter(|m| m.attack).all(|m| m.record_label == RecordLabel::Attack));
        let states: BTreeSet<&str> = t.windows.rows.iter().map(|m| task_label(m, Task::State)).collect();
        assert_eq!(states.len(), 3);
        assert_eq!(task_rows(&t.windows, Task::Skill).len(), 8 * 19);
    }
}
