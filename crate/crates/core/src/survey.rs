//! Carrier selection by measured workload deltas.
//!
//! A sweep records, for every carrier, the median band power under idle,
//! CPU-bound and memory-bound calibration workloads. The CPU carrier is the
//! one with the largest `Δ_CPU = P_cpu − P_idle`; the RAM carrier maximizes
//! `Δ_RAM − λ·max(Δ_CPU, 0)` so that bands merely echoing CPU activity are
//! penalized. Comparing sweeps taken with the frequency governor pinned and
//! unpinned exposes carriers whose apparent workload sensitivity is only
//! governor frequency modulation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::emcorpus::{
    derive_seed, render_stream, ChannelModel, Component, ComponentActivity, CycleContext, Receiver,
    SkillProfile,
};
use crate::error::{Error, Result};
use crate::features::{iq_to_complex, power_db, welch_psd, FeatureConfig};

pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_DWELL_S: f64 = 2.0;
pub const DEFAULT_FLAG_RATIO: f64 = 3.0;
/// Cross-condition variances are floored at this value (dB²) before the
/// pinned/unpinned ratio is taken, so estimator jitter on quiet carriers
/// cannot produce a flag.
pub const DEFAULT_VARIANCE_FLOOR_DB2: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Idle,
    Cpu,
    Ram,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Idle, Condition::Cpu, Condition::Ram];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Idle => "idle",
            Condition::Cpu => "cpu",
            Condition::Ram => "ram",
        }
    }
}

/// One `carrier_mhz,condition,power_db` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub carrier_mhz: f64,
    pub condition: Condition,
    pub power_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub carriers_mhz: Vec<f64>,
    pub dwell_s: f64,
    /// Sub-segments per dwell; band power is their median.
    pub segments: usize,
    pub sample_rate_hz: f64,
    /// Governor pinned: no activity-driven frequency modulation.
    pub pinned: bool,
    pub seed: u64,
    /// Intensity of the memory calibration workload.
    #[serde(default = "one")]
    pub ram_intensity: f64,
}

fn one() -> f64 {
    1.0
}

impl SweepConfig {
    pub fn new(carriers_mhz: Vec<f64>, sample_rate_hz: f64, seed: u64) -> Self {
        SweepConfig {
            carriers_mhz,
            dwell_s: DEFAULT_DWELL_S,
            segments: 8,
            sample_rate_hz,
            pinned: true,
            seed,
            ram_intensity: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandSweep {
    pub entries: Vec<SweepEntry>,
    pub config: Option<SweepConfig>,
}

impl BandSweep {
    pub fn from_entries(entries: Vec<SweepEntry>) -> Self {
        BandSweep { entries, config: None }
    }

    /// Power table keyed by carrier (as bit pattern, in ascending order).
    fn table(&self) -> BTreeMap<OrdF64, BTreeMap<Condition, f64>> {
        let mut t: BTreeMap<OrdF64, BTreeMap<Condition, f64>> = BTreeMap::new();
        for e in &self.entries {
            t.entry(OrdF64(e.carrier_mhz)).or_default().insert(e.condition, e.power_db);
        }
        t
    }

    pub fn carriers(&self) -> Vec<f64> {
        self.table().keys().map(|k| k.0).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Where emitters couple into the spectrum of the simulated host.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SurveyEmitter {
    pub component: Component,
    pub center_mhz: f64,
    /// Gaussian coupling width (sigma) in MHz.
    pub width_mhz: f64,
    pub gain: f64,
    /// Activity-driven frequency modulation when the governor is unpinned.
    #[serde(default)]
    pub governor_fm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct HostEmissionMap {
    pub emitters: Vec<SurveyEmitter>,
    pub noise_floor: f64,
    /// Governor frequency deviation at full load, as a fraction of the
    /// sample rate.
    pub governor_depth_frac: f64,
    pub governor_rate_hz: f64,
}

impl HostEmissionMap {
    /// CPU emission near 80 MHz, DRAM near 800 MHz and a governor-modulated
    /// clock tone at 1800 MHz.
    pub fn desk_default() -> Self {
        HostEmissionMap {
            emitters: vec![
                SurveyEmitter { component: Component::Cpu, center_mhz: 80.0, width_mhz: 15.0, gain: 14.0, governor_fm: false },
                SurveyEmitter { component: Component::Dram, center_mhz: 800.0, width_mhz: 60.0, gain: 12.0, governor_fm: false },
                SurveyEmitter { component: Component::Idle, center_mhz: 1800.0, width_mhz: 40.0, gain: 10.0, governor_fm: true },
            ],
            noise_floor: 2.0,
            governor_depth_frac: 0.4,
            governor_rate_hz: 3.0,
        }
    }

    /// Coupling of `component` at `carrier_mhz`.
    pub fn gain_at(&self, component: Component, carrier_mhz: f64) -> f64 {
        self.emitters
            .iter()
            .filter(|e| e.component == component)
            .map(|e| e.gain * (-0.5 * ((carrier_mhz - e.center_mhz) / e.width_mhz).powi(2)).exp())
            .sum()
    }

    fn governor_at(&self, carrier_mhz: f64) -> bool {
        self.emitters
            .iter()
            .any(|e| e.governor_fm && (carrier_mhz - e.center_mhz).abs() <= 3.0 * e.width_mhz)
    }

    /// Single-receiver channel tuned to `carrier_mhz`.
    pub fn channel_at(&self, carrier_mhz: f64, sample_rate_hz: f64, pinned: bool) -> ChannelModel {
        let mut ch = ChannelModel::new(Receiver::CpuBand, carrier_mhz, sample_rate_hz).with_noise(self.noise_floor);
        for c in Component::ALL {
            ch = ch.with_gain(c, self.gain_at(c, carrier_mhz));
        }
        if !pinned && self.governor_at(carrier_mhz) {
            ch = ch.with_governor(self.governor_depth_frac * sample_rate_hz, self.governor_rate_hz);
        }
        ch
    }
}

/// Calibration workload for a sweep condition. The memory workload carries
/// some CPU activity as well.
pub fn calibration_profile(condition: Condition, duration_s: f64, ram_intensity: f64) -> SkillProfile {
    let p = SkillProfile::new(format!("calibrate_{}", condition.name()), duration_s)
        .with(ComponentActivity::constant(Component::Idle, 1.0, [1.0, 1.0]));
    match condition {
        Condition::Idle => p,
        Condition::Cpu => p.with(ComponentActivity::constant(Component::Cpu, 1.0, [1.0, 1.0])),
        Condition::Ram => p
            .with(ComponentActivity::constant(Component::Dram, ram_intensity, [1.0, 1.0]))
            .with(ComponentActivity::constant(Component::Cpu, 0.3, [1.0, 1.0])),
    }
}

/// Median band power (dB) over `segments` equal sub-segments of a stream.
pub fn median_band_power(iq: &[i8], segments: usize, sample_rate_hz: f64) -> Result<f64> {
    let x = iq_to_complex(iq);
    let segments = segments.max(1);
    let len = x.len() / segments;
    let seg_len = FeatureConfig::for_sample_rate(sample_rate_hz).segment_len;
    let mut powers = Vec::with_capacity(segments);
    for s in 0..segments {
        let psd = welch_psd(&x[s * len..(s + 1) * len], sample_rate_hz, seg_len, 0.5)?;
        powers.push(psd.total_power());
    }
    powers.sort_by(f64::total_cmp);
    Ok(power_db(crate::features::percentile_sorted(&powers, 0.5)))
}

/// Simulates a sweep over `config.carriers_mhz` on the host `map`.
pub fn run_sweep(map: &HostEmissionMap, config: &SweepConfig) -> Result<BandSweep> {
    if config.carriers_mhz.is_empty() {
        return Err(Error::Empty("sweep carriers"));
    }
    let ctx = CycleContext::neutral(0);
    let mut entries = Vec::new();
    for (ci, &carrier) in config.carriers_mhz.iter().enumerate() {
        let ch = map.channel_at(carrier, config.sample_rate_hz, config.pinned);
        for (k, cond) in Condition::ALL.into_iter().enumerate() {
            let profile = calibration_profile(cond, config.dwell_s, config.ram_intensity);
            let seed = derive_seed(config.seed, &[ci as u64, k as u64]);
            let iq = render_stream(&profile, &ch, &ctx, seed)?;
            entries.push(SweepEntry {
                carrier_mhz: carrier,
                condition: cond,
                power_db: median_band_power(&iq, config.segments, config.sample_rate_hz)?,
            });
        }
    }
    Ok(BandSweep { entries, config: Some(config.clone()) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandDelta {
    pub carrier_mhz: f64,
    pub delta_cpu_db: f64,
    pub delta_ram_db: f64,
}

/// `Δ_CPU = P_cpu − P_idle`, `Δ_RAM = P_ram − P_idle` per carrier, ascending.
pub fn band_deltas(sweep: &BandSweep) -> Result<Vec<BandDelta>> {
    let mut out = Vec::new();
    for (carrier, conds) in sweep.table() {
        let get = |c: Condition| {
            conds.get(&c).copied().ok_or(Error::MissingCondition {
                carrier_mhz: carrier.0,
                condition: c.name().to_string(),
            })
        };
        let idle = get(Condition::Idle)?;
        out.push(BandDelta {
            carrier_mhz: carrier.0,
            delta_cpu_db: get(Condition::Cpu)? - idle,
            delta_ram_db: get(Condition::Ram)? - idle,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub carrier_mhz: f64,
    pub delta_cpu_db: f64,
    pub delta_ram_db: f64,
    /// `Δ_RAM − λ·max(Δ_CPU, 0)`.
    pub ram_score_db: f64,
    pub cpu_rank: usize,
    pub ram_rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarrierSelection {
    pub f_cpu_mhz: f64,
    pub f_ram_mhz: f64,
    pub lambda: f64,
    /// Every carrier, in ascending carrier order, with its 1-based ranks.
    pub candidates: Vec<CandidateRow>,
}

fn ranks(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut r = vec![0; scores.len()];
    for (pos, &i) in order.iter().enumerate() {
        r[i] = pos + 1;
    }
    r
}

/// Picks the CPU and RAM carriers. Ties go to the lower carrier.
pub fn select_carriers(deltas: &[BandDelta], lambda: f64) -> Result<CarrierSelection> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("λ = {lambda} must be non-negative")));
    }
    let cpu: Vec<f64> = deltas.iter().map(|d| d.delta_cpu_db).collect();
    let ram: Vec<f64> = deltas.iter().map(|d| d.delta_ram_db - lambda * d.delta_cpu_db.max(0.0)).collect();
    let best = |scores: &[f64], eligible: &dyn Fn(usize) -> bool| {
        (0..scores.len())
            .filter(|&i| eligible(i))
            .fold(None, |b: Option<usize>, i| match b {
                Some(j) if scores[j] >= scores[i] => Some(j),
                _ => Some(i),
            })
    };
    let f_cpu = best(&cpu, &|i| cpu[i] > 0.0)
        .ok_or_else(|| Error::SurveyInconclusive("no carrier with positive Δ_CPU".into()))?;
    let f_ram = best(&ram, &|i| deltas[i].delta_ram_db > 0.0)
        .ok_or_else(|| Error::SurveyInconclusive("no carrier with positive Δ_RAM".into()))?;
    let (rc, rr) = (ranks(&cpu), ranks(&ram));
    Ok(CarrierSelection {
        f_cpu_mhz: deltas[f_cpu].carrier_mhz,
        f_ram_mhz: deltas[f_ram].carrier_mhz,
        lambda,
        candidates: deltas
            .iter()
            .enumerate()
            .map(|(i, d)| CandidateRow {
                carrier_mhz: d.carrier_mhz,
                delta_cpu_db: d.delta_cpu_db,
                delta_ram_db: d.delta_ram_db,
                ram_score_db: ram[i],
                cpu_rank: rc[i],
                ram_rank: rr[i],
            })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GovernorEntry {
    pub carrier_mhz: f64,
    /// Population variance of the three condition powers, dB².
    pub variance_pinned_db2: f64,
    pub variance_unpinned_db2: f64,
    pub ratio: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GovernorReport {
    pub threshold: f64,
    pub variance_floor_db2: f64,
    pub entries: Vec<GovernorEntry>,
}

impl GovernorReport {
    pub fn flagged(&self) -> Vec<f64> {
        self.entries.iter().filter(|e| e.flagged).map(|e| e.carrier_mhz).collect()
    }
}

fn condition_variance(conds: &BTreeMap<Condition, f64>) -> f64 {
    let v: Vec<f64> = conds.values().copied().collect();
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

/// Flags carriers whose cross-condition power variance collapses, by at
/// least `threshold`×, when the governor is pinned.
pub fn governor_diagnosis(
    pinned: &BandSweep,
    unpinned: &BandSweep,
    threshold: f64,
    variance_floor_db2: f64,
) -> Result<GovernorReport> {
    let (p, u) = (pinned.table(), unpinned.table());
    if p.keys().ne(u.keys()) {
        return Err(Error::InvalidArgument("pinned and unpinned sweeps cover different carriers".into()));
    }
    let entries = p
        .iter()
        .zip(&u)
        .map(|((carrier, pc), (_, uc))| {
            let (vp, vu) = (condition_variance(pc), condition_variance(uc));
            let ratio = vu.max(variance_floor_db2) / vp.max(variance_floor_db2);
            GovernorEntry {
                carrier_mhz: carrier.0,
                variance_pinned_db2: vp,
                variance_unpinned_db2: vu,
                ratio,
                flagged: ratio >= threshold,
            }
        })
        .collect();
    Ok(GovernorReport { threshold, variance_floor_db2, entries })
}

fn csv_writer(path: &Path, config_hash: Option<&str>) -> Result<csv::Writer<std::fs::File>> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    if let Some(h) = config_hash {
        writeln!(f, "# config_hash={h}").map_err(|e| Error::io(path, e))?;
    }
    Ok(csv::Writer::from_writer(f))
}

/// Writes `carrier_mhz,condition,power_db` rows, preceded by a
/// `# config_hash=` comment line when a hash is given.
pub fn write_sweep_csv(path: &Path, sweep: &BandSweep, config_hash: Option<&str>) -> Result<()> {
    let mut w = csv_writer(path, config_hash)?;
    for e in &sweep.entries {
        w.serialize(e).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sweep_csv(path: &Path) -> Result<BandSweep> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let headers = r.headers().map_err(|e| Error::parse(path, e.to_string()))?.clone();
    if headers.iter().ne(["carrier_mhz", "condition", "power_db"]) {
        return Err(Error::parse(path, "expected header `carrier_mhz,condition,power_db`"));
    }
    let entries = r
        .deserialize()
        .collect::<std::result::Result<Vec<SweepEntry>, _>>()
        .map_err(|e| Error::parse(path, e.to_string()))?;
    Ok(BandSweep::from_entries(entries))
}

/// Ranking table, one row per carrier.
pub fn write_ranking_csv(path: &Path, selection: &CarrierSelection, config_hash: Option<&str>) -> Result<()> {
    let mut w = csv_writer(path, config_hash)?;
    for row in &selection.candidates {
        w.serialize(row).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
