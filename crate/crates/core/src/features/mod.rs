//! Window features: the 320-dimensional V10 vector.
//!
//! Layout, per receiver (110 values, `cpu_band` first, then `ram_band`):
//!
//! | group | width | contents |
//! |---|---|---|
//! | `band_energy` | 64 | log power of 64 equal-width bands over the sampled bandwidth, dB, floored at −120 |
//! | `shape` | 10 | centroid, bandwidth, flatness, rolloff-85, rolloff-95, skewness, kurtosis, peak frequency, peak-to-mean (dB), normalized entropy |
//! | `envelope` | 8 | mean, std, skewness, excess kurtosis, p10, p50, p90, crest factor of the RMS envelope |
//! | `autocorr` | 16 | envelope autocorrelation at lags 1..=16 |
//! | `burst` | 12 | threshold-crossing statistics at median + k·MAD, see [`BURST_STATS`] |
//!
//! Cross-receiver (100 values):
//!
//! | group | width | contents |
//! |---|---|---|
//! | `band_diff` | 64 | cpu minus ram band energy, dB |
//! | `envelope_xcorr` | 17 | normalized envelope cross-correlation at lags −8..=8 |
//! | `iq_corr` | 1 | magnitude of the zero-lag normalized complex correlation |
//! | `phase` | 18 | circular mean (9) then circular variance (9) of the cross-spectral phase in 9 sub-bands |
//!
//! The envelope is the RMS amplitude over frames of `envelope_frame`
//! samples. Frequencies are relative to the carrier, in Hz.

pub mod cache;
pub mod welch;

use std::sync::OnceLock;

use rustfft::num_complex::{Complex32, Complex64};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::emcorpus::{RecordLabel, REFERENCE_SAMPLE_RATE_HZ};
use crate::error::{Error, Result};
pub use welch::{iq_to_complex, power_db, welch_psd, PsdEstimate, DB_FLOOR};

pub const V10_DIM: usize = 320;
pub const N_BANDS: usize = 64;
pub const AUTOCORR_LAGS: usize = 16;
pub const XCORR_MAX_LAG: usize = 8;
pub const PHASE_SUBBANDS: usize = 9;

/// Welch segment length at the reference sample rate.
pub const REFERENCE_SEGMENT_LEN: usize = 4096;
const MIN_SEGMENT_LEN: usize = 64;

pub const SHAPE_FEATURES: [&str; 10] = [
    "centroid_hz",
    "bandwidth_hz",
    "flatness",
    "rolloff85_hz",
    "rolloff95_hz",
    "skewness",
    "kurtosis",
    "peak_hz",
    "peak_to_mean_db",
    "entropy",
];

pub const ENVELOPE_FEATURES: [&str; 8] =
    ["mean", "std", "skewness", "kurtosis", "p10", "p50", "p90", "crest"];

pub const BURST_STATS: [&str; 12] = [
    "rate_hz",
    "active_fraction",
    "duration_mean_s",
    "duration_std_s",
    "duration_max_s",
    "gap_mean_s",
    "gap_std_s",
    "peak_over_median",
    "energy_fraction",
    "threshold_over_median",
    "onset_interval_cv",
    "first_onset_fraction",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate_hz: f64,
    pub segment_len: usize,
    pub overlap: f64,
    /// Samples per envelope frame.
    pub envelope_frame: usize,
    /// Burst threshold is `median + burst_k · MAD` of the envelope.
    pub burst_k: f64,
}

impl FeatureConfig {
    /// Defaults scaled to `sample_rate_hz`: the 4096-sample Welch segment at
    /// 20 MS/s shrinks to the nearest power of two, and envelope frames are
    /// 1 ms long.
    pub fn for_sample_rate(sample_rate_hz: f64) -> Self {
        let ideal = REFERENCE_SEGMENT_LEN as f64 * sample_rate_hz / REFERENCE_SAMPLE_RATE_HZ;
        let segment_len = (2f64.powf(ideal.max(1.0).log2().round()) as usize).max(MIN_SEGMENT_LEN);
        FeatureConfig {
            sample_rate_hz,
            segment_len,
            overlap: 0.5,
            envelope_frame: ((sample_rate_hz * 1e-3).round() as usize).max(1),
            burst_k: 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.sample_rate_hz > 0.0) {
            return bad(format!("sample rate {} must be positive", self.sample_rate_hz));
        }
        if self.segment_len < N_BANDS || self.segment_len % N_BANDS != 0 {
            return bad(format!(
                "segment length {} must be a positive multiple of {N_BANDS}",
                self.segment_len
            ));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return bad(format!("overlap {} outside [0, 1)", self.overlap));
        }
        if self.envelope_frame == 0 {
            return bad("envelope frame must be at least one sample".into());
        }
        if !(self.burst_k >= 0.0) {
            return bad(format!("burst k {} must be non-negative", self.burst_k));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        crate::config::hash_json(self)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl FeatureGroup {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Named, contiguous index ranges covering the whole vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub version: String,
    pub groups: Vec<FeatureGroup>,
}

impl FeatureLayout {
    pub fn v10() -> &'static FeatureLayout {
        static LAYOUT: OnceLock<FeatureLayout> = OnceLock::new();
        LAYOUT.get_or_init(|| {
            let mut groups = Vec::new();
            let mut at = 0;
            let mut push = |name: String, len: usize| {
                groups.push(FeatureGroup { name, start: at, end: at + len });
                at += len;
            };
            for rx in ["cpu_band", "ram_band"] {
                push(format!("{rx}.band_energy"), N_BANDS);
                push(format!("{rx}.shape"), SHAPE_FEATURES.len());
                push(format!("{rx}.envelope"), ENVELOPE_FEATURES.len());
                push(format!("{rx}.autocorr"), AUTOCORR_LAGS);
                push(format!("{rx}.burst"), BURST_STATS.len());
            }
            push("cross.band_diff".into(), N_BANDS);
            push("cross.envelope_xcorr".into(), 2 * XCORR_MAX_LAG + 1);
            push("cross.iq_corr".into(), 1);
            push("cross.phase".into(), 2 * PHASE_SUBBANDS);
            FeatureLayout { version: "v10".into(), groups }
        })
    }

    pub fn dim(&self) -> usize {
        self.groups.last().map_or(0, |g| g.end)
    }

    pub fn group(&self, name: &str) -> Option<&FeatureGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn group_of(&self, index: usize) -> Option<&FeatureGroup> {
        self.groups.iter().find(|g| (g.start..g.end).contains(&index))
    }

    /// Human-readable name of one feature, e.g. `ram_band.shape.flatness`.
    pub fn feature_name(&self, index: usize) -> String {
        let Some(g) = self.group_of(index) else {
            return format!("f{index}");
        };
        let i = index - g.start;
        let suffix = g.name.rsplit('.').next().unwrap_or("");
        match suffix {
            "shape" => format!("{}.{}", g.name, SHAPE_FEATURES[i]),
            "envelope" => format!("{}.{}", g.name, ENVELOPE_FEATURES[i]),
            "burst" => format!("{}.{}", g.name, BURST_STATS[i]),
            "autocorr" => format!("{}.lag{}", g.name, i + 1),
            "envelope_xcorr" => format!("{}.lag{}", g.name, i as i64 - XCORR_MAX_LAG as i64),
            "phase" if i < PHASE_SUBBANDS => format!("{}.mean{}", g.name, i),
            "phase" => format!("{}.var{}", g.name, i - PHASE_SUBBANDS),
            "iq_corr" => g.name.clone(),
            _ => format!("{}[{}]", g.name, i),
        }
    }
}

/// Where a feature vector came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowProvenance {
    pub record_id: String,
    pub window_index: usize,
    pub cycle_index: u32,
    pub start_s: f64,
    /// Temperature at the window midpoint.
    pub temperature_c: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub layout: &'static FeatureLayout,
    pub provenance: WindowProvenance,
}

/// Extracts the V10 vector from interleaved int8 slices of both receivers.
pub fn extract_v10(cpu: &[i8], ram: &[i8], config: &FeatureConfig) -> Result<Vec<f64>> {
    if cpu.len() != ram.len() {
        return Err(Error::DimensionMismatch { expected: cpu.len(), got: ram.len() });
    }
    extract_v10_complex(&iq_to_complex(cpu), &iq_to_complex(ram), config)
}

/// [`extract_v10`] with provenance attached.
pub fn extract_window(
    cpu: &[i8],
    ram: &[i8],
    config: &FeatureConfig,
    provenance: WindowProvenance,
) -> Result<FeatureVector> {
    Ok(FeatureVector {
        values: extract_v10(cpu, ram, config)?,
        layout: FeatureLayout::v10(),
        provenance,
    })
}

/// Extracts the V10 vector from complex slices.
pub fn extract_v10_complex(
    cpu: &[Complex32],
    ram: &[Complex32],
    config: &FeatureConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    if cpu.len() != ram.len() {
        return Err(Error::DimensionMismatch { expected: cpu.len(), got: ram.len() });
    }
    if cpu.len() < config.segment_len {
        return Err(Error::InvalidArgument(format!(
            "window of {} samples is shorter than one {}-sample segment",
            cpu.len(),
            config.segment_len
        )));
    }
    let spec = dual_spectra(cpu, ram, config);
    let env = [envelope(cpu, config.envelope_frame), envelope(ram, config.envelope_frame)];
    let frame_s = env_frame_len(cpu.len(), config.envelope_frame) as f64 / config.sample_rate_hz;
    let freqs = welch::bin_freqs(config.segment_len, config.sample_rate_hz);

    let mut out = Vec::with_capacity(V10_DIM);
    let mut bands = [[0f64; N_BANDS]; 2];
    for rx in 0..2 {
        bands[rx] = band_energies(&spec.power[rx]);
        out.extend_from_slice(&bands[rx]);
        out.extend_from_slice(&spectral_shape(&spec.power[rx], &freqs));
        out.extend_from_slice(&envelope_stats(&env[rx]));
        for lag in 1..=AUTOCORR_LAGS {
            out.push(autocorr(&env[rx], lag));
        }
        out.extend_from_slice(&burst_stats(&env[rx], config.burst_k, frame_s));
    }
    for b in 0..N_BANDS {
        out.push(bands[0][b] - bands[1][b]);
    }
    for lag in -(XCORR_MAX_LAG as i64)..=XCORR_MAX_LAG as i64 {
        out.push(xcorr(&env[0], &env[1], lag));
    }
    out.push(iq_corr(cpu, ram));
    let (means, vars): (Vec<f64>, Vec<f64>) = spec.phase.iter().map(|p| p.stats()).unzip();
    out.extend(means);
    out.extend(vars);

    debug_assert_eq!(out.len(), V10_DIM);
    check_finite(&out)?;
    Ok(out)
}

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFiniteFeature {
            group: FeatureLayout::v10().group_of(i).map_or("unknown", |g| g.name.as_str()),
            index: i,
            value: values[i],
        }),
    }
}

#[derive(Clone, Copy, Default)]
struct PhaseAcc {
    cos: f64,
    sin: f64,
    n: usize,
}

impl PhaseAcc {
    fn push(&mut self, c: Complex64) {
        let r = c.norm();
        if r > 0.0 {
            self.cos += c.re / r;
            self.sin += c.im / r;
            self.n += 1;
        }
    }

    /// Circular mean and variance `1 − R`; no defined phase gives (0, 1).
    fn stats(&self) -> (f64, f64) {
        if self.n == 0 {
            return (0.0, 1.0);
        }
        let (c, s) = (self.cos / self.n as f64, self.sin / self.n as f64);
        let r = c.hypot(s).min(1.0);
        let mean = if r > 0.0 { s.atan2(c) } else { 0.0 };
        (mean, 1.0 - r)
    }
}

struct DualSpectra {
    power: [Vec<f64>; 2],
    phase: [PhaseAcc; PHASE_SUBBANDS],
}

/// Welch spectra of both receivers plus per-segment cross-spectral phase in
/// each sub-band, in a single pass.
fn dual_spectra(cpu: &[Complex32], ram: &[Complex32], config: &FeatureConfig) -> DualSpectra {
    let l = config.segment_len;
    let window = welch::hann(l);
    let wsum: f64 = window.iter().map(|w| (*w as f64).powi(2)).sum();
    let fft = welch::fft_plan(l);
    let step = welch::segment_step(l, config.overlap);
    let n_seg = welch::segment_count(cpu.len(), l, config.overlap);
    let zero = Complex32::new(0.0, 0.0);
    let mut bufs = [vec![zero; l], vec![zero; l]];
    let mut scratch = vec![zero; fft.get_inplace_scratch_len()];
    let mut acc = [vec![0f64; l], vec![0f64; l]];
    let mut phase = [PhaseAcc::default(); PHASE_SUBBANDS];
    let edges: Vec<usize> = (0..=PHASE_SUBBANDS).map(|b| b * l / PHASE_SUBBANDS).collect();
    for s in 0..n_seg {
        for (buf, src) in bufs.iter_mut().zip([cpu, ram]) {
            let seg = &src[s * step..s * step + l];
            for ((b, x), w) in buf.iter_mut().zip(seg).zip(&window) {
                *b = *x * *w;
            }
            fft.process_with_scratch(buf, &mut scratch);
        }
        let mut cross = [Complex64::new(0.0, 0.0); PHASE_SUBBANDS];
        let mut sub = 0;
        for i in 0..l {
            // `i` walks ascending frequency; `k` is the raw FFT bin.
            let k = (i + l - l / 2) % l;
            let (x, y) = (bufs[0][k], bufs[1][k]);
            acc[0][i] += x.norm_sqr() as f64;
            acc[1][i] += y.norm_sqr() as f64;
            while i >= edges[sub + 1] {
                sub += 1;
            }
            let xc = Complex64::new(x.re as f64, x.im as f64);
            let yc = Complex64::new(y.re as f64, y.im as f64);
            cross[sub] += xc * yc.conj();
        }
        for (p, c) in phase.iter_mut().zip(cross) {
            p.push(c);
        }
    }
    let norm = 1.0 / (n_seg as f64 * l as f64 * wsum);
    let [a, b] = acc;
    DualSpectra {
        power: [a.into_iter().map(|v| v * norm).collect(), b.into_iter().map(|v| v * norm).collect()],
        phase,
    }
}

fn band_energies(power: &[f64]) -> [f64; N_BANDS] {
    let per = power.len() / N_BANDS;
    let mut out = [0f64; N_BANDS];
    for (b, o) in out.iter_mut().enumerate() {
        *o = power_db(power[b * per..(b + 1) * per].iter().sum());
    }
    out
}

fn spectral_shape(power: &[f64], freqs: &[f64]) -> [f64; 10] {
    let total: f64 = power.iter().sum();
    if !(total > 0.0) {
        // centroid, bandwidth, flatness, rolloffs, moments, peak, ratio, entropy
        return [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
    }
    let n = power.len() as f64;
    let centroid = power.iter().zip(freqs).map(|(p, f)| p * f).sum::<f64>() / total;
    let moment = |k: i32| {
        power
            .iter()
            .zip(freqs)
            .map(|(p, f)| p * (f - centroid).powi(k))
            .sum::<f64>()
            / total
    };
    let var = moment(2);
    let bandwidth = var.sqrt();
    let (skew, kurt) = if var > 0.0 {
        (moment(3) / var.powf(1.5), moment(4) / (var * var))
    } else {
        (0.0, 0.0)
    };
    // Relative floor keeps flatness scale-invariant with empty bins.
    let floor = total * 1e-15;
    let log_mean = power.iter().map(|p| p.max(floor).ln()).sum::<f64>() / n;
    let flatness = (log_mean.exp() / (total / n)).min(1.0);
    let rolloff = |frac: f64| {
        let target = frac * total;
        let mut cum = 0.0;
        for (p, f) in power.iter().zip(freqs) {
            cum += p;
            if cum >= target {
                return *f;
            }
        }
        *freqs.last().unwrap()
    };
    let mut peak = 0;
    for (i, p) in power.iter().enumerate() {
        if *p > power[peak] {
            peak = i;
        }
    }
    let peak_to_mean = 10.0 * (power[peak] / (total / n)).log10();
    let entropy = -power
        .iter()
        .map(|p| p / total)
        .filter(|q| *q > 0.0)
        .map(|q| q * q.ln())
        .sum::<f64>()
        / n.ln();
    [
        centroid,
        bandwidth,
        flatness,
        rolloff(0.85),
        rolloff(0.95),
        skew,
        kurt,
        freqs[peak],
        peak_to_mean,
        entropy,
    ]
}

fn env_frame_len(n: usize, frame: usize) -> usize {
    frame.min(n).max(1)
}

/// RMS amplitude per frame; a trailing partial frame is dropped.
fn envelope(x: &[Complex32], frame: usize) -> Vec<f64> {
    let f = env_frame_len(x.len(), frame);
    x.chunks_exact(f)
        .map(|c| (c.iter().map(|v| v.norm_sqr() as f64).sum::<f64>() / f as f64).sqrt())
        .collect()
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Linear-interpolated percentile of sorted data, `q` in [0, 1].
pub(crate) fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn sorted(x: &[f64]) -> Vec<f64> {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn envelope_stats(e: &[f64]) -> [f64; 8] {
    let (m, sd) = mean_std(e);
    let (skew, kurt) = if sd > 0.0 {
        let n = e.len() as f64;
        (
            e.iter().map(|v| ((v - m) / sd).powi(3)).sum::<f64>() / n,
            e.iter().map(|v| ((v - m) / sd).powi(4)).sum::<f64>() / n - 3.0,
        )
    } else {
        (0.0, 0.0)
    };
    let s = sorted(e);
    let rms = (e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64).sqrt();
    let crest = if rms > 0.0 { s[s.len() - 1] / rms } else { 0.0 };
    [
        m,
        sd,
        skew,
        kurt,
        percentile_sorted(&s, 0.1),
        percentile_sorted(&s, 0.5),
        percentile_sorted(&s, 0.9),
        crest,
    ]
}

fn autocorr(e: &[f64], lag: usize) -> f64 {
    xcorr(e, e, lag as i64)
}

/// Biased normalized cross-correlation `Σ a'[m]·b'[m+lag] / sqrt(Σa'² Σb'²)`
/// of mean-removed sequences; zero-variance input gives 0.
fn xcorr(a: &[f64], b: &[f64], lag: i64) -> f64 {
    let n = a.len().min(b.len());
    if lag.unsigned_abs() as usize >= n {
        return 0.0;
    }
    let (ma, _) = mean_std(&a[..n]);
    let (mb, _) = mean_std(&b[..n]);
    let da: f64 = a[..n].iter().map(|v| (v - ma).powi(2)).sum();
    let db: f64 = b[..n].iter().map(|v| (v - mb).powi(2)).sum();
    let denom = (da * db).sqrt();
    if !(denom > 0.0) {
        return 0.0;
    }
    let mut s = 0.0;
    for m in 0..n {
        let k = m as i64 + lag;
        if (0..n as i64).contains(&k) {
            s += (a[m] - ma) * (b[k as usize] - mb);
        }
    }
    s / denom
}

fn iq_corr(x: &[Complex32], y: &[Complex32]) -> f64 {
    let mut c = Complex64::new(0.0, 0.0);
    let (mut px, mut py) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let a = Complex64::new(a.re as f64, a.im as f64);
        let b = Complex64::new(b.re as f64, b.im as f64);
        c += a * b.conj();
        px += a.norm_sqr();
        py += b.norm_sqr();
    }
    if px > 0.0 && py > 0.0 {
        (c.norm() / (px * py).sqrt()).min(1.0)
    } else {
        0.0
    }
}

fn burst_stats(e: &[f64], k: f64, frame_s: f64) -> [f64; 12] {
    let s = sorted(e);
    let median = percentile_sorted(&s, 0.5);
    let mad = percentile_sorted(&sorted(&e.iter().map(|v| (v - median).abs()).collect::<Vec<_>>()), 0.5);
    let threshold = median + k * mad;
    // Runs of frames strictly above the threshold.
    let mut bursts: Vec<(usize, usize)> = Vec::new();
    let mut start = None;
    for (i, v) in e.iter().enumerate() {
        match (start, *v > threshold) {
            (None, true) => start = Some(i),
            (Some(s0), false) => {
                bursts.push((s0, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s0) = start {
        bursts.push((s0, e.len()));
    }
    let mut out = [0f64; 12];
    if bursts.is_empty() || median <= 0.0 {
        if median > 0.0 {
            out[9] = threshold / median;
        }
        return out;
    }
    let total_s = e.len() as f64 * frame_s;
    let durations: Vec<f64> = bursts.iter().map(|(a, b)| (b - a) as f64 * frame_s).collect();
    let gaps: Vec<f64> = bursts.windows(2).map(|w| (w[1].0 - w[0].1) as f64 * frame_s).collect();
    let onsets: Vec<f64> = bursts.windows(2).map(|w| (w[1].0 - w[0].0) as f64).collect();
    let (dm, dsd) = mean_std(&durations);
    let (gm, gsd) = if gaps.is_empty() { (0.0, 0.0) } else { mean_std(&gaps) };
    let active: usize = bursts.iter().map(|(a, b)| b - a).sum();
    let peak_mean = bursts
        .iter()
        .map(|&(a, b)| e[a..b].iter().cloned().fold(0.0, f64::max))
        .sum::<f64>()
        / bursts.len() as f64;
    let energy: f64 = e.iter().map(|v| v * v).sum();
    let burst_energy: f64 = bursts.iter().flat_map(|&(a, b)| &e[a..b]).map(|v| v * v).sum();
    let onset_cv = if onsets.len() >= 2 {
        let (m, sd) = mean_std(&onsets);
        if m > 0.0 { sd / m } else { 0.0 }
    } else {
        0.0
    };
    out[0] = bursts.len() as f64 / total_s;
    out[1] = active as f64 / e.len() as f64;
    out[2] = dm;
    out[3] = dsd;
    out[4] = durations.iter().cloned().fold(0.0, f64::max);
    out[5] = gm;
    out[6] = gsd;
    out[7] = peak_mean / median;
    out[8] = if energy > 0.0 { burst_energy / energy } else { 0.0 };
    out[9] = threshold / median;
    out[10] = onset_cv;
    out[11] = bursts[0].0 as f64 / e.len() as f64;
    out
}

/// Feature matrix plus per-row provenance and labels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub n_features: usize,
    /// Row-major values.
    pub values: Vec<f64>,
    pub rows: Vec<RowMeta>,
}

/// Provenance and labels of one table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowMeta {
    pub record_id: String,
    pub window_index: u32,
    pub cycle_index: u32,
    pub start_s: f64,
    pub temperature_c: f64,
    pub skill: String,
    pub record_label: RecordLabel,
    /// Window overlaps the attack payload by at least half its length.
    pub attack: bool,
}

impl FeatureTable {
    pub fn new(n_features: usize) -> Self {
        FeatureTable { n_features, values: Vec::new(), rows: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn push(&mut self, values: &[f64], meta: RowMeta) -> Result<()> {
        if values.len() != self.n_features {
            return Err(Error::DimensionMismatch { expected: self.n_features, got: values.len() });
        }
        self.values.extend_from_slice(values);
        self.rows.push(meta);
        Ok(())
    }

    pub fn extend(&mut self, other: &FeatureTable) -> Result<()> {
        if other.n_features != self.n_features {
            return Err(Error::DimensionMismatch { expected: self.n_features, got: other.n_features });
        }
        self.values.extend_from_slice(&other.values);
        self.rows.extend(other.rows.iter().cloned());
        Ok(())
    }

    pub fn select(&self, indices: &[usize]) -> FeatureTable {
        let mut out = FeatureTable::new(self.n_features);
        for &i in indices {
            out.values.extend_from_slice(self.row(i));
            out.rows.push(self.rows[i].clone());
        }
        out
    }

    /// Rows as owned vectors.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.row(i).to_vec()).collect()
    }

    /// Row indices grouped by record id, in first-appearance order.
    pub fn record_groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut pos = std::collections::HashMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            let at = *pos.entry(r.record_id.clone()).or_insert_with(|| {
                out.push((r.record_id.clone(), Vec::new()));
                out.len() - 1
            });
            out[at].1.push(i);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_320_wide_and_contiguous() {
        let l = FeatureLayout::v10();
        assert_eq!(l.dim(), V10_DIM);
        for w in l.groups.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
        assert_eq!(l.group("cpu_band.band_energy").unwrap().start, 0);
        assert_eq!(l.group("ram_band.band_energy").unwrap().start, 110);
        assert_eq!(l.group("cross.band_diff").unwrap().start, 220);
        assert_eq!(l.feature_name(64), "cpu_band.shape.centroid_hz");
        assert_eq!(l.feature_name(319), "cross.phase.var8");
    }

    #[test]
    fn segment_len_scales_with_sample_rate() {
        assert_eq!(FeatureConfig::for_sample_rate(20e6).segment_len, 4096);
        assert_eq!(FeatureConfig::for_sample_rate(1e6).segment_len, 256);
        assert_eq!(FeatureConfig::for_sample_rate(2e6).segment_len, 512);
        assert_eq!(FeatureConfig::for_sample_rate(1e6).envelope_frame, 1000);
    }

    #[test]
    fn percentile_interpolates() {
        let s = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(percentile_sorted(&s, 0.5), 1.5);
        assert_eq!(percentile_sorted(&s, 1.0), 3.0);
    }

    #[test]
    fn burst_stats_find_planted_bursts() {
        let mut e = vec![1.0; 100];
        for i in [10, 11, 50, 51, 52] {
            e[i] = 10.0;
        }
        let b = burst_stats(&e, 3.0, 0.001);
        assert_eq!(b[1], 0.05);
        assert!((b[0] - 2.0 / 0.1).abs() < 1e-9);
        assert!((b[4] - 0.003).abs() < 1e-12);
        assert_eq!(b[11], 0.1);
    }
}
