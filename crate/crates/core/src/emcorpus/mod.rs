//! Synthetic dual-receiver emanation corpus.
//!
//! A receiver tuned to a carrier sees a noisy projection of the host's
//! aggregate hardware activity: every component `j` emits a carrier-local
//! process `E_j(t)` whose amplitude follows its switching activity, the
//! receiver applies a placement-dependent coupling `H_r`, and receiver noise
//! `N_r(t)` is added before 8-bit quantization:
//!
//! ```text
//! X_r(t) = H_r · Σ_j E_j(t) + N_r(t)
//! ```
//!
//! [`render_record`] instantiates that model for one skill execution,
//! [`render_workflow`] chains records for a skill sequence, and the
//! [`io`] submodule persists records in the raw interleaved int8 layout.

mod render;

pub mod io;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

pub use render::{render_record, render_stream, render_workflow, AttackOverlay};

use crate::error::{Error, Result};

/// Sample rate of the reference capture setup (20 MS/s).
pub const REFERENCE_SAMPLE_RATE_HZ: f64 = 20e6;
/// Lowest sample rate supported for desk-scale corpora.
pub const MIN_SAMPLE_RATE_HZ: f64 = 1e6;

/// Hardware component that contributes an emission.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Cpu,
    Dram,
    Storage,
    Network,
    Idle,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Cpu,
        Component::Dram,
        Component::Storage,
        Component::Network,
        Component::Idle,
    ];

    pub fn index(self) -> usize {
        match self {
            Component::Cpu => 0,
            Component::Dram => 1,
            Component::Storage => 2,
            Component::Network => 3,
            Component::Idle => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Cpu => "cpu",
            Component::Dram => "dram",
            Component::Storage => "storage",
            Component::Network => "network",
            Component::Idle => "idle",
        }
    }
}

/// Which of the two receivers a stream belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Receiver {
    CpuBand,
    RamBand,
}

impl Receiver {
    pub const BOTH: [Receiver; 2] = [Receiver::CpuBand, Receiver::RamBand];

    pub fn index(self) -> usize {
        match self {
            Receiver::CpuBand => 0,
            Receiver::RamBand => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Receiver::CpuBand => "cpu_band",
            Receiver::RamBand => "ram_band",
        }
    }

    pub fn from_name(s: &str) -> Option<Receiver> {
        match s {
            "cpu_band" => Some(Receiver::CpuBand),
            "ram_band" => Some(Receiver::RamBand),
            _ => None,
        }
    }
}

/// Step of a piecewise-constant switching-activity series: `alpha` holds from
/// `start_s` until the next segment starts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ActivitySegment {
    pub start_s: f64,
    pub alpha: f64,
}

/// Switching activity of one component over a skill, plus how strongly the
/// component couples into each receiver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ComponentActivity {
    pub component: Component,
    pub segments: Vec<ActivitySegment>,
    /// Coupling weight per receiver, indexed by [`Receiver::index`].
    pub carrier_affinity: [f64; 2],
}

impl ComponentActivity {
    pub fn constant(component: Component, alpha: f64, carrier_affinity: [f64; 2]) -> Self {
        ComponentActivity {
            component,
            segments: vec![ActivitySegment {
                start_s: 0.0,
                alpha,
            }],
            carrier_affinity,
        }
    }

    pub fn piecewise(
        component: Component,
        segments: Vec<ActivitySegment>,
        carrier_affinity: [f64; 2],
    ) -> Self {
        ComponentActivity {
            component,
            segments,
            carrier_affinity,
        }
    }

    /// Activity at time `t` (seconds from record start).
    pub fn alpha_at(&self, t: f64) -> f64 {
        let idx = self.segments.partition_point(|s| s.start_s <= t);
        if idx == 0 {
            0.0
        } else {
            self.segments[idx - 1].alpha
        }
    }

    pub fn max_alpha(&self) -> f64 {
        self.segments.iter().map(|s| s.alpha).fold(0.0, f64::max)
    }

    fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} activity has no segments",
                self.component.name()
            )));
        }
        if self.segments[0].start_s > 0.0 {
            return Err(Error::InvalidArgument(format!(
                "{} activity does not start at t=0",
                self.component.name()
            )));
        }
        for w in self.segments.windows(2) {
            if w[1].start_s < w[0].start_s {
                return Err(Error::InvalidArgument(format!(
                    "{} activity segments out of order",
                    self.component.name()
                )));
            }
        }
        for s in &self.segments {
            if !(0.0..=1.0).contains(&s.alpha) {
                return Err(Error::InvalidArgument(format!(
                    "{} activity alpha {} outside [0,1]",
                    self.component.name(),
                    s.alpha
                )));
            }
        }
        if self.carrier_affinity.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "{} carrier affinity must be >= 0",
                self.component.name()
            )));
        }
        Ok(())
    }
}

/// On/off burst structure shared by the busy components of a skill.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct BurstModel {
    /// Bursts per second; zero disables bursting.
    pub rate_hz: f64,
    /// Fraction of each burst period spent in the burst.
    pub duty: f64,
    /// Amplitude multiplier inside a burst.
    pub gain: f64,
}

impl BurstModel {
    pub const NONE: BurstModel = BurstModel {
        rate_hz: 0.0,
        duty: 0.0,
        gain: 1.0,
    };
}

impl Default for BurstModel {
    fn default() -> Self {
        BurstModel::NONE
    }
}

/// Generative description of one skill's component activity mix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SkillProfile {
    pub name: String,
    pub duration_s: f64,
    pub components: Vec<ComponentActivity>,
    #[serde(default)]
    pub burst: BurstModel,
}

impl SkillProfile {
    pub fn new(name: impl Into<String>, duration_s: f64) -> Self {
        SkillProfile {
            name: name.into(),
            duration_s,
            components: Vec::new(),
            burst: BurstModel::NONE,
        }
    }

    pub fn with(mut self, activity: ComponentActivity) -> Self {
        self.components.push(activity);
        self
    }

    pub fn with_burst(mut self, burst: BurstModel) -> Self {
        self.burst = burst;
        self
    }

    /// True when no component other than [`Component::Idle`] is ever active.
    pub fn is_idle(&self) -> bool {
        self.components
            .iter()
            .filter(|c| c.component != Component::Idle)
            .all(|c| c.max_alpha() == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "skill `{}` has non-positive duration {}",
                self.name, self.duration_s
            )));
        }
        if !(0.0..=1.0).contains(&self.burst.duty) {
            return Err(Error::InvalidArgument(format!(
                "skill `{}` burst duty {} outside [0,1]",
                self.name, self.burst.duty
            )));
        }
        if self.burst.rate_hz < 0.0 || self.burst.gain < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "skill `{}` has negative burst parameters",
                self.name
            )));
        }
        for c in &self.components {
            c.validate()?;
        }
        Ok(())
    }
}

/// Spectral family of a component's emission around the carrier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmissionKind {
    /// Band-limited noise.
    Noise,
    /// Sparse impulses (probability per sample) through the band filter.
    Impulsive { density: f64 },
    /// Clock-like carrier-local tone.
    Tone,
}

/// Where a component's emission sits inside the receiver band, as fractions
/// of the sample rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct EmissionShape {
    pub offset_frac: f64,
    pub bandwidth_frac: f64,
    pub kind: EmissionKind,
}

impl EmissionShape {
    /// CPU narrow, DRAM mid, storage impulsive, network mid-narrow, idle a
    /// clock tone.
    pub fn default_for(component: Component) -> Self {
        match component {
            Component::Cpu => EmissionShape {
                offset_frac: 0.10,
                bandwidth_frac: 0.02,
                kind: EmissionKind::Noise,
            },
            Component::Dram => EmissionShape {
                offset_frac: -0.18,
                bandwidth_frac: 0.08,
                kind: EmissionKind::Noise,
            },
            Component::Storage => EmissionShape {
                offset_frac: 0.30,
                bandwidth_frac: 0.12,
                kind: EmissionKind::Impulsive { density: 0.004 },
            },
            Component::Network => EmissionShape {
                offset_frac: -0.36,
                bandwidth_frac: 0.04,
                kind: EmissionKind::Noise,
            },
            Component::Idle => EmissionShape {
                offset_frac: -0.05,
                bandwidth_frac: 0.0,
                kind: EmissionKind::Tone,
            },
        }
    }

    pub fn defaults() -> [EmissionShape; 5] {
        Component::ALL.map(EmissionShape::default_for)
    }
}

/// One receiver's channel: carrier, coupling per component, noise floor and
/// the optional governor frequency-modulation artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ChannelModel {
    pub receiver: Receiver,
    pub carrier_mhz: f64,
    pub sample_rate_hz: f64,
    /// `H_r` per component, indexed by [`Component::index`].
    pub gain_per_component: [f64; 5],
    /// AWGN standard deviation per I/Q rail, on the signed 8-bit scale.
    pub noise_floor: f64,
    #[serde(default)]
    pub governor_fm_enabled: bool,
    #[serde(default)]
    pub governor_fm_depth_hz: f64,
    #[serde(default)]
    pub governor_fm_rate_hz: f64,
    #[serde(default = "EmissionShape::defaults")]
    pub emission: [EmissionShape; 5],
}

impl ChannelModel {
    pub fn new(receiver: Receiver, carrier_mhz: f64, sample_rate_hz: f64) -> Self {
        ChannelModel {
            receiver,
            carrier_mhz,
            sample_rate_hz,
            gain_per_component: [0.0; 5],
            noise_floor: 0.0,
            governor_fm_enabled: false,
            governor_fm_depth_hz: 0.0,
            governor_fm_rate_hz: 0.0,
            emission: EmissionShape::defaults(),
        }
    }

    pub fn with_gain(mut self, component: Component, gain: f64) -> Self {
        self.gain_per_component[component.index()] = gain;
        self
    }

    pub fn with_noise(mut self, noise_floor: f64) -> Self {
        self.noise_floor = noise_floor;
        self
    }

    pub fn with_governor(mut self, depth_hz: f64, rate_hz: f64) -> Self {
        self.governor_fm_enabled = true;
        self.governor_fm_depth_hz = depth_hz;
        self.governor_fm_rate_hz = rate_hz;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_floor >= 0.0) {
            return Err(Error::InvalidArgument("noise_floor must be >= 0".into()));
        }
        if !(self.carrier_mhz > 0.0) {
            return Err(Error::InvalidArgument("carrier_mhz must be > 0".into()));
        }
        if !(self.sample_rate_hz >= MIN_SAMPLE_RATE_HZ * 0.999_999) {
            return Err(Error::InvalidArgument(format!(
                "sample rate {} below the 1 MS/s desk-scale minimum",
                self.sample_rate_hz
            )));
        }
        if self.gain_per_component.iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::InvalidArgument("component gains must be >= 0".into()));
        }
        Ok(())
    }
}

/// AR(1) temperature process: `T[k+1] = mean + coeff·(T[k] − mean) + σ·ε`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TemperatureModel {
    pub initial_c: f64,
    pub mean_c: f64,
    pub ar_coeff: f64,
    pub innovation_std_c: f64,
    pub sample_rate_hz: f64,
}

impl Default for TemperatureModel {
    fn default() -> Self {
        TemperatureModel {
            initial_c: 45.0,
            mean_c: 45.0,
            ar_coeff: 0.98,
            innovation_std_c: 0.05,
            sample_rate_hz: 2.0,
        }
    }
}

/// Nuisance state shared by every record of one collection cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleContext {
    pub cycle_index: u32,
    /// Per-receiver coupling offset in dB.
    pub gain_offset_db: [f64; 2],
    /// Per-receiver (I, Q) DC offset on the 8-bit scale.
    pub dc_offset: [[f64; 2]; 2],
    pub temperature: TemperatureModel,
    /// Fractional emission gain change per °C away from `reference_c`.
    pub thermal_gain_per_c: f64,
    pub reference_c: f64,
}

impl CycleContext {
    pub fn neutral(cycle_index: u32) -> Self {
        CycleContext {
            cycle_index,
            gain_offset_db: [0.0; 2],
            dc_offset: [[0.0; 2]; 2],
            temperature: TemperatureModel::default(),
            thermal_gain_per_c: 0.0,
            reference_c: 45.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gain_offset_db.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidArgument("gain offset must be finite".into()));
        }
        if !(self.temperature.ar_coeff.abs() < 1.0) {
            return Err(Error::InvalidArgument(
                "AR(1) coefficient magnitude must be < 1".into(),
            ));
        }
        if !(self.temperature.sample_rate_hz > 0.0) {
            return Err(Error::InvalidArgument(
                "temperature sample rate must be > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    WorkStart,
    AttackBegin,
    PayloadStart,
    PayloadEnd,
    AttackEnd,
    WorkEnd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t_s: f64,
    pub kind: EventKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSample {
    pub t_s: f64,
    pub celsius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordLabel {
    Background,
    Normal,
    Attack,
}

impl RecordLabel {
    pub const ALL: [RecordLabel; 3] = [RecordLabel::Background, RecordLabel::Normal, RecordLabel::Attack];

    pub fn name(self) -> &'static str {
        match self {
            RecordLabel::Background => "background",
            RecordLabel::Normal => "normal",
            RecordLabel::Attack => "attack",
        }
    }
}

/// One dual-receiver capture with its event and temperature sidecars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IqRecord {
    pub record_id: String,
    pub skill_name: String,
    pub cycle_index: u32,
    /// Session time of the first sample; contiguous across a workflow.
    pub start_time_s: f64,
    pub sample_rate_hz: f64,
    pub carriers_mhz: [f64; 2],
    /// Interleaved I,Q int8 per receiver, indexed by [`Receiver::index`].
    pub streams: [Vec<i8>; 2],
    pub events: Vec<Event>,
    pub temperature: Vec<TemperatureSample>,
    pub label: RecordLabel,
    pub attack_skill: Option<String>,
}

impl IqRecord {
    pub fn n_samples(&self) -> usize {
        self.streams[0].len() / 2
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.sample_rate_hz
    }

    pub fn stream(&self, receiver: Receiver) -> &[i8] {
        &self.streams[receiver.index()]
    }

    pub fn event_time(&self, kind: EventKind) -> Option<f64> {
        self.events.iter().find(|e| e.kind == kind).map(|e| e.t_s)
    }

    /// Payload interval when the record carries an attack overlay.
    pub fn payload_interval(&self) -> Option<(f64, f64)> {
        Some((
            self.event_time(EventKind::PayloadStart)?,
            self.event_time(EventKind::PayloadEnd)?,
        ))
    }

    /// Temperature at `t` (record-local seconds), linearly interpolated from
    /// the sidecar and held constant beyond its ends.
    pub fn temperature_at(&self, t: f64) -> f64 {
        interpolate_temperature(&self.temperature, t)
    }

    /// Checks the record-level invariants.
    pub fn validate(&self) -> Result<()> {
        if self.streams[0].len() != self.streams[1].len() {
            return Err(Error::InvalidArgument(format!(
                "record `{}` receiver streams differ in length",
                self.record_id
            )));
        }
        if self.streams[0].len() % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "record `{}` has a dangling I sample",
                self.record_id
            )));
        }
        let dur = self.duration_s();
        let mut prev = f64::NEG_INFINITY;
        for e in &self.events {
            if e.t_s < prev {
                return Err(Error::InvalidArgument(format!(
                    "record `{}` events are not time-ordered",
                    self.record_id
                )));
            }
            if e.t_s < 0.0 || e.t_s > dur + 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "record `{}` event {:?} at {} outside [0, {}]",
                    self.record_id, e.kind, e.t_s, dur
                )));
            }
            prev = e.t_s;
        }
        if let Some((a, b)) = self.payload_interval() {
            if !(a < b) {
                return Err(Error::InvalidArgument(format!(
                    "record `{}` payload_start >= payload_end",
                    self.record_id
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn interpolate_temperature(trace: &[TemperatureSample], t: f64) -> f64 {
    match trace {
        [] => f64::NAN,
        [only] => only.celsius,
        _ => {
            let idx = trace.partition_point(|s| s.t_s <= t);
            if idx == 0 {
                trace[0].celsius
            } else if idx >= trace.len() {
                trace[trace.len() - 1].celsius
            } else {
                let a = trace[idx - 1];
                let b = trace[idx];
                let span = b.t_s - a.t_s;
                if span <= 0.0 {
                    b.celsius
                } else {
                    a.celsius + (b.celsius - a.celsius) * (t - a.t_s) / span
                }
            }
        }
    }
}

/// Derives an independent stream seed from a master seed and a tag path.
pub(crate) fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ 0x5EED_CAFE_F00D_D00D);
    for &t in tags {
        h = splitmix(h ^ splitmix(t.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_is_piecewise_constant() {
        let a = ComponentActivity::piecewise(
            Component::Cpu,
            vec![
                ActivitySegment { start_s: 0.0, alpha: 0.2 },
                ActivitySegment { start_s: 1.0, alpha: 0.8 },
            ],
            [1.0, 0.0],
        );
        assert_eq!(a.alpha_at(0.0), 0.2);
        assert_eq!(a.alpha_at(0.999), 0.2);
        assert_eq!(a.alpha_at(1.0), 0.8);
        assert_eq!(a.alpha_at(100.0), 0.8);
    }

    #[test]
    fn profile_validation_rejects_bad_inputs() {
        assert!(SkillProfile::new("x", 0.0).validate().is_err());
        let bad_alpha = SkillProfile::new("x", 1.0).with(ComponentActivity::constant(
            Component::Cpu,
            1.5,
            [1.0, 1.0],
        ));
        assert!(bad_alpha.validate().is_err());
        let bad_duty = SkillProfile::new("x", 1.0).with_burst(BurstModel {
            rate_hz: 1.0,
            duty: 2.0,
            gain: 1.0,
        });
        assert!(bad_duty.validate().is_err());
    }

    #[test]
    fn temperature_interpolates_linearly() {
        let trace = vec![
            TemperatureSample { t_s: 0.0, celsius: 40.0 },
            TemperatureSample { t_s: 1.0, celsius: 42.0 },
        ];
        assert_eq!(interpolate_temperature(&trace, 0.5), 41.0);
        assert_eq!(interpolate_temperature(&trace, -1.0), 40.0);
        assert_eq!(interpolate_temperature(&trace, 9.0), 42.0);
    }

    #[test]
    fn derived_seeds_differ_per_tag() {
        let a = derive_seed(42, &[1, 2]);
        let b = derive_seed(42, &[2, 1]);
        let c = derive_seed(43, &[1, 2]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(42, &[1, 2]));
    }
}
