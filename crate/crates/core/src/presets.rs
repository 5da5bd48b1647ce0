//! Ready-made corpus descriptions.
//!
//! | preset | records | length | purpose |
//! |---|---|---|---|
//! | [`focused3`] | 3 skills × 10 cycles × 5 | 4 s | skill classification under drift |
//! | [`attack20`] | 3 skills + idle + 3 attacks, 6 cycles | 20 s | coarse–fine attack detection |
//!
//! [`experiments`] wraps them into the configs shipped in `configs/`.

use crate::config::{ExperimentConfig, SurveySection};
use crate::emcorpus::{BurstModel, ChannelModel, Component, ComponentActivity, Receiver, SkillProfile};
use crate::pipeline::{CorpusSpec, CycleDrift};
use crate::survey::{HostEmissionMap, SweepConfig};

pub const DESK_SAMPLE_RATE_HZ: f64 = 1e6;
pub const CPU_CARRIER_MHZ: f64 = 80.0;
pub const RAM_CARRIER_MHZ: f64 = 800.0;

/// CPU-band and RAM-band receivers with cross-coupling.
pub fn desk_channels(sample_rate_hz: f64) -> [ChannelModel; 2] {
    [
        ChannelModel::new(Receiver::CpuBand, CPU_CARRIER_MHZ, sample_rate_hz)
            .with_gain(Component::Cpu, 18.0)
            .with_gain(Component::Dram, 5.0)
            .with_gain(Component::Storage, 8.0)
            .with_gain(Component::Network, 6.0)
            .with_gain(Component::Idle, 3.0)
            .with_noise(4.0),
        ChannelModel::new(Receiver::RamBand, RAM_CARRIER_MHZ, sample_rate_hz)
            .with_gain(Component::Cpu, 4.0)
            .with_gain(Component::Dram, 18.0)
            .with_gain(Component::Storage, 9.0)
            .with_gain(Component::Network, 5.0)
            .with_gain(Component::Idle, 3.0)
            .with_noise(4.0),
    ]
}

fn act(c: Component, alpha: f64) -> ComponentActivity {
    ComponentActivity::constant(c, alpha, [1.0, 1.0])
}

/// File, database and shell skills of `duration_s` seconds. The three
/// share one component mix and burst pattern and differ mainly in
/// intensity, so a coupling change between cycles can mimic a skill change.
pub fn skill_catalog(duration_s: f64) -> Vec<SkillProfile> {
    let skill = |name: &str, level: f64, storage: f64| {
        SkillProfile::new(name, duration_s)
            .with(act(Component::Storage, storage * level))
            .with(act(Component::Cpu, 0.5 * level))
            .with(act(Component::Dram, 0.4 * level))
            .with(act(Component::Idle, 0.5))
            .with_burst(BurstModel { rate_hz: 3.0, duty: 0.4, gain: 1.5 })
    };
    vec![
        skill("file_read", 0.55, 0.45),
        skill("db_query", 0.75, 0.4),
        skill("shell_exec", 1.0, 0.35),
    ]
}

pub fn idle_profile(duration_s: f64) -> SkillProfile {
    SkillProfile::new("idle", duration_s).with(act(Component::Idle, 0.5))
}

/// Short exfiltration-style payload: rapid storage bursts on top of the
/// running skill, using no component the skills do not already use.
pub fn exfil_payload(duration_s: f64) -> SkillProfile {
    SkillProfile::new("exfil", duration_s)
        .with(act(Component::Storage, 0.3))
        .with_burst(BurstModel { rate_hz: 20.0, duty: 0.3, gain: 2.5 })
}

/// 3 skills × 10 cycles × 5 records of 4 s at 1 MS/s, with cycle drift.
pub fn focused3(seed: u64) -> CorpusSpec {
    CorpusSpec {
        seed,
        channels: desk_channels(DESK_SAMPLE_RATE_HZ),
        skills: skill_catalog(4.0),
        background: None,
        background_per_cycle: 0,
        payloads: Vec::new(),
        attacks_per_cycle: 0,
        payload_s: 0.0,
        cycles: 10,
        records_per_skill: 5,
        drift: CycleDrift::default(),
        workload_variation: 0.0,
    }
}

/// 20 s records at 1 MS/s; per cycle one record of each skill, one idle
/// record and three records carrying a 2 s payload. Workload intensity
/// varies within and between runs.
pub fn attack20(seed: u64) -> CorpusSpec {
    CorpusSpec {
        seed,
        channels: desk_channels(DESK_SAMPLE_RATE_HZ),
        skills: skill_catalog(20.0),
        background: Some(idle_profile(20.0)),
        background_per_cycle: 1,
        payloads: vec![exfil_payload(2.0)],
        attacks_per_cycle: 3,
        payload_s: 2.0,
        cycles: 6,
        records_per_skill: 1,
        drift: CycleDrift::default(),
        workload_variation: 0.2,
    }
}

/// Carriers swept by the desk survey, in MHz.
pub const SURVEY_CARRIERS_MHZ: [f64; 11] = [40.0, 80.0, 120.0, 200.0, 400.0, 600.0, 800.0, 1000.0, 1400.0, 1800.0, 2200.0];

/// The shipped experiment configs: `focused3`, `attack20` and
/// `desk_survey`.
pub fn experiments() -> Vec<ExperimentConfig> {
    let mut survey = ExperimentConfig::for_corpus("desk_survey", focused3(0));
    survey.survey = Some(SurveySection::new(
        HostEmissionMap::desk_default(),
        SweepConfig::new(SURVEY_CARRIERS_MHZ.to_vec(), DESK_SAMPLE_RATE_HZ, 7),
    ));
    vec![
        ExperimentConfig::for_corpus("focused3", focused3(0)),
        ExperimentConfig::for_corpus("attack20", attack20(0)),
        survey,
    ]
}
