use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex32;
use serde::{Deserialize, Serialize};

use super::{
    derive_seed, interpolate_temperature, ChannelModel, Component, ComponentActivity, CycleContext,
    EmissionKind, Event, EventKind, IqRecord, RecordLabel, SkillProfile, TemperatureModel,
    TemperatureSample,
};
use crate::error::{Error, Result};
use crate::verify::WorkflowSequence;

/// Envelopes (activity, bursts, thermal gain) are evaluated once per block.
const CONTROL_BLOCK: usize = 256;
/// Anchors bracket the payload by this margin, clipped to the record.
const ATTACK_MARGIN_S: f64 = 0.25;
/// Quasi-static passband of the governor-modulated emission, as a fraction of
/// the sample rate (Gaussian sigma).
const GOVERNOR_PASSBAND_FRAC: f64 = 0.25;

/// A malicious payload superimposed on a record for `len_s` seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackOverlay {
    pub payload: SkillProfile,
    pub start_s: f64,
    pub len_s: f64,
}

struct BurstTimeline {
    period: f64,
    on_len: f64,
    gain: f64,
    starts: Vec<f64>,
}

impl BurstTimeline {
    fn new(profile: &SkillProfile, seed: u64, horizon_s: f64) -> Option<Self> {
        let b = profile.burst;
        if b.rate_hz <= 0.0 || b.duty <= 0.0 {
            return None;
        }
        let period = 1.0 / b.rate_hz;
        let n = (horizon_s / period).ceil() as usize + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slack = (1.0 - b.duty) * period;
        let starts = (0..n)
            .map(|k| k as f64 * period + rng.random::<f64>() * slack)
            .collect();
        Some(BurstTimeline {
            period,
            on_len: b.duty * period,
            gain: b.gain,
            starts,
        })
    }

    fn factor(&self, t: f64) -> f64 {
        let k = (t / self.period).floor();
        if k < 0.0 {
            return 1.0;
        }
        match self.starts.get(k as usize) {
            Some(&s) if t >= s && t < s + self.on_len => self.gain,
            _ => 1.0,
        }
    }
}

struct Emitter<'a> {
    activity: &'a ComponentActivity,
    burst: Option<&'a BurstTimeline>,
    /// Active interval in record time, and the time origin of `activity`.
    window: (f64, f64),
    origin: f64,
    tag: u64,
}

fn temperature_trace(model: &TemperatureModel, duration_s: f64, seed: u64) -> Vec<TemperatureSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 1.0 / model.sample_rate_hz;
    let n = (duration_s / dt).floor() as usize + 1;
    let mut out = Vec::with_capacity(n + 1);
    let mut temp = model.initial_c;
    for k in 0..n {
        out.push(TemperatureSample {
            t_s: k as f64 * dt,
            celsius: temp,
        });
        let eps: f64 = rng.sample(StandardNormal);
        temp = model.mean_c + model.ar_coeff * (temp - model.mean_c) + model.innovation_std_c * eps;
    }
    if let Some(last) = out.last() {
        if last.t_s < duration_s - 1e-12 {
            let celsius = last.celsius;
            out.push(TemperatureSample {
                t_s: duration_s,
                celsius,
            });
        }
    }
    out
}

fn uniform_pair(rng: &mut ChaCha8Rng) -> Complex32 {
    // Each rail uniform on [-sqrt(1.5), sqrt(1.5)]: unit complex variance.
    const SCALE: f32 = 2.449_489_7 / 4_294_967_296.0; // 2·sqrt(1.5) / 2^32
    const HALF: f32 = 1.224_744_9;
    let bits = rng.next_u64();
    let re = (bits as u32) as f32 * SCALE - HALF;
    let im = ((bits >> 32) as u32) as f32 * SCALE - HALF;
    Complex32::new(re, im)
}

#[allow(clippy::too_many_arguments)]
fn synthesize_receiver(
    emitters: &[Emitter<'_>],
    channel: &ChannelModel,
    ctx: &CycleContext,
    temperature: &[TemperatureSample],
    n: usize,
    seed: u64,
) -> Result<Vec<i8>> {
    let r = channel.receiver.index();
    let fs = channel.sample_rate_hz;
    let n_blocks = n.div_ceil(CONTROL_BLOCK);
    let block_time = |b: usize| ((b * CONTROL_BLOCK) as f64 + 0.5 * CONTROL_BLOCK as f64) / fs;

    let cycle_gain = 10f64.powf(ctx.gain_offset_db[r] / 20.0);
    let env_gain: Vec<f64> = (0..n_blocks)
        .map(|b| {
            let t = block_time(b);
            let thermal =
                1.0 + ctx.thermal_gain_per_c * (interpolate_temperature(temperature, t) - ctx.reference_c);
            cycle_gain * thermal.max(0.0)
        })
        .collect();

    let mut acc = vec![Complex32::new(0.0, 0.0); n];
    let mut amp = vec![0f32; n_blocks];
    for em in emitters {
        let comp = em.activity.component;
        let h = channel.gain_per_component[comp.index()] * em.activity.carrier_affinity[r];
        if h == 0.0 || em.activity.max_alpha() == 0.0 {
            continue;
        }
        let mut any = false;
        for (b, a) in amp.iter_mut().enumerate() {
            let t = block_time(b);
            *a = if t >= em.window.0 && t < em.window.1 {
                let burst = match (comp, em.burst) {
                    (Component::Idle, _) | (_, None) => 1.0,
                    (_, Some(bt)) => bt.factor(t - em.origin),
                };
                (h * em.activity.alpha_at(t - em.origin) * burst * env_gain[b]) as f32
            } else {
                0.0
            };
            any |= *a != 0.0;
        }
        if !any {
            continue;
        }
        let shape = channel.emission[comp.index()];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[r as u64, em.tag]));
        let omega = 2.0 * PI * shape.offset_frac;
        match shape.kind {
            EmissionKind::Tone => {
                let phase0 = rng.random::<f64>() * 2.0 * PI;
                for (b, &a) in amp.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    let lo = b * CONTROL_BLOCK;
                    let hi = (lo + CONTROL_BLOCK).min(n);
                    // Exact phase at the block start keeps long tones drift-free.
                    let start = omega * lo as f64 + phase0;
                    let mut ph = Complex32::new(start.cos() as f32, start.sin() as f32);
                    let step = Complex32::new(omega.cos() as f32, omega.sin() as f32);
                    for s in &mut acc[lo..hi] {
                        *s += ph * a;
                        ph *= step;
                    }
                }
            }
            EmissionKind::Noise | EmissionKind::Impulsive { .. } => {
                let bw = shape.bandwidth_frac.max(1e-4);
                let radius = (-PI * bw).exp();
                let pole = Complex32::new((radius * omega.cos()) as f32, (radius * omega.sin()) as f32);
                let drive = (1.0 - radius * radius).sqrt() as f32;
                let density = match shape.kind {
                    EmissionKind::Impulsive { density } => density.clamp(1e-6, 1.0),
                    _ => 1.0,
                };
                let impulse_gain = (1.0 / density).sqrt() as f32;
                let threshold = (density * u32::MAX as f64) as u32;
                let mut y = Complex32::new(0.0, 0.0);
                for (b, &a) in amp.iter().enumerate() {
                    let lo = b * CONTROL_BLOCK;
                    let hi = (lo + CONTROL_BLOCK).min(n);
                    for s in &mut acc[lo..hi] {
                        let x = if density >= 1.0 {
                            uniform_pair(&mut rng)
                        } else {
                            let bits = rng.next_u64();
                            if (bits as u32) < threshold {
                                let ang = ((bits >> 32) as u32) as f32 * (std::f32::consts::TAU / 4_294_967_296.0);
                                Complex32::new(ang.cos(), ang.sin()) * impulse_gain
                            } else {
                                Complex32::new(0.0, 0.0)
                            }
                        };
                        y = pole * y + x * drive;
                        // Sparse impulses would otherwise decay into subnormals.
                        if y.re.abs() < 1e-20 && y.im.abs() < 1e-20 {
                            y = Complex32::new(0.0, 0.0);
                        }
                        if a != 0.0 {
                            *s += y * a;
                        }
                    }
                }
            }
        }
    }

    if channel.governor_fm_enabled && channel.governor_fm_depth_hz != 0.0 {
        apply_governor_fm(&mut acc, emitters, channel, n_blocks, &block_time);
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[r as u64, 0xA5A5]));
    let sigma = channel.noise_floor as f32;
    let dc = ctx.dc_offset[r];
    let (dc_i, dc_q) = (dc[0] as f32, dc[1] as f32);
    let mut out = Vec::with_capacity(2 * n);
    let mut saturated = 0usize;
    for s in &acc {
        let (mut i, mut q) = (s.re + dc_i, s.im + dc_q);
        if sigma > 0.0 {
            let ni: f32 = noise_rng.sample(StandardNormal);
            let nq: f32 = noise_rng.sample(StandardNormal);
            i += ni * sigma;
            q += nq * sigma;
        }
        let (qi, sat_i) = quantize(i);
        let (qq, sat_q) = quantize(q);
        saturated += (sat_i || sat_q) as usize;
        out.push(qi);
        out.push(qq);
    }
    if n > 0 && saturated * 2 > n {
        return Err(Error::DegenerateConfiguration(format!(
            "{} receiver saturates on {saturated} of {n} samples",
            channel.receiver.name()
        )));
    }
    Ok(out)
}

/// Governor-driven frequency modulation: the emission's frequency swings by
/// `depth · load(t) · sin(2π·rate·t)`, with load the CPU activity, and loses
/// power as it leaves the receiver passband.
fn apply_governor_fm(
    acc: &mut [Complex32],
    emitters: &[Emitter<'_>],
    channel: &ChannelModel,
    n_blocks: usize,
    block_time: &dyn Fn(usize) -> f64,
) {
    let fs = channel.sample_rate_hz;
    let n = acc.len();
    let mut phase = 0f64;
    for b in 0..n_blocks {
        let t = block_time(b);
        let load: f64 = emitters
            .iter()
            .filter(|e| e.activity.component == Component::Cpu && t >= e.window.0 && t < e.window.1)
            .map(|e| e.activity.alpha_at(t - e.origin))
            .sum::<f64>()
            .min(1.0);
        let dev = channel.governor_fm_depth_hz * load * (2.0 * PI * channel.governor_fm_rate_hz * t).sin();
        let att = (-0.5 * (dev / (GOVERNOR_PASSBAND_FRAC * fs)).powi(2)).exp() as f32;
        let dphi = 2.0 * PI * dev / fs;
        let lo = b * CONTROL_BLOCK;
        let hi = (lo + CONTROL_BLOCK).min(n);
        let mut rot = Complex32::new(phase.cos() as f32, phase.sin() as f32);
        let step = Complex32::new(dphi.cos() as f32, dphi.sin() as f32);
        for s in &mut acc[lo..hi] {
            *s = *s * rot * att;
            rot *= step;
        }
        phase = (phase + dphi * (hi - lo) as f64).rem_euclid(2.0 * PI);
    }
}

fn quantize(x: f32) -> (i8, bool) {
    let r = x.round();
    if r > 127.0 {
        (127, true)
    } else if r < -128.0 {
        (-128, true)
    } else {
        (r as i8, false)
    }
}

fn emitters_for<'a>(
    profile: &'a SkillProfile,
    burst: Option<&'a BurstTimeline>,
    overlay: Option<(&'a AttackOverlay, Option<&'a BurstTimeline>)>,
) -> Vec<Emitter<'a>> {
    let mut out: Vec<Emitter<'a>> = profile
        .components
        .iter()
        .enumerate()
        .map(|(k, activity)| Emitter {
            activity,
            burst,
            window: (0.0, f64::INFINITY),
            origin: 0.0,
            tag: k as u64,
        })
        .collect();
    if let Some((ov, pburst)) = overlay {
        out.extend(ov.payload.components.iter().enumerate().map(|(k, activity)| Emitter {
            activity,
            burst: pburst,
            window: (ov.start_s, ov.start_s + ov.len_s),
            origin: ov.start_s,
            tag: 1_000 + k as u64,
        }));
    }
    out
}

/// Renders one receiver stream for `profile` with no overlay; used by the
/// carrier survey, which tunes a single receiver per carrier.
pub fn render_stream(
    profile: &SkillProfile,
    channel: &ChannelModel,
    ctx: &CycleContext,
    seed: u64,
) -> Result<Vec<i8>> {
    profile.validate()?;
    channel.validate()?;
    ctx.validate()?;
    let n = (profile.duration_s * channel.sample_rate_hz).round() as usize;
    let temperature = temperature_trace(&ctx.temperature, profile.duration_s, derive_seed(seed, &[0x7E]));
    let burst = BurstTimeline::new(profile, derive_seed(seed, &[0xB0]), profile.duration_s);
    let emitters = emitters_for(profile, burst.as_ref(), None);
    synthesize_receiver(&emitters, channel, ctx, &temperature, n, seed)
}

/// Renders one dual-receiver record of `profile`.
///
/// Identical arguments always produce a bit-identical record. With an
/// overlay, the payload's components are added on top of the skill for the
/// payload interval and the four attack anchors are emitted.
pub fn render_record(
    profile: &SkillProfile,
    channels: &[ChannelModel; 2],
    ctx: &CycleContext,
    seed: u64,
    overlay: Option<&AttackOverlay>,
) -> Result<IqRecord> {
    profile.validate()?;
    ctx.validate()?;
    for c in channels {
        c.validate()?;
    }
    if channels[0].receiver == channels[1].receiver {
        return Err(Error::InvalidArgument(
            "channels must have distinct receiver ids".into(),
        ));
    }
    if channels[0].sample_rate_hz != channels[1].sample_rate_hz {
        return Err(Error::InvalidArgument(
            "both receivers must share one sample rate".into(),
        ));
    }
    let duration = profile.duration_s;
    if let Some(ov) = overlay {
        ov.payload.validate()?;
        if !(ov.len_s > 0.0) || ov.start_s < 0.0 || ov.start_s + ov.len_s > duration + 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "overlay [{}, {}] extends past record end {}",
                ov.start_s,
                ov.start_s + ov.len_s,
                duration
            )));
        }
    }
    let fs = channels[0].sample_rate_hz;
    let n = (duration * fs).round() as usize;

    let temperature = temperature_trace(&ctx.temperature, duration, derive_seed(seed, &[0x7E]));
    let burst = BurstTimeline::new(profile, derive_seed(seed, &[0xB0]), duration);
    let payload_burst = overlay
        .and_then(|ov| BurstTimeline::new(&ov.payload, derive_seed(seed, &[0xB1]), ov.len_s));
    let emitters = emitters_for(
        profile,
        burst.as_ref(),
        overlay.map(|ov| (ov, payload_burst.as_ref())),
    );

    let mut streams: [Vec<i8>; 2] = [Vec::new(), Vec::new()];
    for ch in channels {
        streams[ch.receiver.index()] = synthesize_receiver(&emitters, ch, ctx, &temperature, n, seed)?;
    }
    let mut carriers_mhz = [0.0; 2];
    for ch in channels {
        carriers_mhz[ch.receiver.index()] = ch.carrier_mhz;
    }

    let mut events = vec![
        Event { t_s: 0.0, kind: EventKind::WorkStart },
        Event { t_s: duration, kind: EventKind::WorkEnd },
    ];
    if let Some(ov) = overlay {
        let end = ov.start_s + ov.len_s;
        events.extend([
            Event { t_s: (ov.start_s - ATTACK_MARGIN_S).max(0.0), kind: EventKind::AttackBegin },
            Event { t_s: ov.start_s, kind: EventKind::PayloadStart },
            Event { t_s: end.min(duration), kind: EventKind::PayloadEnd },
            Event { t_s: (end + ATTACK_MARGIN_S).min(duration), kind: EventKind::AttackEnd },
        ]);
    }
    events.sort_by(|a, b| a.t_s.total_cmp(&b.t_s).then(a.kind.cmp(&b.kind)));

    let label = if overlay.is_some() {
        RecordLabel::Attack
    } else if profile.is_idle() {
        RecordLabel::Background
    } else {
        RecordLabel::Normal
    };

    let record = IqRecord {
        record_id: format!("{}-c{:03}-{:016x}", profile.name, ctx.cycle_index, seed),
        skill_name: profile.name.clone(),
        cycle_index: ctx.cycle_index,
        start_time_s: 0.0,
        sample_rate_hz: fs,
        carriers_mhz,
        streams,
        events,
        temperature,
        label,
        attack_skill: overlay.map(|ov| ov.payload.name.clone()),
    };
    record.validate()?;
    Ok(record)
}

/// Renders one record per skill of `sequence`, in order, on a shared cycle
/// with contiguous session time and a continuous temperature trace.
pub fn render_workflow(
    sequence: &WorkflowSequence,
    catalog: &BTreeMap<String, SkillProfile>,
    channels: &[ChannelModel; 2],
    ctx: &CycleContext,
    seed: u64,
    overlays: &BTreeMap<usize, AttackOverlay>,
) -> Result<Vec<IqRecord>> {
    let profiles = sequence
        .skills
        .iter()
        .map(|s| catalog.get(s).ok_or_else(|| Error::UnknownSkill(s.clone())))
        .collect::<Result<Vec<_>>>()?;
    let mut ctx = ctx.clone();
    let mut clock = 0.0;
    let mut out = Vec::with_capacity(profiles.len());
    for (i, profile) in profiles.into_iter().enumerate() {
        let mut rec = render_record(
            profile,
            channels,
            &ctx,
            derive_seed(seed, &[i as u64]),
            overlays.get(&i),
        )?;
        rec.start_time_s = clock;
        clock += rec.duration_s();
        if let Some(last) = rec.temperature.last() {
            ctx.temperature.initial_c = last.celsius;
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emcorpus::{BurstModel, Receiver};

    const FS: f64 = 1e6;

    fn channels(noise: f64) -> [ChannelModel; 2] {
        [
            ChannelModel::new(Receiver::CpuBand, 80.0, FS)
                .with_gain(Component::Cpu, 20.0)
                .with_gain(Component::Dram, 4.0)
                .with_gain(Component::Idle, 3.0)
                .with_noise(noise),
            ChannelModel::new(Receiver::RamBand, 800.0, FS)
                .with_gain(Component::Cpu, 3.0)
                .with_gain(Component::Dram, 20.0)
                .with_gain(Component::Idle, 3.0)
                .with_noise(noise),
        ]
    }

    fn cpu_heavy(duration: f64) -> SkillProfile {
        SkillProfile::new("cpu_heavy", duration)
            .with(ComponentActivity::constant(Component::Cpu, 0.9, [1.0, 1.0]))
            .with(ComponentActivity::constant(Component::Idle, 0.5, [1.0, 1.0]))
            .with_burst(BurstModel { rate_hz: 4.0, duty: 0.5, gain: 1.5 })
    }

    #[test]
    fn all_idle_zero_gain_is_silent_background() {
        let profile = SkillProfile::new("idle", 0.2)
            .with(ComponentActivity::constant(Component::Idle, 1.0, [1.0, 1.0]));
        let chans = [
            ChannelModel::new(Receiver::CpuBand, 80.0, FS),
            ChannelModel::new(Receiver::RamBand, 800.0, FS),
        ];
        let rec = render_record(&profile, &chans, &CycleContext::neutral(0), 1, None).unwrap();
        assert_eq!(rec.label, RecordLabel::Background);
        assert!(rec.streams.iter().all(|s| s.iter().all(|&v| v == 0)));
        assert_eq!(rec.n_samples(), 200_000);
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render_record(&cpu_heavy(0.3), &channels(2.0), &CycleContext::neutral(3), 42, None).unwrap();
        let b = render_record(&cpu_heavy(0.3), &channels(2.0), &CycleContext::neutral(3), 42, None).unwrap();
        assert_eq!(a, b);
        let c = render_record(&cpu_heavy(0.3), &channels(2.0), &CycleContext::neutral(3), 43, None).unwrap();
        assert_ne!(a.streams, c.streams);
    }

    #[test]
    fn overlay_emits_nested_anchors() {
        let payload = SkillProfile::new("exfil", 0.2)
            .with(ComponentActivity::constant(Component::Network, 0.9, [1.0, 1.0]));
        let ov = AttackOverlay { payload, start_s: 0.4, len_s: 0.2 };
        let rec = render_record(&cpu_heavy(1.0), &channels(2.0), &CycleContext::neutral(0), 7, Some(&ov)).unwrap();
        assert_eq!(rec.label, RecordLabel::Attack);
        let t = |k| rec.event_time(k).unwrap();
        assert!(t(EventKind::AttackBegin) <= t(EventKind::PayloadStart));
        assert!(t(EventKind::PayloadStart) < t(EventKind::PayloadEnd));
        assert!(t(EventKind::PayloadEnd) <= t(EventKind::AttackEnd));
        assert!(t(EventKind::AttackEnd) <= rec.duration_s());
        assert!(rec.events.windows(2).all(|w| w[0].t_s <= w[1].t_s));
    }

    #[test]
    fn overlay_past_end_is_rejected() {
        let payload = SkillProfile::new("exfil", 1.0)
            .with(ComponentActivity::constant(Component::Network, 0.9, [1.0, 1.0]));
        let ov = AttackOverlay { payload, start_s: 0.9, len_s: 0.5 };
        let err = render_record(&cpu_heavy(1.0), &channels(2.0), &CycleContext::neutral(0), 7, Some(&ov));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn zero_duration_is_rejected() {
        let err = render_record(&cpu_heavy(0.0), &channels(2.0), &CycleContext::neutral(0), 7, None);
        assert!(err.is_err());
    }

    #[test]
    fn full_scale_saturation_is_degenerate() {
        let mut chans = channels(2.0);
        chans[0].gain_per_component[Component::Cpu.index()] = 5_000.0;
        let err = render_record(&cpu_heavy(0.1), &chans, &CycleContext::neutral(0), 7, None);
        assert!(matches!(err, Err(Error::DegenerateConfiguration(_))));
    }

    #[test]
    fn temperature_follows_ar1_and_spans_record() {
        let mut ctx = CycleContext::neutral(0);
        ctx.temperature = TemperatureModel {
            initial_c: 50.0,
            mean_c: 40.0,
            ar_coeff: 0.5,
            innovation_std_c: 0.0,
            sample_rate_hz: 10.0,
        };
        let rec = render_record(&cpu_heavy(0.5), &channels(0.0), &ctx, 1, None).unwrap();
        let temps: Vec<f64> = rec.temperature.iter().map(|s| s.celsius).collect();
        assert_eq!(temps[0], 50.0);
        assert!((temps[1] - 45.0).abs() < 1e-12);
        assert!((temps[2] - 42.5).abs() < 1e-12);
        assert!(rec.temperature.last().unwrap().t_s <= rec.duration_s() + 1e-12);
    }

    #[test]
    fn governor_fm_changes_only_the_flagged_receiver() {
        let mut chans = channels(0.0);
        let plain = render_record(&cpu_heavy(0.2), &chans, &CycleContext::neutral(0), 9, None).unwrap();
        chans[0] = chans[0].clone().with_governor(300e3, 5.0);
        let fm = render_record(&cpu_heavy(0.2), &chans, &CycleContext::neutral(0), 9, None).unwrap();
        assert_ne!(plain.streams[0], fm.streams[0]);
        assert_eq!(plain.streams[1], fm.streams[1]);
    }
}
