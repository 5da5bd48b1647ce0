//! Averaged Hann-windowed periodograms.
//!
//! Bin powers are normalized so they sum to the mean power per sample of the
//! input: `P[k] = mean_s |FFT(w·x_s)[k]|² / (L · Σ w²)`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to every dB value; also the value reported for zero power.
pub const DB_FLOOR: f64 = -120.0;

pub fn power_db(p: f64) -> f64 {
    if p > 0.0 {
        (10.0 * p.log10()).max(DB_FLOOR)
    } else {
        DB_FLOOR
    }
}

/// Converts interleaved int8 I,Q to complex samples.
pub fn iq_to_complex(iq: &[i8]) -> Vec<Complex32> {
    iq.chunks_exact(2)
        .map(|p| Complex32::new(p[0] as f32, p[1] as f32))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsdEstimate {
    /// Bin centre frequencies relative to the carrier, ascending (fft-shifted).
    pub freqs_hz: Vec<f64>,
    /// Linear power per bin.
    pub power: Vec<f64>,
    /// `power` in dB, floored at [`DB_FLOOR`].
    pub power_db: Vec<f64>,
    pub segment_len: usize,
    pub overlap: f64,
    pub window: String,
    pub n_segments: usize,
}

impl PsdEstimate {
    pub fn total_power(&self) -> f64 {
        self.power.iter().sum()
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<usize, Arc<dyn Fft<f32>>>> = RefCell::new(HashMap::new());
}

pub(crate) fn fft_plan(len: usize) -> Arc<dyn Fft<f32>> {
    PLANS.with(|p| {
        p.borrow_mut()
            .entry(len)
            .or_insert_with(|| FftPlanner::new().plan_fft_forward(len))
            .clone()
    })
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f32> {
    (0..len)
        .map(|n| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos()) as f32)
        .collect()
}

pub(crate) fn segment_step(segment_len: usize, overlap: f64) -> usize {
    let ov = (overlap * segment_len as f64).round() as usize;
    segment_len.saturating_sub(ov).max(1)
}

pub(crate) fn segment_count(n: usize, segment_len: usize, overlap: f64) -> usize {
    if n < segment_len {
        0
    } else {
        (n - segment_len) / segment_step(segment_len, overlap) + 1
    }
}

/// Maps FFT output order to ascending frequency order.
pub(crate) fn shifted(k: usize, len: usize) -> usize {
    (k + len / 2) % len
}

pub(crate) fn bin_freqs(len: usize, sample_rate_hz: f64) -> Vec<f64> {
    (0..len)
        .map(|i| (i as f64 - (len / 2) as f64) * sample_rate_hz / len as f64)
        .collect()
}

/// Welch power spectral density of one complex slice.
pub fn welch_psd(
    slice: &[Complex32],
    sample_rate_hz: f64,
    segment_len: usize,
    overlap: f64,
) -> Result<PsdEstimate> {
    if segment_len == 0 || !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!(
            "segment length {segment_len} / overlap {overlap} invalid"
        )));
    }
    if slice.len() < segment_len {
        return Err(Error::InvalidArgument(format!(
            "slice of {} samples is shorter than one {segment_len}-sample segment",
            slice.len()
        )));
    }
    let window = hann(segment_len);
    let wsum: f64 = window.iter().map(|w| (*w as f64).powi(2)).sum();
    let fft = fft_plan(segment_len);
    let step = segment_step(segment_len, overlap);
    let n_seg = segment_count(slice.len(), segment_len, overlap);

    let mut buf = vec![Complex32::new(0.0, 0.0); segment_len];
    let mut scratch = vec![Complex32::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut acc = vec![0f64; segment_len];
    for s in 0..n_seg {
        let seg = &slice[s * step..s * step + segment_len];
        for ((b, x), w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = *x * *w;
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (k, v) in buf.iter().enumerate() {
            acc[shifted(k, segment_len)] += v.norm_sqr() as f64;
        }
    }
    let norm = 1.0 / (n_seg as f64 * segment_len as f64 * wsum);
    let power: Vec<f64> = acc.iter().map(|a| a * norm).collect();
    Ok(PsdEstimate {
        freqs_hz: bin_freqs(segment_len, sample_rate_hz),
        power_db: power.iter().map(|&p| power_db(p)).collect(),
        power,
        segment_len,
        overlap,
        window: "hann".into(),
        n_segments: n_seg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn noise(n: usize, seed: u64) -> Vec<Complex32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Complex32::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
            .collect()
    }

    #[test]
    fn tone_concentrates_in_one_bin() {
        let l = 256;
        let k0 = 37.0;
        let x: Vec<Complex32> = (0..8192)
            .map(|n| {
                let ph = 2.0 * std::f64::consts::PI * k0 * n as f64 / l as f64;
                Complex32::new(ph.cos() as f32, ph.sin() as f32)
            })
            .collect();
        let psd = welch_psd(&x, 1.0, l, 0.5).unwrap();
        let total = psd.total_power();
        let peak = psd.power.iter().cloned().fold(0.0, f64::max);
        // Hann leaks into the two neighbours; the peak still holds >= 2/3, the
        // three-bin main lobe >= 95%.
        let idx = psd.power.iter().position(|&p| p == peak).unwrap();
        let lobe: f64 = psd.power[idx - 1..=idx + 1].iter().sum();
        assert!(lobe / total >= 0.95, "{}", lobe / total);
        assert_eq!(psd.freqs_hz[idx], k0 / l as f64);
    }

    #[test]
    fn zero_input_sits_on_the_floor() {
        let x = vec![Complex32::new(0.0, 0.0); 1024];
        let psd = welch_psd(&x, 1e6, 256, 0.5).unwrap();
        assert!(psd.power_db.iter().all(|&d| d == DB_FLOOR));
    }

    #[test]
    fn short_slice_is_rejected() {
        let x = vec![Complex32::new(1.0, 0.0); 100];
        assert!(welch_psd(&x, 1e6, 256, 0.5).is_err());
    }

    #[test]
    fn total_power_matches_time_domain() {
        let x = noise(100_000, 3);
        let psd = welch_psd(&x, 1e6, 256, 0.5).unwrap();
        let time: f64 = x.iter().map(|v| v.norm_sqr() as f64).sum::<f64>() / x.len() as f64;
        assert!((psd.total_power() / time - 1.0).abs() < 0.01);
    }
}
