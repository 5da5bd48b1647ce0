//! Coarse skill envelopes and the overlapping fine windows inside them.
//!
//! Fine window `j` of an envelope `[a, b]` covers `[a + j·ρ, a + j·ρ + τ]`;
//! windows are emitted while they fit, so a partial trailing window is
//! dropped and the count is `floor((b − a − τ)/ρ) + 1`.

use std::ops::Range;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::emcorpus::{Event, EventKind, IqRecord, Receiver};
use crate::error::{Error, Result};

/// 20 s coarse envelope, 0.5 s fine windows, 0.25 s stride.
pub const DEFAULT_COARSE_S: f64 = 20.0;
pub const DEFAULT_TAU_S: f64 = 0.5;
pub const DEFAULT_RHO_S: f64 = 0.25;

const EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeSource {
    EventAnchor,
    Schedule,
}

/// How the coarse envelope of a record is found.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EnvelopeMode {
    /// Use the `work_start`/`work_end` events.
    EventAnchor,
    /// Use the declared out-of-band schedule, relative to record start.
    Schedule { start_s: f64, duration_s: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseEnvelope {
    pub record_id: String,
    pub a_s: f64,
    pub b_s: f64,
    pub source: EnvelopeSource,
}

impl CoarseEnvelope {
    pub fn len_s(&self) -> f64 {
        self.b_s - self.a_s
    }
}

/// Envelope from a record's events or its declared schedule, clipped to the
/// record duration.
pub fn coarse_envelope(record: &IqRecord, mode: EnvelopeMode) -> Result<CoarseEnvelope> {
    coarse_envelope_from(&record.record_id, &record.events, record.duration_s(), mode)
}

/// Same as [`coarse_envelope`], for callers holding only the sidecars.
pub fn coarse_envelope_from(
    record_id: &str,
    events: &[Event],
    duration_s: f64,
    mode: EnvelopeMode,
) -> Result<CoarseEnvelope> {
    let (a, b, source) = match mode {
        EnvelopeMode::EventAnchor => {
            let find = |kind: EventKind, name: &str| {
                events
                    .iter()
                    .find(|e| e.kind == kind)
                    .map(|e| e.t_s)
                    .ok_or_else(|| Error::UnanchoredRecord {
                        record_id: record_id.to_string(),
                        missing: name.to_string(),
                    })
            };
            (
                find(EventKind::WorkStart, "work_start")?,
                find(EventKind::WorkEnd, "work_end")?,
                EnvelopeSource::EventAnchor,
            )
        }
        EnvelopeMode::Schedule { start_s, duration_s: d } => (start_s, start_s + d, EnvelopeSource::Schedule),
    };
    let a = a.clamp(0.0, duration_s);
    let b = b.clamp(0.0, duration_s);
    if !(a < b) {
        return Err(Error::InvalidArgument(format!(
            "record `{record_id}` envelope bounds inverted: [{a}, {b}]"
        )));
    }
    Ok(CoarseEnvelope {
        record_id: record_id.to_string(),
        a_s: a,
        b_s: b,
        source,
    })
}

/// One fine window; a plan entry that is resolved to sample slices on demand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineWindow {
    pub record_id: String,
    pub index: usize,
    pub start_s: f64,
    pub tau_s: f64,
}

impl FineWindow {
    pub fn end_s(&self) -> f64 {
        self.start_s + self.tau_s
    }

    pub fn mid_s(&self) -> f64 {
        self.start_s + 0.5 * self.tau_s
    }

    /// Complex-sample range at `sample_rate_hz`; every window of a plan has
    /// the same length.
    pub fn sample_range(&self, sample_rate_hz: f64) -> Range<usize> {
        let start = (self.start_s * sample_rate_hz).round() as usize;
        let len = (self.tau_s * sample_rate_hz).round() as usize;
        start..start + len
    }

    /// Interleaved int8 slices of both receivers.
    pub fn slices<'a>(&self, record: &'a IqRecord) -> Result<[&'a [i8]; 2]> {
        let r = self.sample_range(record.sample_rate_hz);
        let n = record.n_samples();
        // Rounding may push the last window one sample past the end.
        let (lo, hi) = if r.end > n && r.end - n <= 1 {
            (r.start - (r.end - n), n)
        } else {
            (r.start, r.end)
        };
        if hi > n {
            return Err(Error::InvalidArgument(format!(
                "window {} of `{}` ends past the record",
                self.index, self.record_id
            )));
        }
        Ok(Receiver::BOTH.map(|rx| &record.stream(rx)[2 * lo..2 * hi]))
    }
}

/// Number of windows that fit, `floor((len − τ)/ρ) + 1`.
pub fn window_count(envelope_len_s: f64, tau_s: f64, rho_s: f64) -> usize {
    if tau_s > envelope_len_s + EPS {
        return 0;
    }
    (((envelope_len_s - tau_s) / rho_s) + EPS).floor() as usize + 1
}

/// Overlapping fine windows of length `tau_s` and stride `rho_s`.
pub fn fine_windows(env: &CoarseEnvelope, tau_s: f64, rho_s: f64) -> Result<Vec<FineWindow>> {
    if !(tau_s > 0.0) || !(rho_s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "window length {tau_s} and stride {rho_s} must be positive"
        )));
    }
    if tau_s > env.len_s() + EPS {
        return Err(Error::InvalidArgument(format!(
            "window length {tau_s} s exceeds envelope length {} s",
            env.len_s()
        )));
    }
    let count = window_count(env.len_s(), tau_s, rho_s);
    Ok((0..count)
        .map(|j| FineWindow {
            record_id: env.record_id.clone(),
            index: j,
            start_s: env.a_s + j as f64 * rho_s,
            tau_s,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn env(a: f64, b: f64) -> CoarseEnvelope {
        CoarseEnvelope {
            record_id: "r".into(),
            a_s: a,
            b_s: b,
            source: EnvelopeSource::Schedule,
        }
    }

    fn enumerate_starts(a: f64, b: f64, tau: f64, rho: f64) -> usize {
        let mut n = 0;
        let mut j = 0usize;
        while a + j as f64 * rho + tau <= b + 1e-9 {
            n += 1;
            j += 1;
        }
        n
    }

    #[test]
    fn event_anchors_are_read_off() {
        let events = vec![
            Event { t_s: 1.0, kind: EventKind::WorkStart },
            Event { t_s: 19.0, kind: EventKind::WorkEnd },
        ];
        let e = coarse_envelope_from("r", &events, 20.0, EnvelopeMode::EventAnchor).unwrap();
        assert_eq!((e.a_s, e.b_s, e.source), (1.0, 19.0, EnvelopeSource::EventAnchor));
    }

    #[test]
    fn schedule_mode_covers_declared_duration() {
        let e = coarse_envelope_from(
            "r",
            &[],
            20.0,
            EnvelopeMode::Schedule { start_s: 0.0, duration_s: 20.0 },
        )
        .unwrap();
        assert_eq!((e.a_s, e.b_s), (0.0, 20.0));
        let clipped = coarse_envelope_from(
            "r",
            &[],
            10.0,
            EnvelopeMode::Schedule { start_s: 0.0, duration_s: 20.0 },
        )
        .unwrap();
        assert_eq!(clipped.b_s, 10.0);
    }

    #[test]
    fn missing_work_end_is_unanchored() {
        let events = vec![Event { t_s: 1.0, kind: EventKind::WorkStart }];
        let err = coarse_envelope_from("r", &events, 20.0, EnvelopeMode::EventAnchor).unwrap_err();
        assert!(matches!(err, Error::UnanchoredRecord { .. }));
        assert!(err.to_string().contains("unanchored record"));
    }

    #[test]
    fn inverted_bounds_are_rejected() {
        let events = vec![
            Event { t_s: 5.0, kind: EventKind::WorkStart },
            Event { t_s: 5.0, kind: EventKind::WorkEnd },
        ];
        assert!(coarse_envelope_from("r", &events, 20.0, EnvelopeMode::EventAnchor).is_err());
    }

    #[test]
    fn reference_parameters_give_79_windows() {
        let w = fine_windows(&env(0.0, 20.0), 0.5, 0.25).unwrap();
        assert_eq!(w.len(), enumerate_starts(0.0, 20.0, 0.5, 0.25));
        assert_eq!(w.len(), 79);
        assert_eq!(w.last().unwrap().end_s(), 20.0);
    }

    #[test]
    fn tau_equal_to_envelope_gives_one_window() {
        assert_eq!(fine_windows(&env(2.0, 3.0), 1.0, 0.1).unwrap().len(), 1);
    }

    #[test]
    fn no_overlap_tiles_the_envelope() {
        let w = fine_windows(&env(0.0, 4.0), 1.0, 1.0).unwrap();
        assert_eq!(w.len(), 4);
        for pair in w.windows(2) {
            assert_eq!(pair[0].end_s(), pair[1].start_s);
        }
        assert_eq!(w[0].start_s, 0.0);
        assert_eq!(w[3].end_s(), 4.0);
    }

    #[test]
    fn tau_longer_than_envelope_is_rejected() {
        assert!(fine_windows(&env(0.0, 1.0), 2.0, 0.5).is_err());
        assert!(fine_windows(&env(0.0, 1.0), 0.5, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn count_matches_enumeration(
            len in 0.5f64..40.0,
            tau_frac in 0.01f64..1.0,
            rho in 0.05f64..3.0,
        ) {
            let tau = (len * tau_frac).max(0.01);
            let e = env(1.0, 1.0 + len);
            let w = fine_windows(&e, tau, rho).unwrap();
            prop_assert_eq!(w.len(), enumerate_starts(1.0, 1.0 + len, tau, rho));
            for x in &w {
                prop_assert!(x.start_s >= e.a_s && x.end_s() <= e.b_s + 1e-9);
            }
            if rho < tau {
                for p in w.windows(2) {
                    prop_assert!(((p[0].end_s() - p[1].start_s) - (tau - rho)).abs() < 1e-9);
                }
            }
        }
    }
}
