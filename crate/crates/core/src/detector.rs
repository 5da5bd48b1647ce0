//! Record-level decisions from window-level forest outputs.
//!
//! Stage 1 pools per-window skill posteriors into a record posterior. Stage 2
//! labels each window `background`, `normal` or `attack` and flags a record
//! when its aggregate attack score `A` strictly exceeds `η`.

use std::io::Write;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{argmax, ForestModel};
use crate::linalg::Matrix;

/// Class names of the three-state detector, in the forest's sorted order.
pub const STATE_CLASSES: [&str; 3] = ["attack", "background", "normal"];
pub const DEFAULT_ETA: f64 = 0.5;
const LOG_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum PoolingRule {
    Mean,
    LogMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledPosterior {
    pub posterior: Vec<f64>,
    pub predicted: usize,
}

/// Pools window posteriors: arithmetic mean, or geometric mean renormalized
/// to sum 1. The predicted class is the argmax, lowest index on ties.
pub fn pool_posteriors<R: AsRef<[f64]>>(windows: &[R], rule: PoolingRule) -> Result<PooledPosterior> {
    let first = windows.first().ok_or(Error::Empty("window posteriors"))?.as_ref();
    let k = first.len();
    let mut acc = vec![0.0; k];
    for w in windows {
        let w = w.as_ref();
        if w.len() != k {
            return Err(Error::ClassMismatch(format!(
                "window posterior has {} classes, expected {k}",
                w.len()
            )));
        }
        for (a, p) in acc.iter_mut().zip(w) {
            *a += match rule {
                PoolingRule::Mean => *p,
                PoolingRule::LogMean => p.max(LOG_FLOOR).ln(),
            };
        }
    }
    let n = windows.len() as f64;
    let posterior = match rule {
        PoolingRule::Mean => acc.into_iter().map(|a| a / n).collect(),
        PoolingRule::LogMean => {
            let logs: Vec<f64> = acc.into_iter().map(|a| a / n).collect();
            let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<f64>>()
        }
    };
    Ok(PooledPosterior { predicted: argmax(&posterior), posterior })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowState {
    Attack,
    Background,
    Normal,
}

impl WindowState {
    pub const ALL: [WindowState; 3] = [WindowState::Attack, WindowState::Background, WindowState::Normal];

    pub fn name(self) -> &'static str {
        STATE_CLASSES[self as usize]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowEvidence {
    pub record_id: String,
    pub window_index: usize,
    pub state: WindowState,
    /// Attack-class posterior.
    pub score: f64,
    pub posterior: Vec<f64>,
}

/// Labels every window with the forest's argmax state; `ids` gives the
/// record id and window index of each row of `x`.
pub fn classify_states(
    x: &Matrix,
    ids: &[(String, usize)],
    model: &ForestModel,
) -> Result<Vec<WindowEvidence>> {
    if model.classes.iter().map(String::as_str).ne(STATE_CLASSES) {
        return Err(Error::ClassMismatch(format!(
            "state detector classes {:?}, expected {:?}",
            model.classes, STATE_CLASSES
        )));
    }
    if ids.len() != x.n_rows {
        return Err(Error::DimensionMismatch { expected: x.n_rows, got: ids.len() });
    }
    let post = model.predict_proba_batch(x)?;
    Ok(ids
        .iter()
        .enumerate()
        .map(|(i, (rid, j))| {
            let p = post.row(i).to_vec();
            WindowEvidence {
                record_id: rid.clone(),
                window_index: *j,
                state: WindowState::ALL[argmax(&p)],
                score: p[0],
                posterior: p,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    VoteFraction,
    MeanScore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordDecision {
    Benign,
    Hijacked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub record_id: String,
    #[serde(rename = "v")]
    pub decision: RecordDecision,
    #[serde(rename = "A")]
    pub score: f64,
    #[serde(rename = "eta")]
    pub eta: f64,
    pub n_windows: usize,
    pub aggregation: Aggregation,
}

impl Verdict {
    /// Recomputes the decision from the stored score and threshold.
    pub fn is_consistent(&self) -> bool {
        decide(self.score, self.eta) == self.decision
    }
}

fn decide(a: f64, eta: f64) -> RecordDecision {
    if a > eta {
        RecordDecision::Hijacked
    } else {
        RecordDecision::Benign
    }
}

/// Aggregate score of a record's windows.
pub fn aggregate(evidence: &[WindowEvidence], aggregation: Aggregation) -> Result<f64> {
    if evidence.is_empty() {
        return Err(Error::Empty("window evidence"));
    }
    let n = evidence.len() as f64;
    Ok(match aggregation {
        Aggregation::VoteFraction => {
            evidence.iter().filter(|e| e.state == WindowState::Attack).count() as f64 / n
        }
        Aggregation::MeanScore => evidence.iter().map(|e| e.score).sum::<f64>() / n,
    })
}

/// Flags the record when `A > η`.
pub fn record_verdict(evidence: &[WindowEvidence], aggregation: Aggregation, eta: f64) -> Result<Verdict> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidArgument(format!("η = {eta} outside [0, 1]")));
    }
    let a = aggregate(evidence, aggregation)?;
    Ok(Verdict {
        record_id: evidence[0].record_id.clone(),
        decision: decide(a, eta),
        score: a,
        eta,
        n_windows: evidence.len(),
        aggregation,
    })
}

/// Writes one JSON object per verdict.
pub fn write_verdict_log(w: &mut impl Write, verdicts: &[Verdict]) -> Result<()> {
    for v in verdicts {
        serde_json::to_writer(&mut *w, v)?;
        w.write_all(b"\n").map_err(|e| Error::io("verdict log", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(state: WindowState, score: f64) -> WindowEvidence {
        WindowEvidence { record_id: "r".into(), window_index: 0, state, score, posterior: vec![] }
    }

    #[test]
    fn singleton_pooling_is_identity() {
        let p = pool_posteriors(&[[0.2, 0.7, 0.1]], PoolingRule::Mean).unwrap();
        assert_eq!(p.posterior, vec![0.2, 0.7, 0.1]);
        assert_eq!(p.predicted, 1);
    }

    #[test]
    fn symmetric_pool_ties_to_class_zero() {
        let p = pool_posteriors(&[[0.9, 0.1], [0.1, 0.9]], PoolingRule::Mean).unwrap();
        assert_eq!(p.posterior, vec![0.5, 0.5]);
        assert_eq!(p.predicted, 0);
        let g = pool_posteriors(&[[0.9, 0.1], [0.1, 0.9]], PoolingRule::LogMean).unwrap();
        assert!((g.posterior[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pooling_errors() {
        assert!(pool_posteriors::<[f64; 2]>(&[], PoolingRule::Mean).is_err());
        let mixed: Vec<Vec<f64>> = vec![vec![1.0, 0.0], vec![1.0]];
        assert!(matches!(pool_posteriors(&mixed, PoolingRule::Mean), Err(Error::ClassMismatch(_))));
    }

    #[test]
    fn verdict_semantics() {
        let all = vec![ev(WindowState::Attack, 0.9); 4];
        let v = record_verdict(&all, Aggregation::VoteFraction, 0.5).unwrap();
        assert_eq!((v.score, v.decision), (1.0, RecordDecision::Hijacked));
        let half = vec![ev(WindowState::Attack, 0.9), ev(WindowState::Normal, 0.1)];
        let v = record_verdict(&half, Aggregation::VoteFraction, 0.5).unwrap();
        assert_eq!(v.decision, RecordDecision::Benign);
        assert!(v.is_consistent());
        let v = record_verdict(&half, Aggregation::MeanScore, 0.4).unwrap();
        assert!((v.score - 0.5).abs() < 1e-12);
        assert_eq!(v.decision, RecordDecision::Hijacked);
        assert!(record_verdict(&[], Aggregation::MeanScore, 0.5).is_err());
    }

    #[test]
    fn verdict_log_uses_short_keys() {
        let v = record_verdict(&[ev(WindowState::Normal, 0.0)], Aggregation::VoteFraction, 0.5).unwrap();
        let mut buf = Vec::new();
        write_verdict_log(&mut buf, &[v]).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert!(line.contains("\"v\":\"benign\"") && line.contains("\"A\":0.0") && line.contains("\"eta\":0.5"));
    }
}
