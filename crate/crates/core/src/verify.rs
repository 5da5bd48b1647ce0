//! Sequence-level workflow integrity.
//!
//! The distance is the unrestricted Damerau–Levenshtein distance computed
//! with the Lowrance–Wagner recurrence: an adjacent transposition may be
//! applied to symbols that other edits later separate. With uniform
//! insertion and deletion costs the recurrence is exact whenever
//! `2·transposition ≥ insertion + deletion`; under unit costs this makes the
//! distance a metric. The restricted (optimal string alignment) variant is
//! not used because it violates the triangle inequality.

use std::collections::{BTreeMap, HashMap};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    IntendedPolicy,
    RecoveredPhysical,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowSequence {
    pub skills: Vec<String>,
    pub provenance: Provenance,
}

impl WorkflowSequence {
    pub fn new<S: Into<String>>(skills: impl IntoIterator<Item = S>, provenance: Provenance) -> Self {
        WorkflowSequence {
            skills: skills.into_iter().map(Into::into).collect(),
            provenance,
        }
    }

    pub fn intended<S: Into<String>>(skills: impl IntoIterator<Item = S>) -> Self {
        Self::new(skills, Provenance::IntendedPolicy)
    }

    pub fn recovered<S: Into<String>>(skills: impl IntoIterator<Item = S>) -> Self {
        Self::new(skills, Provenance::RecoveredPhysical)
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }
}

/// Edit costs over a declared alphabet plus the decision threshold δ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CostModel {
    pub alphabet: Vec<String>,
    pub insertion: f64,
    pub deletion: f64,
    /// `substitution[i][j]`: cost of replacing `alphabet[i]` by `alphabet[j]`.
    pub substitution: Vec<Vec<f64>>,
    pub transposition: f64,
    pub delta: f64,
}

pub const CONFUSABLE_FLOOR: f64 = 0.05;
pub const DEFAULT_TRANSPOSITION: f64 = 0.75;

impl CostModel {
    /// All edits cost 1, δ = 0.
    pub fn unit<S: AsRef<str>>(alphabet: &[S]) -> Self {
        let n = alphabet.len();
        CostModel {
            alphabet: alphabet.iter().map(|s| s.as_ref().to_string()).collect(),
            insertion: 1.0,
            deletion: 1.0,
            substitution: (0..n)
                .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
                .collect(),
            transposition: 1.0,
            delta: 0.0,
        }
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.alphabet.len();
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (name, c) in [
            ("insertion", self.insertion),
            ("deletion", self.deletion),
            ("transposition", self.transposition),
            ("delta", self.delta),
        ] {
            if !(c >= 0.0) || !c.is_finite() {
                return bad(format!("{name} cost {c} must be finite and non-negative"));
            }
        }
        if self.substitution.len() != n || self.substitution.iter().any(|r| r.len() != n) {
            return bad(format!("substitution matrix must be {n}×{n}"));
        }
        for (i, row) in self.substitution.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if !(c >= 0.0) || !c.is_finite() {
                    return bad(format!("substitution cost [{i}][{j}] = {c} invalid"));
                }
                if i == j && c != 0.0 {
                    return bad(format!("substitution diagonal [{i}][{i}] must be 0"));
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.alphabet.iter().find(|s| !seen.insert(*s)) {
            return bad(format!("duplicate alphabet symbol `{dup}`"));
        }
        Ok(())
    }

    /// Whether the transposition cost keeps the recurrence exact.
    pub fn transposition_is_exact(&self) -> bool {
        2.0 * self.transposition >= self.insertion + self.deletion
    }

    fn encode(&self, seq: &WorkflowSequence) -> Result<Vec<usize>> {
        let index: HashMap<&str, usize> =
            self.alphabet.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        seq.skills
            .iter()
            .map(|s| index.get(s.as_str()).copied().ok_or_else(|| Error::UnknownSymbol(s.clone())))
            .collect()
    }
}

/// One non-match edit turning the intended sequence into the observed one.
/// Positions are 0-based indices into the intended (`w`) and observed (`h`)
/// sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditOp {
    Substitute { pos_w: usize, pos_h: usize, from: String, to: String },
    Delete { pos_w: usize, symbol: String },
    Insert { pos_h: usize, symbol: String },
    /// `first`,`second` in the intended sequence appear swapped in the
    /// observed one.
    Transpose { pos_w: usize, pos_h: usize, first: String, second: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub distance: f64,
    pub ops: Vec<EditOp>,
}

const TIE: f64 = 1e-12;

/// Weighted edit distance from `w` (intended) to `h` (observed) and one
/// optimal alignment. Ties prefer match, then substitute, transpose, delete,
/// insert.
pub fn weighted_edit_distance(
    w: &WorkflowSequence,
    h: &WorkflowSequence,
    cost: &CostModel,
) -> Result<Alignment> {
    cost.validate()?;
    let a = cost.encode(w)?;
    let b = cost.encode(h)?;
    let (n, m) = (a.len(), b.len());
    let (ins, del, tr) = (cost.insertion, cost.deletion, cost.transposition);
    let sub = |x: usize, y: usize| if x == y { 0.0 } else { cost.substitution[x][y] };

    let mut d = vec![vec![0f64; m + 1]; n + 1];
    for i in 1..=n {
        d[i][0] = i as f64 * del;
    }
    for j in 1..=m {
        d[0][j] = j as f64 * ins;
    }
    // Last row (1-based) of `a` holding each symbol, updated per row.
    let mut last_row = vec![0usize; cost.alphabet.len()];
    // Transposition source per cell, for traceback.
    let mut trans_from = vec![vec![(0usize, 0usize); m + 1]; n + 1];
    for i in 1..=n {
        let mut last_col = 0usize;
        for j in 1..=m {
            let k = last_row[b[j - 1]];
            let l = last_col;
            let mut best = d[i - 1][j - 1] + sub(a[i - 1], b[j - 1]);
            best = best.min(d[i - 1][j] + del).min(d[i][j - 1] + ins);
            if k > 0 && l > 0 {
                let t = d[k - 1][l - 1] + (i - k - 1) as f64 * del + (j - l - 1) as f64 * ins + tr;
                trans_from[i][j] = (k, l);
                best = best.min(t);
            }
            d[i][j] = best;
            if a[i - 1] == b[j - 1] {
                last_col = j;
            }
        }
        last_row[a[i - 1]] = i;
    }

    let name = |x: usize| cost.alphabet[x].clone();
    let mut ops = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i][j];
        let close = |v: f64| (v - here).abs() <= TIE * (1.0 + here.abs());
        if i > 0 && j > 0 && a[i - 1] == b[j - 1] && close(d[i - 1][j - 1]) {
            i -= 1;
            j -= 1;
            continue;
        }
        if i > 0 && j > 0 && close(d[i - 1][j - 1] + sub(a[i - 1], b[j - 1])) {
            ops.push(EditOp::Substitute {
                pos_w: i - 1,
                pos_h: j - 1,
                from: name(a[i - 1]),
                to: name(b[j - 1]),
            });
            i -= 1;
            j -= 1;
            continue;
        }
        let (k, l) = trans_from[i][j];
        if k > 0
            && l > 0
            && close(d[k - 1][l - 1] + (i - k - 1) as f64 * del + (j - l - 1) as f64 * ins + tr)
        {
            for jj in (l + 1..j).rev() {
                ops.push(EditOp::Insert { pos_h: jj - 1, symbol: name(b[jj - 1]) });
            }
            for ii in (k + 1..i).rev() {
                ops.push(EditOp::Delete { pos_w: ii - 1, symbol: name(a[ii - 1]) });
            }
            ops.push(EditOp::Transpose {
                pos_w: k - 1,
                pos_h: l - 1,
                first: name(a[k - 1]),
                second: name(a[i - 1]),
            });
            i = k - 1;
            j = l - 1;
            continue;
        }
        if i > 0 && close(d[i - 1][j] + del) {
            ops.push(EditOp::Delete { pos_w: i - 1, symbol: name(a[i - 1]) });
            i -= 1;
            continue;
        }
        debug_assert!(j > 0 && close(d[i][j - 1] + ins));
        ops.push(EditOp::Insert { pos_h: j - 1, symbol: name(b[j - 1]) });
        j -= 1;
    }
    ops.reverse();
    Ok(Alignment { distance: d[n][m], ops })
}

/// Substitution costs from a row-stochastic confusion matrix:
/// `1 − (C[s,s′] + C[s′,s])/2`, clipped to `[0.05, 1]`.
pub fn confusability_costs<S: AsRef<str>>(
    alphabet: &[S],
    confusion: &[Vec<f64>],
    delta: f64,
) -> Result<CostModel> {
    let n = alphabet.len();
    if confusion.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: confusion.len() });
    }
    for (r, row) in confusion.iter().enumerate() {
        if row.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: row.len() });
        }
        let sum: f64 = row.iter().sum();
        if row.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::NotStochastic { row: r, sum });
        }
    }
    let mut cost = CostModel::unit(alphabet);
    cost.transposition = DEFAULT_TRANSPOSITION;
    cost.delta = delta;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let c = 1.0 - 0.5 * (confusion[i][j] + confusion[j][i]);
                cost.substitution[i][j] = c.clamp(CONFUSABLE_FLOOR, 1.0);
            }
        }
    }
    cost.validate()?;
    Ok(cost)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HijackType {
    Insertion,
    Omission,
    Substitution,
    Reordering,
    ParameterManipulation,
    BranchInjection,
    ToolResultPoisoning,
}

impl HijackType {
    /// Forms that leave the skill sequence unchanged and so cannot be read off
    /// an alignment.
    pub const OUT_OF_BAND: [HijackType; 3] = [
        HijackType::ParameterManipulation,
        HijackType::BranchInjection,
        HijackType::ToolResultPoisoning,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    /// One entry per non-match op, in alignment order.
    pub types: Vec<HijackType>,
    pub counts: BTreeMap<HijackType, usize>,
    /// Forms this comparison cannot detect.
    pub out_of_band: Vec<HijackType>,
}

pub fn classify_deviation(ops: &[EditOp]) -> DeviationReport {
    let types: Vec<HijackType> = ops
        .iter()
        .map(|op| match op {
            EditOp::Insert { .. } => HijackType::Insertion,
            EditOp::Delete { .. } => HijackType::Omission,
            EditOp::Substitute { .. } => HijackType::Substitution,
            EditOp::Transpose { .. } => HijackType::Reordering,
        })
        .collect();
    let mut counts = BTreeMap::new();
    for t in &types {
        *counts.entry(*t).or_insert(0) += 1;
    }
    DeviationReport { types, counts, out_of_band: HijackType::OUT_OF_BAND.to_vec() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrity {
    Benign,
    Hijacked,
}

/// Benign iff `distance ≤ delta`.
pub fn integrity_decision(distance: f64, delta: f64) -> Integrity {
    if distance <= delta {
        Integrity::Benign
    } else {
        Integrity::Hijacked
    }
}

/// δ as the `quantile` (e.g. 0.99) of distances on benign workflows,
/// linearly interpolated.
pub fn calibrate_delta(benign_distances: &[f64], quantile: f64) -> Result<f64> {
    if benign_distances.is_empty() {
        return Err(Error::Empty("benign distances"));
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(Error::InvalidArgument(format!("quantile {quantile} outside [0, 1]")));
    }
    let mut s = benign_distances.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(crate::features::percentile_sorted(&s, quantile))
}

/// Policy input: the alphabet and the intended sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policy {
    pub alphabet: Vec<String>,
    pub intended: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceVerdict {
    pub distance: f64,
    pub delta: f64,
    pub decision: Integrity,
    pub ops: Vec<EditOp>,
    pub hijack_types: Vec<HijackType>,
    pub out_of_band: Vec<HijackType>,
}

/// Compares an observed sequence to a policy under `cost`.
pub fn verify_sequence(
    policy: &Policy,
    observed: &WorkflowSequence,
    cost: &CostModel,
) -> Result<SequenceVerdict> {
    if policy.alphabet != cost.alphabet {
        return Err(Error::InvalidArgument(
            "policy alphabet differs from the cost model alphabet".into(),
        ));
    }
    let intended = WorkflowSequence::intended(policy.intended.iter().cloned());
    let al = weighted_edit_distance(&intended, observed, cost)?;
    let dev = classify_deviation(&al.ops);
    Ok(SequenceVerdict {
        distance: al.distance,
        delta: cost.delta,
        decision: integrity_decision(al.distance, cost.delta),
        ops: al.ops,
        hijack_types: dev.types,
        out_of_band: dev.out_of_band,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(s: &str) -> WorkflowSequence {
        WorkflowSequence::intended(s.chars().map(|c| c.to_string()))
    }

    fn unit() -> CostModel {
        CostModel::unit(&["A", "B", "C", "X"])
    }

    #[test]
    fn identity_has_no_ops() {
        let al = weighted_edit_distance(&seq("ABCA"), &seq("ABCA"), &unit()).unwrap();
        assert_eq!(al.distance, 0.0);
        assert!(al.ops.is_empty());
    }

    #[test]
    fn single_deletion() {
        let al = weighted_edit_distance(&seq("A"), &seq(""), &unit()).unwrap();
        assert_eq!(al.distance, 1.0);
        assert_eq!(al.ops, vec![EditOp::Delete { pos_w: 0, symbol: "A".into() }]);
    }

    #[test]
    fn insertion_and_reordering_are_named() {
        let al = weighted_edit_distance(&seq("AB"), &seq("AXB"), &unit()).unwrap();
        assert_eq!(classify_deviation(&al.ops).types, vec![HijackType::Insertion]);
        let al = weighted_edit_distance(&seq("AB"), &seq("BA"), &unit()).unwrap();
        assert_eq!(al.distance, 1.0);
        assert_eq!(classify_deviation(&al.ops).types, vec![HijackType::Reordering]);
    }

    #[test]
    fn transposition_across_an_insertion() {
        // CA -> ABC needs the unrestricted recurrence: swap then insert.
        let al = weighted_edit_distance(&seq("CA"), &seq("ABC"), &unit()).unwrap();
        assert_eq!(al.distance, 2.0);
    }

    #[test]
    fn substitution_preferred_over_delete_insert_tie() {
        let mut c = unit();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    c.substitution[i][j] = 2.0;
                }
            }
        }
        let al = weighted_edit_distance(&seq("A"), &seq("B"), &c).unwrap();
        assert_eq!(al.distance, 2.0);
        assert!(matches!(al.ops[..], [EditOp::Substitute { .. }]));
    }

    #[test]
    fn unknown_symbol_is_rejected() {
        let err = weighted_edit_distance(&seq("AZ"), &seq("A"), &unit()).unwrap_err();
        assert!(matches!(err, Error::UnknownSymbol(s) if s == "Z"));
    }

    #[test]
    fn confusability_extremes() {
        let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let c = confusability_costs(&["a", "b"], &eye, 0.0).unwrap();
        assert_eq!(c.substitution[0][1], 1.0);
        let swap = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let c = confusability_costs(&["a", "b"], &swap, 0.0).unwrap();
        assert_eq!(c.substitution[1][0], CONFUSABLE_FLOOR);
        assert_eq!(c.transposition, 0.75);
        let bad = vec![vec![0.5, 0.4], vec![0.0, 1.0]];
        assert!(matches!(
            confusability_costs(&["a", "b"], &bad, 0.0),
            Err(Error::NotStochastic { row: 0, .. })
        ));
    }

    #[test]
    fn decision_boundary_is_inclusive() {
        assert_eq!(integrity_decision(0.0, 0.0), Integrity::Benign);
        assert_eq!(integrity_decision(1.5, 1.5), Integrity::Benign);
        assert_eq!(integrity_decision(1.51, 1.5), Integrity::Hijacked);
    }

    #[test]
    fn delta_is_the_benign_quantile() {
        let d: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        assert!((calibrate_delta(&d, 0.99).unwrap() - 99.0).abs() < 1e-12);
    }

    #[test]
    fn policy_verdict_round_trips() {
        let policy = Policy { alphabet: vec!["A".into(), "B".into()], intended: vec!["A".into(), "B".into()] };
        let cost = CostModel::unit(&policy.alphabet).with_delta(0.5);
        let v = verify_sequence(&policy, &WorkflowSequence::recovered(["B", "A"]), &cost).unwrap();
        assert_eq!(v.decision, Integrity::Hijacked);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<SequenceVerdict>(&json).unwrap(), v);
    }
}
