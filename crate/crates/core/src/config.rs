//! Experiment configuration and content hashes.
//!
//! One [`ExperimentConfig`] describes a whole experiment. Its JSON schema is
//! generated from these types by [`config_schema`]; the copy published in
//! `docs/config.schema.json` is checked against it by the test suite.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{Aggregation, PoolingRule, DEFAULT_ETA};
use crate::drift::DriftConfig;
use crate::error::{Error, Result};
use crate::evalharness::{FoldMode, DEFAULT_BOOTSTRAP_RESAMPLES, DEFAULT_ECE_BINS, DEFAULT_MI_BINS};
use crate::features::FeatureConfig;
use crate::forest::ForestParams;
use crate::pipeline::{CorpusSpec, WindowingConfig};
use crate::survey::{HostEmissionMap, SweepConfig, DEFAULT_FLAG_RATIO, DEFAULT_LAMBDA, DEFAULT_VARIANCE_FLOOR_DB2};
use crate::verify::{CostModel, DEFAULT_TRANSPOSITION};

/// SHA-256 of the compact JSON serialization, hex encoded.
///
/// Struct fields serialize in declaration order and maps used in
/// configurations are ordered, so equal values always hash equally.
pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("configuration serializes to JSON");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub aggregation: Aggregation,
    /// Record threshold `η`; a record is flagged when `A > η`.
    pub eta: f64,
    /// How Stage 1 pools window posteriors into a record posterior.
    pub pooling: PoolingRule,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { aggregation: Aggregation::VoteFraction, eta: DEFAULT_ETA, pooling: PoolingRule::Mean }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// Explicit cost model. When absent, substitution costs come from the
    /// Stage-1 confusion matrix of the last evaluation, or unit costs if
    /// there is none.
    #[serde(default)]
    pub cost: Option<CostModel>,
    pub delta: f64,
    pub transposition: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { cost: None, delta: 0.0, transposition: DEFAULT_TRANSPOSITION }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: FoldMode,
    /// Number of record-grouped folds in random mode.
    pub random_folds: usize,
    /// Training and test cycles in cross-run mode.
    #[serde(default)]
    pub train_cycles: Vec<u32>,
    #[serde(default)]
    pub test_cycles: Vec<u32>,
    pub seed: u64,
    pub bootstrap_resamples: usize,
    pub ece_bins: usize,
    pub mi_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: FoldMode::Loco,
            random_folds: 10,
            train_cycles: Vec::new(),
            test_cycles: Vec::new(),
            seed: 0,
            bootstrap_resamples: DEFAULT_BOOTSTRAP_RESAMPLES,
            ece_bins: DEFAULT_ECE_BINS,
            mi_bins: DEFAULT_MI_BINS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SurveySection {
    pub host: HostEmissionMap,
    pub sweep: SweepConfig,
    pub lambda: f64,
    pub flag_ratio: f64,
    pub variance_floor_db2: f64,
}

impl SurveySection {
    pub fn new(host: HostEmissionMap, sweep: SweepConfig) -> Self {
        SurveySection {
            host,
            sweep,
            lambda: DEFAULT_LAMBDA,
            flag_ratio: DEFAULT_FLAG_RATIO,
            variance_floor_db2: DEFAULT_VARIANCE_FLOOR_DB2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub windowing: WindowingConfig,
    pub features: FeatureConfig,
    #[serde(default)]
    pub drift: DriftConfig,
    #[serde(default)]
    pub forest: ForestParams,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub survey: Option<SurveySection>,
}

impl ExperimentConfig {
    /// Default pipeline settings around `corpus`, with features sized for
    /// its sample rate.
    pub fn for_corpus(name: impl Into<String>, corpus: CorpusSpec) -> Self {
        let features = FeatureConfig::for_sample_rate(corpus.sample_rate_hz());
        ExperimentConfig {
            name: name.into(),
            corpus,
            windowing: WindowingConfig::default(),
            features,
            drift: DriftConfig::default(),
            forest: ForestParams::default(),
            detector: DetectorConfig::default(),
            verify: VerifyConfig::default(),
            eval: EvalConfig::default(),
            survey: None,
        }
    }

    /// Checks cross-field constraints the schema cannot express.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        self.corpus.validate()?;
        self.features.validate()?;
        self.drift.validate()?;
        self.forest.validate()?;
        if self.features.sample_rate_hz != self.corpus.sample_rate_hz() {
            return bad(format!(
                "feature sample rate {} differs from the corpus rate {}",
                self.features.sample_rate_hz,
                self.corpus.sample_rate_hz()
            ));
        }
        if self.corpus.channels[0].sample_rate_hz != self.corpus.channels[1].sample_rate_hz {
            return bad("both receivers must share one sample rate".into());
        }
        let w = &self.windowing;
        if !(w.tau_s > 0.0 && w.rho_s > 0.0) {
            return bad(format!("window length {} and stride {} must be positive", w.tau_s, w.rho_s));
        }
        let min_window = (w.tau_s * self.features.sample_rate_hz) as usize;
        if min_window < self.features.segment_len {
            return bad(format!(
                "a {} s window holds fewer samples than one {}-sample Welch segment",
                w.tau_s, self.features.segment_len
            ));
        }
        if !(0.0..=1.0).contains(&self.detector.eta) {
            return bad(format!("η = {} outside [0, 1]", self.detector.eta));
        }
        if !(self.verify.delta >= 0.0) || !(self.verify.transposition >= 0.0) {
            return bad("verify delta and transposition cost must be non-negative".into());
        }
        if let Some(c) = &self.verify.cost {
            c.validate()?;
        }
        let e = &self.eval;
        if e.mode == FoldMode::Random && e.random_folds < 2 {
            return bad(format!("{} random folds; at least 2 required", e.random_folds));
        }
        if e.mode == FoldMode::CrossRun && (e.train_cycles.is_empty() || e.test_cycles.is_empty()) {
            return bad("cross-run evaluation needs train_cycles and test_cycles".into());
        }
        if e.bootstrap_resamples < 100 || e.ece_bins == 0 || e.mi_bins < 2 {
            return bad("bootstrap_resamples >= 100, ece_bins >= 1 and mi_bins >= 2 required".into());
        }
        if let Some(s) = &self.survey {
            if s.sweep.carriers_mhz.is_empty() || !(s.sweep.dwell_s > 0.0) {
                return bad("survey sweep needs carriers and a positive dwell".into());
            }
            if !(s.lambda >= 0.0 && s.flag_ratio > 0.0 && s.variance_floor_db2 > 0.0) {
                return bad("survey lambda, flag ratio and variance floor must be positive".into());
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }

    /// Parses and validates a configuration. Unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes to JSON") + "\n"
    }
}

/// JSON schema of [`ExperimentConfig`].
pub fn config_schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(ExperimentConfig)).expect("schema serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    #[test]
    fn round_trip_and_hash() {
        let c = ExperimentConfig::for_corpus("f3", presets::focused3(1));
        c.validate().unwrap();
        let back = ExperimentConfig::from_json(&c.to_json_pretty()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut d = c.clone();
        d.forest.n_trees = 10;
        assert_ne!(d.hash(), c.hash());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let c = ExperimentConfig::for_corpus("f3", presets::focused3(1));
        let mut v = serde_json::to_value(&c).unwrap();
        v["drift"]["k"] = 3.into();
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
        let mut bad = c.clone();
        bad.detector.eta = 1.5;
        assert!(bad.validate().is_err());
        let mut bad = c;
        bad.features.sample_rate_hz = 2e6;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn schema_names_every_section() {
        let s = config_schema();
        let props = s["properties"].as_object().unwrap();
        for k in ["corpus", "windowing", "features", "drift", "forest", "detector", "verify", "eval", "survey"] {
            assert!(props.contains_key(k), "{k}");
        }
        assert_eq!(s["additionalProperties"], serde_json::Value::Bool(false));
    }
}
