use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use emwatch::config::ExperimentConfig;
use emwatch::presets;
use serde_json::Value;

fn small_config(name: &str, cycles: u32, records_per_skill: u32, duration_s: f64) -> ExperimentConfig {
    let mut corpus = presets::focused3(11);
    corpus.skills = presets::skill_catalog(duration_s);
    corpus.cycles = cycles;
    corpus.records_per_skill = records_per_skill;
    let mut c = ExperimentConfig::for_corpus(name, corpus);
    c.forest.n_trees = 40;
    c.eval.bootstrap_resamples = 100;
    c
}

struct Exp {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Exp {
    fn new(c: &ExperimentConfig) -> Exp {
        let tmp = tempfile::tempdir().unwrap();
        let config = tmp.path().join("config.json");
        fs::write(&config, c.to_json_pretty()).unwrap();
        Exp { root: tmp.path().join("runs"), config, _tmp: tmp }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_emwatch"))
            .args(args)
            .arg("--config")
            .arg(&self.config)
            .env("EMWATCH_ROOT", &self.root)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Value {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        serde_json::from_slice(&out.stdout).unwrap()
    }

    fn fail(&self, args: &[&str]) -> Value {
        let out = self.run(args);
        assert!(!out.status.success(), "{args:?} succeeded");
        let err: Value = serde_json::from_slice(&out.stderr).unwrap();
        err["error"].clone()
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn simulate_lists_every_record() {
    let e = Exp::new(&small_config("sim", 5, 1, 0.5));
    let s = e.ok(&["simulate"]);
    assert_eq!(s["records"], 15);
    let m = read_json(&e.dir("sim").join("corpus/manifest.json"));
    assert_eq!(m["records"].as_array().unwrap().len(), 15);
    assert_eq!(m["config_hash"], s["config_hash"]);

    let before = fs::read(e.dir("sim").join("corpus/manifest.json")).unwrap();
    e.ok(&["simulate"]);
    assert_eq!(fs::read(e.dir("sim").join("corpus/manifest.json")).unwrap(), before);
}

#[test]
fn full_chain_reports_macro_f1_per_fold() {
    let e = Exp::new(&small_config("chain", 4, 2, 1.5));
    e.ok(&["simulate"]);
    e.ok(&["extract"]);
    let cache = e.dir("chain").join("features/windows.emfeat");
    let first = fs::read(&cache).unwrap();
    e.ok(&["extract"]);
    assert_eq!(fs::read(&cache).unwrap(), first, "extraction is byte-reproducible");

    e.ok(&["train"]);
    let ev = e.ok(&["evaluate"]);
    let folds = ev["folds"].as_array().unwrap();
    assert_eq!(folds.len(), 4, "one LOCO fold per cycle");
    for f in folds {
        assert_eq!(f["task"], "skill");
        let f1 = f["macro_f1"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&f1));
    }

    let r = e.ok(&["report"]);
    assert!(r["skill"]["macro_f1"].as_f64().is_some());
    let dir = e.dir("chain");
    let hash = r["config_hash"].as_str().unwrap();
    let metrics = read_json(&dir.join("report/skill/metrics.json"));
    assert_eq!(metrics["config_hash"], hash);
    assert_eq!(metrics["folds"].as_array().unwrap().len(), 4);
    let folds_csv = fs::read_to_string(dir.join("report/skill/folds.csv")).unwrap();
    assert_eq!(folds_csv.lines().next().unwrap(), format!("# config_hash={hash}"));
    assert_eq!(read_json(&dir.join("models/folds.json"))["config_hash"], hash);
    assert_eq!(read_json(&dir.join("evaluate/skill/fold-00.json"))["config_hash"], hash);

    let log = fs::read_to_string(dir.join("run.log")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().all(|l| l["status"] == "ok" && l["config_hash"] == hash));
    assert!(!dir.join(".emwatch.lock").exists());
}

#[test]
fn verify_identical_sequences_is_benign() {
    let e = Exp::new(&small_config("ver", 1, 1, 0.5));
    let policy = e.root.parent().unwrap().join("policy.json");
    fs::write(&policy, r#"{"alphabet": ["file_read", "db_query", "shell_exec"], "intended": ["file_read", "db_query", "shell_exec"]}"#).unwrap();
    let p = policy.to_str().unwrap();
    let v = e.ok(&["verify", "--policy", p, "--observed", "file_read,db_query,shell_exec"]);
    assert_eq!(v["decision"], "benign");
    assert_eq!(v["distance"], 0.0);

    let v = e.ok(&["verify", "--policy", p, "--observed", "file_read,shell_exec,db_query"]);
    assert_eq!(v["decision"], "hijacked");
    assert_eq!(v["distance"], 0.75);
    let saved = read_json(&e.dir("ver").join("verify/verdict.json"));
    assert_eq!(saved["config_hash"], v["config_hash"]);
}

#[test]
fn overrides_change_the_hash_and_are_logged() {
    let e = Exp::new(&small_config("ovr", 1, 1, 0.5));
    let policy = e.root.parent().unwrap().join("policy.json");
    fs::write(&policy, r#"{"alphabet": ["a"], "intended": ["a"]}"#).unwrap();
    let p = policy.to_str().unwrap();
    let base = e.ok(&["verify", "--policy", p, "--observed", "a"]);
    let over = e.ok(&["verify", "--policy", p, "--observed", "a", "--set", "verify.delta=0.5", "--seed", "9"]);
    assert_ne!(base["config_hash"], over["config_hash"]);
    assert_eq!(over["delta"], 0.5);
    let log = fs::read_to_string(e.dir("ovr").join("run.log")).unwrap();
    let last: Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(last["overrides"], serde_json::json!(["verify.delta=0.5", "seed=9"]));
    assert!(last["started"].as_str().unwrap().ends_with('Z'));
}

#[test]
fn schema_violations_fail_with_json_errors() {
    let e = Exp::new(&small_config("bad", 1, 1, 0.5));
    let err = e.fail(&["simulate", "--set", "forest.n_trees=\"many\""]);
    assert_eq!(err["kind"], "schema");
    assert!(err["message"].as_str().unwrap().contains("n_trees"), "{err}");
    let err = e.fail(&["simulate", "--set", "drift.unknown_key=1"]);
    assert_eq!(err["kind"], "schema");
    let err = e.fail(&["simulate", "--set", "detector.eta=2.0"]);
    assert_eq!(err["kind"], "invalid_argument");
}

#[test]
fn missing_inputs_and_locks_are_reported() {
    let e = Exp::new(&small_config("lock", 1, 1, 0.5));
    let err = e.fail(&["extract"]);
    assert_eq!(err["kind"], "missing_input");
    let err = e.fail(&["evaluate"]);
    assert_eq!(err["kind"], "missing_input");

    fs::write(e.dir("lock").join(".emwatch.lock"), "1").unwrap();
    let err = e.fail(&["simulate"]);
    assert_eq!(err["kind"], "locked");
}

#[test]
fn attack_corpus_gets_state_verdicts() {
    let mut corpus = presets::attack20(3);
    corpus.skills = presets::skill_catalog(3.0);
    corpus.background = Some(presets::idle_profile(3.0));
    corpus.payloads = vec![presets::exfil_payload(1.0)];
    corpus.payload_s = 1.0;
    corpus.cycles = 2;
    corpus.attacks_per_cycle = 2;
    let mut c = ExperimentConfig::for_corpus("atk", corpus);
    c.forest.n_trees = 40;
    c.eval.bootstrap_resamples = 100;
    let e = Exp::new(&c);
    for cmd in ["simulate", "extract", "train", "evaluate"] {
        e.ok(&[cmd]);
    }
    let folds = read_json(&e.dir("atk").join("models/folds.json"));
    assert_eq!(folds["tasks"], serde_json::json!(["skill", "state"]));
    let r = e.ok(&["report"]);
    assert!(r["state"].is_object(), "{r}");

    let verdicts = fs::read_to_string(e.dir("atk").join("report/state/verdicts.jsonl")).unwrap();
    let mut lines = verdicts.lines().map(|l| serde_json::from_str::<Value>(l).unwrap());
    assert_eq!(lines.next().unwrap()["config_hash"], r["config_hash"]);
    let rest: Vec<Value> = lines.collect();
    assert_eq!(rest.len(), 12, "one verdict per record");
    for v in &rest {
        assert!(v["v"] == "benign" || v["v"] == "hijacked");
        let a = v["A"].as_f64().unwrap();
        assert_eq!(v["v"] == "hijacked", a > v["eta"].as_f64().unwrap());
    }
}

#[test]
fn survey_ranks_carriers_and_flags_the_governor_tone() {
    let mut c = presets::experiments().into_iter().find(|c| c.name == "desk_survey").unwrap();
    c.name = "srv".into();
    let e = Exp::new(&c);
    let s = e.ok(&["survey"]);
    assert_eq!(s["f_cpu_mhz"], 80.0);
    assert_eq!(s["f_ram_mhz"], 800.0);
    assert_eq!(s["governor_flagged_mhz"], serde_json::json!([1800.0]));
    let dir = e.dir("srv").join("survey");
    let governor = read_json(&dir.join("governor.json"));
    assert_eq!(governor["config_hash"], s["config_hash"]);
    for f in ["sweep_pinned.csv", "sweep_unpinned.csv", "ranking.csv"] {
        let text = fs::read_to_string(dir.join(f)).unwrap();
        assert!(text.starts_with("# config_hash="), "{f}");
    }

    let plain = Exp::new(&small_config("nosurvey", 1, 1, 0.5));
    assert_eq!(plain.fail(&["survey"])["kind"], "invalid_argument");
}
