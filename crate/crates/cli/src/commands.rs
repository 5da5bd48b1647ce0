//! Subcommand bodies. Each returns a JSON summary for stdout and the run log.
//!
//! Experiment directory layout:
//!
//! | path | written by |
//! |---|---|
//! | `corpus/` | `simulate` (manifest, IQ, events, temperature) |
//! | `survey/` | `survey` (sweeps, ranking, governor report) |
//! | `features/windows.emfeat` | `extract` |
//! | `models/folds.json`, `models/<task>/fold-NN.stage` | `train` |
//! | `evaluate/<task>/fold-NN.json` | `evaluate` |
//! | `report/<task>/` | `report` (metrics files, verdict log) |
//! | `verify/verdict.json` | `verify` |

use std::fs;
use std::io::Write;
use std::path::Path;

use emwatch::detector::record_verdict;
use emwatch::emcorpus::io::{read_manifest, write_manifest, write_record, Manifest, FORMAT_VERSION};
use emwatch::emcorpus::RecordLabel;
use emwatch::evalharness::{cross_run_fold, loco_folds, random_folds, roc_auc, ClassificationReport, FoldMode, FoldPlan, MetricsReport};
use emwatch::features::cache::{read_cache, write_cache};
use emwatch::features::{FeatureTable, V10_DIM};
use emwatch::pipeline::{
    fold_evidence, predict_fold, record_scores, skill_report, state_report, stored_record_table, task_rows, train_fold,
    FoldOutcome, Task,
};
use emwatch::survey::{band_deltas, governor_diagnosis, run_sweep, select_carriers, write_ranking_csv, write_sweep_csv};
use emwatch::verify::{confusability_costs, verify_sequence, CostModel, Policy, WorkflowSequence};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::context::{io_failure, Context, Failure};
use crate::stagefile;

pub const FEATURE_CACHE: &str = "features/windows.emfeat";
pub const FOLDS_FILE: &str = "models/folds.json";

type Out = Result<Value, Failure>;

fn task_name(t: Task) -> &'static str {
    match t {
        Task::Skill => "skill",
        Task::State => "state",
    }
}

pub fn simulate(ctx: &Context) -> Out {
    let spec = &ctx.config.corpus;
    let dir = ctx.fresh_dir("corpus")?;
    // Records are rendered and written one at a time per worker; the corpus
    // is never held in memory as a whole.
    let records = spec
        .plan()
        .par_iter()
        .map(|p| write_record(&spec.render(p)?, &dir))
        .collect::<emwatch::Result<Vec<_>>>()?;
    let manifest = Manifest { format_version: FORMAT_VERSION, config_hash: Some(ctx.hash.clone()), records };
    write_manifest(&manifest, &dir)?;
    Ok(json!({
        "command": "simulate",
        "config_hash": ctx.hash,
        "records": manifest.records.len(),
        "manifest": dir.join("manifest.json"),
    }))
}

pub fn survey(ctx: &Context) -> Out {
    let s = ctx
        .config
        .survey
        .as_ref()
        .ok_or_else(|| Failure::new("invalid_argument", "the config has no `survey` section"))?;
    let dir = ctx.fresh_dir("survey")?;
    let mut pinned_cfg = s.sweep.clone();
    pinned_cfg.pinned = true;
    let mut unpinned_cfg = s.sweep.clone();
    unpinned_cfg.pinned = false;
    let pinned = run_sweep(&s.host, &pinned_cfg)?;
    let unpinned = run_sweep(&s.host, &unpinned_cfg)?;
    let selection = select_carriers(&band_deltas(&pinned)?, s.lambda)?;
    let governor = governor_diagnosis(&pinned, &unpinned, s.flag_ratio, s.variance_floor_db2)?;
    let h = Some(ctx.hash.as_str());
    write_sweep_csv(&dir.join("sweep_pinned.csv"), &pinned, h)?;
    write_sweep_csv(&dir.join("sweep_unpinned.csv"), &unpinned, h)?;
    write_ranking_csv(&dir.join("ranking.csv"), &selection, h)?;
    ctx.write_json(&dir.join("governor.json"), &json!({ "config_hash": ctx.hash, "report": governor }))?;
    Ok(json!({
        "command": "survey",
        "config_hash": ctx.hash,
        "f_cpu_mhz": selection.f_cpu_mhz,
        "f_ram_mhz": selection.f_ram_mhz,
        "governor_flagged_mhz": governor.flagged(),
    }))
}

pub fn extract(ctx: &Context) -> Out {
    let corpus = ctx.input("corpus", "corpus directory (run `simulate` first)")?;
    let manifest = read_manifest(&corpus)?;
    if manifest.records.is_empty() {
        return Err(Failure::new("missing_input", "the corpus manifest lists no records"));
    }
    let c = &ctx.config;
    // Each record is read window by window, so memory stays bounded by the
    // window length times the worker count.
    let parts = manifest
        .records
        .par_iter()
        .map(|e| stored_record_table(&corpus, e, &c.windowing, &c.features))
        .collect::<emwatch::Result<Vec<_>>>()?;
    let mut table = FeatureTable::new(V10_DIM);
    for t in &parts {
        table.extend(t)?;
    }
    let path = ctx.path(FEATURE_CACHE);
    fs::create_dir_all(path.parent().expect("cache path has a parent")).map_err(|e| io_failure(&path, e))?;
    write_cache(&path, &table, &ctx.hash)?;
    Ok(json!({
        "command": "extract",
        "config_hash": ctx.hash,
        "corpus_config_hash": manifest.config_hash,
        "records": manifest.records.len(),
        "windows": table.len(),
        "cache": path,
    }))
}

#[derive(Serialize, Deserialize)]
struct FoldsFile {
    config_hash: String,
    tasks: Vec<Task>,
    folds: Vec<FoldPlan>,
}

fn load_table(ctx: &Context) -> Result<FeatureTable, Failure> {
    let path = ctx.input(FEATURE_CACHE, "feature cache (run `extract` first)")?;
    Ok(read_cache(&path)?.1)
}

/// Tasks the table supports: skill classification needs two skills among
/// normal records, state labelling needs attack records.
fn tasks_for(table: &FeatureTable) -> Vec<Task> {
    let mut tasks = Vec::new();
    let skills: std::collections::BTreeSet<&str> =
        task_rows(table, Task::Skill).into_iter().map(|i| table.rows[i].skill.as_str()).collect();
    if skills.len() >= 2 {
        tasks.push(Task::Skill);
    }
    if table.rows.iter().any(|m| m.record_label == RecordLabel::Attack) {
        tasks.push(Task::State);
    }
    tasks
}

fn stage_path(task: Task, fold_id: usize) -> String {
    format!("models/{}/fold-{fold_id:02}.stage", task_name(task))
}

pub fn train(ctx: &Context) -> Out {
    let table = load_table(ctx)?;
    let c = &ctx.config;
    let folds = match c.eval.mode {
        FoldMode::Loco => loco_folds(&table)?,
        FoldMode::Random => random_folds(&table, c.eval.random_folds, c.eval.seed)?,
        FoldMode::CrossRun => vec![cross_run_fold(&table, &c.eval.train_cycles, &c.eval.test_cycles)?],
    };
    let tasks = tasks_for(&table);
    if tasks.is_empty() {
        return Err(Failure::new("invalid_argument", "features hold neither two skills nor attack records"));
    }
    ctx.fresh_dir("models")?;
    let mut trained = Vec::new();
    for &task in &tasks {
        fs::create_dir_all(ctx.path(&format!("models/{}", task_name(task))))
            .map_err(|e| io_failure(&ctx.dir, e))?;
        for f in &folds {
            let model = train_fold(&table, f, task, &c.drift, &c.forest)?;
            stagefile::write(&ctx.path(&stage_path(task, f.fold_id)), &ctx.hash, f.fold_id, &model)?;
            trained.push(json!({ "task": task, "fold_id": f.fold_id, "test_cycles": f.test_cycles }));
        }
    }
    let ff = FoldsFile { config_hash: ctx.hash.clone(), tasks, folds };
    ctx.write_json(&ctx.path(FOLDS_FILE), &ff)?;
    Ok(json!({ "command": "train", "config_hash": ctx.hash, "models": trained }))
}

#[derive(Serialize, Deserialize)]
struct FoldFile {
    config_hash: String,
    outcome: FoldOutcome,
}

fn fold_metric(ctx: &Context, table: &FeatureTable, o: &FoldOutcome) -> Result<Value, Failure> {
    Ok(match o.task {
        Task::Skill => {
            let r = skill_report(std::slice::from_ref(o), ctx.config.detector.pooling, &ctx.hash, None)?;
            json!({ "task": "skill", "fold_id": o.fold_id, "test_cycles": o.test_cycles,
                    "macro_f1": r.folds[0].macro_f1, "accuracy": r.folds[0].accuracy })
        }
        Task::State => {
            let s = record_scores(o, table, ctx.config.detector.aggregation)?;
            let scores: Vec<f64> = s.iter().map(|r| r.score).collect();
            let labels: Vec<bool> = s.iter().map(|r| r.attack).collect();
            let auc = roc_auc(&scores, &labels).ok();
            json!({ "task": "state", "fold_id": o.fold_id, "test_cycles": o.test_cycles, "record_auc": auc })
        }
    })
}

pub fn evaluate(ctx: &Context) -> Out {
    let path = ctx.input(FOLDS_FILE, "fold plan (run `train` first)")?;
    let text = fs::read_to_string(&path).map_err(|e| io_failure(&path, e))?;
    let ff: FoldsFile = serde_json::from_str(&text).map_err(|e| Failure::new("format", format!("{}: {e}", path.display())))?;
    let table = load_table(ctx)?;
    ctx.fresh_dir("evaluate")?;
    let mut folds = Vec::new();
    for &task in &ff.tasks {
        let dir = ctx.path(&format!("evaluate/{}", task_name(task)));
        fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
        for f in &ff.folds {
            let sp = ctx.input(&stage_path(task, f.fold_id), "trained model")?;
            let (_, fold_id, model) = stagefile::read(&sp)?;
            if fold_id != f.fold_id || model.task != task {
                return Err(Failure::new("format", format!("{} does not belong to fold {}", sp.display(), f.fold_id)));
            }
            let outcome = predict_fold(&model, &table, f)?;
            folds.push(fold_metric(ctx, &table, &outcome)?);
            let out = dir.join(format!("fold-{:02}.json", f.fold_id));
            ctx.write_json(&out, &FoldFile { config_hash: ctx.hash.clone(), outcome })?;
        }
    }
    Ok(json!({ "command": "evaluate", "config_hash": ctx.hash, "folds": folds }))
}

fn load_outcomes(dir: &Path) -> Result<Vec<FoldOutcome>, Failure> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| io_failure(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| io_failure(p, e))?;
            let f: FoldFile = serde_json::from_str(&text).map_err(|e| Failure::new("format", format!("{}: {e}", p.display())))?;
            Ok(f.outcome)
        })
        .collect()
}

fn write_metrics(ctx: &Context, rel: &str, report: &MetricsReport) -> Result<Vec<String>, Failure> {
    Ok(emwatch::evalharness::write_report(&ctx.path(rel), report)?)
}

pub fn report(ctx: &Context) -> Out {
    let eval = ctx.input("evaluate", "fold outputs (run `evaluate` first)")?;
    let c = &ctx.config;
    ctx.fresh_dir("report")?;
    let mut summary = json!({ "command": "report", "config_hash": ctx.hash });
    let skill_dir = eval.join("skill");
    if skill_dir.is_dir() {
        let outcomes = load_outcomes(&skill_dir)?;
        let r = skill_report(&outcomes, c.detector.pooling, &ctx.hash, Some((c.eval.bootstrap_resamples, c.eval.seed)))?;
        let files = write_metrics(ctx, "report/skill", &r)?;
        summary["skill"] = json!({
            "macro_f1": r.classification.as_ref().map(|m| m.macro_f1),
            "macro_f1_ci": r.macro_f1_ci,
            "folds": r.folds.len(),
            "files": files,
        });
    }
    let state_dir = eval.join("state");
    if state_dir.is_dir() {
        let outcomes = load_outcomes(&state_dir)?;
        let table = load_table(ctx)?;
        let r = state_report(&outcomes, &table, c.detector.aggregation, c.eval.ece_bins, &ctx.hash)?;
        let files = write_metrics(ctx, "report/state", &r)?;
        let path = ctx.path("report/state/verdicts.jsonl");
        let mut w = std::io::BufWriter::new(fs::File::create(&path).map_err(|e| io_failure(&path, e))?);
        writeln!(w, "{}", json!({ "config_hash": ctx.hash })).map_err(|e| io_failure(&path, e))?;
        let mut flagged = 0;
        for o in &outcomes {
            let ev = fold_evidence(o);
            let mut start = 0;
            while start < ev.len() {
                let end = start + ev[start..].iter().take_while(|e| e.record_id == ev[start].record_id).count();
                let v = record_verdict(&ev[start..end], c.detector.aggregation, c.detector.eta)?;
                flagged += (v.decision == emwatch::detector::RecordDecision::Hijacked) as usize;
                emwatch::detector::write_verdict_log(&mut w, std::slice::from_ref(&v))?;
                start = end;
            }
        }
        w.flush().map_err(|e| io_failure(&path, e))?;
        summary["state"] = json!({
            "roc_auc": r.detection.as_ref().map(|d| d.roc_auc),
            "flagged_records": flagged,
            "files": files,
        });
    }
    if summary.get("skill").is_none() && summary.get("state").is_none() {
        return Err(Failure::new("missing_input", format!("no fold outputs under {}", eval.display())));
    }
    Ok(summary)
}

/// Row-normalized confusion matrix; a class with no support keeps an
/// identity row.
fn confusion_rates(c: &ClassificationReport) -> Vec<Vec<f64>> {
    c.confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n: usize = row.iter().sum();
            row.iter()
                .enumerate()
                .map(|(j, &v)| if n == 0 { (i == j) as u8 as f64 } else { v as f64 / n as f64 })
                .collect()
        })
        .collect()
}

pub fn verify(ctx: &Context, policy: &Path, observed: &[String]) -> Out {
    let text = fs::read_to_string(policy).map_err(|e| io_failure(policy, e))?;
    let policy: Policy =
        serde_json::from_str(&text).map_err(|e| Failure::new("format", format!("{}: {e}", policy.display())))?;
    let v = &ctx.config.verify;
    let metrics = ctx.path("report/skill/metrics.json");
    let (cost, source) = if let Some(c) = &v.cost {
        (c.clone(), "config".to_string())
    } else if let Some(cls) = fs::read_to_string(&metrics)
        .ok()
        .and_then(|t| serde_json::from_str::<MetricsReport>(&t).ok())
        .and_then(|r| r.classification)
        .filter(|c| c.classes == policy.alphabet)
    {
        let mut cost = confusability_costs(&policy.alphabet, &confusion_rates(&cls), v.delta)?;
        cost.transposition = v.transposition;
        (cost, metrics.display().to_string())
    } else {
        let mut cost = CostModel::unit(&policy.alphabet).with_delta(v.delta);
        cost.transposition = v.transposition;
        (cost, "unit".to_string())
    };
    let seq = WorkflowSequence::recovered(observed.iter().cloned());
    let verdict = verify_sequence(&policy, &seq, &cost)?;
    let dir = ctx.path("verify");
    fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    let out = json!({
        "config_hash": ctx.hash,
        "cost_source": source,
        "cost": cost,
        "intended": policy.intended,
        "observed": observed,
        "verdict": verdict,
    });
    ctx.write_json(&dir.join("verdict.json"), &out)?;
    Ok(json!({
        "command": "verify",
        "config_hash": ctx.hash,
        "decision": verdict.decision,
        "distance": verdict.distance,
        "delta": verdict.delta,
        "hijack_types": verdict.hijack_types,
    }))
}
