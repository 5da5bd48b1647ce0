//! Config loading, the experiment-directory lock, and the run log.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use emwatch::config::{config_schema, ExperimentConfig};
use emwatch::Error;
use serde::Serialize;
use serde_json::{json, Value};

pub const LOCK_FILE: &str = ".emwatch.lock";
pub const RUN_LOG: &str = "run.log";

/// A failed run: a stable `kind` plus a human-readable message.
#[derive(Debug, Serialize)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Failure { kind, message: message.into() }
    }

    pub fn missing(path: &Path, what: &str) -> Self {
        Failure::new("missing_input", format!("{what} not found at {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        json!({ "error": self }).to_string()
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Leakage(_) => "leakage",
            Error::Schema(_) => "schema",
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => "missing_input",
            Error::Io { .. } => "io",
            Error::Parse { .. } | Error::Format(_) | Error::ManifestMismatch(_) | Error::Json(_) => "format",
            Error::InvalidArgument(_) | Error::DegenerateConfiguration(_) => "invalid_argument",
            _ => "pipeline",
        };
        Failure::new(kind, e.to_string())
    }
}

pub fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::from(Error::Io { path: path.to_path_buf(), source: e })
}

/// Exclusive ownership of an experiment directory for one process.
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Lock, Failure> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure::new(
                "locked",
                format!("{} is held by another process; remove it if that process is gone", path.display()),
            )),
            Err(e) => Err(io_failure(&path, e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Sets `path` (dotted) in `root`, creating intermediate objects.
fn set_key(root: &mut Value, path: &str, value: Value) -> Result<(), Failure> {
    let bad = || Failure::new("invalid_argument", format!("cannot set `{path}`"));
    let mut node = root;
    let mut keys = path.split('.').peekable();
    while let Some(k) = keys.next() {
        if k.is_empty() {
            return Err(bad());
        }
        let obj = node.as_object_mut().ok_or_else(bad)?;
        if keys.peek().is_none() {
            obj.insert(k.to_string(), value);
            return Ok(());
        }
        node = obj.entry(k).or_insert_with(|| json!({}));
    }
    Err(bad())
}

fn schema_errors(value: &Value) -> Vec<String> {
    let schema = config_schema();
    let validator = jsonschema::validator_for(&schema).expect("generated schema is a valid draft");
    validator
        .iter_errors(value)
        .map(|e| {
            let at = e.instance_path().to_string();
            format!("{}: {e}", if at.is_empty() { "/" } else { at.as_str() })
        })
        .collect()
}

/// Parses, overrides and validates a config file.
pub fn load_config(path: &Path, seed: Option<u64>, sets: &[String]) -> Result<(ExperimentConfig, Vec<String>), Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    let mut value: Value =
        serde_json::from_str(&text).map_err(|e| Failure::new("format", format!("{}: {e}", path.display())))?;
    let mut applied = Vec::new();
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::new("invalid_argument", format!("override `{s}` is not KEY=VALUE")))?;
        let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        set_key(&mut value, k, v)?;
        applied.push(s.clone());
    }
    let errors = schema_errors(&value);
    if !errors.is_empty() {
        return Err(Failure::new("schema", errors.join("; ")));
    }
    let mut config: ExperimentConfig = serde_json::from_value(value).map_err(|e| Failure::new("schema", e.to_string()))?;
    if let Some(s) = seed {
        config.corpus.seed = s;
        config.forest.seed = s;
        config.eval.seed = s;
        if let Some(sv) = config.survey.as_mut() {
            sv.sweep.seed = s;
        }
        applied.push(format!("seed={s}"));
    }
    config.validate()?;
    Ok((config, applied))
}

pub struct Context {
    pub config: ExperimentConfig,
    pub hash: String,
    pub dir: PathBuf,
    config_path: PathBuf,
    overrides: Vec<String>,
    threads: Option<usize>,
    started: SystemTime,
    _lock: Lock,
}

impl Context {
    pub fn open(
        config_path: &Path,
        root: &Path,
        seed: Option<u64>,
        sets: &[String],
        threads: Option<usize>,
    ) -> Result<Context, Failure> {
        let started = SystemTime::now();
        let (config, overrides) = load_config(config_path, seed, sets)?;
        if config.name.is_empty() || config.name.contains(['/', '\\']) || config.name.starts_with('.') {
            return Err(Failure::new("invalid_argument", format!("experiment name `{}` is not a directory name", config.name)));
        }
        let dir = root.join(&config.name);
        fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
        let lock = Lock::acquire(&dir)?;
        Ok(Context {
            hash: config.hash(),
            config,
            dir,
            config_path: config_path.to_path_buf(),
            overrides,
            threads,
            started,
            _lock: lock,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// `rel` under the experiment directory, which must exist.
    pub fn input(&self, rel: &str, what: &str) -> Result<PathBuf, Failure> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Failure::missing(&p, what))
        }
    }

    /// Creates `rel` (and parents), emptying it first if it exists.
    pub fn fresh_dir(&self, rel: &str) -> Result<PathBuf, Failure> {
        let p = self.path(rel);
        if p.exists() {
            fs::remove_dir_all(&p).map_err(|e| io_failure(&p, e))?;
        }
        fs::create_dir_all(&p).map_err(|e| io_failure(&p, e))?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&self, path: &Path, value: &T) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Failure::from(Error::from(e)))?;
        fs::write(path, text + "\n").map_err(|e| io_failure(path, e))
    }

    /// Appends one JSON line describing this invocation. Timestamps live
    /// only here, so every other output is reproducible byte for byte.
    pub fn log_run(&self, command: &str, result: &Result<Value, Failure>) -> Result<(), Failure> {
        let stamp = |t: SystemTime| humantime::format_rfc3339_millis(t).to_string();
        let (status, detail) = match result {
            Ok(summary) => ("ok", summary.clone()),
            Err(f) => ("error", json!(f)),
        };
        let line = json!({
            "started": stamp(self.started),
            "finished": stamp(SystemTime::now()),
            "command": command,
            "config": self.config_path.display().to_string(),
            "config_hash": self.hash,
            "overrides": self.overrides,
            "threads": self.threads,
            "status": status,
            "detail": detail,
        });
        let path = self.path(RUN_LOG);
        let mut f: File = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_failure(&path, e))?;
        writeln!(f, "{line}").map_err(|e| io_failure(&path, e))
    }
}
