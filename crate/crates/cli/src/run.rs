//! Per-run directory layout and outcome bookkeeping.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use serde::Serialize;

use sidkit_core::corpus::{validate_manifest, RunManifest, SubjectEntry};
use sidkit_core::tune::CallLog;

use crate::config::RunConfig;

/// Invocation problems that map to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn descriptions_dir(&self) -> PathBuf {
        self.root.join("descriptions")
    }

    pub fn descriptions(&self, subject: &str) -> PathBuf {
        self.descriptions_dir().join(format!("{subject}.jsonl"))
    }

    pub fn masks(&self, subject: &str) -> PathBuf {
        self.root.join("masks").join(subject)
    }

    pub fn handle(&self, subject: &str) -> PathBuf {
        self.root.join("handles").join(subject)
    }

    pub fn samples(&self, subject: &str, prompt: usize) -> PathBuf {
        self.root.join("samples").join(subject).join(prompt_dir(prompt))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn reports(&self, subject: &str, prompt: usize) -> PathBuf {
        self.reports_dir().join(subject).join(prompt_dir(prompt))
    }

    pub fn attn(&self, subject: &str, prompt: usize) -> PathBuf {
        self.root.join("attn").join(subject).join(prompt_dir(prompt))
    }

    pub fn call_log(&self) -> CallLog {
        CallLog::new(self.root.join("logs").join("backend_calls.jsonl"))
    }

    pub fn vlm_cache(&self) -> PathBuf {
        self.root.join("cache").join("vlm")
    }
}

pub fn prompt_dir(index: usize) -> String {
    format!("p{index:02}")
}

/// Everything a command needs.
pub struct Ctx {
    pub cfg: RunConfig,
    pub manifest: RunManifest,
    pub layout: Layout,
    pub pool: rayon::ThreadPool,
}

impl Ctx {
    pub fn new(cfg: RunConfig, resolved: &serde_json::Value) -> Result<Self> {
        let path = cfg.manifest_path();
        let manifest = RunManifest::load(&path).map_err(|e| usage(format!("manifest {}: {e}", path.display())))?;
        let report = validate_manifest(&manifest);
        if !report.is_valid() {
            let lines: Vec<String> = report.violations.iter().map(|v| v.message.clone()).collect();
            return Err(usage(format!(
                "invalid manifest {}:\n  {}",
                path.display(),
                lines.join("\n  ")
            )));
        }
        for id in &cfg.subjects {
            if manifest.subject(id).is_none() {
                return Err(usage(format!("unknown subject {id:?}")));
            }
        }
        let layout = Layout { root: cfg.run_dir() };
        std::fs::create_dir_all(&layout.root).with_context(|| format!("creating {}", layout.root.display()))?;
        let run = serde_json::json!({ "method": cfg.method_label(), "config": resolved });
        write_json(&layout.root.join("run.json"), &run)?;
        let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build()?;
        Ok(Self {
            cfg,
            manifest,
            layout,
            pool,
        })
    }

    pub fn subjects(&self) -> Vec<&SubjectEntry> {
        self.manifest
            .subjects
            .iter()
            .filter(|s| self.cfg.subjects.is_empty() || self.cfg.subjects.contains(&s.id))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Failure {
    pub unit: String,
    pub error: String,
}

/// Outcome of one command over its work units.
#[derive(Debug, Default)]
pub struct Tally {
    pub ok: usize,
    pub failures: Vec<Failure>,
}

impl Tally {
    pub fn record(&mut self, unit: impl Into<String>, result: Result<()>) {
        match result {
            Ok(()) => self.ok += 1,
            Err(e) => {
                let unit = unit.into();
                log::error!("{unit}: {e:#}");
                self.failures.push(Failure {
                    unit,
                    error: format!("{e:#}"),
                });
            }
        }
    }

    pub fn merge(&mut self, other: Tally) {
        self.ok += other.ok;
        self.failures.extend(other.failures);
    }

    pub fn exit_code(&self) -> u8 {
        match (self.ok, self.failures.len()) {
            (_, 0) => 0,
            (0, _) => 3,
            _ => 2,
        }
    }

    /// Writes the failure list (possibly empty) as `errors.json` in `dir`.
    pub fn write_errors(&mut self, dir: &Path) -> Result<()> {
        self.failures.sort_by(|a, b| a.unit.cmp(&b.unit));
        write_json(&dir.join("errors.json"), &self.failures)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Removes and recreates `dir` so reruns never see stale files.
pub fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
