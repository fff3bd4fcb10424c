//! Run configuration: one JSON file plus `key=value` overrides from flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use sidkit_core::describe::{Baseline, DescriptionCase, VlmConfig};
use sidkit_core::embed::EncoderConfig;
use sidkit_core::tune::{BackendConfig, SampleConfig, TuneConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SegmenterConfig {
    /// Precomputed masks; `{subject}` in `dir` expands to the subject id.
    Fixture {
        dir: PathBuf,
    },
    #[default]
    FullFrame,
    External {
        command: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttnConfig {
    pub resolution: usize,
    pub alpha: f64,
    /// Token to visualize; the identifier placeholder when unset.
    pub token: Option<String>,
}

impl Default for AttnConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            alpha: sidkit_core::attnmap::DEFAULT_ALPHA,
            token: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub run_dir: PathBuf,
    /// Label used in aggregate tables and plots.
    pub method: Option<String>,
    pub case: DescriptionCase,
    /// Overrides the per-subject object baseline (e.g. for style subjects).
    pub baseline: Option<Baseline>,
    pub subjects: Vec<String>,
    pub jobs: usize,
    pub vlm: VlmConfig,
    pub vlm_cache: bool,
    pub encoder: EncoderConfig,
    pub segment_resolution: u32,
    pub segmenter: SegmenterConfig,
    pub backend: BackendConfig,
    pub tune: TuneConfig,
    pub sample: SampleConfig,
    pub attn: AttnConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.json"),
            run_dir: PathBuf::from("run"),
            method: None,
            case: DescriptionCase::SelectivelyInformative,
            baseline: None,
            subjects: Vec::new(),
            jobs: 1,
            vlm: VlmConfig::default(),
            vlm_cache: true,
            encoder: EncoderConfig::default(),
            segment_resolution: 224,
            segmenter: SegmenterConfig::default(),
            backend: BackendConfig::default(),
            tune: TuneConfig::default(),
            sample: SampleConfig::default(),
            attn: AttnConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    /// Loads `path` (if any), applies `key.path=json` overrides in order and
    /// deserializes. Relative paths resolve against the config file's
    /// directory, or the working directory without one.
    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<(Self, Value)> {
        let (mut value, base_dir) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let v: Value =
                    serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
                (v, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (Value::Object(Default::default()), PathBuf::new()),
        };
        if !value.is_object() {
            bail!("config must be a JSON object");
        }
        for (key, v) in overrides {
            set_path(&mut value, key, v.clone())?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value.clone()).context("invalid config")?;
        cfg.base_dir = if base_dir.as_os_str().is_empty() {
            PathBuf::from(".")
        } else {
            base_dir
        };
        if cfg.jobs == 0 {
            bail!("jobs must be at least 1");
        }
        Ok((cfg, value))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.run_dir)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.resolve(&self.manifest)
    }

    pub fn method_label(&self) -> String {
        self.method
            .clone()
            .unwrap_or_else(|| format!("{}/{}", self.tune.backend.as_str(), self.case))
    }
}

/// Parses `a.b.c=<json>`; a value that is not valid JSON is taken as a string.
pub fn parse_override(s: &str) -> Result<(String, Value), String> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(format!("bad key in {s:?}"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let obj = cur
            .as_object_mut()
            .with_context(|| format!("cannot set {key}: {part} is not an object"))?;
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = cur
        .as_object_mut()
        .with_context(|| format!("cannot set {key}: parent is not an object"))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_in_order() {
        let overrides = vec![
            parse_override("tune.iterations=10").unwrap(),
            parse_override("sample.sampler=ddim").unwrap(),
            parse_override("case=\"CASE1_BASELINE\"").unwrap(),
            parse_override("tune.iterations=12").unwrap(),
        ];
        let (cfg, _) = RunConfig::load(None, &overrides).unwrap();
        assert_eq!(cfg.tune.iterations, 12);
        assert_eq!(cfg.tune.learning_rate, 1e-6);
        assert_eq!(cfg.case, DescriptionCase::Baseline);
        assert_eq!(cfg.encoder.id, "clip-vit-b-32");
    }

    #[test]
    fn malformed_overrides() {
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
        let (k, v) = parse_override("vlm.model=gpt-4o").unwrap();
        assert_eq!((k.as_str(), v), ("vlm.model", Value::String("gpt-4o".into())));
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, r#"{"manifest": "m.json", "run_dir": "out"}"#).unwrap();
        let (cfg, _) = RunConfig::load(Some(&p), &[]).unwrap();
        assert_eq!(cfg.manifest_path(), dir.path().join("m.json"));
        assert_eq!(cfg.run_dir(), dir.path().join("out"));
    }
}
