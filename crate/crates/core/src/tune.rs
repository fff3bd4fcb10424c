//! Personalization backends: fine-tuning with train descriptions and sampling.
//!
//! The harness owns validation, identifier substitution, handle metadata and
//! the call log. Backends only see ready-to-use inputs. Two adapters ship:
//! [`TinyBackend`], a deterministic procedural double, and
//! [`ExternalBackend`], which drives a training stack through a command.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attnmap::{self, AttentionRecord, AttentionSampler, AttnError, CrossAttentionProbs};
use crate::corpus::{self, CorpusError, GeneratedSet, ReferenceSet};
use crate::count_occurrences;
use crate::describe::{validate_description, Baseline, Medium, TrainDescription};
use crate::hashing::{image_digest, seed_from_parts, sha256_hex};

pub const DEFAULT_BASE_MODEL: &str = "stable-diffusion-2-1-base";
pub const DEFAULT_RARE_TOKEN: &str = "sks";
pub const HANDLE_METADATA: &str = "metadata.json";
pub const TINY_WEIGHTS: &str = "weights.bin";

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("count mismatch: {references} reference images but {descriptions} descriptions")]
    CountMismatch { references: usize, descriptions: usize },
    #[error("description {index} is invalid: {reason}")]
    InvalidDescription { index: usize, reason: String },
    #[error("invalid prompt {prompt:?}: {reason}")]
    InvalidPrompt { prompt: String, reason: String },
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("backend returned {got} images, expected {expected}")]
    ImageCount { expected: usize, got: usize },
    #[error(transparent)]
    Attention(#[from] AttnError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

pub type Result<T, E = TuneError> = std::result::Result<T, E>;

fn io(path: &Path, e: impl std::fmt::Display) -> TuneError {
    TuneError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Dreambooth,
    CustomDiffusion,
    Svdiff,
    TextualInversion,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Dreambooth => "dreambooth",
            BackendKind::CustomDiffusion => "custom_diffusion",
            BackendKind::Svdiff => "svdiff",
            BackendKind::TextualInversion => "textual_inversion",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub backend: BackendKind,
    pub base_model_id: String,
    pub learning_rate: f64,
    pub iterations: u32,
    pub batch_size: u32,
    pub train_text_encoder: bool,
    pub prior_preservation: bool,
    pub class_prompt: Option<String>,
    pub seed: u64,
    /// Backend token that replaces the identifier placeholder.
    pub rare_token: String,
    /// Backend-specific settings passed through untouched.
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self::dreambooth()
    }
}

impl TuneConfig {
    pub fn dreambooth() -> Self {
        Self {
            backend: BackendKind::Dreambooth,
            base_model_id: DEFAULT_BASE_MODEL.to_string(),
            learning_rate: 1e-6,
            iterations: 1000,
            batch_size: 1,
            train_text_encoder: true,
            prior_preservation: false,
            class_prompt: None,
            seed: 0,
            rare_token: DEFAULT_RARE_TOKEN.to_string(),
            extra: serde_json::Map::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TuneError::InvalidConfig(m.to_string()));
        if self.iterations < 1 {
            return bad("iterations must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if self.prior_preservation && self.class_prompt.as_deref().is_none_or(|p| p.trim().is_empty()) {
            return bad("prior_preservation requires a class_prompt");
        }
        if self.rare_token.trim().is_empty() || self.rare_token.split_whitespace().count() != 1 {
            return bad("rare_token must be a single word");
        }
        if self.base_model_id.trim().is_empty() {
            return bad("base_model_id must not be empty");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub sampler: String,
    pub steps: u32,
    pub guidance_scale: f64,
    pub images_per_prompt: usize,
    /// One seed per image; empty means `base_seed + i`.
    pub seeds: Vec<u64>,
    pub base_seed: u64,
    /// Output side length; backends pick their own default when unset.
    pub resolution: Option<u32>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            sampler: "ddim".to_string(),
            steps: 50,
            guidance_scale: 7.5,
            images_per_prompt: 20,
            seeds: Vec::new(),
            base_seed: 0,
            resolution: None,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TuneError::InvalidConfig(m));
        if self.steps < 1 {
            return bad("steps must be at least 1".into());
        }
        if self.images_per_prompt < 1 {
            return bad("images_per_prompt must be at least 1".into());
        }
        if !self.seeds.is_empty() && self.seeds.len() != self.images_per_prompt {
            return bad(format!(
                "{} seeds for {} images per prompt",
                self.seeds.len(),
                self.images_per_prompt
            ));
        }
        if self.resolution == Some(0) {
            return bad("resolution must be positive".into());
        }
        Ok(())
    }

    pub fn resolved_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.images_per_prompt as u64).map(|i| self.base_seed + i).collect()
        } else {
            self.seeds.clone()
        }
    }
}

/// Replaces the identifier placeholder with the backend's rare token.
///
/// This is the only place the substitution happens; the text is otherwise
/// passed through byte for byte.
pub fn substitute_identifier(text: &str, placeholder: &str, rare_token: &str) -> Result<String> {
    let count = count_occurrences(text, placeholder);
    if count != 1 {
        return Err(TuneError::InvalidPrompt {
            prompt: text.to_string(),
            reason: format!("identifier {placeholder:?} appears {count} times"),
        });
    }
    if text.split_whitespace().any(|w| w == rare_token) {
        return Err(TuneError::InvalidPrompt {
            prompt: text.to_string(),
            reason: format!("already contains the rare token {rare_token:?}"),
        });
    }
    Ok(text.replacen(placeholder, rare_token, 1))
}

/// Infers the baseline a description was built from.
pub fn infer_baseline(text: &str, class_name: &str) -> Baseline {
    for medium in [Medium::Painting, Medium::Cartoon] {
        if text.starts_with(&format!("A {} in the style of ", medium.as_str())) {
            return Baseline::style(medium);
        }
    }
    Baseline::object(class_name)
}

/// Handle metadata, stored as `metadata.json` in the handle directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandleMetadata {
    pub backend: BackendKind,
    pub adapter: String,
    pub base_model_id: String,
    pub cfg: TuneConfig,
    pub seed: u64,
    pub subject_id: String,
    pub class_name: String,
    pub identifier_token: String,
    pub rare_token: String,
    pub input_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelHandle {
    pub dir: PathBuf,
    pub metadata: HandleMetadata,
}

impl ModelHandle {
    pub fn load(dir: &Path) -> Result<Self> {
        let metadata = corpus::read_json(&dir.join(HANDLE_METADATA))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metadata,
        })
    }

    /// The generation prompt as the backend sees it.
    pub fn backend_prompt(&self, prompt: &str) -> Result<String> {
        substitute_identifier(prompt, &self.metadata.identifier_token, &self.metadata.rare_token)
    }
}

/// What a backend receives for fine-tuning.
pub struct TuneJob<'a> {
    pub refs: &'a ReferenceSet,
    /// One text per reference image, identifier already substituted.
    pub texts: Vec<String>,
    pub cfg: &'a TuneConfig,
    pub input_hash: &'a str,
}

/// What a backend receives for sampling or attention recording.
pub struct SampleJob<'a> {
    pub handle: &'a ModelHandle,
    pub prompt: &'a str,
    pub seeds: &'a [u64],
    pub cfg: &'a SampleConfig,
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    /// Trains into `handle_dir`, which already exists and is empty.
    fn fine_tune(&self, job: &TuneJob<'_>, handle_dir: &Path) -> Result<()>;

    /// One image per seed.
    fn sample(&self, job: &SampleJob<'_>) -> Result<Vec<RgbImage>>;

    /// Tokens of a backend prompt as the text encoder sees them.
    fn tokenize(&self, prompt: &str) -> Vec<String> {
        default_tokens(prompt)
    }

    /// Identifier cross-attention maps for the first seed in `job`.
    fn record_attention(&self, _job: &SampleJob<'_>, _token_index: usize) -> Result<Vec<AttentionRecord>> {
        Err(AttnError::NoHooks.into())
    }
}

pub fn default_tokens(prompt: &str) -> Vec<String> {
    let mut tokens = vec!["<start>".to_string()];
    tokens.extend(
        prompt
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
            .filter(|w| !w.is_empty()),
    );
    tokens.push("<end>".to_string());
    tokens
}

/// Append-only JSON Lines record of backend calls.
#[derive(Debug, Clone)]
pub struct CallLog {
    path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallLogEntry {
    pub timestamp: String,
    pub op: String,
    pub args_hash: String,
    pub description_texts: Vec<String>,
}

impl CallLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, op: &str, args_hash: &str, texts: &[String]) -> Result<()> {
        let entry = CallLogEntry {
            timestamp: chrono::Utc::now().to_rfc3339(),
            op: op.to_string(),
            args_hash: args_hash.to_string(),
            description_texts: texts.to_vec(),
        };
        if let Some(parent) = self.path.parent() {
            fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| io(&self.path, e))?;
        let line = serde_json::to_string(&entry).expect("log entry serializes");
        writeln!(file, "{line}").map_err(|e| io(&self.path, e))
    }

    pub fn entries(&self) -> Result<Vec<CallLogEntry>> {
        let text = match fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io(&self.path, e)),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| io(&self.path, e)))
            .collect()
    }
}

fn hash_json<T: Serialize>(parts: &[&T]) -> String {
    let mut buf = Vec::new();
    for p in parts {
        buf.extend_from_slice(serde_json::to_string(p).expect("serializable").as_bytes());
        buf.push(0);
    }
    sha256_hex(&buf)
}

/// Validates inputs, substitutes the rare token and fine-tunes into
/// `handle_dir`. Descriptions are either one per reference image or a single
/// shared one.
pub fn fine_tune(
    refs: &ReferenceSet,
    descriptions: &[TrainDescription],
    cfg: &TuneConfig,
    backend: &dyn Backend,
    handle_dir: &Path,
    log: Option<&CallLog>,
) -> Result<ModelHandle> {
    cfg.validate()?;
    if descriptions.is_empty() || (descriptions.len() != refs.len() && descriptions.len() != 1) {
        return Err(TuneError::CountMismatch {
            references: refs.len(),
            descriptions: descriptions.len(),
        });
    }
    for (i, d) in descriptions.iter().enumerate() {
        let baseline = infer_baseline(&d.text, &refs.class_name);
        let report = validate_description(d, &baseline, &refs.identifier_token);
        if !report.passed() {
            return Err(TuneError::InvalidDescription {
                index: i,
                reason: format!("{report:?}"),
            });
        }
    }
    let substituted = descriptions
        .iter()
        .map(|d| substitute_identifier(&d.text, &refs.identifier_token, &cfg.rare_token))
        .collect::<Result<Vec<_>>>()?;
    let texts = if substituted.len() == 1 {
        vec![substituted[0].clone(); refs.len()]
    } else {
        substituted
    };
    let input_hash = hash_json(&[
        &refs.set_hash(),
        &texts.join("\n"),
        &serde_json::to_string(cfg).unwrap(),
    ]);

    if handle_dir.exists() {
        fs::remove_dir_all(handle_dir).map_err(|e| io(handle_dir, e))?;
    }
    fs::create_dir_all(handle_dir).map_err(|e| io(handle_dir, e))?;
    let job = TuneJob {
        refs,
        texts: texts.clone(),
        cfg,
        input_hash: &input_hash,
    };
    backend.fine_tune(&job, handle_dir)?;
    let metadata = HandleMetadata {
        backend: cfg.backend,
        adapter: backend.name().to_string(),
        base_model_id: cfg.base_model_id.clone(),
        cfg: cfg.clone(),
        seed: cfg.seed,
        subject_id: refs.subject_id.clone(),
        class_name: refs.class_name.clone(),
        identifier_token: refs.identifier_token.clone(),
        rare_token: cfg.rare_token.clone(),
        input_hash: input_hash.clone(),
    };
    corpus::write_json(&handle_dir.join(HANDLE_METADATA), &metadata)?;
    if let Some(log) = log {
        log.append("fine_tune", &input_hash, &texts)?;
    }
    Ok(ModelHandle {
        dir: handle_dir.to_path_buf(),
        metadata,
    })
}

/// Samples `cfg.images_per_prompt` images for a prompt containing the
/// identifier placeholder exactly once.
pub fn sample(
    handle: &ModelHandle,
    prompt: &str,
    cfg: &SampleConfig,
    backend: &dyn Backend,
    log: Option<&CallLog>,
) -> Result<GeneratedSet> {
    cfg.validate()?;
    let backend_prompt = handle.backend_prompt(prompt)?;
    let seeds = cfg.resolved_seeds();
    let job = SampleJob {
        handle,
        prompt: &backend_prompt,
        seeds: &seeds,
        cfg,
    };
    let images = backend.sample(&job)?;
    if images.len() != seeds.len() {
        return Err(TuneError::ImageCount {
            expected: seeds.len(),
            got: images.len(),
        });
    }
    let args_hash = hash_json(&[
        &handle.metadata.input_hash,
        &backend_prompt,
        &serde_json::to_string(cfg).unwrap(),
    ]);
    if let Some(log) = log {
        log.append("sample", &args_hash, std::slice::from_ref(&backend_prompt))?;
    }
    let run_id = format!("{}-{}", handle.metadata.subject_id, &args_hash[..12]);
    Ok(GeneratedSet::new(
        images,
        prompt,
        &handle.metadata.identifier_token,
        run_id,
        seeds,
    )?)
}

/// Index of the rare token among the backend's tokens for `prompt`.
pub fn identifier_token_index(handle: &ModelHandle, prompt: &str, backend: &dyn Backend) -> Result<usize> {
    let backend_prompt = handle.backend_prompt(prompt)?;
    let rare = handle.metadata.rare_token.to_lowercase();
    backend
        .tokenize(&backend_prompt)
        .iter()
        .position(|t| *t == rare)
        .ok_or_else(|| TuneError::InvalidPrompt {
            prompt: prompt.to_string(),
            reason: "rare token not found after tokenization".into(),
        })
}

/// Records identifier (or other token) attention maps for one seed.
pub fn record_identifier_attention(
    handle: &ModelHandle,
    prompt: &str,
    seed: u64,
    cfg: &SampleConfig,
    token_index: usize,
    backend: &dyn Backend,
) -> Result<Vec<AttentionRecord>> {
    let backend_prompt = handle.backend_prompt(prompt)?;
    let seeds = [seed];
    let job = SampleJob {
        handle,
        prompt: &backend_prompt,
        seeds: &seeds,
        cfg,
    };
    backend.record_attention(&job, token_index)
}

/// SplitMix64, enough for procedural test images.
struct SplitMix(u64);

impl SplitMix {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Deterministic procedural backend for tests and dry runs.
///
/// Fine-tuning stores the mean reference color and a digest of all inputs.
/// Samples show a disc of that color on a prompt- and seed-dependent
/// gradient; attention concentrates the rare token on the disc.
#[derive(Debug, Clone)]
pub struct TinyBackend {
    pub default_resolution: u32,
    pub layers: Vec<(String, usize)>,
    pub heads: usize,
}

impl Default for TinyBackend {
    fn default() -> Self {
        Self {
            default_resolution: 64,
            layers: vec![("down.0".to_string(), 8), ("up.0".to_string(), 16)],
            heads: 2,
        }
    }
}

struct TinyWeights {
    color: [u8; 3],
    digest: [u8; 32],
}

struct Disc {
    cx: f64,
    cy: f64,
    r: f64,
}

impl Disc {
    /// Soft membership in `[0, 1]` for normalized coordinates.
    fn inside(&self, x: f64, y: f64) -> f64 {
        let d = ((x - self.cx).powi(2) + (y - self.cy).powi(2)).sqrt();
        (1.0 - (d - self.r) / 0.05).clamp(0.0, 1.0)
    }
}

impl TinyBackend {
    fn read_weights(handle: &ModelHandle) -> Result<TinyWeights> {
        let path = handle.dir.join(TINY_WEIGHTS);
        let bytes = fs::read(&path).map_err(|e| io(&path, e))?;
        if bytes.len() != 35 {
            return Err(TuneError::Backend(format!(
                "{} is not a tiny weights file",
                path.display()
            )));
        }
        let mut digest = [0u8; 32];
        digest.copy_from_slice(&bytes[3..]);
        Ok(TinyWeights {
            color: [bytes[0], bytes[1], bytes[2]],
            digest,
        })
    }

    fn rng(weights: &TinyWeights, prompt: &str, seed: u64) -> SplitMix {
        SplitMix(seed_from_parts(&[
            &weights.digest,
            prompt.as_bytes(),
            &seed.to_le_bytes(),
        ]))
    }

    fn disc(rng: &mut SplitMix) -> Disc {
        Disc {
            cx: 0.3 + 0.4 * rng.unit(),
            cy: 0.3 + 0.4 * rng.unit(),
            r: 0.15 + 0.12 * rng.unit(),
        }
    }

    fn render(weights: &TinyWeights, prompt: &str, seed: u64, side: u32) -> RgbImage {
        let mut rng = Self::rng(weights, prompt, seed);
        let disc = Self::disc(&mut rng);
        let top: [f64; 3] = std::array::from_fn(|_| 255.0 * rng.unit());
        let bottom: [f64; 3] = std::array::from_fn(|_| 255.0 * rng.unit());
        let s = f64::from(side);
        RgbImage::from_fn(side, side, |x, y| {
            let (u, v) = ((f64::from(x) + 0.5) / s, (f64::from(y) + 0.5) / s);
            let a = disc.inside(u, v);
            Rgb(std::array::from_fn(|c| {
                let bg = top[c] * (1.0 - v) + bottom[c] * v;
                (a * f64::from(weights.color[c]) + (1.0 - a) * bg).round() as u8
            }))
        })
    }
}

impl Backend for TinyBackend {
    fn name(&self) -> &str {
        "tiny"
    }

    fn fine_tune(&self, job: &TuneJob<'_>, handle_dir: &Path) -> Result<()> {
        let mut sum = [0u64; 3];
        let mut n = 0u64;
        let mut digest_input = Vec::new();
        for img in job.refs.rgb_images() {
            digest_input.extend_from_slice(image_digest(img).as_bytes());
            // central quarter of the frame stands in for the subject
            let (w, h) = img.dimensions();
            for y in h / 4..(3 * h / 4).max(h / 4 + 1) {
                for x in w / 4..(3 * w / 4).max(w / 4 + 1) {
                    let p = img.get_pixel(x.min(w - 1), y.min(h - 1));
                    for c in 0..3 {
                        sum[c] += u64::from(p[c]);
                    }
                    n += 1;
                }
            }
        }
        for t in &job.texts {
            digest_input.extend_from_slice(t.as_bytes());
            digest_input.push(0);
        }
        digest_input.extend_from_slice(job.input_hash.as_bytes());
        let mut state = seed_from_parts(&[&digest_input, &job.cfg.seed.to_le_bytes()]);
        // one mixing round per iteration so the handle depends on the schedule
        let mut digest = [0u8; 32];
        for i in 0..job.cfg.iterations {
            state = seed_from_parts(&[&state.to_le_bytes(), &i.to_le_bytes()]);
        }
        let mut rng = SplitMix(state);
        for chunk in digest.chunks_mut(8) {
            chunk.copy_from_slice(&rng.next().to_le_bytes());
        }
        let color = sum.map(|s| (s as f64 / n.max(1) as f64).round() as u8);
        let mut bytes = color.to_vec();
        bytes.extend_from_slice(&digest);
        let path = handle_dir.join(TINY_WEIGHTS);
        fs::write(&path, bytes).map_err(|e| io(&path, e))
    }

    fn sample(&self, job: &SampleJob<'_>) -> Result<Vec<RgbImage>> {
        let weights = Self::read_weights(job.handle)?;
        let side = job.cfg.resolution.unwrap_or(self.default_resolution);
        Ok(job
            .seeds
            .iter()
            .map(|&seed| Self::render(&weights, job.prompt, seed, side))
            .collect())
    }

    fn record_attention(&self, job: &SampleJob<'_>, token_index: usize) -> Result<Vec<AttentionRecord>> {
        let weights = Self::read_weights(job.handle)?;
        let seed = *job
            .seeds
            .first()
            .ok_or_else(|| TuneError::Backend("attention needs one seed".into()))?;
        let tokens = self.tokenize(job.prompt);
        let rare = job.handle.metadata.rare_token.to_lowercase();
        let class_words: Vec<String> = default_tokens(&job.handle.metadata.class_name)
            .into_iter()
            .filter(|t| !t.starts_with('<'))
            .collect();
        let mut sampler = TinySampler {
            disc: Self::disc(&mut Self::rng(&weights, job.prompt, seed)),
            boost: tokens
                .iter()
                .map(|t| {
                    if *t == rare {
                        6.0
                    } else if class_words.contains(t) {
                        3.0
                    } else {
                        0.0
                    }
                })
                .collect(),
            noise_seed: seed_from_parts(&[&weights.digest, job.prompt.as_bytes(), &seed.to_le_bytes()]),
            steps: job.cfg.steps as usize,
            layers: self.layers.clone(),
            heads: self.heads,
        };
        Ok(attnmap::record_attention(&mut sampler, token_index)?)
    }
}

struct TinySampler {
    disc: Disc,
    boost: Vec<f64>,
    noise_seed: u64,
    steps: usize,
    layers: Vec<(String, usize)>,
    heads: usize,
}

impl AttentionSampler for TinySampler {
    fn num_tokens(&self) -> usize {
        self.boost.len()
    }

    fn run(&mut self, sink: &mut dyn FnMut(CrossAttentionProbs)) -> attnmap::Result<()> {
        let n = self.boost.len();
        for step in 0..self.steps {
            // attention sharpens as denoising progresses
            let sharp = (step + 1) as f64 / self.steps as f64;
            for (layer_id, side) in &self.layers {
                for head in 0..self.heads {
                    let mut rng = SplitMix(seed_from_parts(&[
                        &self.noise_seed.to_le_bytes(),
                        &step.to_le_bytes(),
                        layer_id.as_bytes(),
                        &head.to_le_bytes(),
                    ]));
                    let mut probs = Vec::with_capacity(side * side * n);
                    for y in 0..*side {
                        for x in 0..*side {
                            let u = (x as f64 + 0.5) / *side as f64;
                            let v = (y as f64 + 0.5) / *side as f64;
                            let inside = self.disc.inside(u, v);
                            let logits: Vec<f64> = self
                                .boost
                                .iter()
                                .map(|b| b * inside * sharp + 0.5 * rng.unit())
                                .collect();
                            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                            let total: f64 = exps.iter().sum();
                            probs.extend(exps.iter().map(|e| (e / total) as f32));
                        }
                    }
                    sink(CrossAttentionProbs {
                        step,
                        layer_id: layer_id.clone(),
                        head,
                        height: *side,
                        width: *side,
                        num_tokens: n,
                        probs,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Out-of-process backend.
///
/// The command is run as `<command...> <op> <request.json>` with `op` one of
/// `fine_tune`, `sample` or `attention`. Requests are JSON objects:
///
/// * `fine_tune`: `{handle_dir, images: [png paths], texts, cfg}`; the
///   adapter writes its weights under `handle_dir`.
/// * `sample`: `{handle_dir, metadata, prompt, seeds, sampler, steps,
///   guidance_scale, resolution, out_dir}`; the adapter writes one
///   `NNN.png` per seed into `out_dir`.
/// * `attention`: as `sample` plus `token_index`; the adapter writes
///   `attention.bin` and `attention_index.json` into `out_dir`.
///
/// A nonzero exit status is a backend failure.
#[derive(Debug, Clone)]
pub struct ExternalBackend {
    pub command: Vec<String>,
    pub scratch_dir: Option<PathBuf>,
}

impl ExternalBackend {
    pub fn new(command: Vec<String>) -> Self {
        Self {
            command,
            scratch_dir: None,
        }
    }

    fn invoke(&self, op: &str, request: &serde_json::Value, dir: &Path) -> Result<()> {
        let (program, args) = self
            .command
            .split_first()
            .ok_or_else(|| TuneError::InvalidConfig("external backend command is empty".into()))?;
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let req_path = dir.join(format!("{op}_request.json"));
        corpus::write_json(&req_path, request)?;
        let output = Command::new(program)
            .args(args)
            .arg(op)
            .arg(&req_path)
            .output()
            .map_err(|e| TuneError::Backend(format!("cannot run {program}: {e}")))?;
        if !output.status.success() {
            return Err(TuneError::Backend(format!(
                "{op} exited with {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        Ok(())
    }

    fn work_dir(&self, job: &SampleJob<'_>, kind: &str) -> PathBuf {
        let base = self
            .scratch_dir
            .clone()
            .unwrap_or_else(|| job.handle.dir.join("scratch"));
        let key = sha256_hex(format!("{}\0{:?}", job.prompt, job.seeds).as_bytes());
        base.join(format!("{kind}-{}", &key[..16]))
    }

    fn sample_request(job: &SampleJob<'_>, out_dir: &Path) -> serde_json::Value {
        serde_json::json!({
            "handle_dir": job.handle.dir,
            "metadata": job.handle.metadata,
            "prompt": job.prompt,
            "seeds": job.seeds,
            "sampler": job.cfg.sampler,
            "steps": job.cfg.steps,
            "guidance_scale": job.cfg.guidance_scale,
            "resolution": job.cfg.resolution,
            "out_dir": out_dir,
        })
    }
}

impl Backend for ExternalBackend {
    fn name(&self) -> &str {
        "external"
    }

    fn fine_tune(&self, job: &TuneJob<'_>, handle_dir: &Path) -> Result<()> {
        let input_dir = handle_dir.join("inputs");
        fs::create_dir_all(&input_dir).map_err(|e| io(&input_dir, e))?;
        let mut images = Vec::new();
        for (i, img) in job.refs.rgb_images().enumerate() {
            let p = input_dir.join(format!("{i:03}.png"));
            corpus::save_png(img, &p)?;
            images.push(p);
        }
        let request = serde_json::json!({
            "handle_dir": handle_dir,
            "images": images,
            "texts": job.texts,
            "cfg": job.cfg,
        });
        self.invoke("fine_tune", &request, handle_dir)
    }

    fn sample(&self, job: &SampleJob<'_>) -> Result<Vec<RgbImage>> {
        let dir = self.work_dir(job, "sample");
        let out_dir = dir.join("out");
        self.invoke("sample", &Self::sample_request(job, &out_dir), &dir)?;
        let files = corpus::list_images(&out_dir)?;
        files.iter().map(|p| Ok(corpus::decode_rgb(p)?)).collect()
    }

    fn record_attention(&self, job: &SampleJob<'_>, token_index: usize) -> Result<Vec<AttentionRecord>> {
        let dir = self.work_dir(job, "attention");
        let out_dir = dir.join("out");
        let mut request = Self::sample_request(job, &out_dir);
        request["token_index"] = token_index.into();
        self.invoke("attention", &request, &dir)?;
        Ok(attnmap::load_records(&out_dir)?.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// `tiny` or `external`.
    pub adapter: String,
    pub command: Vec<String>,
    pub resolution: Option<u32>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            adapter: "tiny".to_string(),
            command: Vec::new(),
            resolution: None,
        }
    }
}

pub fn load_backend(cfg: &BackendConfig) -> Result<Box<dyn Backend>> {
    match cfg.adapter.as_str() {
        "tiny" => {
            let mut b = TinyBackend::default();
            if let Some(r) = cfg.resolution {
                b.default_resolution = r;
            }
            Ok(Box::new(b))
        }
        "external" => {
            if cfg.command.is_empty() {
                return Err(TuneError::InvalidConfig("external backend needs a command".into()));
            }
            Ok(Box::new(ExternalBackend::new(cfg.command.clone())))
        }
        other => Err(TuneError::InvalidConfig(format!("unknown backend adapter {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::describe::{baseline_description, DescriptionCase};

    fn refs(n: usize) -> ReferenceSet {
        let images = (0..n)
            .map(|i| RgbImage::from_fn(16, 16, |x, y| Rgb([200, (x * 10) as u8, (y * 10 + i as u32) as u8])))
            .collect();
        ReferenceSet::from_images("dog6", "dog", "[v]", images).unwrap()
    }

    fn sid(i: usize, text: &str) -> TrainDescription {
        TrainDescription {
            image_index: i,
            case: DescriptionCase::SelectivelyInformative,
            text: text.to_string(),
            vlm_name: Some("mock".into()),
            raw_vlm_output: None,
        }
    }

    fn tiny_cfg() -> TuneConfig {
        TuneConfig {
            iterations: 10,
            seed: 7,
            ..TuneConfig::dreambooth()
        }
    }

    #[test]
    fn dreambooth_defaults() {
        let c = TuneConfig::dreambooth();
        assert_eq!(c.learning_rate, 1e-6);
        assert_eq!(c.batch_size, 1);
        assert_eq!(c.iterations, 1000);
        assert!(c.train_text_encoder);
        assert_eq!(c.base_model_id, "stable-diffusion-2-1-base");
        c.validate().unwrap();
        let s = SampleConfig::default();
        assert_eq!(
            (s.sampler.as_str(), s.steps, s.guidance_scale, s.images_per_prompt),
            ("ddim", 50, 7.5, 20)
        );
    }

    #[test]
    fn config_invariants() {
        let bad = [
            TuneConfig {
                iterations: 0,
                ..tiny_cfg()
            },
            TuneConfig {
                learning_rate: 0.0,
                ..tiny_cfg()
            },
            TuneConfig {
                prior_preservation: true,
                ..tiny_cfg()
            },
            TuneConfig {
                rare_token: "two words".into(),
                ..tiny_cfg()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(TuneError::InvalidConfig(_))), "{c:?}");
        }
        assert!(SampleConfig {
            steps: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SampleConfig {
            images_per_prompt: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SampleConfig {
            seeds: vec![1, 2],
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn substitution_is_single_site_and_exact() {
        assert_eq!(
            substitute_identifier("a [v] dog, on a sofa.", "[v]", "sks").unwrap(),
            "a sks dog, on a sofa."
        );
        assert!(substitute_identifier("a dog", "[v]", "sks").is_err());
        assert!(substitute_identifier("a [v] [v] dog", "[v]", "sks").is_err());
        assert!(substitute_identifier("sks and a [v] dog", "[v]", "sks").is_err());
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let descs: Vec<_> = (0..3).map(|i| sid(i, "a [v] dog on grass")).collect();
        let err = fine_tune(&refs(5), &descs, &tiny_cfg(), &TinyBackend::default(), dir.path(), None).unwrap_err();
        assert!(err.to_string().contains("count mismatch"), "{err}");
    }

    #[test]
    fn invalid_description_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let descs = vec![sid(0, "a [v] fluffy dog on grass")];
        let err = fine_tune(&refs(2), &descs, &tiny_cfg(), &TinyBackend::default(), dir.path(), None).unwrap_err();
        assert!(matches!(err, TuneError::InvalidDescription { index: 0, .. }));
    }

    #[test]
    fn tiny_backend_is_deterministic_and_logs_texts_verbatim() {
        let root = tempfile::tempdir().unwrap();
        let descs = vec![sid(0, "a [v] dog on a red sofa."), sid(1, "a [v] dog near a lake")];
        let run = |name: &str| {
            let log = CallLog::new(root.path().join(name).join("calls.jsonl"));
            let handle = fine_tune(
                &refs(2),
                &descs,
                &tiny_cfg(),
                &TinyBackend::default(),
                &root.path().join(name).join("handle"),
                Some(&log),
            )
            .unwrap();
            let cfg = SampleConfig {
                images_per_prompt: 2,
                ..Default::default()
            };
            let set = sample(&handle, "a [v] dog swimming", &cfg, &TinyBackend::default(), Some(&log)).unwrap();
            (handle, set, log)
        };
        let (h1, s1, log) = run("a");
        let (h2, s2, _) = run("b");
        assert_eq!(
            fs::read(h1.dir.join(TINY_WEIGHTS)).unwrap(),
            fs::read(h2.dir.join(TINY_WEIGHTS)).unwrap()
        );
        assert_eq!(h1.metadata, h2.metadata);
        assert_eq!(s1.images, s2.images);
        assert_eq!(s1.len(), 2);
        assert!(s1.images.iter().all(|i| i.dimensions() == (64, 64)));
        assert_eq!(s1.seed_list, vec![0, 1]);
        assert_ne!(s1.images[0], s1.images[1]);

        let entries = log.entries().unwrap();
        assert_eq!(entries[0].op, "fine_tune");
        assert_eq!(
            entries[0].description_texts,
            vec!["a sks dog on a red sofa.", "a sks dog near a lake"]
        );
        assert_eq!(entries[1].description_texts, vec!["a sks dog swimming"]);
    }

    #[test]
    fn shared_description_and_iterations_change_handle() {
        let root = tempfile::tempdir().unwrap();
        let shared = vec![baseline_description("dog", "[v]").unwrap()];
        let a = fine_tune(
            &refs(3),
            &shared,
            &tiny_cfg(),
            &TinyBackend::default(),
            &root.path().join("a"),
            None,
        )
        .unwrap();
        let cfg = TuneConfig {
            iterations: 11,
            ..tiny_cfg()
        };
        let b = fine_tune(
            &refs(3),
            &shared,
            &cfg,
            &TinyBackend::default(),
            &root.path().join("b"),
            None,
        )
        .unwrap();
        assert_ne!(
            fs::read(a.dir.join(TINY_WEIGHTS)).unwrap(),
            fs::read(b.dir.join(TINY_WEIGHTS)).unwrap()
        );
        let loaded = ModelHandle::load(&a.dir).unwrap();
        assert_eq!(loaded, a);
    }

    #[test]
    fn prompt_without_identifier_is_rejected() {
        let root = tempfile::tempdir().unwrap();
        let shared = vec![baseline_description("dog", "[v]").unwrap()];
        let h = fine_tune(
            &refs(1),
            &shared,
            &tiny_cfg(),
            &TinyBackend::default(),
            root.path(),
            None,
        )
        .unwrap();
        let err = sample(
            &h,
            "a dog swimming",
            &SampleConfig::default(),
            &TinyBackend::default(),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, TuneError::InvalidPrompt { .. }));
    }

    #[test]
    fn tiny_attention_focuses_on_subject() {
        let root = tempfile::tempdir().unwrap();
        let shared = vec![baseline_description("dog", "[v]").unwrap()];
        let backend = TinyBackend::default();
        let h = fine_tune(&refs(1), &shared, &tiny_cfg(), &backend, root.path(), None).unwrap();
        let cfg = SampleConfig {
            steps: 3,
            ..Default::default()
        };
        let idx = identifier_token_index(&h, "a [v] dog swimming", &backend).unwrap();
        assert_eq!(idx, 2);
        let records = record_identifier_attention(&h, "a [v] dog swimming", 0, &cfg, idx, &backend).unwrap();
        assert_eq!(records.len(), 3 * 2 * 2);
        let avg = attnmap::average_maps(&records, (16, 16), "sks").unwrap();
        assert!(!avg.constant);
        let other = record_identifier_attention(&h, "a [v] dog swimming", 0, &cfg, 4, &backend).unwrap();
        let avg_other = attnmap::average_maps(&other, (16, 16), "swimming").unwrap();
        let peak = |g: &attnmap::Grid| g.min_max().1;
        assert!(peak(&avg.raw) > peak(&avg_other.raw));
    }

    #[test]
    fn external_backend_contract() {
        let root = tempfile::tempdir().unwrap();
        let script = root.path().join("backend.sh");
        fs::write(
            &script,
            r#"#!/bin/sh
set -e
op="$1"; req="$2"
dir=$(dirname "$req")
case "$op" in
  fine_tune) cp "$req" "$dir/trained.json" ;;
  sample) mkdir -p "$dir/out"; for i in 000 001; do cp "$FIXTURE" "$dir/out/$i.png"; done ;;
  *) exit 3 ;;
esac
"#,
        )
        .unwrap();
        let fixture = root.path().join("fixture.png");
        corpus::save_png(&RgbImage::from_pixel(8, 8, Rgb([1, 2, 3])), &fixture).unwrap();
        std::env::set_var("FIXTURE", &fixture);
        let backend = ExternalBackend::new(vec!["sh".into(), script.display().to_string()]);
        let shared = vec![baseline_description("dog", "[v]").unwrap()];
        let h = fine_tune(&refs(2), &shared, &tiny_cfg(), &backend, &root.path().join("h"), None).unwrap();
        let trained: serde_json::Value = corpus::read_json(&h.dir.join("trained.json")).unwrap();
        assert_eq!(trained["texts"][1], "a sks dog");
        assert_eq!(trained["images"].as_array().unwrap().len(), 2);
        let cfg = SampleConfig {
            images_per_prompt: 2,
            ..Default::default()
        };
        let set = sample(&h, "a [v] dog", &cfg, &backend, None).unwrap();
        assert_eq!(set.images[1].get_pixel(0, 0), &Rgb([1, 2, 3]));
        let err = record_identifier_attention(&h, "a [v] dog", 0, &cfg, 1, &backend).unwrap_err();
        assert!(matches!(err, TuneError::Backend(_)));
    }
}
