//! Train descriptions for reference images.
//!
//! Four description cases are supported:
//!
//! | case | content beyond `a [v] <class>` |
//! |------|--------------------------------|
//! | 1    | nothing (baseline)             |
//! | 2    | class names of non-subjects    |
//! | 3    | non-subject classes plus their attributes (selectively informative) |
//! | 4    | case 3 plus attributes of the subject itself |
//!
//! Cases 2–4 are produced by an instruction-following VLM behind the
//! [`VlmClient`] trait. The VLM never sees the identifier token: it is asked to
//! start with `a <class>` and the identifier is spliced in afterwards.

use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::Engine as _;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::count_occurrences;
use crate::hashing::{image_digest, sha256_hex};

pub const DEFAULT_MAX_RETRIES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DescriptionCase {
    #[serde(rename = "CASE1_BASELINE")]
    Baseline,
    #[serde(rename = "CASE2_NONSUBJECT_CLASSES")]
    NonSubjectClasses,
    #[serde(rename = "CASE3_SID")]
    SelectivelyInformative,
    #[serde(rename = "CASE4_SUBJECT_SPECS")]
    SubjectSpecs,
}

impl DescriptionCase {
    pub const ALL: [DescriptionCase; 4] = [
        DescriptionCase::Baseline,
        DescriptionCase::NonSubjectClasses,
        DescriptionCase::SelectivelyInformative,
        DescriptionCase::SubjectSpecs,
    ];

    pub fn number(self) -> u8 {
        match self {
            DescriptionCase::Baseline => 1,
            DescriptionCase::NonSubjectClasses => 2,
            DescriptionCase::SelectivelyInformative => 3,
            DescriptionCase::SubjectSpecs => 4,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        Self::ALL.get(usize::from(n).checked_sub(1)?).copied()
    }

    pub fn needs_vlm(self) -> bool {
        self != DescriptionCase::Baseline
    }

    /// Whether the subject mention must stay the bare `<identifier> <class>`.
    fn forbids_subject_descriptors(self) -> bool {
        self != DescriptionCase::SubjectSpecs
    }
}

impl std::fmt::Display for DescriptionCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).ok();
        let name = s.as_ref().and_then(|v| v.as_str()).unwrap_or("?");
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Medium {
    Painting,
    Cartoon,
}

impl Medium {
    pub fn as_str(self) -> &'static str {
        match self {
            Medium::Painting => "painting",
            Medium::Cartoon => "cartoon",
        }
    }
}

/// What is being personalized: an object of some class, or an artistic style.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Baseline {
    Object { class_name: String },
    Style { medium: Medium },
}

impl Baseline {
    pub fn object(class_name: impl Into<String>) -> Self {
        Baseline::Object {
            class_name: class_name.into(),
        }
    }

    pub fn style(medium: Medium) -> Self {
        Baseline::Style { medium }
    }

    /// The baseline train description with `identifier` substituted.
    pub fn render(&self, identifier: &str) -> String {
        match self {
            Baseline::Object { class_name } => format!("a {identifier} {class_name}"),
            Baseline::Style { medium } => {
                format!("A {} in the style of {identifier} art", medium.as_str())
            }
        }
    }

    /// The prefix the VLM is asked to start with (no identifier).
    pub fn vlm_prefix(&self) -> String {
        match self {
            Baseline::Object { class_name } => format!("a {class_name}"),
            Baseline::Style { medium } => format!("A {} in the style of art", medium.as_str()),
        }
    }

    fn subject_words(&self) -> (Vec<&str>, Vec<String>) {
        match self {
            Baseline::Object { class_name } => (
                vec!["a", "an", "the"],
                class_name.split_whitespace().map(str::to_lowercase).collect(),
            ),
            Baseline::Style { .. } => (vec!["of"], vec!["art".to_string()]),
        }
    }

    pub fn class_name(&self) -> Option<&str> {
        match self {
            Baseline::Object { class_name } => Some(class_name),
            Baseline::Style { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainDescription {
    pub image_index: usize,
    pub case: DescriptionCase,
    pub text: String,
    pub vlm_name: Option<String>,
    pub raw_vlm_output: Option<String>,
}

#[derive(Debug, Error)]
pub enum DescribeError {
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
    #[error("case {0} needs a VLM client")]
    MissingClient(DescriptionCase),
    #[error("VLM transport failure: {0}")]
    Transport(String),
    #[error("VLM output failed validation after {attempts} attempts; raw outputs: {raw_outputs:?}")]
    ValidationExhausted {
        attempts: usize,
        raw_outputs: Vec<String>,
        last_report: Box<DescriptionValidation>,
    },
    #[error("expression text must not contain the identifier {0:?}")]
    ExpressionContainsIdentifier(String),
    #[error("description is invalid: {0:?}")]
    Invalid(Box<DescriptionValidation>),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad description record in {path} line {line}: {source}")]
    Record {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = DescribeError> = std::result::Result<T, E>;

fn non_empty(value: &str, what: &'static str) -> Result<()> {
    if value.trim().is_empty() {
        Err(DescribeError::EmptyInput(what))
    } else {
        Ok(())
    }
}

/// `a <identifier> <class_name>`
pub fn baseline_description(class_name: &str, identifier_token: &str) -> Result<TrainDescription> {
    non_empty(class_name, "class_name")?;
    non_empty(identifier_token, "identifier_token")?;
    Ok(TrainDescription {
        image_index: 0,
        case: DescriptionCase::Baseline,
        text: Baseline::object(class_name).render(identifier_token),
        vlm_name: None,
        raw_vlm_output: None,
    })
}

/// `A <medium> in the style of <identifier> art`
pub fn style_baseline_description(identifier_token: &str, medium: Medium) -> Result<TrainDescription> {
    non_empty(identifier_token, "identifier_token")?;
    Ok(TrainDescription {
        image_index: 0,
        case: DescriptionCase::Baseline,
        text: Baseline::style(medium).render(identifier_token),
        vlm_name: None,
        raw_vlm_output: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TemplateId {
    Object,
    Style,
    ObjectWithExpression,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VlmInstruction {
    pub template_id: TemplateId,
    pub rendered_text: String,
    pub subject_class: String,
}

/// Instruction templates. `{class_name}` and `{medium}` are substituted.
///
/// `object` and `style` produce case-3 descriptions; `nonsubject_classes` and
/// `subject_specs` are the case-2 and case-4 variants of `object`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstructionTemplates {
    pub object: String,
    pub style: String,
    pub object_with_expression: String,
    pub nonsubject_classes: String,
    pub subject_specs: String,
}

impl Default for InstructionTemplates {
    fn default() -> Self {
        Self {
            object: "Describe the image in one sentence in detail. Please start the sentence with \"a {class_name}.\". You should not describe the {class_name} itself.".into(),
            style: "Describe the image in one sentence in detail. Please start the sentence with \"A {medium} in the style of art.\". You should not describe the style of the {medium} itself.".into(),
            object_with_expression: "Describe the image in one sentence in detail. Please start the sentence with \"a {class_name}.\". You should not describe the {class_name} itself, except for the facial expression of the {class_name}.".into(),
            nonsubject_classes: "Describe the image in one sentence. Please start the sentence with \"a {class_name}.\". Only name the other objects in the image without describing any of their details. You should not describe the {class_name} itself.".into(),
            subject_specs: "Describe the image in one sentence in detail. Please start the sentence with \"a {class_name}.\". Describe the {class_name} itself in detail as well as the other objects in the image.".into(),
        }
    }
}

impl InstructionTemplates {
    pub fn render(&self, case: DescriptionCase, baseline: &Baseline, with_expression: bool) -> VlmInstruction {
        let (template_id, template) = match (baseline, case, with_expression) {
            (Baseline::Style { .. }, _, _) => (TemplateId::Style, &self.style),
            (_, _, true) => (TemplateId::ObjectWithExpression, &self.object_with_expression),
            (_, DescriptionCase::NonSubjectClasses, _) => (TemplateId::Object, &self.nonsubject_classes),
            (_, DescriptionCase::SubjectSpecs, _) => (TemplateId::Object, &self.subject_specs),
            _ => (TemplateId::Object, &self.object),
        };
        let subject_class = match baseline {
            Baseline::Object { class_name } => class_name.clone(),
            Baseline::Style { medium } => medium.as_str().to_string(),
        };
        let rendered_text = template
            .replace("{class_name}", &subject_class)
            .replace("{medium}", &subject_class);
        VlmInstruction {
            template_id,
            rendered_text,
            subject_class,
        }
    }
}

/// An instruction-following image captioner.
pub trait VlmClient: Send + Sync {
    fn name(&self) -> String;
    fn send(&self, image: &RgbImage, instruction: &VlmInstruction) -> Result<String>;
}

/// Returns canned responses in order, cycling. `{class_name}` in a response is
/// replaced by the instruction's subject class.
#[derive(Debug)]
pub struct ScriptedVlm {
    name: String,
    responses: Vec<String>,
    cursor: Mutex<usize>,
}

impl ScriptedVlm {
    pub fn new(name: impl Into<String>, responses: Vec<String>) -> Self {
        Self {
            name: name.into(),
            responses,
            cursor: Mutex::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        *self.cursor.lock().unwrap()
    }
}

impl VlmClient for ScriptedVlm {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn send(&self, _image: &RgbImage, instruction: &VlmInstruction) -> Result<String> {
        let mut cursor = self.cursor.lock().unwrap();
        if self.responses.is_empty() {
            return Err(DescribeError::Transport("scripted VLM has no responses".into()));
        }
        let text = &self.responses[*cursor % self.responses.len()];
        *cursor += 1;
        Ok(text.replace("{class_name}", &instruction.subject_class))
    }
}

/// Adapter configuration as persisted in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmConfig {
    pub provider: String,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub api_key_env: String,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    #[serde(default = "default_timeout")]
    pub timeout_s: u64,
    /// Base URL of an OpenAI-compatible endpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    /// Minimum spacing between requests to one provider.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_interval_ms: Option<u64>,
    /// Canned responses for the `mock` provider.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub responses: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<InstructionTemplates>,
}

fn default_retries() -> usize {
    DEFAULT_MAX_RETRIES
}

fn default_timeout() -> u64 {
    120
}

impl Default for VlmConfig {
    fn default() -> Self {
        Self {
            provider: "mock".into(),
            model: String::new(),
            api_key_env: String::new(),
            max_retries: DEFAULT_MAX_RETRIES,
            timeout_s: default_timeout(),
            base_url: None,
            min_interval_ms: None,
            responses: Vec::new(),
            templates: None,
        }
    }
}

/// Builds a client from its registered provider name.
pub fn load_vlm(cfg: &VlmConfig) -> Result<Box<dyn VlmClient>> {
    match cfg.provider.as_str() {
        "mock" => Ok(Box::new(ScriptedVlm::new(
            if cfg.model.is_empty() {
                "mock"
            } else {
                cfg.model.as_str()
            },
            cfg.responses.clone(),
        ))),
        "openai" | "openai-compatible" => Ok(Box::new(OpenAiVlm::from_config(cfg)?)),
        other => Err(DescribeError::Transport(format!("unknown VLM provider {other:?}"))),
    }
}

/// Chat-completions client for OpenAI-compatible multimodal endpoints.
pub struct OpenAiVlm {
    model: String,
    url: String,
    api_key: String,
    agent: ureq::Agent,
    min_interval: Duration,
    last_call: Mutex<Option<Instant>>,
}

impl OpenAiVlm {
    pub fn from_config(cfg: &VlmConfig) -> Result<Self> {
        let api_key = if cfg.api_key_env.is_empty() {
            String::new()
        } else {
            std::env::var(&cfg.api_key_env)
                .map_err(|_| DescribeError::Transport(format!("environment variable {} is not set", cfg.api_key_env)))?
        };
        let base = cfg
            .base_url
            .clone()
            .unwrap_or_else(|| "https://api.openai.com/v1".to_string());
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            model: cfg.model.clone(),
            url: format!("{}/chat/completions", base.trim_end_matches('/')),
            api_key,
            agent,
            min_interval: Duration::from_millis(cfg.min_interval_ms.unwrap_or(0)),
            last_call: Mutex::new(None),
        })
    }

    fn throttle(&self) {
        let mut last = self.last_call.lock().unwrap();
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < self.min_interval {
                std::thread::sleep(self.min_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }
}

/// Request body for a single-image chat completion.
pub fn chat_request_body(model: &str, image: &RgbImage, instruction: &VlmInstruction) -> serde_json::Value {
    let mut png = Vec::new();
    image::DynamicImage::ImageRgb8(image.clone())
        .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    let data_url = format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(&png)
    );
    serde_json::json!({
        "model": model,
        "max_tokens": 300,
        "temperature": 0,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "text", "text": instruction.rendered_text},
                {"type": "image_url", "image_url": {"url": data_url}}
            ]
        }]
    })
}

/// Extracts the first choice's message text from a chat-completion response.
pub fn parse_chat_response(body: &str) -> Result<String> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| DescribeError::Transport(format!("malformed response: {e}")))?;
    value["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| DescribeError::Transport(format!("response has no message content: {body}")))
}

impl VlmClient for OpenAiVlm {
    fn name(&self) -> String {
        self.model.clone()
    }

    fn send(&self, image: &RgbImage, instruction: &VlmInstruction) -> Result<String> {
        self.throttle();
        let body = chat_request_body(&self.model, image, instruction).to_string();
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if !self.api_key.is_empty() {
            req = req.header("Authorization", format!("Bearer {}", self.api_key));
        }
        let mut resp = req.send(body).map_err(|e| DescribeError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| DescribeError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(DescribeError::Transport(format!("HTTP {status}: {text}")));
        }
        parse_chat_response(&text)
    }
}

/// Wraps a client with an on-disk response cache keyed by client name,
/// instruction and image content.
pub struct CachedVlm<C> {
    inner: C,
    dir: PathBuf,
}

impl<C: VlmClient> CachedVlm<C> {
    pub fn new(inner: C, dir: impl Into<PathBuf>) -> Self {
        Self { inner, dir: dir.into() }
    }

    fn key(&self, image: &RgbImage, instruction: &VlmInstruction) -> String {
        sha256_hex(
            format!(
                "{}\n{}\n{}",
                self.inner.name(),
                instruction.rendered_text,
                image_digest(image)
            )
            .as_bytes(),
        )
    }
}

impl<C: VlmClient> VlmClient for CachedVlm<C> {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn send(&self, image: &RgbImage, instruction: &VlmInstruction) -> Result<String> {
        let path = self.dir.join(format!("{}.txt", self.key(image, instruction)));
        if let Ok(text) = fs::read_to_string(&path) {
            return Ok(text);
        }
        let text = self.inner.send(image, instruction)?;
        let io = |source| DescribeError::Io {
            path: path.clone(),
            source,
        };
        fs::create_dir_all(&self.dir).map_err(io)?;
        fs::write(&path, &text).map_err(io)?;
        Ok(text)
    }
}

impl VlmClient for Box<dyn VlmClient> {
    fn name(&self) -> String {
        self.as_ref().name()
    }

    fn send(&self, image: &RgbImage, instruction: &VlmInstruction) -> Result<String> {
        self.as_ref().send(image, instruction)
    }
}

fn clean_vlm_output(raw: &str) -> String {
    let line = raw.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    line.trim_matches(|c| matches!(c, '"' | '\u{201c}' | '\u{201d}' | '\'' | '`'))
        .trim()
        .to_string()
}

fn is_word_boundary(rest: &str) -> bool {
    rest.chars().next().is_none_or(|c| !c.is_alphanumeric())
}

/// Splices `identifier` into VLM output that starts with the baseline prefix,
/// e.g. `"A cat on a rug"` becomes `"a [v] cat on a rug"`. Returns `None` when
/// the output does not start with the prefix.
pub fn insert_identifier(raw: &str, baseline: &Baseline, identifier: &str) -> Option<String> {
    let cleaned = clean_vlm_output(raw);
    let lower = cleaned.to_lowercase();
    let prefixes: Vec<String> = match baseline {
        Baseline::Object { class_name } => vec![
            format!("a {}", class_name.to_lowercase()),
            format!("an {}", class_name.to_lowercase()),
        ],
        Baseline::Style { .. } => vec![baseline.vlm_prefix().to_lowercase()],
    };
    for prefix in prefixes {
        if lower.starts_with(&prefix) && is_word_boundary(&cleaned[prefix.len()..]) {
            let rest = &cleaned[prefix.len()..];
            return Some(format!("{}{}", baseline.render(identifier), rest));
        }
    }
    None
}

/// Outcome of the description checks; every field is a pass/fail flag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionValidation {
    /// (a) the identifier occurs exactly once.
    pub identifier_once: bool,
    /// (b) the text begins with the baseline template.
    pub starts_with_baseline: bool,
    /// (c) the subject mention is the bare `<identifier> <class>` phrase.
    pub no_subject_descriptor: bool,
    /// (d) case 1 has no continuation; cases 2–4 have one.
    pub continuation_matches_case: bool,
}

impl DescriptionValidation {
    pub fn passed(&self) -> bool {
        self.identifier_once
            && self.starts_with_baseline
            && self.no_subject_descriptor
            && self.continuation_matches_case
    }
}

fn normalize_token(tok: &str) -> String {
    tok.trim_matches(|c: char| matches!(c, ',' | '.' | ';' | ':' | '!' | '?' | '"' | '\''))
        .to_lowercase()
}

fn subject_mention_is_bare(text: &str, baseline: &Baseline, identifier: &str) -> bool {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let Some(pos) = tokens
        .iter()
        .position(|t| *t == identifier || normalize_token(t) == identifier.to_lowercase())
    else {
        return false;
    };
    let (leading, subject) = baseline.subject_words();
    let before_ok = pos > 0 && leading.contains(&normalize_token(tokens[pos - 1]).as_str());
    let after: Vec<String> = tokens[pos + 1..]
        .iter()
        .take(subject.len())
        .map(|t| normalize_token(t))
        .collect();
    before_ok && after == subject
}

/// Runs checks (a)–(d) on a description.
pub fn validate_description(d: &TrainDescription, baseline: &Baseline, identifier: &str) -> DescriptionValidation {
    let prefix = baseline.render(identifier);
    let identifier_once = count_occurrences(&d.text, identifier) == 1;
    let starts_with_baseline = d.text.starts_with(&prefix) && is_word_boundary(&d.text[prefix.len()..]);
    let no_subject_descriptor =
        !d.case.forbids_subject_descriptors() || subject_mention_is_bare(&d.text, baseline, identifier);
    let continuation_matches_case = if d.case == DescriptionCase::Baseline {
        d.text == prefix
    } else {
        starts_with_baseline
            && !d.text[prefix.len()..]
                .trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
                .is_empty()
    };
    DescriptionValidation {
        identifier_once,
        starts_with_baseline,
        no_subject_descriptor,
        continuation_matches_case,
    }
}

/// Options for [`generate_description`].
#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub templates: InstructionTemplates,
    pub max_retries: usize,
    pub with_expression: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            templates: InstructionTemplates::default(),
            max_retries: DEFAULT_MAX_RETRIES,
            with_expression: false,
        }
    }
}

/// Produces the train description of one reference image.
///
/// Case 1 never contacts the VLM. For cases 2–4 the VLM is called up to
/// `max_retries` times until its output passes [`validate_description`].
pub fn generate_description(
    image: &RgbImage,
    image_index: usize,
    baseline: &Baseline,
    identifier: &str,
    case: DescriptionCase,
    client: Option<&dyn VlmClient>,
    opts: &GenerateOptions,
) -> Result<TrainDescription> {
    non_empty(identifier, "identifier_token")?;
    if let Some(class_name) = baseline.class_name() {
        non_empty(class_name, "class_name")?;
    }
    if !case.needs_vlm() {
        return Ok(TrainDescription {
            image_index,
            case,
            text: baseline.render(identifier),
            vlm_name: None,
            raw_vlm_output: None,
        });
    }
    let client = client.ok_or(DescribeError::MissingClient(case))?;
    let instruction = opts.templates.render(case, baseline, opts.with_expression);
    let attempts = opts.max_retries.max(1);
    let mut raw_outputs = Vec::new();
    let mut last_report = None;
    for _ in 0..attempts {
        let raw = client.send(image, &instruction)?;
        let text = insert_identifier(&raw, baseline, identifier).unwrap_or_else(|| clean_vlm_output(&raw));
        let candidate = TrainDescription {
            image_index,
            case,
            text,
            vlm_name: Some(client.name()),
            raw_vlm_output: Some(raw.clone()),
        };
        let report = validate_description(&candidate, baseline, identifier);
        raw_outputs.push(raw);
        if report.passed() {
            return Ok(candidate);
        }
        log::warn!("description for image {image_index} failed validation ({report:?}); retrying");
        last_report = Some(report);
    }
    Err(DescribeError::ValidationExhausted {
        attempts,
        raw_outputs,
        last_report: Box::new(last_report.expect("at least one attempt")),
    })
}

/// Inserts a facial-expression phrase right after the baseline prefix.
pub fn augment_with_expression(
    d: &TrainDescription,
    baseline: &Baseline,
    identifier: &str,
    expression: &str,
) -> Result<TrainDescription> {
    let report = validate_description(d, baseline, identifier);
    if !report.passed() {
        return Err(DescribeError::Invalid(Box::new(report)));
    }
    let expression = expression.trim();
    if expression.is_empty() {
        return Ok(d.clone());
    }
    if expression.contains(identifier) {
        return Err(DescribeError::ExpressionContainsIdentifier(identifier.to_string()));
    }
    let prefix = baseline.render(identifier);
    let rest = &d.text[prefix.len()..];
    let augmented = TrainDescription {
        text: format!("{prefix} {expression}{rest}"),
        ..d.clone()
    };
    let report = validate_description(&augmented, baseline, identifier);
    if !report.passed() {
        return Err(DescribeError::Invalid(Box::new(report)));
    }
    Ok(augmented)
}

/// Writes one JSON record per line.
pub fn write_jsonl(path: &Path, descriptions: &[TrainDescription]) -> Result<()> {
    let io = |source| DescribeError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut out = Vec::new();
    for d in descriptions {
        serde_json::to_writer(&mut out, d).expect("description serializes");
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(&out).map_err(io)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TrainDescription>> {
    let io = |source| DescribeError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| DescribeError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(text: &str, case: DescriptionCase) -> TrainDescription {
        TrainDescription {
            image_index: 0,
            case,
            text: text.into(),
            vlm_name: None,
            raw_vlm_output: None,
        }
    }

    #[test]
    fn baseline_templates() {
        assert_eq!(baseline_description("dog", "[v]").unwrap().text, "a [v] dog");
        assert_eq!(baseline_description("cat", "sks").unwrap().text, "a sks cat");
        assert!(baseline_description("", "[v]").is_err());
        assert_eq!(
            style_baseline_description("[v]", Medium::Painting).unwrap().text,
            "A painting in the style of [v] art"
        );
        assert_eq!(
            style_baseline_description("[v]", Medium::Cartoon).unwrap().text,
            "A cartoon in the style of [v] art"
        );
        assert!(style_baseline_description("", Medium::Cartoon).is_err());
    }

    #[test]
    fn style_instruction_opens_with_one_sentence_request() {
        let t = InstructionTemplates::default();
        for medium in [Medium::Painting, Medium::Cartoon] {
            let instr = t.render(DescriptionCase::SelectivelyInformative, &Baseline::style(medium), false);
            assert_eq!(instr.template_id, TemplateId::Style);
            assert!(instr
                .rendered_text
                .starts_with("Describe the image in one sentence in detail."));
        }
        let painting = t.render(
            DescriptionCase::SelectivelyInformative,
            &Baseline::style(Medium::Painting),
            false,
        );
        assert_eq!(
            painting.rendered_text,
            "Describe the image in one sentence in detail. Please start the sentence with \"A painting in the style of art.\". You should not describe the style of the painting itself."
        );
    }

    #[test]
    fn object_instruction_substitutes_class() {
        let instr = InstructionTemplates::default().render(
            DescriptionCase::SelectivelyInformative,
            &Baseline::object("cat"),
            false,
        );
        assert_eq!(
            instr.rendered_text,
            "Describe the image in one sentence in detail. Please start the sentence with \"a cat.\". You should not describe the cat itself."
        );
    }

    #[test]
    fn identifier_insertion() {
        let b = Baseline::object("cat");
        assert_eq!(
            insert_identifier("\"A cat sitting on a red rug.\"\n", &b, "[v]").as_deref(),
            Some("a [v] cat sitting on a red rug.")
        );
        assert_eq!(insert_identifier("a category of things", &b, "[v]"), None);
        assert_eq!(insert_identifier("The cat sits", &b, "[v]"), None);
        let s = Baseline::style(Medium::Painting);
        assert_eq!(
            insert_identifier("A painting in the style of art, showing a red barn", &s, "[v]").as_deref(),
            Some("A painting in the style of [v] art, showing a red barn")
        );
    }

    #[test]
    fn validator_fixtures() {
        let b = Baseline::object("cat");
        let ok = validate_description(
            &desc(
                "a [v] cat sitting beside a tall green ceramic vase",
                DescriptionCase::SelectivelyInformative,
            ),
            &b,
            "[v]",
        );
        assert!(ok.passed(), "{ok:?}");

        let bad = validate_description(
            &desc(
                "a [v] fluffy orange cat beside a vase",
                DescriptionCase::SelectivelyInformative,
            ),
            &b,
            "[v]",
        );
        assert!(!bad.no_subject_descriptor);
        assert!(!bad.passed());

        let before = validate_description(
            &desc(
                "a fluffy [v] cat beside a vase",
                DescriptionCase::SelectivelyInformative,
            ),
            &b,
            "[v]",
        );
        assert!(!before.no_subject_descriptor);

        let dog = Baseline::object("dog");
        for case in DescriptionCase::ALL {
            let r = validate_description(&desc("a dog beside a vase", case), &dog, "[v]");
            assert!(!r.identifier_once);
        }
    }

    #[test]
    fn case1_must_equal_template() {
        let b = Baseline::object("dog");
        assert!(validate_description(&desc("a [v] dog", DescriptionCase::Baseline), &b, "[v]").passed());
        let r = validate_description(&desc("a [v] dog on grass", DescriptionCase::Baseline), &b, "[v]");
        assert!(!r.continuation_matches_case);
        let r = validate_description(&desc("a [v] dog", DescriptionCase::NonSubjectClasses), &b, "[v]");
        assert!(!r.continuation_matches_case);
        // "doghouse" is not the class noun
        let r = validate_description(
            &desc("a [v] doghouse near a tree", DescriptionCase::NonSubjectClasses),
            &b,
            "[v]",
        );
        assert!(!r.starts_with_baseline);
    }

    #[test]
    fn case4_allows_subject_descriptors() {
        let b = Baseline::object("perfume");
        let d = desc(
            "a [v] perfume in a clear glass bottle with a pink cap beside a black leather purse",
            DescriptionCase::SubjectSpecs,
        );
        assert!(validate_description(&d, &b, "[v]").passed());
    }

    #[test]
    fn case1_skips_the_vlm() {
        let vlm = ScriptedVlm::new("mock", vec!["never used".into()]);
        let d = generate_description(
            &RgbImage::new(2, 2),
            3,
            &Baseline::object("cat"),
            "[v]",
            DescriptionCase::Baseline,
            Some(&vlm),
            &GenerateOptions::default(),
        )
        .unwrap();
        assert_eq!(d.text, "a [v] cat");
        assert_eq!(d.image_index, 3);
        assert_eq!(vlm.calls(), 0);
    }

    #[test]
    fn retries_then_fails_with_all_outputs() {
        let vlm = ScriptedVlm::new("mock", vec!["The cat is on a sofa".into()]);
        let err = generate_description(
            &RgbImage::new(2, 2),
            0,
            &Baseline::object("cat"),
            "[v]",
            DescriptionCase::SelectivelyInformative,
            Some(&vlm),
            &GenerateOptions::default(),
        )
        .unwrap_err();
        match err {
            DescribeError::ValidationExhausted {
                attempts, raw_outputs, ..
            } => {
                assert_eq!(attempts, 3);
                assert_eq!(raw_outputs.len(), 3);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(vlm.calls(), 3);
    }

    #[test]
    fn retry_recovers_on_second_answer() {
        let vlm = ScriptedVlm::new(
            "mock",
            vec![
                "Here is a description".into(),
                "a {class_name} next to a black leather purse with a gold chain".into(),
            ],
        );
        let d = generate_description(
            &RgbImage::new(2, 2),
            0,
            &Baseline::object("perfume"),
            "[v]",
            DescriptionCase::SelectivelyInformative,
            Some(&vlm),
            &GenerateOptions::default(),
        )
        .unwrap();
        assert_eq!(d.text, "a [v] perfume next to a black leather purse with a gold chain");
        assert_eq!(d.vlm_name.as_deref(), Some("mock"));
        assert_eq!(vlm.calls(), 2);
    }

    #[test]
    fn expression_augmentation() {
        let b = Baseline::object("man");
        let d = desc("a [v] man in a park", DescriptionCase::SelectivelyInformative);
        let out = augment_with_expression(&d, &b, "[v]", "with a wide smile").unwrap();
        assert_eq!(out.text, "a [v] man with a wide smile in a park");
        assert_eq!(augment_with_expression(&d, &b, "[v]", "  ").unwrap(), d);
        assert!(matches!(
            augment_with_expression(&d, &b, "[v]", "like [v]"),
            Err(DescribeError::ExpressionContainsIdentifier(_))
        ));
    }

    #[test]
    fn case_serialization_names() {
        assert_eq!(
            serde_json::to_string(&DescriptionCase::SelectivelyInformative).unwrap(),
            "\"CASE3_SID\""
        );
        assert_eq!(DescriptionCase::from_number(1), Some(DescriptionCase::Baseline));
        assert_eq!(DescriptionCase::from_number(5), None);
        assert_eq!(DescriptionCase::SubjectSpecs.to_string(), "CASE4_SUBJECT_SPECS");
    }

    #[test]
    fn chat_payload_shape() {
        let instr = InstructionTemplates::default().render(
            DescriptionCase::SelectivelyInformative,
            &Baseline::object("cat"),
            false,
        );
        let body = chat_request_body("gpt-4o", &RgbImage::new(2, 2), &instr);
        assert_eq!(body["model"], "gpt-4o");
        let content = &body["messages"][0]["content"];
        assert_eq!(content[0]["text"], instr.rendered_text.as_str());
        assert!(content[1]["image_url"]["url"]
            .as_str()
            .unwrap()
            .starts_with("data:image/png;base64,"));
        let parsed =
            parse_chat_response(r#"{"choices":[{"message":{"role":"assistant","content":"a cat on a mat"}}]}"#)
                .unwrap();
        assert_eq!(parsed, "a cat on a mat");
        assert!(parse_chat_response("{}").is_err());
    }
}
