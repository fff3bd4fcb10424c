//! Reference sets, generated sets and run manifests.
//!
//! Image order is always lexicographic by file name so that pairing indices in
//! metric provenance are reproducible across machines.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{image_digest, sha256_hex};
use crate::{count_occurrences, IDENTIFIER_PLACEHOLDER};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];
const GENERATED_INDEX: &str = "generated.json";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("directory not found: {0}")]
    MissingDirectory(PathBuf),
    #[error("empty reference set: no image files in {0}")]
    EmptyReferenceSet(PathBuf),
    #[error("empty generated set")]
    EmptyGeneratedSet,
    #[error("could not decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("could not encode image {path}: {source}")]
    Encode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("class_name must not be empty")]
    EmptyClassName,
    #[error("identifier_token must not be empty")]
    EmptyIdentifier,
    #[error("identifier_token {identifier:?} contains the class name {class_name:?}")]
    IdentifierContainsClass { identifier: String, class_name: String },
    #[error("generation prompt {prompt:?} contains identifier {identifier:?} {count} times, expected exactly once")]
    IdentifierMultiplicity {
        prompt: String,
        identifier: String,
        count: usize,
    },
    #[error("seed list has {seeds} entries for {images} images")]
    SeedCountMismatch { seeds: usize, images: usize },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One manifest entry describing a personalization subject.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub class_name: String,
    #[serde(default = "default_identifier")]
    pub identifier_token: String,
    pub image_dir: PathBuf,
    #[serde(default)]
    pub prompts: Vec<String>,
}

fn default_identifier() -> String {
    IDENTIFIER_PLACEHOLDER.to_string()
}

#[derive(Debug, Clone)]
pub struct ReferenceImage {
    pub file_name: String,
    pub image: RgbImage,
}

/// A subject's reference images together with its class name and identifier.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    pub subject_id: String,
    pub class_name: String,
    pub identifier_token: String,
    pub images: Vec<ReferenceImage>,
    pub source: String,
}

pub(crate) fn check_subject_naming(class_name: &str, identifier: &str) -> Result<()> {
    if class_name.trim().is_empty() {
        return Err(CorpusError::EmptyClassName);
    }
    if identifier.trim().is_empty() {
        return Err(CorpusError::EmptyIdentifier);
    }
    let class_tokens: Vec<&str> = class_name.split_whitespace().collect();
    let id_tokens: Vec<&str> = identifier.split_whitespace().collect();
    if id_tokens
        .windows(class_tokens.len())
        .any(|window| window == class_tokens.as_slice())
    {
        return Err(CorpusError::IdentifierContainsClass {
            identifier: identifier.to_string(),
            class_name: class_name.to_string(),
        });
    }
    Ok(())
}

fn is_image_file(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false)
}

/// Image files of `dir` sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(CorpusError::MissingDirectory(dir.to_path_buf()));
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if is_image_file(&path) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

pub fn decode_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| CorpusError::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

pub fn save_png(image: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    image
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| CorpusError::Encode {
            path: path.to_path_buf(),
            source,
        })
}

/// Loads the reference images of `dir` for the subject described by `meta`.
///
/// `meta.image_dir` is ignored; `dir` is authoritative so callers can resolve
/// manifest-relative paths themselves.
pub fn load_reference_set(dir: &Path, meta: &SubjectEntry) -> Result<ReferenceSet> {
    check_subject_naming(&meta.class_name, &meta.identifier_token)?;
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(CorpusError::EmptyReferenceSet(dir.to_path_buf()));
    }
    let images = files
        .iter()
        .map(|path| {
            Ok(ReferenceImage {
                file_name: path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                image: decode_rgb(path)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReferenceSet {
        subject_id: meta.id.clone(),
        class_name: meta.class_name.clone(),
        identifier_token: meta.identifier_token.clone(),
        images,
        source: dir.display().to_string(),
    })
}

impl ReferenceSet {
    /// Builds an in-memory set; used by tests and by callers that already hold
    /// decoded images.
    pub fn from_images(
        subject_id: impl Into<String>,
        class_name: impl Into<String>,
        identifier_token: impl Into<String>,
        images: Vec<RgbImage>,
    ) -> Result<Self> {
        let class_name = class_name.into();
        let identifier_token = identifier_token.into();
        check_subject_naming(&class_name, &identifier_token)?;
        if images.is_empty() {
            return Err(CorpusError::EmptyReferenceSet(PathBuf::from("<memory>")));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            class_name,
            identifier_token,
            images: images
                .into_iter()
                .enumerate()
                .map(|(i, image)| ReferenceImage {
                    file_name: format!("{i:03}.png"),
                    image,
                })
                .collect(),
            source: "memory".to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn rgb_images(&self) -> impl Iterator<Item = &RgbImage> {
        self.images.iter().map(|r| &r.image)
    }

    /// Hash over file names and decoded pixels, in set order.
    pub fn set_hash(&self) -> String {
        let mut buf = Vec::new();
        for r in &self.images {
            buf.extend_from_slice(r.file_name.as_bytes());
            buf.push(0);
            buf.extend_from_slice(image_digest(&r.image).as_bytes());
        }
        sha256_hex(&buf)
    }
}

/// Images sampled from a personalized model with one generation prompt.
#[derive(Debug, Clone)]
pub struct GeneratedSet {
    pub images: Vec<RgbImage>,
    pub generation_prompt: String,
    pub identifier_token: String,
    pub run_id: String,
    pub seed_list: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GeneratedIndex {
    run_id: String,
    generation_prompt: String,
    identifier_token: String,
    seed_list: Vec<u64>,
    images: Vec<String>,
}

pub(crate) fn check_prompt_identifier(prompt: &str, identifier: &str) -> Result<()> {
    let count = count_occurrences(prompt, identifier);
    if count != 1 {
        return Err(CorpusError::IdentifierMultiplicity {
            prompt: prompt.to_string(),
            identifier: identifier.to_string(),
            count,
        });
    }
    Ok(())
}

impl GeneratedSet {
    pub fn new(
        images: Vec<RgbImage>,
        generation_prompt: impl Into<String>,
        identifier_token: impl Into<String>,
        run_id: impl Into<String>,
        seed_list: Vec<u64>,
    ) -> Result<Self> {
        let generation_prompt = generation_prompt.into();
        let identifier_token = identifier_token.into();
        if images.is_empty() {
            return Err(CorpusError::EmptyGeneratedSet);
        }
        if seed_list.len() != images.len() {
            return Err(CorpusError::SeedCountMismatch {
                seeds: seed_list.len(),
                images: images.len(),
            });
        }
        check_prompt_identifier(&generation_prompt, &identifier_token)?;
        Ok(Self {
            images,
            generation_prompt,
            identifier_token,
            run_id: run_id.into(),
            seed_list,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Writes `NNN.png` files plus a `generated.json` index into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut names = Vec::with_capacity(self.images.len());
        for (i, img) in self.images.iter().enumerate() {
            let name = format!("{i:03}.png");
            save_png(img, &dir.join(&name))?;
            names.push(name);
        }
        let index = GeneratedIndex {
            run_id: self.run_id.clone(),
            generation_prompt: self.generation_prompt.clone(),
            identifier_token: self.identifier_token.clone(),
            seed_list: self.seed_list.clone(),
            images: names,
        };
        write_json(&dir.join(GENERATED_INDEX), &index)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(CorpusError::MissingDirectory(dir.to_path_buf()));
        }
        let index: GeneratedIndex = read_json(&dir.join(GENERATED_INDEX))?;
        let images = index
            .images
            .iter()
            .map(|name| decode_rgb(&dir.join(name)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            images,
            index.generation_prompt,
            index.identifier_token,
            index.run_id,
            index.seed_list,
        )
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|source| CorpusError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| CorpusError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// A run manifest: subjects, their prompts and how many images to sample per
/// prompt. Serialized as a single JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subjects: Vec<SubjectEntry>,
    pub images_per_prompt: usize,
    /// Declared number of generated images; checked against the product of
    /// prompt counts and `images_per_prompt` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_images: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_layout: Option<String>,
    /// Directory the manifest was loaded from; relative `image_dir`s resolve
    /// against it.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    TotalMismatch,
    DuplicateSubjectId,
    EmptyClassName,
    BadIdentifier,
    NoPrompts,
    PromptIdentifier,
    ZeroImagesPerPrompt,
    NoSubjects,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, kind: ViolationKind, message: String) {
        self.violations.push(Violation { kind, message });
    }

    pub fn has(&self, kind: &ViolationKind) -> bool {
        self.violations.iter().any(|v| &v.kind == kind)
    }
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut manifest: RunManifest = read_json(path)?;
        manifest.base_dir = path.parent().map(Path::to_path_buf);
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Total number of images the manifest implies.
    pub fn computed_total(&self) -> usize {
        self.subjects
            .iter()
            .map(|s| s.prompts.len() * self.images_per_prompt)
            .sum()
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectEntry> {
        self.subjects.iter().find(|s| s.id == id)
    }

    pub fn image_dir(&self, subject: &SubjectEntry) -> PathBuf {
        match &self.base_dir {
            Some(base) if subject.image_dir.is_relative() => base.join(&subject.image_dir),
            _ => subject.image_dir.clone(),
        }
    }

    pub fn load_reference_set(&self, subject: &SubjectEntry) -> Result<ReferenceSet> {
        load_reference_set(&self.image_dir(subject), subject)
    }
}

/// Checks every manifest invariant and reports all violations.
pub fn validate_manifest(m: &RunManifest) -> ValidationReport {
    let mut report = ValidationReport::default();
    if m.subjects.is_empty() {
        report.push(ViolationKind::NoSubjects, "manifest lists no subjects".into());
    }
    if m.images_per_prompt == 0 {
        report.push(
            ViolationKind::ZeroImagesPerPrompt,
            "images_per_prompt must be at least 1".into(),
        );
    }
    let mut seen = HashSet::new();
    for s in &m.subjects {
        if !seen.insert(s.id.as_str()) {
            report.push(
                ViolationKind::DuplicateSubjectId,
                format!("duplicate subject_id {:?}", s.id),
            );
        }
        match check_subject_naming(&s.class_name, &s.identifier_token) {
            Ok(()) => {}
            Err(CorpusError::EmptyClassName) => report.push(
                ViolationKind::EmptyClassName,
                format!("subject {:?} has an empty class_name", s.id),
            ),
            Err(e) => report.push(ViolationKind::BadIdentifier, format!("subject {:?}: {e}", s.id)),
        }
        if s.prompts.is_empty() {
            report.push(ViolationKind::NoPrompts, format!("subject {:?} has no prompts", s.id));
        }
        for p in &s.prompts {
            if let Err(e) = check_prompt_identifier(p, &s.identifier_token) {
                report.push(ViolationKind::PromptIdentifier, format!("subject {:?}: {e}", s.id));
            }
        }
    }
    if let Some(declared) = m.total_images {
        let computed = m.computed_total();
        if declared != computed {
            report.push(
                ViolationKind::TotalMismatch,
                format!("total mismatch: declared {declared}, computed {computed}"),
            );
        }
    }
    report
}
