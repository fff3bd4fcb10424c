//! Joint image/text embeddings.
//!
//! Encoder adapters return raw vectors; normalization to unit length happens
//! here and nowhere else, so every [`EmbeddingVector`] satisfies
//! `| ||v|| - 1 | <= 1e-6`.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{image_digest, seed_from_parts, sha256_hex};

pub const DEFAULT_ENCODER_ID: &str = "clip-vit-b-32";
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("encoder failure: {0}")]
    Encoder(String),
    #[error("degenerate embedding: raw vector has zero or non-finite norm")]
    Degenerate,
    #[error("text input must not be empty")]
    EmptyText,
    #[error("batch_size must be at least 1")]
    ZeroBatch,
    #[error("input {index} failed: {source}")]
    Item {
        index: usize,
        #[source]
        source: Box<EmbedError>,
    },
    #[error("unknown encoder id {0:?}")]
    UnknownEncoder(String),
    #[error("cache i/o error on {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = EmbedError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

/// Unit-norm vector in the encoder's joint space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    pub modality: Modality,
    pub encoder_id: String,
}

impl EmbeddingVector {
    /// Normalizes `raw` to unit length.
    pub fn normalize<T: Into<f64> + Copy>(raw: &[T], modality: Modality, encoder_id: &str) -> Result<Self> {
        let norm = raw.iter().map(|&v| v.into() * v.into()).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbedError::Degenerate);
        }
        Ok(Self {
            values: raw.iter().map(|&v| v.into() / norm).collect(),
            modality,
            encoder_id: encoder_id.to_string(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    /// Cosine similarity of two unit vectors, clamped to `[-1, 1]` to absorb
    /// rounding in the normalization.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        self.dot(other).clamp(-1.0, 1.0)
    }
}

/// A joint image/text encoder returning raw (unnormalized) vectors.
pub trait Encoder: Send + Sync {
    fn id(&self) -> &str;
    fn encode_image(&self, image: &RgbImage) -> Result<Vec<f32>>;
    fn encode_text(&self, text: &str) -> Result<Vec<f32>>;

    fn encode_images(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f32>>> {
        images.iter().map(|i| self.encode_image(i)).collect()
    }

    fn encode_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        texts.iter().map(|t| self.encode_text(t)).collect()
    }
}

impl<E: Encoder + ?Sized> Encoder for Box<E> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn encode_image(&self, image: &RgbImage) -> Result<Vec<f32>> {
        (**self).encode_image(image)
    }
    fn encode_text(&self, text: &str) -> Result<Vec<f32>> {
        (**self).encode_text(text)
    }
    fn encode_images(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f32>>> {
        (**self).encode_images(images)
    }
    fn encode_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        (**self).encode_texts(texts)
    }
}

pub fn embed_image(image: &RgbImage, encoder: &dyn Encoder) -> Result<EmbeddingVector> {
    let raw = encoder.encode_image(image)?;
    EmbeddingVector::normalize(&raw, Modality::Image, encoder.id())
}

pub fn embed_text(text: &str, encoder: &dyn Encoder) -> Result<EmbeddingVector> {
    if text.trim().is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let raw = encoder.encode_text(text)?;
    EmbeddingVector::normalize(&raw, Modality::Text, encoder.id())
}

fn wrap_item(index: usize) -> impl Fn(EmbedError) -> EmbedError {
    move |e| EmbedError::Item {
        index,
        source: Box::new(e),
    }
}

/// Embeds images in chunks of `batch_size`, preserving order.
pub fn batch_embed_images(
    images: &[&RgbImage],
    encoder: &dyn Encoder,
    batch_size: usize,
) -> Result<Vec<EmbeddingVector>> {
    if batch_size == 0 {
        return Err(EmbedError::ZeroBatch);
    }
    let mut out = Vec::with_capacity(images.len());
    for (chunk_no, chunk) in images.chunks(batch_size).enumerate() {
        let base = chunk_no * batch_size;
        let raws = encoder.encode_images(chunk).map_err(wrap_item(base))?;
        if raws.len() != chunk.len() {
            return Err(EmbedError::Encoder(format!(
                "encoder returned {} vectors for {} images",
                raws.len(),
                chunk.len()
            )));
        }
        for (i, raw) in raws.iter().enumerate() {
            out.push(EmbeddingVector::normalize(raw, Modality::Image, encoder.id()).map_err(wrap_item(base + i))?);
        }
    }
    Ok(out)
}

pub fn batch_embed_texts(texts: &[&str], encoder: &dyn Encoder, batch_size: usize) -> Result<Vec<EmbeddingVector>> {
    if batch_size == 0 {
        return Err(EmbedError::ZeroBatch);
    }
    if let Some(index) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(wrap_item(index)(EmbedError::EmptyText));
    }
    let mut out = Vec::with_capacity(texts.len());
    for (chunk_no, chunk) in texts.chunks(batch_size).enumerate() {
        let base = chunk_no * batch_size;
        let raws = encoder.encode_texts(chunk).map_err(wrap_item(base))?;
        for (i, raw) in raws.iter().enumerate() {
            out.push(EmbeddingVector::normalize(raw, Modality::Text, encoder.id()).map_err(wrap_item(base + i))?);
        }
    }
    Ok(out)
}

/// Identity-like mock: an image embeds to its pixels resampled to
/// `resolution`×`resolution`. Identical images embed identically, and the
/// all-black image is degenerate. Text embeds to a bag of hashed ±1 vectors.
#[derive(Debug, Clone)]
pub struct PixelEncoder {
    resolution: u32,
}

impl PixelEncoder {
    pub const ID: &'static str = "mock-pixel";

    pub fn new(resolution: u32) -> Self {
        Self {
            resolution: resolution.max(1),
        }
    }

    pub fn dim(&self) -> usize {
        (self.resolution * self.resolution * 3) as usize
    }
}

impl Default for PixelEncoder {
    fn default() -> Self {
        Self::new(16)
    }
}

/// Deterministic ±1 vector for a token.
fn hashed_direction(token: &str, dim: usize) -> impl Iterator<Item = f32> {
    let mut state = seed_from_parts(&[token.as_bytes()]) | 1;
    (0..dim).map(move |_| {
        // xorshift64
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        if state & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    })
}

impl Encoder for PixelEncoder {
    fn id(&self) -> &str {
        Self::ID
    }

    fn encode_image(&self, image: &RgbImage) -> Result<Vec<f32>> {
        let resized;
        let img = if image.dimensions() == (self.resolution, self.resolution) {
            image
        } else {
            resized = image::imageops::resize(image, self.resolution, self.resolution, FilterType::Triangle);
            &resized
        };
        Ok(img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect())
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f32>> {
        let dim = self.dim();
        let mut acc = vec![0.0f32; dim];
        for token in text.split_whitespace() {
            for (a, d) in acc.iter_mut().zip(hashed_direction(&token.to_lowercase(), dim)) {
                *a += d;
            }
        }
        Ok(acc)
    }
}

/// Returns preset vectors keyed by image content or exact text.
#[derive(Debug, Clone, Default)]
pub struct TableEncoder {
    id: String,
    images: HashMap<String, Vec<f32>>,
    texts: HashMap<String, Vec<f32>>,
}

impl TableEncoder {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            ..Self::default()
        }
    }

    pub fn with_image(mut self, image: &RgbImage, raw: Vec<f32>) -> Self {
        self.images.insert(image_digest(image), raw);
        self
    }

    pub fn with_text(mut self, text: &str, raw: Vec<f32>) -> Self {
        self.texts.insert(text.to_string(), raw);
        self
    }
}

impl Encoder for TableEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn encode_image(&self, image: &RgbImage) -> Result<Vec<f32>> {
        self.images
            .get(&image_digest(image))
            .cloned()
            .ok_or_else(|| EmbedError::Encoder("image not in table".into()))
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f32>> {
        self.texts
            .get(text)
            .cloned()
            .ok_or_else(|| EmbedError::Encoder(format!("text {text:?} not in table")))
    }
}

/// Out-of-process encoder, e.g. a CLIP ViT-B/32 script.
///
/// The command receives `{"encoder": id, "images": [png paths], "texts": [..]}`
/// on stdin and must print `{"image_embeddings": [[..]], "text_embeddings": [[..]]}`.
pub struct ExternalEncoder {
    id: String,
    command: Vec<String>,
}

#[derive(Serialize)]
struct ExternalRequest<'a> {
    encoder: &'a str,
    images: Vec<String>,
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct ExternalResponse {
    #[serde(default)]
    image_embeddings: Vec<Vec<f32>>,
    #[serde(default)]
    text_embeddings: Vec<Vec<f32>>,
}

impl ExternalEncoder {
    pub fn new(id: impl Into<String>, command: Vec<String>) -> Self {
        Self { id: id.into(), command }
    }

    fn call(&self, images: &[&RgbImage], texts: &[&str]) -> Result<ExternalResponse> {
        let (program, args) = self
            .command
            .split_first()
            .ok_or_else(|| EmbedError::Encoder("empty encoder command".into()))?;
        let work = tempfile::tempdir().map_err(|e| EmbedError::Encoder(e.to_string()))?;
        let mut paths = Vec::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            let p = work.path().join(format!("{i:05}.png"));
            img.save(&p).map_err(|e| EmbedError::Encoder(e.to_string()))?;
            paths.push(p.to_string_lossy().into_owned());
        }
        let request = serde_json::to_vec(&ExternalRequest {
            encoder: &self.id,
            images: paths,
            texts,
        })
        .expect("request serializes");
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| EmbedError::Encoder(format!("{program}: {e}")))?;
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(&request)
            .map_err(|e| EmbedError::Encoder(e.to_string()))?;
        let output = child
            .wait_with_output()
            .map_err(|e| EmbedError::Encoder(e.to_string()))?;
        if !output.status.success() {
            return Err(EmbedError::Encoder(format!("{program} exited with {}", output.status)));
        }
        let response: ExternalResponse = serde_json::from_slice(&output.stdout)
            .map_err(|e| EmbedError::Encoder(format!("bad encoder output: {e}")))?;
        if response.image_embeddings.len() != images.len() || response.text_embeddings.len() != texts.len() {
            return Err(EmbedError::Encoder(
                "encoder returned the wrong number of vectors".into(),
            ));
        }
        Ok(response)
    }
}

impl Encoder for ExternalEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn encode_image(&self, image: &RgbImage) -> Result<Vec<f32>> {
        Ok(self.call(&[image], &[])?.image_embeddings.remove(0))
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f32>> {
        Ok(self.call(&[], &[text])?.text_embeddings.remove(0))
    }

    fn encode_images(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f32>>> {
        Ok(self.call(images, &[])?.image_embeddings)
    }

    fn encode_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        Ok(self.call(&[], texts)?.text_embeddings)
    }
}

/// Content-addressed cache of raw encoder outputs:
/// `<dir>/<encoder_id>/<sha256>.f32`, little-endian float32.
pub struct CachedEncoder<E> {
    inner: E,
    dir: PathBuf,
}

impl<E: Encoder> CachedEncoder<E> {
    pub fn new(inner: E, dir: impl Into<PathBuf>) -> Self {
        Self { inner, dir: dir.into() }
    }

    fn path_for(&self, key_material: &str) -> PathBuf {
        self.dir
            .join(sanitize(self.inner.id()))
            .join(format!("{}.f32", sha256_hex(key_material.as_bytes())))
    }

    fn lookup_or(&self, key: &str, compute: impl FnOnce() -> Result<Vec<f32>>) -> Result<Vec<f32>> {
        let path = self.path_for(key);
        if let Some(v) = read_f32_file(&path)? {
            return Ok(v);
        }
        let v = compute()?;
        write_f32_file(&path, &v)?;
        Ok(v)
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn write_f32_file(path: &Path, values: &[f32]) -> Result<()> {
    let err = |source| EmbedError::Cache {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(err)?;
    }
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(err)
}

pub fn read_f32_file(path: &Path) -> Result<Option<Vec<f32>>> {
    match fs::read(path) {
        Ok(bytes) => Ok(Some(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(source) => Err(EmbedError::Cache {
            path: path.to_path_buf(),
            source,
        }),
    }
}

impl<E: Encoder> Encoder for CachedEncoder<E> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn encode_image(&self, image: &RgbImage) -> Result<Vec<f32>> {
        self.lookup_or(&format!("image:{}", image_digest(image)), || {
            self.inner.encode_image(image)
        })
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f32>> {
        self.lookup_or(&format!("text:{text}"), || self.inner.encode_text(text))
    }

    fn encode_images(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f32>>> {
        let keys: Vec<String> = images.iter().map(|i| format!("image:{}", image_digest(i))).collect();
        let mut out: Vec<Option<Vec<f32>>> = keys
            .iter()
            .map(|k| read_f32_file(&self.path_for(k)))
            .collect::<Result<_>>()?;
        let missing: Vec<usize> = (0..images.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let todo: Vec<&RgbImage> = missing.iter().map(|&i| images[i]).collect();
            let fresh = self.inner.encode_images(&todo)?;
            for (&i, v) in missing.iter().zip(fresh) {
                write_f32_file(&self.path_for(&keys[i]), &v)?;
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled")).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    #[serde(default = "default_encoder_id")]
    pub id: String,
    /// Command for out-of-process encoders.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub command: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Input resolution of the pixel mock.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<u32>,
}

fn default_encoder_id() -> String {
    DEFAULT_ENCODER_ID.to_string()
}

fn default_batch() -> usize {
    32
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            id: default_encoder_id(),
            command: Vec::new(),
            cache_dir: None,
            batch_size: default_batch(),
            resolution: None,
        }
    }
}

/// Resolves an encoder id to an adapter. `mock-pixel` is built in; any other
/// id (including the default `clip-vit-b-32`) needs an external command.
pub fn load_encoder(cfg: &EncoderConfig) -> Result<Box<dyn Encoder>> {
    let base: Box<dyn Encoder> = match cfg.id.as_str() {
        PixelEncoder::ID => Box::new(PixelEncoder::new(cfg.resolution.unwrap_or(16))),
        id if !cfg.command.is_empty() => Box::new(ExternalEncoder::new(id, cfg.command.clone())),
        id => return Err(EmbedError::UnknownEncoder(id.to_string())),
    };
    Ok(match &cfg.cache_dir {
        Some(dir) => Box::new(CachedEncoder::new(base, dir.clone())),
        None => base,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn img(v: u8) -> RgbImage {
        RgbImage::from_pixel(3, 3, Rgb([v, v / 2, 255 - v]))
    }

    #[test]
    fn normalization_arithmetic() {
        let t = TableEncoder::new("t")
            .with_image(&img(1), vec![3.0, 4.0])
            .with_text("a dog", vec![0.0, 5.0])
            .with_image(&img(2), vec![0.0, 0.0]);
        let v = embed_image(&img(1), &t).unwrap();
        assert_eq!(v.values(), &[0.6, 0.8]);
        assert_eq!(v.modality, Modality::Image);
        let w = embed_text("a dog", &t).unwrap();
        assert_eq!(w.values(), &[0.0, 1.0]);
        assert!(matches!(embed_image(&img(2), &t), Err(EmbedError::Degenerate)));
        assert!(matches!(embed_text("", &t), Err(EmbedError::EmptyText)));
    }

    #[test]
    fn pixel_encoder_is_deterministic() {
        let e = PixelEncoder::new(4);
        let a = embed_image(&img(40), &e).unwrap();
        assert_eq!(a, embed_image(&img(40), &e).unwrap());
        assert!((a.norm() - 1.0).abs() <= NORM_TOLERANCE);
        assert_eq!(embed_text("a dog", &e).unwrap(), embed_text("a dog", &e).unwrap());
        assert!(matches!(
            embed_image(&RgbImage::new(5, 5), &e),
            Err(EmbedError::Degenerate)
        ));
    }

    #[test]
    fn batch_edge_cases() {
        let e = PixelEncoder::new(4);
        assert!(batch_embed_images(&[], &e, 4).unwrap().is_empty());
        let one = img(9);
        assert_eq!(
            batch_embed_images(&[&one], &e, 1).unwrap()[0],
            embed_image(&one, &e).unwrap()
        );
        assert!(matches!(batch_embed_images(&[&one], &e, 0), Err(EmbedError::ZeroBatch)));
        let black = RgbImage::new(3, 3);
        let err = batch_embed_images(&[&one, &one, &black], &e, 2).unwrap_err();
        assert!(matches!(err, EmbedError::Item { index: 2, .. }), "{err:?}");
    }

    #[test]
    fn batch_matches_singles() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        let e = PixelEncoder::new(5);
        let images: Vec<RgbImage> = (0..8)
            .map(|_| RgbImage::from_fn(7, 6, |_, _| Rgb([rng.random(), rng.random(), rng.random()])))
            .collect();
        let refs: Vec<&RgbImage> = images.iter().collect();
        for batch_size in [1, 3, 8] {
            let batched = batch_embed_images(&refs, &e, batch_size).unwrap();
            for (b, i) in batched.iter().zip(&images) {
                let single = embed_image(i, &e).unwrap();
                let diff = b
                    .values()
                    .iter()
                    .zip(single.values())
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0f64, f64::max);
                assert!(diff < 1e-5);
            }
        }
    }

    #[test]
    fn cache_reloads_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cached = CachedEncoder::new(PixelEncoder::new(4), dir.path());
        let first = cached.encode_image(&img(77)).unwrap();
        let files: Vec<_> = walk(dir.path());
        assert_eq!(files.len(), 1);
        let again = CachedEncoder::new(
            TableEncoder::new(PixelEncoder::ID), // would fail if consulted
            dir.path(),
        );
        let second = again.encode_image(&img(77)).unwrap();
        assert_eq!(
            first.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            second.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let batched = again.encode_images(&[&img(77)]).unwrap();
        assert_eq!(batched[0], first);
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn unknown_encoder_needs_a_command() {
        let cfg = EncoderConfig::default();
        assert!(matches!(load_encoder(&cfg), Err(EmbedError::UnknownEncoder(_))));
        let cfg = EncoderConfig {
            id: PixelEncoder::ID.into(),
            ..EncoderConfig::default()
        };
        assert_eq!(load_encoder(&cfg).unwrap().id(), PixelEncoder::ID);
    }

    #[test]
    fn external_encoder_protocol() {
        let script = r#"read line; printf '{"image_embeddings":[[1,2]],"text_embeddings":[]}'"#;
        let e = ExternalEncoder::new("ext", vec!["sh".into(), "-c".into(), script.into()]);
        let v = embed_image(&img(3), &e).unwrap();
        assert!((v.values()[0] - 1.0 / 5f64.sqrt()).abs() < 1e-6);
        let bad = ExternalEncoder::new("ext", vec!["sh".into(), "-c".into(), "exit 3".into()]);
        assert!(matches!(embed_image(&img(3), &bad), Err(EmbedError::Encoder(_))));
    }

    proptest! {
        #[test]
        fn produced_vectors_are_unit_and_cosines_bounded(
            a in proptest::collection::vec(-100.0f32..100.0, 1..64),
            b_seed in any::<u64>(),
        ) {
            prop_assume!(a.iter().any(|v| v.abs() > 1e-3));
            let b: Vec<f32> = hashed_direction(&b_seed.to_string(), a.len()).collect();
            let va = EmbeddingVector::normalize(&a, Modality::Image, "x").unwrap();
            let vb = EmbeddingVector::normalize(&b, Modality::Text, "x").unwrap();
            prop_assert!((va.norm() - 1.0).abs() <= NORM_TOLERANCE);
            prop_assert!((vb.norm() - 1.0).abs() <= NORM_TOLERANCE);
            let c = va.cosine(&vb);
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}
