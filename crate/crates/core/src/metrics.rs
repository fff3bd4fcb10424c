//! Subject-alignment (SA), non-subject-disentanglement (NSD) and
//! text-alignment (TA).
//!
//! With reference images `r_n`, subject masks `s_n`, generated images `g_m`,
//! image/text encoders `f_i`/`f_t` (unit-normalized) and the generation prompt
//! `p` with its identifier removed:
//!
//! ```text
//! SA  =     Avg_{n,m} f_i(align(r_n * s_n)) . f_i(g_m)
//! NSD = 1 - Avg_{n,m} f_i(r_n * (1 - s_n)) . f_i(g_m)
//! TA  =     Avg_m     f_t(p) . f_i(g_m)
//! ```
//!
//! `align` is the crop/pad/resize of [`center_align_resize`]; non-subject
//! segments are used full frame. All aggregation is done in `f64` after the
//! full pairwise matrix has been computed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{GeneratedSet, ReferenceSet};
use crate::embed::{batch_embed_images, embed_text, EmbedError, EmbeddingVector, Encoder};
use crate::segment::{apply_mask, center_align_resize, SegmentError, SubjectMask};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no reference images")]
    NoReferences,
    #[error("no generated images")]
    NoGenerated,
    #[error("{masks} masks for {refs} reference images")]
    MaskCount { masks: usize, refs: usize },
    #[error("mask {0} is empty")]
    EmptyMask(usize),
    #[error("nsd undefined: every reference's subject fills the frame")]
    NsdUndefined,
    #[error("all cells excluded from the average")]
    AllExcluded,
    #[error("identifier {0:?} not found in prompt")]
    IdentifierAbsent(String),
    #[error("multiple identifiers: {token:?} appears {count} times")]
    MultipleIdentifiers { token: String, count: usize },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Removes the identifier from a generation prompt and tidies whitespace.
pub fn strip_identifier(prompt: &str, token: &str) -> Result<String> {
    let count = crate::count_occurrences(prompt, token);
    match count {
        0 => Err(MetricsError::IdentifierAbsent(token.to_string())),
        1 => Ok(prompt
            .replacen(token, " ", 1)
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")),
        _ => Err(MetricsError::MultipleIdentifiers {
            token: token.to_string(),
            count,
        }),
    }
}

/// N×M matrix of similarities; `None` marks an excluded cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseMatrix {
    rows: usize,
    cols: usize,
    cells: Vec<Option<f64>>,
}

impl PairwiseMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix");
        Self {
            rows: rows.len(),
            cols,
            cells: rows.into_iter().flatten().map(Some).collect(),
        }
    }

    pub fn from_cells(rows: usize, cols: usize, cells: Vec<Option<f64>>) -> Self {
        assert_eq!(cells.len(), rows * cols);
        Self { rows, cols, cells }
    }

    /// Marks a cell as excluded.
    pub fn exclude(&mut self, row: usize, col: usize) {
        self.cells[row * self.cols + col] = None;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.cells[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[Option<f64>] {
        &self.cells[row * self.cols..(row + 1) * self.cols]
    }

    /// Rows as nested vectors, excluded cells as `None`.
    pub fn to_rows(&self) -> Vec<Vec<Option<f64>>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    /// CSV with one row per reference and one column per generated image;
    /// excluded cells are left blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows {
            let line: Vec<String> = self
                .row(r)
                .iter()
                .map(|c| c.map(format_significant).unwrap_or_default())
                .collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }
}

/// Formats `v` with 9 significant digits.
pub fn format_significant(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v == 0.0 {
            "0".into()
        } else {
            v.to_string()
        };
    }
    let exponent = v.abs().log10().floor() as i32;
    if !(-5..9).contains(&exponent) {
        return format!("{v:.8e}");
    }
    let decimals = (8 - exponent).max(0) as usize;
    format!("{v:.decimals$}")
}

/// Arithmetic mean over the included cells.
pub fn pairwise_average(matrix: &PairwiseMatrix) -> Result<f64> {
    let (sum, n) = matrix
        .cells
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return Err(MetricsError::AllExcluded);
    }
    Ok(sum / n as f64)
}

fn similarity_matrix(rows: &[Option<EmbeddingVector>], cols: &[EmbeddingVector]) -> PairwiseMatrix {
    let mut cells = Vec::with_capacity(rows.len() * cols.len());
    for r in rows {
        for c in cols {
            cells.push(r.as_ref().map(|r| r.cosine(c)));
        }
    }
    PairwiseMatrix::from_cells(rows.len(), cols.len(), cells)
}

/// SA from already-embedded subject segments and generated images.
pub fn subject_alignment_from_embeddings(
    segments: &[EmbeddingVector],
    generated: &[EmbeddingVector],
) -> Result<(f64, PairwiseMatrix)> {
    if segments.is_empty() {
        return Err(MetricsError::NoReferences);
    }
    if generated.is_empty() {
        return Err(MetricsError::NoGenerated);
    }
    let rows: Vec<Option<EmbeddingVector>> = segments.iter().cloned().map(Some).collect();
    let m = similarity_matrix(&rows, generated);
    Ok((pairwise_average(&m)?, m))
}

/// NSD from embedded non-subject segments; `None` rows (subject fills the
/// frame) are excluded from the average.
pub fn non_subject_disentanglement_from_embeddings(
    non_subject: &[Option<EmbeddingVector>],
    generated: &[EmbeddingVector],
) -> Result<(f64, PairwiseMatrix)> {
    if non_subject.is_empty() {
        return Err(MetricsError::NoReferences);
    }
    if generated.is_empty() {
        return Err(MetricsError::NoGenerated);
    }
    let m = similarity_matrix(non_subject, generated);
    let avg = pairwise_average(&m).map_err(|e| match e {
        MetricsError::AllExcluded => MetricsError::NsdUndefined,
        other => other,
    })?;
    Ok((1.0 - avg, m))
}

/// TA from an embedded (identifier-free) prompt and generated images.
pub fn text_alignment_from_embeddings(
    prompt: &EmbeddingVector,
    generated: &[EmbeddingVector],
) -> Result<(f64, Vec<f64>)> {
    if generated.is_empty() {
        return Err(MetricsError::NoGenerated);
    }
    let per_image: Vec<f64> = generated.iter().map(|g| prompt.cosine(g)).collect();
    let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok((mean, per_image))
}

#[derive(Debug, Clone, Copy)]
pub struct MetricOptions {
    /// Output side length of the centered subject segments.
    pub segment_resolution: u32,
    pub batch_size: usize,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            segment_resolution: 224,
            batch_size: 32,
        }
    }
}

fn check_inputs(refs: &ReferenceSet, masks: &[SubjectMask], gen: &GeneratedSet) -> Result<()> {
    if refs.is_empty() {
        return Err(MetricsError::NoReferences);
    }
    if gen.is_empty() {
        return Err(MetricsError::NoGenerated);
    }
    if masks.len() != refs.len() {
        return Err(MetricsError::MaskCount {
            masks: masks.len(),
            refs: refs.len(),
        });
    }
    Ok(())
}

/// Centered subject segments `align(r_n * s_n)`.
pub fn subject_segments(refs: &ReferenceSet, masks: &[SubjectMask], resolution: u32) -> Result<Vec<RgbImage>> {
    refs.rgb_images()
        .zip(masks)
        .enumerate()
        .map(|(i, (img, mask))| {
            if mask.is_empty() {
                return Err(MetricsError::EmptyMask(i));
            }
            let masked = apply_mask(img, &mask.grid)?;
            Ok(center_align_resize(&masked, &mask.grid, resolution)?)
        })
        .collect()
}

/// Full-frame non-subject segments `r_n * (1 - s_n)`; `None` where the
/// complement is empty.
pub fn non_subject_segments(refs: &ReferenceSet, masks: &[SubjectMask]) -> Result<Vec<Option<RgbImage>>> {
    refs.rgb_images()
        .zip(masks)
        .map(|(img, mask)| {
            let inverse = mask.grid.complement();
            if inverse.is_empty() {
                return Ok(None);
            }
            Ok(Some(apply_mask(img, &inverse)?))
        })
        .collect()
}

fn embed_generated(gen: &GeneratedSet, encoder: &dyn Encoder, opts: &MetricOptions) -> Result<Vec<EmbeddingVector>> {
    let images: Vec<&RgbImage> = gen.images.iter().collect();
    Ok(batch_embed_images(&images, encoder, opts.batch_size)?)
}

fn embed_segments(segments: &[RgbImage], encoder: &dyn Encoder, opts: &MetricOptions) -> Result<Vec<EmbeddingVector>> {
    let images: Vec<&RgbImage> = segments.iter().collect();
    Ok(batch_embed_images(&images, encoder, opts.batch_size)?)
}

fn embed_optional(
    segments: &[Option<RgbImage>],
    encoder: &dyn Encoder,
    opts: &MetricOptions,
) -> Result<Vec<Option<EmbeddingVector>>> {
    let present: Vec<&RgbImage> = segments.iter().flatten().collect();
    let mut embedded = batch_embed_images(&present, encoder, opts.batch_size)?.into_iter();
    Ok(segments
        .iter()
        .map(|s| s.as_ref().and_then(|_| embedded.next()))
        .collect())
}

pub fn subject_alignment(
    refs: &ReferenceSet,
    masks: &[SubjectMask],
    gen: &GeneratedSet,
    encoder: &dyn Encoder,
    opts: &MetricOptions,
) -> Result<(f64, PairwiseMatrix)> {
    check_inputs(refs, masks, gen)?;
    let segments = subject_segments(refs, masks, opts.segment_resolution)?;
    subject_alignment_from_embeddings(
        &embed_segments(&segments, encoder, opts)?,
        &embed_generated(gen, encoder, opts)?,
    )
}

pub fn non_subject_disentanglement(
    refs: &ReferenceSet,
    masks: &[SubjectMask],
    gen: &GeneratedSet,
    encoder: &dyn Encoder,
    opts: &MetricOptions,
) -> Result<(f64, PairwiseMatrix)> {
    check_inputs(refs, masks, gen)?;
    let segments = non_subject_segments(refs, masks)?;
    non_subject_disentanglement_from_embeddings(
        &embed_optional(&segments, encoder, opts)?,
        &embed_generated(gen, encoder, opts)?,
    )
}

pub fn text_alignment(
    prompt: &str,
    identifier: &str,
    gen: &GeneratedSet,
    encoder: &dyn Encoder,
    opts: &MetricOptions,
) -> Result<(f64, Vec<f64>)> {
    let stripped = strip_identifier(prompt, identifier)?;
    let text = embed_text(&stripped, encoder)?;
    text_alignment_from_embeddings(&text, &embed_generated(gen, encoder, opts)?)
}

/// All three measures for one (subject, prompt) pair with pairwise provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub subject_id: String,
    pub run_id: String,
    pub encoder_id: String,
    pub generation_prompt: String,
    pub stripped_prompt: String,
    pub sa: f64,
    pub nsd: f64,
    pub ta: f64,
    pub pairwise_sa: Vec<Vec<f64>>,
    pub pairwise_nsd: Vec<Vec<Option<f64>>>,
    pub per_image_ta: Vec<f64>,
    /// Reference indices whose subject fills the frame (no NSD contribution).
    pub nsd_excluded_refs: Vec<usize>,
}

/// Computes SA, NSD and TA, embedding every generated image once.
pub fn evaluate(
    refs: &ReferenceSet,
    masks: &[SubjectMask],
    gen: &GeneratedSet,
    encoder: &dyn Encoder,
    opts: &MetricOptions,
) -> Result<MetricReport> {
    check_inputs(refs, masks, gen)?;
    let stripped = strip_identifier(&gen.generation_prompt, &gen.identifier_token)?;
    let generated = embed_generated(gen, encoder, opts)?;
    let segments = subject_segments(refs, masks, opts.segment_resolution)?;
    let (sa, sa_matrix) = subject_alignment_from_embeddings(&embed_segments(&segments, encoder, opts)?, &generated)?;
    let non_subject = non_subject_segments(refs, masks)?;
    let nsd_excluded_refs = non_subject
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.is_none().then_some(i))
        .collect();
    let (nsd, nsd_matrix) =
        non_subject_disentanglement_from_embeddings(&embed_optional(&non_subject, encoder, opts)?, &generated)?;
    let text = embed_text(&stripped, encoder)?;
    let (ta, per_image_ta) = text_alignment_from_embeddings(&text, &generated)?;
    Ok(MetricReport {
        subject_id: refs.subject_id.clone(),
        run_id: gen.run_id.clone(),
        encoder_id: encoder.id().to_string(),
        generation_prompt: gen.generation_prompt.clone(),
        stripped_prompt: stripped,
        sa,
        nsd,
        ta,
        pairwise_sa: sa_matrix
            .to_rows()
            .into_iter()
            .map(|r| r.into_iter().map(|c| c.expect("sa cells are never excluded")).collect())
            .collect(),
        pairwise_nsd: nsd_matrix.to_rows(),
        per_image_ta,
        nsd_excluded_refs,
    })
}

impl MetricReport {
    pub fn pairwise_sa_matrix(&self) -> PairwiseMatrix {
        PairwiseMatrix::from_rows(self.pairwise_sa.clone())
    }

    pub fn pairwise_nsd_matrix(&self) -> PairwiseMatrix {
        let rows = self.pairwise_nsd.len();
        let cols = self.pairwise_nsd.first().map_or(0, Vec::len);
        PairwiseMatrix::from_cells(rows, cols, self.pairwise_nsd.iter().flatten().copied().collect())
    }

    /// Writes `report.json`, `pairwise_sa.csv` and `pairwise_nsd.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| MetricsError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let json = serde_json::to_string_pretty(self).expect("report serializes") + "\n";
        let p = dir.join("report.json");
        fs::write(&p, json).map_err(io(&p))?;
        let p = dir.join("pairwise_sa.csv");
        fs::write(&p, self.pairwise_sa_matrix().to_csv()).map_err(io(&p))?;
        let p = dir.join("pairwise_nsd.csv");
        fs::write(&p, self.pairwise_nsd_matrix().to_csv()).map_err(io(&p))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("report.json");
        let text = fs::read_to_string(&p).map_err(|source| MetricsError::Io {
            path: p.clone(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| MetricsError::Io {
            path: p,
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })
    }
}
