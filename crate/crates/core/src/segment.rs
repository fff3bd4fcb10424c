//! Subject masks, mask algebra and the subject-segment preprocessing used by
//! subject-alignment.
//!
//! Masked-out pixels are always filled with black. Segmenters are adapters
//! behind [`Segmenter`]; the harness only unions the instances they return.

use std::collections::HashMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("subject not found: segmenter returned an empty mask for {class_name:?} (image {image_index})")]
    SubjectNotFound { class_name: String, image_index: usize },
    #[error("shape mismatch: image is {image_w}x{image_h}, mask is {mask_w}x{mask_h}")]
    ShapeMismatch {
        image_w: u32,
        image_h: u32,
        mask_w: u32,
        mask_h: u32,
    },
    #[error("mask is empty")]
    EmptyMask,
    #[error("class_name must not be empty")]
    EmptyClassName,
    #[error("target resolution must be positive")]
    ZeroResolution,
    #[error("segmenter failure: {0}")]
    Segmenter(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

pub type Result<T, E = SegmentError> = std::result::Result<T, E>;

fn io_error(path: &Path, e: impl std::fmt::Display) -> SegmentError {
    SegmentError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Row-major H×W grid of 0/1 values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryGrid {
    width: u32,
    height: u32,
    cells: Vec<u8>,
}

impl BinaryGrid {
    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        Self {
            width,
            height,
            cells: vec![u8::from(value); (width * height) as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut cells = Vec::with_capacity((width * height) as usize);
        for y in 0..height {
            for x in 0..width {
                cells.push(u8::from(f(x, y)));
            }
        }
        Self { width, height, cells }
    }

    /// Any non-zero value counts as subject.
    pub fn from_values(width: u32, height: u32, values: &[u8]) -> Option<Self> {
        (values.len() == (width * height) as usize).then(|| Self {
            width,
            height,
            cells: values.iter().map(|&v| u8::from(v != 0)).collect(),
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.cells[(y * self.width + x) as usize] == 1
    }

    pub fn values(&self) -> &[u8] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            cells: self.cells.iter().map(|c| 1 - c).collect(),
        }
    }

    pub fn union_with(&mut self, other: &Self) {
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            *a |= b;
        }
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of the set cells.
    pub fn bounding_box(&self) -> Option<(u32, u32, u32, u32)> {
        let mut bbox: Option<(u32, u32, u32, u32)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bbox = Some(match bbox {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bbox
    }
}

/// Binary subject mask for one reference image (1 = subject pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectMask {
    pub grid: BinaryGrid,
    pub source_image_index: usize,
    pub class_name: String,
    pub confidence: Option<f64>,
}

impl SubjectMask {
    pub fn new(grid: BinaryGrid, source_image_index: usize, class_name: impl Into<String>) -> Self {
        Self {
            grid,
            source_image_index,
            class_name: class_name.into(),
            confidence: None,
        }
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.grid.dimensions()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }
}

/// `1 - mask`, cell by cell.
pub fn complement(mask: &SubjectMask) -> SubjectMask {
    SubjectMask {
        grid: mask.grid.complement(),
        ..mask.clone()
    }
}

/// Elementwise product of `image` and `grid`; unselected pixels become black.
pub fn apply_mask(image: &RgbImage, grid: &BinaryGrid) -> Result<RgbImage> {
    check_shape(image, grid)?;
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if !grid.get(x, y) {
            *px = Rgb([0, 0, 0]);
        }
    }
    Ok(out)
}

fn check_shape(image: &RgbImage, grid: &BinaryGrid) -> Result<()> {
    if image.dimensions() != grid.dimensions() {
        return Err(SegmentError::ShapeMismatch {
            image_w: image.width(),
            image_h: image.height(),
            mask_w: grid.width(),
            mask_h: grid.height(),
        });
    }
    Ok(())
}

/// Separable triangle-filter taps for one output axis.
///
/// The source window starts at continuous coordinate `start` (pixel `k` spans
/// `[k, k+1)`) and has length `span`; it is mapped onto `out_len` output
/// pixels. Only source pixels in `valid` contribute values; others inside the
/// window are black padding but still count toward normalization.
fn axis_taps(start: f64, span: f64, out_len: u32, valid: (i64, i64)) -> Vec<Vec<(i64, f64)>> {
    let ratio = span / f64::from(out_len);
    let support = ratio.max(1.0);
    (0..out_len)
        .map(|j| {
            let center = start + (f64::from(j) + 0.5) * ratio;
            let lo = (center - support).floor() as i64;
            let hi = (center + support).ceil() as i64;
            let mut taps = Vec::new();
            let mut total = 0.0;
            for k in lo..=hi {
                let mid = k as f64 + 0.5;
                let w = 1.0 - ((mid - center).abs() / support);
                // samples beyond the padded square are dropped, as at any image border
                if w <= 0.0 || mid < start - 1e-9 || mid > start + span + 1e-9 {
                    continue;
                }
                total += w;
                if k >= valid.0 && k <= valid.1 {
                    taps.push((k, w));
                }
            }
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Crops the tight bounding box of `grid`, pads it symmetrically to a square
/// with black and resamples (bilinear/triangle) to `target`×`target`, so the
/// subject's bounding box is centered in the output.
///
/// Padding is fractional when the width/height difference is odd, which keeps
/// the box exactly centered instead of off by half a source pixel.
pub fn center_align_resize(masked_image: &RgbImage, grid: &BinaryGrid, target: u32) -> Result<RgbImage> {
    check_shape(masked_image, grid)?;
    if target == 0 {
        return Err(SegmentError::ZeroResolution);
    }
    let (x0, y0, x1, y1) = grid.bounding_box().ok_or(SegmentError::EmptyMask)?;
    let w = f64::from(x1 - x0 + 1);
    let h = f64::from(y1 - y0 + 1);
    let side = w.max(h);
    let start_x = f64::from(x0) + w / 2.0 - side / 2.0;
    let start_y = f64::from(y0) + h / 2.0 - side / 2.0;
    let taps_x = axis_taps(start_x, side, target, (i64::from(x0), i64::from(x1)));
    let taps_y = axis_taps(start_y, side, target, (i64::from(y0), i64::from(y1)));

    let rows = (y1 - y0 + 1) as usize;
    let t = target as usize;
    // horizontal pass over the cropped rows
    let mut horiz = vec![[0.0f64; 3]; rows * t];
    for r in 0..rows {
        let y = y0 + r as u32;
        for (j, taps) in taps_x.iter().enumerate() {
            let mut acc = [0.0; 3];
            for &(k, w) in taps {
                let px = masked_image.get_pixel(k as u32, y);
                for c in 0..3 {
                    acc[c] += w * f64::from(px[c]);
                }
            }
            horiz[r * t + j] = acc;
        }
    }
    let mut out = RgbImage::new(target, target);
    for (i, taps) in taps_y.iter().enumerate() {
        for j in 0..t {
            let mut acc = [0.0; 3];
            for &(k, w) in taps {
                let src = horiz[(k - i64::from(y0)) as usize * t + j];
                for c in 0..3 {
                    acc[c] += w * src[c];
                }
            }
            let px = Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8));
            out.put_pixel(j as u32, i as u32, px);
        }
    }
    Ok(out)
}

/// One instance proposed by a segmenter.
#[derive(Debug, Clone)]
pub struct Instance {
    pub grid: BinaryGrid,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct SegmentRequest<'a> {
    pub image: &'a RgbImage,
    pub image_index: usize,
    pub class_name: &'a str,
    /// Path the image was loaded from, for fixture-backed segmenters.
    pub source_path: Option<&'a Path>,
}

/// A class-conditioned segmenter. Implementations return every instance they
/// keep after their own confidence threshold.
pub trait Segmenter: Send + Sync {
    fn name(&self) -> &str;
    fn segment(&self, request: &SegmentRequest<'_>) -> Result<Vec<Instance>>;
}

/// Runs the segmenter and unions every returned instance.
pub fn segment_subject(request: &SegmentRequest<'_>, segmenter: &dyn Segmenter) -> Result<SubjectMask> {
    if request.class_name.trim().is_empty() {
        return Err(SegmentError::EmptyClassName);
    }
    let instances = segmenter.segment(request)?;
    let (w, h) = request.image.dimensions();
    let mut grid = BinaryGrid::filled(w, h, false);
    let mut confidence: Option<f64> = None;
    for inst in &instances {
        check_shape(request.image, &inst.grid)?;
        grid.union_with(&inst.grid);
        if let Some(s) = inst.score {
            confidence = Some(confidence.map_or(s, |c: f64| c.max(s)));
        }
    }
    if grid.is_empty() {
        return Err(SegmentError::SubjectNotFound {
            class_name: request.class_name.to_string(),
            image_index: request.image_index,
        });
    }
    Ok(SubjectMask {
        grid,
        source_image_index: request.image_index,
        class_name: request.class_name.to_string(),
        confidence,
    })
}

/// Oracle segmenter backed by a closure.
pub struct FnSegmenter<F> {
    name: String,
    f: F,
}

impl<F> FnSegmenter<F>
where
    F: Fn(&SegmentRequest<'_>) -> Vec<Instance> + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { name: name.into(), f }
    }
}

impl<F> Segmenter for FnSegmenter<F>
where
    F: Fn(&SegmentRequest<'_>) -> Vec<Instance> + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn segment(&self, request: &SegmentRequest<'_>) -> Result<Vec<Instance>> {
        Ok((self.f)(request))
    }
}

/// Marks the whole frame as subject.
pub struct FullFrameSegmenter;

impl Segmenter for FullFrameSegmenter {
    fn name(&self) -> &str {
        "full-frame"
    }

    fn segment(&self, request: &SegmentRequest<'_>) -> Result<Vec<Instance>> {
        let (w, h) = request.image.dimensions();
        Ok(vec![Instance {
            grid: BinaryGrid::filled(w, h, true),
            score: Some(1.0),
        }])
    }
}

/// Reads precomputed masks named after the source image's file stem
/// (`<mask_dir>/<stem>.png`).
pub struct FixtureSegmenter {
    dir: PathBuf,
}

impl FixtureSegmenter {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl Segmenter for FixtureSegmenter {
    fn name(&self) -> &str {
        "fixture"
    }

    fn segment(&self, request: &SegmentRequest<'_>) -> Result<Vec<Instance>> {
        let stem = request
            .source_path
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{:03}", request.image_index));
        let path = self.dir.join(format!("{stem}.png"));
        if !path.exists() {
            return Ok(Vec::new());
        }
        Ok(vec![Instance {
            grid: read_mask_png(&path)?,
            score: None,
        }])
    }
}

/// Out-of-process segmenter (e.g. a Grounded-SAM script).
///
/// The command's arguments may contain `{image}`, `{class_name}` and
/// `{out_dir}`. The process writes one PNG per instance into `{out_dir}` and
/// may add `scores.json` mapping file names to confidences.
pub struct ExternalSegmenter {
    command: Vec<String>,
}

impl ExternalSegmenter {
    pub fn new(command: Vec<String>) -> Self {
        Self { command }
    }
}

impl Segmenter for ExternalSegmenter {
    fn name(&self) -> &str {
        "external"
    }

    fn segment(&self, request: &SegmentRequest<'_>) -> Result<Vec<Instance>> {
        let (program, args) = self
            .command
            .split_first()
            .ok_or_else(|| SegmentError::Segmenter("empty segmenter command".into()))?;
        let work = tempfile::tempdir().map_err(|e| SegmentError::Segmenter(e.to_string()))?;
        let image_path = work.path().join("input.png");
        request.image.save(&image_path).map_err(|e| io_error(&image_path, e))?;
        let out_dir = work.path().join("masks");
        fs::create_dir_all(&out_dir).map_err(|e| io_error(&out_dir, e))?;
        let subst = |a: &String| {
            a.replace("{image}", &image_path.to_string_lossy())
                .replace("{class_name}", request.class_name)
                .replace("{out_dir}", &out_dir.to_string_lossy())
        };
        let status = Command::new(program)
            .args(args.iter().map(subst))
            .status()
            .map_err(|e| SegmentError::Segmenter(format!("{program}: {e}")))?;
        if !status.success() {
            return Err(SegmentError::Segmenter(format!("{program} exited with {status}")));
        }
        let scores: HashMap<String, f64> = fs::read_to_string(out_dir.join("scores.json"))
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default();
        let mut names: Vec<String> = fs::read_dir(&out_dir)
            .map_err(|e| io_error(&out_dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".png"))
            .collect();
        names.sort();
        names
            .into_iter()
            .map(|n| {
                Ok(Instance {
                    grid: read_mask_png(&out_dir.join(&n))?,
                    score: scores.get(&n).copied(),
                })
            })
            .collect()
    }
}

/// Serializes calls into a segmenter whose backend is not re-entrant.
pub struct Serialized<S> {
    inner: Mutex<S>,
    name: String,
}

impl<S: Segmenter> Serialized<S> {
    pub fn new(inner: S) -> Self {
        let name = inner.name().to_string();
        Self {
            inner: Mutex::new(inner),
            name,
        }
    }
}

impl<S: Segmenter> Segmenter for Serialized<S> {
    fn name(&self) -> &str {
        &self.name
    }

    fn segment(&self, request: &SegmentRequest<'_>) -> Result<Vec<Instance>> {
        self.inner.lock().unwrap().segment(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub image_index: usize,
    pub class_name: String,
    pub confidence: Option<f64>,
}

/// Writes a 1-bit grayscale PNG (white = subject).
pub fn write_mask_png(grid: &BinaryGrid, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| io_error(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), grid.width(), grid.height());
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::One);
    let stride = grid.width().div_ceil(8) as usize;
    let mut packed = vec![0u8; stride * grid.height() as usize];
    for y in 0..grid.height() {
        for x in 0..grid.width() {
            if grid.get(x, y) {
                packed[y as usize * stride + (x / 8) as usize] |= 0x80 >> (x % 8);
            }
        }
    }
    let mut writer = encoder.write_header().map_err(|e| io_error(path, e))?;
    writer.write_image_data(&packed).map_err(|e| io_error(path, e))?;
    writer.finish().map_err(|e| io_error(path, e))
}

/// Reads any grayscale/RGB PNG as a mask; values above half intensity are
/// subject.
pub fn read_mask_png(path: &Path) -> Result<BinaryGrid> {
    let img = image::open(path).map_err(|e| io_error(path, e))?.to_luma8();
    let values: Vec<u8> = img.as_raw().iter().map(|&v| u8::from(v > 127)).collect();
    Ok(BinaryGrid::from_values(img.width(), img.height(), &values).expect("dimensions match"))
}

/// Persists `mask` as `<stem>.png` plus `<stem>.json`.
pub fn save_mask(mask: &SubjectMask, dir: &Path, stem: &str) -> Result<()> {
    write_mask_png(&mask.grid, &dir.join(format!("{stem}.png")))?;
    let sidecar = MaskSidecar {
        image_index: mask.source_image_index,
        class_name: mask.class_name.clone(),
        confidence: mask.confidence,
    };
    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n";
    fs::write(&path, text).map_err(|e| io_error(&path, e))
}

pub fn load_mask(dir: &Path, stem: &str) -> Result<SubjectMask> {
    let grid = read_mask_png(&dir.join(format!("{stem}.png")))?;
    let path = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
    let sidecar: MaskSidecar = serde_json::from_str(&text).map_err(|e| io_error(&path, e))?;
    Ok(SubjectMask {
        grid,
        source_image_index: sidecar.image_index,
        class_name: sidecar.class_name,
        confidence: sidecar.confidence,
    })
}
