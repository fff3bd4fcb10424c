//! Cross-attention maps for the identifier token.
//!
//! Records are per (step, layer, head) post-softmax probabilities for one
//! token. [`average_maps`] resamples every record to a common grid, takes the
//! unweighted mean and min-max normalizes the result for display.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_RESOLUTION: (usize, usize) = (64, 64);
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Error)]
pub enum AttnError {
    #[error("backend exposes no cross-attention hooks")]
    NoHooks,
    #[error("token index {index} out of range for {num_tokens} tokens")]
    TokenOutOfRange { index: usize, num_tokens: usize },
    #[error("no attention records")]
    Empty,
    #[error("attention probability {value} outside [0, 1] at step {step}, layer {layer}, head {head}")]
    OutOfRange {
        value: f64,
        step: usize,
        layer: String,
        head: usize,
    },
    #[error("malformed attention tensor: {0}")]
    Malformed(String),
    #[error("sampler failure: {0}")]
    Sampler(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

pub type Result<T, E = AttnError> = std::result::Result<T, E>;

/// Row-major real grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), height * width, "grid size mismatch");
        Self { height, width, values }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let width = rows.first().map_or(0, |r| r.len());
        Self::new(rows.len(), width, rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Bilinear resampling with half-pixel centers and edge clamping.
    pub fn resample(&self, height: usize, width: usize) -> Grid {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let axis = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
            let scale = src as f64 / out as f64;
            (0..out)
                .map(|i| {
                    let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                    let lo = pos.floor() as usize;
                    let hi = (lo + 1).min(src - 1);
                    (lo, hi, pos - lo as f64)
                })
                .collect()
        };
        let ys = axis(height, self.height);
        let xs = axis(width, self.width);
        let mut values = Vec::with_capacity(height * width);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
                let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
                values.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        Grid::new(height, width, values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub step: usize,
    pub layer_id: String,
    pub head: usize,
    pub token_index: usize,
    pub map: Grid,
}

/// One layer/head's cross-attention probabilities at one sampling step:
/// `probs[(y * width + x) * num_tokens + token]`.
#[derive(Debug, Clone)]
pub struct CrossAttentionProbs {
    pub step: usize,
    pub layer_id: String,
    pub head: usize,
    pub height: usize,
    pub width: usize,
    pub num_tokens: usize,
    pub probs: Vec<f32>,
}

/// A sampler run that can report its cross-attention probabilities.
pub trait AttentionSampler {
    fn has_attention_hooks(&self) -> bool {
        true
    }

    fn num_tokens(&self) -> usize;

    /// Runs sampling, handing every (step, layer, head) tensor to `sink`.
    fn run(&mut self, sink: &mut dyn FnMut(CrossAttentionProbs)) -> Result<()>;
}

/// Collects the maps of `token_index` from every step, layer and head.
pub fn record_attention(sampler: &mut dyn AttentionSampler, token_index: usize) -> Result<Vec<AttentionRecord>> {
    if !sampler.has_attention_hooks() {
        return Err(AttnError::NoHooks);
    }
    let num_tokens = sampler.num_tokens();
    if token_index >= num_tokens {
        return Err(AttnError::TokenOutOfRange {
            index: token_index,
            num_tokens,
        });
    }
    let mut records = Vec::new();
    let mut failure = None;
    sampler.run(&mut |probs: CrossAttentionProbs| {
        if failure.is_some() {
            return;
        }
        match extract_token(&probs, token_index) {
            Ok(r) => records.push(r),
            Err(e) => failure = Some(e),
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(records),
    }
}

fn extract_token(p: &CrossAttentionProbs, token: usize) -> Result<AttentionRecord> {
    if p.probs.len() != p.height * p.width * p.num_tokens || token >= p.num_tokens {
        return Err(AttnError::Malformed(format!(
            "{} values for {}x{}x{} (token {token})",
            p.probs.len(),
            p.height,
            p.width,
            p.num_tokens
        )));
    }
    let mut values = Vec::with_capacity(p.height * p.width);
    for q in 0..p.height * p.width {
        let v = f64::from(p.probs[q * p.num_tokens + token]);
        if !(0.0..=1.0).contains(&v) {
            return Err(AttnError::OutOfRange {
                value: v,
                step: p.step,
                layer: p.layer_id.clone(),
                head: p.head,
            });
        }
        values.push(v);
    }
    Ok(AttentionRecord {
        step: p.step,
        layer_id: p.layer_id.clone(),
        head: p.head,
        token_index: token,
        map: Grid::new(p.height, p.width, values),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    None,
    Minmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedMap {
    /// Display map (min-max normalized unless `constant`).
    pub map: Grid,
    /// Unnormalized mean.
    pub raw: Grid,
    pub token_string: String,
    pub num_records: usize,
    pub normalization: Normalization,
    /// The mean is constant, so min-max normalization was skipped.
    pub constant: bool,
}

/// Unweighted mean over all records after resampling to `target`
/// (height, width), followed by min-max normalization.
///
/// Records are summed in (step, layer, head) order, so the result does not
/// depend on the order they were passed in.
pub fn average_maps(records: &[AttentionRecord], target: (usize, usize), token_string: &str) -> Result<AveragedMap> {
    if records.is_empty() {
        return Err(AttnError::Empty);
    }
    let (h, w) = target;
    if h == 0 || w == 0 {
        return Err(AttnError::Malformed("zero target resolution".into()));
    }
    let mut ordered: Vec<&AttentionRecord> = records.iter().collect();
    ordered.sort_by(|a, b| {
        (a.step, &a.layer_id, a.head, a.token_index).cmp(&(b.step, &b.layer_id, b.head, b.token_index))
    });
    let mut sum = vec![0.0; h * w];
    for r in &ordered {
        for (acc, v) in sum.iter_mut().zip(r.map.resample(h, w).values) {
            *acc += v;
        }
    }
    let n = records.len() as f64;
    let raw = Grid::new(h, w, sum.into_iter().map(|v| v / n).collect());
    let (lo, hi) = raw.min_max();
    let constant = hi - lo <= f64::EPSILON * hi.abs().max(1.0);
    let map = if constant {
        raw.clone()
    } else {
        Grid::new(h, w, raw.values.iter().map(|v| (v - lo) / (hi - lo)).collect())
    };
    Ok(AveragedMap {
        map,
        raw,
        token_string: token_string.to_string(),
        num_records: records.len(),
        normalization: Normalization::Minmax,
        constant,
    })
}

/// Classic "jet" colormap; `v` is clamped to `[0, 1]`. Channels in `[0, 1]`.
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |offset: f64| (1.5 - (4.0 * v - offset).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Colorizes `map` with [`jet`] and alpha-blends it over `image`:
/// `out = round((1 - alpha) * pixel + alpha * 255 * jet(value))`.
pub fn overlay(map: &AveragedMap, image: &RgbImage, alpha: f64) -> RgbImage {
    let (w, h) = image.dimensions();
    let heat = map.map.resample(h as usize, w as usize);
    RgbImage::from_fn(w, h, |x, y| {
        let color = jet(heat.get(y as usize, x as usize));
        let px = image.get_pixel(x, y);
        Rgb(std::array::from_fn(|c| {
            ((1.0 - alpha) * f64::from(px[c]) + alpha * 255.0 * color[c])
                .round()
                .clamp(0.0, 255.0) as u8
        }))
    })
}

/// Grayscale rendering of a grid in `[0, 1]`.
pub fn grid_to_image(grid: &Grid) -> image::GrayImage {
    image::GrayImage::from_fn(grid.width as u32, grid.height as u32, |x, y| {
        image::Luma([(grid.get(y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub step: usize,
    pub layer: String,
    pub head: usize,
    pub height: usize,
    pub width: usize,
    /// Offset into the tensor file, in f32 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerResolution {
    pub layer: String,
    pub height: usize,
    pub width: usize,
}

/// JSON index describing `attention.bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordIndex {
    pub token: String,
    pub token_index: usize,
    pub steps: Vec<usize>,
    pub layers: Vec<String>,
    pub heads: Vec<usize>,
    pub resolutions: Vec<LayerResolution>,
    pub records: Vec<RecordEntry>,
}

pub const TENSOR_FILE: &str = "attention.bin";
pub const INDEX_FILE: &str = "attention_index.json";

fn io(path: &Path, e: impl std::fmt::Display) -> AttnError {
    AttnError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Writes all maps as one little-endian f32 tensor plus a JSON index.
pub fn save_records(records: &[AttentionRecord], token: &str, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(records.len());
    let mut offset = 0;
    for r in records {
        entries.push(RecordEntry {
            step: r.step,
            layer: r.layer_id.clone(),
            head: r.head,
            height: r.map.height,
            width: r.map.width,
            offset,
        });
        for &v in &r.map.values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += r.map.values.len();
    }
    let mut steps: Vec<usize> = records.iter().map(|r| r.step).collect();
    steps.sort_unstable();
    steps.dedup();
    let mut heads: Vec<usize> = records.iter().map(|r| r.head).collect();
    heads.sort_unstable();
    heads.dedup();
    let mut layers: Vec<String> = Vec::new();
    let mut resolutions = Vec::new();
    for r in records {
        if !layers.contains(&r.layer_id) {
            layers.push(r.layer_id.clone());
            resolutions.push(LayerResolution {
                layer: r.layer_id.clone(),
                height: r.map.height,
                width: r.map.width,
            });
        }
    }
    let index = RecordIndex {
        token: token.to_string(),
        token_index: records.first().map_or(0, |r| r.token_index),
        steps,
        layers,
        heads,
        resolutions,
        records: entries,
    };
    let p = dir.join(TENSOR_FILE);
    fs::write(&p, bytes).map_err(|e| io(&p, e))?;
    let p = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).expect("index serializes") + "\n";
    fs::write(&p, text).map_err(|e| io(&p, e))
}

pub fn load_records(dir: &Path) -> Result<(RecordIndex, Vec<AttentionRecord>)> {
    let p = dir.join(INDEX_FILE);
    let index: RecordIndex =
        serde_json::from_str(&fs::read_to_string(&p).map_err(|e| io(&p, e))?).map_err(|e| io(&p, e))?;
    let p = dir.join(TENSOR_FILE);
    let bytes = fs::read(&p).map_err(|e| io(&p, e))?;
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let records = index
        .records
        .iter()
        .map(|e| {
            let end = e.offset + e.height * e.width;
            let slice = floats
                .get(e.offset..end)
                .ok_or_else(|| AttnError::Malformed(format!("record at {} exceeds tensor", e.offset)))?;
            Ok(AttentionRecord {
                step: e.step,
                layer_id: e.layer.clone(),
                head: e.head,
                token_index: index.token_index,
                map: Grid::new(e.height, e.width, slice.iter().map(|&v| f64::from(v)).collect()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((index, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct ConstantSampler {
        steps: usize,
        layers: usize,
        heads: usize,
        tokens: usize,
        value: f32,
    }

    impl AttentionSampler for ConstantSampler {
        fn num_tokens(&self) -> usize {
            self.tokens
        }

        fn run(&mut self, sink: &mut dyn FnMut(CrossAttentionProbs)) -> Result<()> {
            for step in 0..self.steps {
                for layer in 0..self.layers {
                    let side = 2 << layer;
                    for head in 0..self.heads {
                        sink(CrossAttentionProbs {
                            step,
                            layer_id: format!("down.{layer}"),
                            head,
                            height: side,
                            width: side,
                            num_tokens: self.tokens,
                            probs: vec![self.value; side * side * self.tokens],
                        });
                    }
                }
            }
            Ok(())
        }
    }

    struct NoHooks;

    impl AttentionSampler for NoHooks {
        fn has_attention_hooks(&self) -> bool {
            false
        }
        fn num_tokens(&self) -> usize {
            1
        }
        fn run(&mut self, _sink: &mut dyn FnMut(CrossAttentionProbs)) -> Result<()> {
            Ok(())
        }
    }

    fn sampler() -> ConstantSampler {
        ConstantSampler {
            steps: 2,
            layers: 2,
            heads: 2,
            tokens: 4,
            value: 0.5,
        }
    }

    #[test]
    fn one_record_per_step_layer_head() {
        let records = record_attention(&mut sampler(), 2).unwrap();
        assert_eq!(records.len(), 8);
        assert!(records.iter().all(|r| r.map.values.iter().all(|&v| v == 0.5)));
        assert_eq!(records[2].map.height, 4);
        assert!(matches!(
            record_attention(&mut sampler(), 4),
            Err(AttnError::TokenOutOfRange { .. })
        ));
        assert!(matches!(record_attention(&mut NoHooks, 0), Err(AttnError::NoHooks)));
    }

    #[test]
    fn probabilities_outside_unit_interval_are_rejected() {
        let mut s = sampler();
        s.value = 1.5;
        assert!(matches!(record_attention(&mut s, 0), Err(AttnError::OutOfRange { .. })));
    }

    fn rec(step: usize, layer: &str, head: usize, map: Grid) -> AttentionRecord {
        AttentionRecord {
            step,
            layer_id: layer.into(),
            head,
            token_index: 1,
            map,
        }
    }

    #[test]
    fn complementary_maps_average_to_a_constant() {
        let a = Grid::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let b = Grid::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let avg = average_maps(&[rec(0, "l", 0, a), rec(0, "l", 1, b)], (2, 2), "[v]").unwrap();
        assert_eq!(avg.raw, Grid::constant(2, 2, 0.5));
        assert!(avg.constant);
        assert_eq!(avg.num_records, 2);
    }

    #[test]
    fn single_record_is_normalized_copy() {
        let a = Grid::from_rows(&[&[0.2, 0.4], &[0.6, 0.8]]);
        let avg = average_maps(&[rec(0, "l", 0, a.clone())], (2, 2), "[v]").unwrap();
        assert_eq!(avg.raw, a);
        let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (v, e) in avg.map.values.iter().zip(expected) {
            assert!((v - e).abs() < 1e-12);
        }
        let (lo, hi) = avg.map.min_max();
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn bilinear_upsample_matches_hand_computation() {
        // Half-pixel centers: 2 -> 4 samples sit at source positions
        // -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped to 1).
        let g = Grid::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let up = g.resample(4, 4);
        let w = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                let top = w[x];
                let bottom = 1.0 - w[x];
                let expected = top * (1.0 - w[y]) + bottom * w[y];
                assert!((up.get(y, x) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_records_error() {
        assert!(matches!(average_maps(&[], (4, 4), "[v]"), Err(AttnError::Empty)));
    }

    #[test]
    fn jet_endpoints_and_blend() {
        assert_eq!(jet(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(jet(1.0), [0.5, 0.0, 0.0]);
        let img = RgbImage::from_pixel(3, 2, Rgb([100, 51, 0]));
        let zero = average_maps(&[rec(0, "l", 0, Grid::constant(2, 2, 0.0))], (2, 2), "[v]").unwrap();
        let out = overlay(&zero, &img, 0.5);
        // (1-a)*p + a*255*jet(0)
        assert!(out.pixels().all(|p| *p == Rgb([50, 26, 64])));
        let ones = average_maps(&[rec(0, "l", 0, Grid::constant(2, 2, 1.0))], (2, 2), "[v]").unwrap();
        let out = overlay(&ones, &img, 0.5);
        assert!(out.pixels().all(|p| *p == Rgb([114, 26, 0])));
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let records = record_attention(&mut sampler(), 1).unwrap();
        save_records(&records, "[v]", dir.path()).unwrap();
        let (index, loaded) = load_records(dir.path()).unwrap();
        assert_eq!(loaded, records);
        assert_eq!(index.steps, vec![0, 1]);
        assert_eq!(index.heads, vec![0, 1]);
        assert_eq!(index.layers, vec!["down.0", "down.1"]);
        assert_eq!(index.resolutions[1].height, 4);
    }
}
