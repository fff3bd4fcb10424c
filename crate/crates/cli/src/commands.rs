use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context as _, Result};
use rayon::prelude::*;
use serde::Serialize;

use sidkit_core::attnmap::{self, average_maps, overlay};
use sidkit_core::corpus::{self, GeneratedSet, SubjectEntry};
use sidkit_core::describe::{self, Baseline, CachedVlm, GenerateOptions, VlmClient};
use sidkit_core::embed::load_encoder;
use sidkit_core::metrics::{self, format_significant, MetricOptions, MetricReport};
use sidkit_core::plot::{ScatterPlot, ScatterPoint};
use sidkit_core::segment::{
    load_mask, save_mask, segment_subject, ExternalSegmenter, FixtureSegmenter, FullFrameSegmenter, SegmentRequest,
    Segmenter, Serialized,
};
use sidkit_core::tune::{self, load_backend, Backend, ModelHandle, SampleConfig};
use sidkit_core::IDENTIFIER_PLACEHOLDER;

use crate::config::SegmenterConfig;
use crate::run::{fresh_dir, usage, write_json, Ctx, Tally};

fn file_stem(name: &str) -> String {
    Path::new(name)
        .file_stem()
        .map_or_else(|| name.to_string(), |s| s.to_string_lossy().into_owned())
}

/// Runs `f` for every selected subject on the pool and merges the tallies.
fn per_subject<F>(ctx: &Ctx, f: F) -> Tally
where
    F: Fn(&SubjectEntry) -> Tally + Sync,
{
    let subjects = ctx.subjects();
    let tallies: Vec<Tally> = ctx.pool.install(|| subjects.par_iter().map(|s| f(s)).collect());
    let mut total = Tally::default();
    for t in tallies {
        total.merge(t);
    }
    total
}

#[derive(Serialize)]
struct DescribeSummary {
    subject: String,
    case: String,
    descriptions: usize,
    failures: Vec<String>,
}

pub fn describe(ctx: &Ctx) -> Result<Tally> {
    let cfg = &ctx.cfg;
    let client: Option<Box<dyn VlmClient>> = if cfg.case.needs_vlm() {
        let inner = describe::load_vlm(&cfg.vlm)?;
        Some(if cfg.vlm_cache {
            Box::new(CachedVlm::new(inner, ctx.layout.vlm_cache()))
        } else {
            inner
        })
    } else {
        None
    };
    let opts = GenerateOptions {
        templates: cfg.vlm.templates.clone().unwrap_or_default(),
        max_retries: cfg.vlm.max_retries,
        with_expression: false,
    };
    let summaries = std::sync::Mutex::new(Vec::new());
    let mut tally = per_subject(ctx, |s| {
        let mut t = Tally::default();
        let result = (|| -> Result<()> {
            let refs = ctx.manifest.load_reference_set(s)?;
            let baseline = cfg.baseline.clone().unwrap_or_else(|| Baseline::object(&s.class_name));
            let mut out = Vec::new();
            let mut failures = Vec::new();
            for (i, r) in refs.images.iter().enumerate() {
                match describe::generate_description(
                    &r.image,
                    i,
                    &baseline,
                    &s.identifier_token,
                    cfg.case,
                    client.as_deref(),
                    &opts,
                ) {
                    Ok(d) => out.push(d),
                    Err(e) => failures.push(format!("{}: {e}", r.file_name)),
                }
            }
            describe::write_jsonl(&ctx.layout.descriptions(&s.id), &out)?;
            let failed = failures.len();
            summaries.lock().unwrap().push(DescribeSummary {
                subject: s.id.clone(),
                case: cfg.case.to_string(),
                descriptions: out.len(),
                failures: failures.clone(),
            });
            if failed > 0 {
                bail!("{failed} of {} images failed: {}", refs.len(), failures.join("; "));
            }
            Ok(())
        })();
        t.record(&s.id, result);
        t
    });
    let mut summaries = summaries.into_inner().unwrap();
    summaries.sort_by(|a, b| a.subject.cmp(&b.subject));
    let dir = ctx.layout.descriptions_dir();
    write_json(&dir.join("summary.json"), &summaries)?;
    tally.write_errors(&dir)?;
    Ok(tally)
}

enum SegmenterSource {
    Shared(Arc<dyn Segmenter>),
    Fixture(PathBuf),
}

impl SegmenterSource {
    fn for_subject(&self, subject: &str) -> Arc<dyn Segmenter> {
        match self {
            SegmenterSource::Shared(s) => Arc::clone(s),
            SegmenterSource::Fixture(dir) => Arc::new(FixtureSegmenter::new(
                dir.to_string_lossy().replace("{subject}", subject),
            )),
        }
    }
}

pub fn segment(ctx: &Ctx) -> Result<Tally> {
    let source = match &ctx.cfg.segmenter {
        SegmenterConfig::Fixture { dir } => SegmenterSource::Fixture(ctx.cfg.resolve(dir)),
        SegmenterConfig::FullFrame => SegmenterSource::Shared(Arc::new(FullFrameSegmenter)),
        SegmenterConfig::External { command } => {
            if command.is_empty() {
                return Err(usage("external segmenter needs a command"));
            }
            SegmenterSource::Shared(Arc::new(Serialized::new(ExternalSegmenter::new(command.clone()))))
        }
    };
    let mut tally = per_subject(ctx, |s| {
        let mut t = Tally::default();
        let segmenter = source.for_subject(&s.id);
        let result = (|| -> Result<()> {
            let refs = ctx.manifest.load_reference_set(s)?;
            let image_dir = ctx.manifest.image_dir(s);
            let out = ctx.layout.masks(&s.id);
            fresh_dir(&out)?;
            let mut failures = Vec::new();
            for (i, r) in refs.images.iter().enumerate() {
                let source_path = image_dir.join(&r.file_name);
                let request = SegmentRequest {
                    image: &r.image,
                    image_index: i,
                    class_name: &s.class_name,
                    source_path: Some(&source_path),
                };
                match segment_subject(&request, segmenter.as_ref()) {
                    Ok(mask) => save_mask(&mask, &out, &file_stem(&r.file_name))?,
                    Err(e) => failures.push(format!("{}: {e}", r.file_name)),
                }
            }
            if !failures.is_empty() {
                bail!("{}", failures.join("; "));
            }
            Ok(())
        })();
        t.record(&s.id, result);
        t
    });
    tally.write_errors(&ctx.layout.root.join("masks"))?;
    Ok(tally)
}

fn backend(ctx: &Ctx) -> Result<Box<dyn Backend>> {
    load_backend(&ctx.cfg.backend).map_err(|e| usage(e.to_string()))
}

pub fn tune(ctx: &Ctx) -> Result<Tally> {
    ctx.cfg.tune.validate().map_err(|e| usage(e.to_string()))?;
    let backend = backend(ctx)?;
    let log = ctx.layout.call_log();
    let mut tally = per_subject(ctx, |s| {
        let mut t = Tally::default();
        let result = (|| -> Result<()> {
            let refs = ctx.manifest.load_reference_set(s)?;
            let path = ctx.layout.descriptions(&s.id);
            let descriptions =
                describe::read_jsonl(&path).with_context(|| format!("run describe first ({})", path.display()))?;
            tune::fine_tune(
                &refs,
                &descriptions,
                &ctx.cfg.tune,
                backend.as_ref(),
                &ctx.layout.handle(&s.id),
                Some(&log),
            )?;
            Ok(())
        })();
        t.record(&s.id, result);
        t
    });
    tally.write_errors(&ctx.layout.root.join("handles"))?;
    Ok(tally)
}

/// Sampling settings for this run; the manifest fixes the image count.
fn sample_config(ctx: &Ctx) -> SampleConfig {
    SampleConfig {
        images_per_prompt: ctx.manifest.images_per_prompt,
        ..ctx.cfg.sample.clone()
    }
}

pub fn sample(ctx: &Ctx) -> Result<Tally> {
    let backend = backend(ctx)?;
    let cfg = sample_config(ctx);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let log = ctx.layout.call_log();
    let mut tally = per_subject(ctx, |s| {
        let mut t = Tally::default();
        let handle = ModelHandle::load(&ctx.layout.handle(&s.id));
        // prompts of one handle run one after another
        for (p, prompt) in s.prompts.iter().enumerate() {
            let result = (|| -> Result<()> {
                let handle = handle.as_ref().map_err(|e| anyhow!("no handle, run tune first: {e}"))?;
                let set = tune::sample(handle, prompt, &cfg, backend.as_ref(), Some(&log))?;
                let dir = ctx.layout.samples(&s.id, p);
                fresh_dir(&dir)?;
                set.save(&dir)?;
                Ok(())
            })();
            t.record(format!("{}/{}", s.id, crate::run::prompt_dir(p)), result);
        }
        t
    });
    tally.write_errors(&ctx.layout.root.join("samples"))?;
    Ok(tally)
}

pub fn evaluate(ctx: &Ctx) -> Result<Tally> {
    let encoder = load_encoder(&ctx.cfg.encoder).map_err(|e| usage(e.to_string()))?;
    let opts = MetricOptions {
        segment_resolution: ctx.cfg.segment_resolution,
        batch_size: ctx.cfg.encoder.batch_size,
    };
    let mut tally = per_subject(ctx, |s| {
        let mut t = Tally::default();
        let inputs = (|| -> Result<_> {
            let refs = ctx.manifest.load_reference_set(s)?;
            let mask_dir = ctx.layout.masks(&s.id);
            let masks = refs
                .images
                .iter()
                .map(|r| {
                    let stem = file_stem(&r.file_name);
                    load_mask(&mask_dir, &stem).with_context(|| format!("missing mask {}/{stem}", s.id))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((refs, masks))
        })();
        for p in 0..s.prompts.len() {
            let unit = format!("{}/{}", s.id, crate::run::prompt_dir(p));
            let result = (|| -> Result<()> {
                let (refs, masks) = inputs.as_ref().map_err(|e| anyhow!("{e:#}"))?;
                let set = GeneratedSet::load(&ctx.layout.samples(&s.id, p)).context("missing generated set")?;
                let report = metrics::evaluate(refs, masks, &set, encoder.as_ref(), &opts)?;
                let dir = ctx.layout.reports(&s.id, p);
                fresh_dir(&dir)?;
                report.save(&dir)?;
                Ok(())
            })();
            t.record(unit, result);
        }
        t
    });
    let reports_dir = ctx.layout.reports_dir();
    tally.write_errors(&reports_dir)?;
    let rows = collect_reports(&ctx.layout.root, Some(&ctx.cfg.method_label()))?;
    if !rows.is_empty() {
        write_aggregate(&rows, &reports_dir)?;
    }
    Ok(tally)
}

/// Reads every `reports/<subject>/<prompt>/report.json` under a run, tagged
/// with the run's method label.
pub fn collect_reports(run_root: &Path, method: Option<&str>) -> Result<Vec<(String, MetricReport)>> {
    let method = match method {
        Some(m) => m.to_string(),
        None => {
            let run: serde_json::Value = corpus::read_json(&run_root.join("run.json"))
                .with_context(|| format!("{} is not a run directory", run_root.display()))?;
            run["method"].as_str().unwrap_or("unknown").to_string()
        }
    };
    let reports_dir = run_root.join("reports");
    let mut out = Vec::new();
    for subject in sorted_dirs(&reports_dir)? {
        for prompt in sorted_dirs(&subject)? {
            if prompt.join("report.json").exists() {
                out.push((method.clone(), MetricReport::load(&prompt)?));
            }
        }
    }
    Ok(out)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateRow {
    pub method: String,
    pub subjects: usize,
    pub reports: usize,
    pub sa: f64,
    pub nsd: f64,
    pub ta: f64,
}

/// Per-method means over per-(subject, prompt) reports, in first-seen order.
pub fn aggregate(rows: &[(String, MetricReport)]) -> Vec<AggregateRow> {
    let mut methods: Vec<&str> = Vec::new();
    for (m, _) in rows {
        if !methods.contains(&m.as_str()) {
            methods.push(m);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let reports: Vec<&MetricReport> = rows.iter().filter(|(k, _)| k == m).map(|(_, r)| r).collect();
            let n = reports.len() as f64;
            let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
            AggregateRow {
                method: m.to_string(),
                subjects: reports.iter().map(|r| &r.subject_id).collect::<BTreeSet<_>>().len(),
                reports: reports.len(),
                sa: mean(|r| r.sa),
                nsd: mean(|r| r.nsd),
                ta: mean(|r| r.ta),
            }
        })
        .collect()
}

pub fn write_aggregate(rows: &[(String, MetricReport)], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let table = aggregate(rows);
    let mut csv = String::from("method,subjects,reports,sa,nsd,ta\n");
    for r in &table {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            csv_field(&r.method),
            r.subjects,
            r.reports,
            format_significant(r.sa),
            format_significant(r.nsd),
            format_significant(r.ta)
        ));
    }
    std::fs::write(out.join("aggregate.csv"), csv)?;
    type Axis = fn(&AggregateRow) -> (f64, f64);
    let pairs: [(&str, &str, Axis); 3] = [
        ("SA", "NSD", |r| (r.sa, r.nsd)),
        ("SA", "TA", |r| (r.sa, r.ta)),
        ("NSD", "TA", |r| (r.nsd, r.ta)),
    ];
    for (x, y, get) in pairs {
        let points = table
            .iter()
            .map(|r| {
                let (px, py) = get(r);
                ScatterPoint {
                    method: r.method.clone(),
                    x: px,
                    y: py,
                }
            })
            .collect();
        ScatterPlot::new(x, y, points).save(out, &format!("scatter_{}_{}", x.to_lowercase(), y.to_lowercase()))?;
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn report(ctx_root: &Path, runs: &[PathBuf], out: Option<&Path>) -> Result<Tally> {
    let mut rows = Vec::new();
    let mut tally = Tally::default();
    for run in runs {
        match collect_reports(run, None) {
            Ok(r) if r.is_empty() => tally.record(run.display().to_string(), Err(anyhow!("no reports found"))),
            Ok(r) => {
                rows.extend(r);
                tally.record(run.display().to_string(), Ok(()));
            }
            Err(e) => tally.record(run.display().to_string(), Err(e)),
        }
    }
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| ctx_root.join("reports"));
    if !rows.is_empty() {
        write_aggregate(&rows, &out)?;
    }
    Ok(tally)
}

/// Token index for every prompt of every subject, checked before any work.
fn attn_token_indices(ctx: &Ctx, backend: &dyn Backend) -> Result<Vec<(String, Vec<usize>)>> {
    let token = ctx.cfg.attn.token.as_deref();
    let mut out = Vec::new();
    for s in ctx.subjects() {
        let handle = match ModelHandle::load(&ctx.layout.handle(&s.id)) {
            Ok(h) => h,
            // reported per unit later
            Err(_) => continue,
        };
        let mut indices = Vec::new();
        for prompt in &s.prompts {
            let idx = match token {
                None => tune::identifier_token_index(&handle, prompt, backend)?,
                Some(t) if t == IDENTIFIER_PLACEHOLDER || t == s.identifier_token => {
                    tune::identifier_token_index(&handle, prompt, backend)?
                }
                Some(t) => {
                    let tokens = backend.tokenize(&handle.backend_prompt(prompt)?);
                    let t = t.to_lowercase();
                    tokens.iter().position(|x| *x == t).ok_or_else(|| {
                        usage(format!(
                            "token {t:?} not in prompt {prompt:?} (tokens: {})",
                            tokens.join(" ")
                        ))
                    })?
                }
            };
            indices.push(idx);
        }
        out.push((s.id.clone(), indices));
    }
    Ok(out)
}

pub fn attn(ctx: &Ctx) -> Result<Tally> {
    let backend = backend(ctx)?;
    let cfg = sample_config(ctx);
    let res = ctx.cfg.attn.resolution;
    if res == 0 {
        return Err(usage("attn.resolution must be positive"));
    }
    let alpha = ctx.cfg.attn.alpha;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(usage("attn.alpha must be in [0, 1]"));
    }
    let indices = attn_token_indices(ctx, backend.as_ref())?;
    let mut tally = per_subject(ctx, |s| {
        let mut t = Tally::default();
        let handle = ModelHandle::load(&ctx.layout.handle(&s.id));
        let subject_indices = indices.iter().find(|(id, _)| *id == s.id).map(|(_, v)| v);
        for (p, prompt) in s.prompts.iter().enumerate() {
            let result = (|| -> Result<()> {
                let handle = handle.as_ref().map_err(|e| anyhow!("no handle, run tune first: {e}"))?;
                let token_index = subject_indices.map(|v| v[p]).context("no token index")?;
                let set = GeneratedSet::load(&ctx.layout.samples(&s.id, p))
                    .context("missing generated set, run sample first")?;
                let dir = ctx.layout.attn(&s.id, p);
                fresh_dir(&dir)?;
                let tokens = backend.tokenize(&handle.backend_prompt(prompt)?);
                let token_string = tokens.get(token_index).cloned().unwrap_or_default();
                for (i, (image, &seed)) in set.images.iter().zip(&set.seed_list).enumerate() {
                    let records =
                        tune::record_identifier_attention(handle, prompt, seed, &cfg, token_index, backend.as_ref())?;
                    attnmap::save_records(&records, &token_string, &dir.join(format!("{i:03}")))?;
                    let avg = average_maps(&records, (res, res), &token_string)?;
                    corpus::write_json(&dir.join(format!("{i:03}_map.json")), &avg)?;
                    attnmap::grid_to_image(&avg.map)
                        .save(dir.join(format!("{i:03}_map.png")))
                        .context("writing map image")?;
                    corpus::save_png(&overlay(&avg, image, alpha), &dir.join(format!("{i:03}_overlay.png")))?;
                }
                Ok(())
            })();
            t.record(format!("{}/{}", s.id, crate::run::prompt_dir(p)), result);
        }
        t
    });
    tally.write_errors(&ctx.layout.root.join("attn"))?;
    Ok(tally)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(subject: &str, sa: f64, nsd: f64, ta: f64) -> MetricReport {
        MetricReport {
            subject_id: subject.into(),
            run_id: "r".into(),
            encoder_id: "e".into(),
            generation_prompt: "a [v] dog".into(),
            stripped_prompt: "a dog".into(),
            sa,
            nsd,
            ta,
            pairwise_sa: vec![],
            pairwise_nsd: vec![],
            per_image_ta: vec![],
            nsd_excluded_refs: vec![],
        }
    }

    #[test]
    fn aggregate_is_mean_of_reports() {
        let rows = vec![
            ("db".to_string(), report("cat", 0.5, 1.0, 0.2)),
            ("db+sid".to_string(), report("cat", 0.7, 1.2, 0.3)),
            ("db".to_string(), report("dog", 0.7, 0.8, 0.4)),
        ];
        let table = aggregate(&rows);
        assert_eq!(table[0].method, "db");
        assert_eq!((table[0].subjects, table[0].reports), (2, 2));
        assert!((table[0].sa - 0.6).abs() < 1e-12);
        assert!((table[0].nsd - 0.9).abs() < 1e-12);
        assert!((table[0].ta - 0.3).abs() < 1e-12);
        assert_eq!(table[1].reports, 1);
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("db/CASE3_SID"), "db/CASE3_SID");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
    }
}
