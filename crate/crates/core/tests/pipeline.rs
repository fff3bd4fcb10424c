use image::{Rgb, RgbImage};

use sidkit_core::attnmap::{average_maps, overlay, DEFAULT_ALPHA};
use sidkit_core::corpus::ReferenceSet;
use sidkit_core::describe::{generate_description, Baseline, DescriptionCase, GenerateOptions, ScriptedVlm};
use sidkit_core::embed::PixelEncoder;
use sidkit_core::metrics::{evaluate, MetricOptions};
use sidkit_core::segment::{segment_subject, BinaryGrid, FnSegmenter, Instance, SegmentRequest, SubjectMask};
use sidkit_core::tune::{
    fine_tune, identifier_token_index, record_identifier_attention, sample, CallLog, SampleConfig, TinyBackend,
    TuneConfig, TuneError,
};

fn references() -> ReferenceSet {
    let images = [(6u32, [250u8, 120, 30]), (14, [245, 125, 35]), (22, [240, 115, 25])]
        .iter()
        .map(|&(off, c)| {
            RgbImage::from_fn(40, 40, |x, y| {
                if (off..off + 12).contains(&x) && (10..22).contains(&y) {
                    Rgb(c)
                } else {
                    Rgb([30, (y * 4) as u8, 90])
                }
            })
        })
        .collect();
    ReferenceSet::from_images("cat", "cat", "[v]", images).unwrap()
}

fn masks(refs: &ReferenceSet) -> Vec<SubjectMask> {
    let seg = FnSegmenter::new("warm-pixels", |r: &SegmentRequest<'_>| {
        let img = r.image;
        vec![Instance {
            grid: BinaryGrid::from_fn(img.width(), img.height(), |x, y| img.get_pixel(x, y)[0] > 200),
            score: Some(0.9),
        }]
    });
    refs.rgb_images()
        .enumerate()
        .map(|(i, image)| {
            let request = SegmentRequest {
                image,
                image_index: i,
                class_name: "cat",
                source_path: None,
            };
            segment_subject(&request, &seg).unwrap()
        })
        .collect()
}

#[test]
fn describe_tune_sample_evaluate_attend() {
    let dir = tempfile::tempdir().unwrap();
    let refs = references();
    let vlm = ScriptedVlm::new("scripted", vec!["a {class_name} lying on a blue rug.".into()]);
    let baseline = Baseline::object("cat");
    let descriptions: Vec<_> = refs
        .rgb_images()
        .enumerate()
        .map(|(i, img)| {
            generate_description(
                img,
                i,
                &baseline,
                "[v]",
                DescriptionCase::SelectivelyInformative,
                Some(&vlm),
                &GenerateOptions::default(),
            )
            .unwrap()
        })
        .collect();
    assert_eq!(descriptions[2].text, "a [v] cat lying on a blue rug.");
    assert_eq!(vlm.calls(), 3);

    let backend = TinyBackend::default();
    let log = CallLog::new(dir.path().join("calls.jsonl"));
    let cfg = TuneConfig {
        iterations: 20,
        ..TuneConfig::dreambooth()
    };
    let handle = fine_tune(
        &refs,
        &descriptions,
        &cfg,
        &backend,
        &dir.path().join("handle"),
        Some(&log),
    )
    .unwrap();
    assert_eq!(handle.metadata.rare_token, "sks");

    let scfg = SampleConfig {
        images_per_prompt: 3,
        steps: 5,
        ..SampleConfig::default()
    };
    let prompt = "a [v] cat on the beach";
    let set = sample(&handle, prompt, &scfg, &backend, Some(&log)).unwrap();
    assert_eq!(set.len(), 3);
    let again = sample(&handle, prompt, &scfg, &backend, None).unwrap();
    assert_eq!(set.images, again.images);

    let entries = log.entries().unwrap();
    assert_eq!(entries.len(), 2);
    assert_eq!(entries[0].description_texts[0], "a sks cat lying on a blue rug.");
    assert_eq!(entries[1].description_texts, ["a sks cat on the beach"]);

    let masks = masks(&refs);
    let opts = MetricOptions {
        segment_resolution: 32,
        batch_size: 4,
    };
    let report = evaluate(&refs, &masks, &set, &PixelEncoder::new(16), &opts).unwrap();
    assert_eq!(report.stripped_prompt, "a cat on the beach");
    assert!((-1.0..=1.0).contains(&report.sa));
    assert!((0.0..=2.0).contains(&report.nsd));
    assert_eq!(report.pairwise_sa.len(), 3);
    assert!(report.nsd_excluded_refs.is_empty());

    let token = identifier_token_index(&handle, prompt, &backend).unwrap();
    assert_eq!(token, 2);
    let records = record_identifier_attention(&handle, prompt, set.seed_list[0], &scfg, token, &backend).unwrap();
    assert_eq!(records.len(), 5 * 2 * 2);
    let avg = average_maps(&records, (64, 64), "sks").unwrap();
    assert!(!avg.constant);
    let (lo, hi) = avg.map.min_max();
    assert_eq!((lo, hi), (0.0, 1.0));
    let over = overlay(&avg, &set.images[0], DEFAULT_ALPHA);
    assert_eq!(over.dimensions(), set.images[0].dimensions());
}

#[test]
fn fine_tune_rejects_mismatched_descriptions() {
    let dir = tempfile::tempdir().unwrap();
    let refs = references();
    let one = sidkit_core::describe::baseline_description("cat", "[v]").unwrap();
    let backend = TinyBackend::default();
    let cfg = TuneConfig::dreambooth();
    let two = vec![one.clone(), one.clone()];
    let err = fine_tune(&refs, &two, &cfg, &backend, &dir.path().join("h"), None).unwrap_err();
    assert!(matches!(
        err,
        TuneError::CountMismatch {
            references: 3,
            descriptions: 2
        }
    ));
    assert!(!dir.path().join("h").exists());

    let shared = fine_tune(&refs, &[one], &cfg, &backend, &dir.path().join("h"), None).unwrap();
    assert!(shared.dir.join("metadata.json").exists());
}
