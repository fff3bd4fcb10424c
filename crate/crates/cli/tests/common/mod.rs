#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{GrayImage, Luma, Rgb, RgbImage};
use sha2::{Digest, Sha256};

pub const SIDE: u32 = 48;

type Placement = (u32, u32, u32, [u8; 3], [u8; 3]);

/// A square subject of `color` at (`x`, `y`) on a two-tone background.
pub fn scene(x: u32, y: u32, size: u32, color: [u8; 3], bg: [u8; 3]) -> (RgbImage, GrayImage) {
    let inside = |px: u32, py: u32| px >= x && px < x + size && py >= y && py < y + size;
    let img = RgbImage::from_fn(SIDE, SIDE, |px, py| {
        if inside(px, py) {
            Rgb(color)
        } else {
            Rgb([bg[0], bg[1].wrapping_add((py * 2) as u8), bg[2]])
        }
    });
    let mask = GrayImage::from_fn(SIDE, SIDE, |px, py| Luma([if inside(px, py) { 255 } else { 0 }]));
    (img, mask)
}

pub struct Fixture {
    pub root: PathBuf,
    pub config: PathBuf,
}

/// Two subjects, three prompts, two images per prompt, fixture masks, mock
/// VLM, mock encoder and the tiny backend.
pub fn write_fixture(root: &Path) -> Fixture {
    let subjects: [(&str, &str, Vec<Placement>); 2] = [
        (
            "cat",
            "cat",
            vec![
                (8, 10, 16, [230, 140, 40], [20, 90, 160]),
                (20, 4, 18, [225, 135, 45], [40, 160, 60]),
                (14, 22, 14, [235, 145, 35], [120, 120, 120]),
            ],
        ),
        (
            "backpack",
            "backpack",
            vec![
                (10, 10, 20, [200, 30, 30], [240, 240, 230]),
                (4, 20, 16, [190, 35, 25], [30, 30, 60]),
            ],
        ),
    ];
    for (id, _, scenes) in &subjects {
        let img_dir = root.join("refs").join(id);
        let mask_dir = root.join("masks").join(id);
        std::fs::create_dir_all(&img_dir).unwrap();
        std::fs::create_dir_all(&mask_dir).unwrap();
        for (i, &(x, y, s, c, bg)) in scenes.iter().enumerate() {
            let (img, mask) = scene(x, y, s, c, bg);
            img.save(img_dir.join(format!("{i:02}.png"))).unwrap();
            mask.save(mask_dir.join(format!("{i:02}.png"))).unwrap();
        }
    }
    let manifest = serde_json::json!({
        "subjects": [
            {"id": "cat", "class_name": "cat", "image_dir": "refs/cat",
             "prompts": ["a [v] cat swimming in a pool", "a [v] cat on the beach"]},
            {"id": "backpack", "class_name": "backpack", "image_dir": "refs/backpack",
             "prompts": ["a [v] backpack in the snow"]}
        ],
        "images_per_prompt": 2,
        "total_images": 6,
        "backend": "tiny"
    });
    std::fs::write(
        root.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )
    .unwrap();
    let config = serde_json::json!({
        "manifest": "manifest.json",
        "run_dir": "run",
        "method": "tiny+sid",
        "case": "CASE3_SID",
        "jobs": 2,
        "vlm": {"provider": "mock", "responses": ["a {class_name} sitting on a wooden table in a sunny garden."]},
        "segmenter": {"kind": "fixture", "dir": "masks/{subject}"},
        "encoder": {"id": "mock-pixel"},
        "segment_resolution": 64,
        "backend": {"adapter": "tiny"},
        "tune": {"iterations": 10, "seed": 1},
        "sample": {"resolution": 64, "steps": 4}
    });
    let config_path = root.join("config.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    Fixture {
        root: root.to_path_buf(),
        config: config_path,
    }
}

pub fn sidkit(fixture: &Fixture, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sidkit"))
        .current_dir(&fixture.root)
        .arg("--config")
        .arg(&fixture.config)
        .args(args)
        .output()
        .expect("sidkit runs")
}

pub const PIPELINE: [&str; 6] = ["describe", "segment", "tune", "sample", "evaluate", "attn"];

/// SHA-256 of every file under `dir`, keyed by relative path, skipping the
/// given top-level directories.
pub fn tree_hashes(dir: &Path, skip: &[&str]) -> BTreeMap<String, String> {
    fn walk(base: &Path, dir: &Path, skip: &[&str], out: &mut BTreeMap<String, String>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            let rel = p.strip_prefix(base).unwrap().to_string_lossy().replace('\\', "/");
            if skip.iter().any(|s| rel == *s || rel.starts_with(&format!("{s}/"))) {
                continue;
            }
            if p.is_dir() {
                walk(base, &p, skip, out);
            } else {
                out.insert(rel, hex::encode(Sha256::digest(std::fs::read(&p).unwrap())));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, skip, &mut out);
    out
}
