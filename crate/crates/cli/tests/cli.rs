use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use slidekit::annotations::{from_xml, rasterize, AnnotationDocument};
use slidekit::backend::{Backend, BackendConfig};
use slidekit::metrics::{document_confusion, metrics, EvalRegion};
use slidekit::pipeline::{segment_slide, SegmentParams};
use slidekit::pyramid::{decode_rgb, level_extent, RegionSpec, SlidePyramid};
use slidekit::synthetic::{SyntheticSlide, SyntheticSpec};

fn slidekit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slidekit"))
        .args(args)
        .output()
        .expect("spawn slidekit")
}

fn ok(args: &[&str]) -> String {
    let out = slidekit(args);
    assert!(
        out.status.success(),
        "slidekit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Synthetic slide on disk: raster, pyramid and truth document.
struct Fixture {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
}

impl Fixture {
    fn new(size: u32, blobs: usize, seed: u64) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        let (size, blobs, seed) = (size.to_string(), blobs.to_string(), seed.to_string());
        ok(&[
            "make-synthetic", "--size", &size, "--blobs", &blobs, "--seed", &seed,
            "--out", p(&dir.join("slide.png")), "--truth", p(&dir.join("truth.json")),
        ]);
        ok(&["build-pyramid", p(&dir.join("slide.png")), p(&dir.join("pyr")), "--tile-size", "256"]);
        Fixture { _tmp: tmp, dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

#[test]
fn make_synthetic_matches_library() {
    let f = Fixture::new(768, 4, 3);
    let s = SyntheticSlide::generate(SyntheticSpec {
        width: 768,
        height: 768,
        blobs: 4,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let img = decode_rgb(&std::fs::read(f.path("slide.png")).unwrap()).unwrap();
    assert_eq!(img, s.render());
    let truth = AnnotationDocument::from_json(&std::fs::read(f.path("truth.json")).unwrap()).unwrap();
    assert_eq!(truth, s.truth("slide"));
    assert_eq!(truth.element_count(), 4);

    let pyr = SlidePyramid::open(&f.path("pyr")).unwrap();
    assert_eq!((pyr.width0(), pyr.height0(), pyr.tile_size()), (768, 768, 256));
}

#[test]
fn segment_output_equals_library_call() {
    let f = Fixture::new(1024, 5, 11);
    let out = f.path("pred.json");
    ok(&["segment", p(&f.path("pyr")), "--out", p(&out), "--workers", "1"]);

    let pyr = SlidePyramid::open(&f.path("pyr")).unwrap();
    let cfg = BackendConfig::default();
    let backend = Backend::from_config(&cfg).unwrap();
    let direct = segment_slide(&pyr, &backend, &cfg.class_names, &SegmentParams::default(), &|_, _| {}).unwrap();
    assert_eq!(
        std::fs::read(&out).unwrap(),
        direct.to_document(pyr.slide_id()).to_json_pretty()
    );

    // stdout carries compact JSON of the same document
    let stdout = ok(&["segment", p(&f.path("pyr"))]);
    let doc = AnnotationDocument::from_json(stdout.trim_end().as_bytes()).unwrap();
    assert_eq!(doc, direct.to_document(pyr.slide_id()));
    assert_eq!(doc.element_count(), 5);
}

#[test]
fn segment_appends_timing_rows() {
    let f = Fixture::new(512, 2, 5);
    let csv = f.path("timing.csv");
    for _ in 0..2 {
        ok(&["segment", p(&f.path("pyr")), "--out", p(&f.path("o.json")), "--timing", p(&csv)]);
    }
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "slide_pixels,analyzed_pixels,wall_seconds,tile_count");
    assert_eq!(lines.len(), 3);
    let cols: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(cols[0], "262144");
    assert!(cols[1].parse::<u64>().unwrap() <= 262144);
    assert!(cols[2].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn white_slide_gives_empty_document() {
    let tmp = tempfile::tempdir().unwrap();
    let img = image::RgbImage::from_pixel(600, 400, image::Rgb([255, 255, 255]));
    img.save(tmp.path().join("white.png")).unwrap();
    ok(&["build-pyramid", p(&tmp.path().join("white.png")), p(&tmp.path().join("pyr"))]);
    let csv = tmp.path().join("t.csv");
    let stdout = ok(&["segment", p(&tmp.path().join("pyr")), "--timing", p(&csv)]);
    let doc = AnnotationDocument::from_json(stdout.trim_end().as_bytes()).unwrap();
    assert!(doc.layers.is_empty());
    let row = std::fs::read_to_string(&csv).unwrap().lines().nth(1).unwrap().to_string();
    let cols: Vec<&str> = row.split(',').collect();
    assert_eq!((cols[0], cols[1], cols[3]), ("240000", "0", "0"));
}

#[test]
fn metrics_single_and_batch() {
    let f = Fixture::new(1024, 5, 2);
    ok(&["segment", p(&f.path("pyr")), "--out", p(&f.path("pred.json"))]);
    let json = f.path("m.json");
    let line = ok(&[
        "metrics", p(&f.path("truth.json")), p(&f.path("pred.json")),
        "--pyramid", p(&f.path("pyr")), "--json", p(&json),
    ]);

    let gt = AnnotationDocument::from_json(&std::fs::read(f.path("truth.json")).unwrap()).unwrap();
    let pred = AnnotationDocument::from_json(&std::fs::read(f.path("pred.json")).unwrap()).unwrap();
    let pyr = SlidePyramid::open(&f.path("pyr")).unwrap();
    let c = document_confusion(&gt, "glomerulus", &pred, "glomerulus", &pyr, EvalRegion::Slide).unwrap();
    let m = metrics(c).unwrap();
    assert_eq!(line.trim_end(), m.summary_line());
    assert_eq!(std::fs::read(&json).unwrap(), m.to_json());
    assert!(m.f_score > 0.99, "{line}");

    std::fs::write(
        f.path("list.tsv"),
        "# gt\tpred\tpyramid\ntruth.json\tpred.json\tpyr\ntruth.json\ttruth.json\tpyr\n",
    )
    .unwrap();
    let out = ok(&["metrics", "--batch", p(&f.path("list.tsv")), "--json", p(&json)]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].ends_with("F-score=1.0000 | MCC=1.0000 | Kappa=1.0000 | IOU=1.0000 | Sensitivity=1.0000 | Specificity=1.0000 | Precision=1.0000 | Accuracy=1.0000"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(report["scope"], "micro-average");
    assert_eq!(report["counts"]["tp"].as_u64().unwrap(), 2 * c.tp + c.fn_);

    let tissue = ok(&[
        "metrics", p(&f.path("truth.json")), p(&f.path("pred.json")),
        "--pyramid", p(&f.path("pyr")), "--region", "tissue",
    ]);
    assert!(tissue.starts_with("F-score="));
}

#[test]
fn metrics_against_empty_prediction() {
    let f = Fixture::new(512, 2, 8);
    std::fs::write(f.path("empty.json"), br#"{"slide_id":"slide","layers":[]}"#).unwrap();
    let line = ok(&["metrics", p(&f.path("truth.json")), p(&f.path("empty.json")), "--pyramid", p(&f.path("pyr"))]);
    assert!(line.starts_with("F-score=0.0000 |"), "{line}");
    assert!(line.contains("Specificity=1.0000"), "{line}");
}

#[test]
fn convert_round_trip() {
    let f = Fixture::new(512, 3, 4);
    let xml = f.path("truth.xml");
    let back = f.path("back.json");
    ok(&["convert", p(&f.path("truth.json")), p(&xml)]);
    ok(&["convert", p(&xml), p(&back)]);
    let a = AnnotationDocument::from_json(&std::fs::read(f.path("truth.json")).unwrap()).unwrap();
    let b = AnnotationDocument::from_json(&std::fs::read(&back).unwrap()).unwrap();
    assert_eq!(a.geometry_key(), b.geometry_key());
    assert_eq!(b.slide_id, a.slide_id);
    let x = from_xml(&std::fs::read(&xml).unwrap(), "unused").unwrap();
    assert_eq!(x.geometry_key(), a.geometry_key());
}

#[test]
fn mask_export_matches_rasterize() {
    let f = Fixture::new(768, 3, 6);
    let out = f.path("mask.png");
    ok(&["mask-export", p(&f.path("truth.json")), p(&f.path("pyr")), "--level", "1", "--out", p(&out)]);
    let doc = AnnotationDocument::from_json(&std::fs::read(f.path("truth.json")).unwrap()).unwrap();
    let pyr = SlidePyramid::open(&f.path("pyr")).unwrap();
    let want = rasterize(&doc, pyr.meta(), 1, None).unwrap();
    let got = image::open(&out).unwrap().to_luma8();
    assert_eq!((got.width(), got.height()), (want.width, want.height));
    assert_eq!(got.into_raw(), want.labels);
}

#[test]
fn tissue_mask_written() {
    let f = Fixture::new(1024, 3, 9);
    let out = f.path("tissue.png");
    let summary = ok(&["tissue", p(&f.path("pyr")), "--out", p(&out)]);
    assert!(summary.contains("tissue"), "{summary}");
    let m = image::open(&out).unwrap().to_luma8();
    let on = m.pixels().filter(|p| p.0[0] == 255).count();
    assert!(on > 0 && on < (m.width() * m.height()) as usize);
    assert!(m.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
}

#[test]
fn export_patches_writes_manifest() {
    let f = Fixture::new(1024, 4, 12);
    let out = f.path("patches");
    let summary = ok(&[
        "export-patches", p(&f.path("truth.json")), p(&f.path("pyr")),
        "--layers", "glomerulus", "--out", p(&out), "--patch-size", "256",
    ]);
    assert!(summary.contains("patches"), "{summary}");
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    let entries = manifest["entries"].as_array().unwrap();
    assert!(!entries.is_empty());
    assert_eq!(manifest["patch_size"], 256);
}

#[test]
fn make_synthetic_pyramid_matches_raster() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&[
        "make-synthetic", "--size", "600", "--blobs", "3", "--seed", "1",
        "--out", p(&d.join("s.png")), "--pyramid", p(&d.join("direct")), "--tile-size", "256",
    ]);
    ok(&["build-pyramid", p(&d.join("s.png")), p(&d.join("built")), "--tile-size", "256"]);
    let a = SlidePyramid::open(&d.join("direct")).unwrap();
    let b = SlidePyramid::open(&d.join("built")).unwrap();
    assert_eq!(a.levels(), b.levels());
    for level in 0..a.levels() {
        let (w, h) = (level_extent(600, level), level_extent(600, level));
        let region = |pyr: &SlidePyramid| pyr.read_region(RegionSpec::new(level, 0, 0, w, h)).unwrap();
        assert!(region(&a) == region(&b), "level {level}");
    }
}

#[test]
fn usage_errors_exit_2() {
    let out = slidekit(&["segment"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("ERROR usage:"));

    let out = slidekit(&["make-synthetic", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ERROR usage:"));

    let out = slidekit(&["metrics", "--region", "everywhere", "a.json", "b.json", "--pyramid", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = slidekit(&["segment", p(&tmp.path().join("missing"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("ERROR "), "{err}");

    std::fs::write(tmp.path().join("junk.png"), b"not an image").unwrap();
    let out = slidekit(&["build-pyramid", p(&tmp.path().join("junk.png")), p(&tmp.path().join("pyr"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("ERROR decode:"));
}

#[test]
fn config_file_sets_defaults() {
    let f = Fixture::new(512, 2, 13);
    let cfg = f.path("cfg.json");
    std::fs::write(&cfg, br#"{"segment": {"min_area": 100000000}}"#).unwrap();
    let stdout = ok(&["--config", p(&cfg), "segment", p(&f.path("pyr"))]);
    let doc = AnnotationDocument::from_json(stdout.trim_end().as_bytes()).unwrap();
    assert_eq!(doc.element_count(), 0);

    // explicit flags beat the config file
    let stdout = ok(&["--config", p(&cfg), "segment", p(&f.path("pyr")), "--min-area", "400"]);
    let doc = AnnotationDocument::from_json(stdout.trim_end().as_bytes()).unwrap();
    assert_eq!(doc.element_count(), 2);

    std::fs::write(&cfg, br#"{"no_such_flag": 1}"#).unwrap();
    let out = slidekit(&["--config", p(&cfg), "segment", p(&f.path("pyr"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-flag"));
}
