use std::path::Path;
use std::time::Instant;

use image::{Rgb, RgbImage};
use slidekit::backend::{Backend, BackendConfig, BackendKind, TrainingHyperparams};
use slidekit::pipeline::{segment_slide, SegmentParams};
use slidekit::synthetic::{SyntheticSlide, SyntheticSpec};
use slidekit::Error;

const EXE: &str = env!("CARGO_BIN_EXE_reference_backend");

fn external(args: &[&str], timeout_secs: f64, retries: u32) -> Backend {
    let mut command = vec![EXE.to_string()];
    command.extend(args.iter().map(|s| s.to_string()));
    let cfg = BackendConfig {
        class_names: vec!["background".into(), "glomerulus".into()],
        kind: BackendKind::External {
            command,
            working_dir: None,
            timeout_secs,
            retries,
        },
    };
    Backend::from_config(&cfg).unwrap()
}

fn stained_tile() -> RgbImage {
    let mut img = RgbImage::from_pixel(96, 64, Rgb([215, 150, 190]));
    for y in 10..40 {
        for x in 20..70 {
            img.put_pixel(x, y, Rgb([120, 40, 130]));
        }
    }
    img
}

#[test]
fn external_builtin_mode_matches_in_process() {
    let tile = stained_tile();
    let ext = external(&["--mode", "builtin"], 30.0, 0);
    let local = Backend::from_config(&BackendConfig::default()).unwrap();
    let a = ext.infer_tile(&tile, (0, 0)).unwrap();
    let b = local.infer_tile(&tile, (0, 0)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.count(1), 50 * 30);
    // the pooled process is reused
    assert_eq!(ext.infer_tile(&tile, (0, 0)).unwrap(), b);
}

#[test]
fn echo_backend_returns_background() {
    let ext = external(&["--mode", "zeros"], 30.0, 0);
    let m = ext.infer_tile(&stained_tile(), (0, 0)).unwrap();
    assert_eq!((m.width, m.height), (96, 64));
    assert_eq!(m.count(0), 96 * 64);
}

#[test]
fn confidence_is_carried() {
    let ext = external(&["--mode", "builtin", "--confidence", "0.75"], 30.0, 0);
    let m = ext.infer_tile(&stained_tile(), (0, 0)).unwrap();
    let conf = m.confidence.unwrap();
    assert_eq!(conf.len(), 96 * 64);
    assert!(conf.iter().all(|&c| c == 0.75));
}

#[test]
fn crash_reports_tile_coordinates() {
    let ext = external(&["--mode", "crash"], 30.0, 2);
    match ext.infer_tile(&stained_tile(), (1024, 512)) {
        Err(Error::BackendTile { x, y, reason }) => {
            assert_eq!((x, y), (1024, 512));
            assert!(reason.contains("after 2 retries"), "{reason}");
        }
        other => panic!("expected tile error, got {other:?}"),
    }
}

#[test]
fn crash_once_recovers_by_retry() {
    let tmp = tempfile::tempdir().unwrap();
    let marker = tmp.path().join("crashed");
    let ext = external(&["--mode", "crash-once", "--marker", marker.to_str().unwrap()], 30.0, 2);
    let m = ext.infer_tile(&stained_tile(), (0, 0)).unwrap();
    assert!(marker.exists());
    assert_eq!(m.count(0), 96 * 64);
}

#[test]
fn hang_times_out() {
    let ext = external(&["--mode", "hang"], 0.3, 1);
    let t = Instant::now();
    match ext.infer_tile(&stained_tile(), (3, 4)) {
        Err(Error::BackendTile { x: 3, y: 4, reason }) => assert!(reason.contains("timed out"), "{reason}"),
        other => panic!("expected timeout, got {other:?}"),
    }
    assert!(t.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn malformed_responses_are_protocol_errors() {
    for mode in ["garbage", "wrong-size"] {
        let ext = external(&["--mode", mode], 30.0, 2);
        match ext.infer_tile(&stained_tile(), (0, 0)) {
            Err(Error::BackendTile { reason, .. }) => assert!(!reason.contains("retries"), "{mode}: {reason}"),
            other => panic!("{mode}: expected protocol failure, got {other:?}"),
        }
    }
}

#[test]
fn class_count_mismatch_rejected() {
    let ext = external(&["--mode", "zeros", "--classes", "3"], 30.0, 0);
    assert!(ext.infer_tile(&stained_tile(), (0, 0)).is_err());
}

#[test]
fn trainer_writes_sentinel() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("manifest.json");
    std::fs::write(&manifest, b"{}").unwrap();
    let ext = external(&[], 30.0, 0);
    let model = ext.train(&manifest, &TrainingHyperparams::default()).unwrap();
    assert_eq!(model, tmp.path().join("model.sentinel"));
    let hp: serde_json::Value = serde_json::from_slice(&std::fs::read(&model).unwrap()).unwrap();
    assert_eq!(hp["steps"], 400000);
    assert_eq!(hp["batch_size"], 12);
    assert_eq!(hp["learning_rate"], 0.001);
    assert_eq!(hp["output_stride"], 16);

    let failing = external(&["--fail-train"], 30.0, 0);
    assert!(matches!(failing.train(&manifest, &TrainingHyperparams::default()), Err(Error::Process(_))));
    assert!(matches!(
        external(&[], 30.0, 0).train(Path::new("/nonexistent/dir/m.json"), &TrainingHyperparams::default()),
        Err(_)
    ));
}

#[test]
fn pipeline_with_external_backend_matches_builtin() {
    let tmp = tempfile::tempdir().unwrap();
    let slide = SyntheticSlide::generate(SyntheticSpec {
        width: 1536,
        height: 1024,
        blobs: 4,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let pyr = slide.build_pyramid(&tmp.path().join("p"), 256).unwrap();
    let names: Vec<String> = vec!["background".into(), "glomerulus".into()];
    let params = SegmentParams {
        tile_size: 256,
        overlap: 32,
        workers: Some(2),
        ..Default::default()
    };
    let ext = external(&["--mode", "builtin"], 30.0, 1);
    let local = Backend::from_config(&BackendConfig::default()).unwrap();
    let a = segment_slide(&pyr, &ext, &names, &params, &|_, _| {}).unwrap();
    let b = segment_slide(&pyr, &local, &names, &params, &|_, _| {}).unwrap();
    assert_eq!(a.to_document("s").geometry_key(), b.to_document("s").geometry_key());
    assert_eq!(a.layers[0].elements.len(), 4);

    let crash = external(&["--mode", "crash"], 30.0, 0);
    assert!(matches!(
        segment_slide(&pyr, &crash, &names, &params, &|_, _| {}),
        Err(Error::BackendTile { .. })
    ));
}
