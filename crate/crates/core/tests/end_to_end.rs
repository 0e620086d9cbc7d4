use slidekit::annotations::{from_xml, to_xml, AnnotationDocument};
use slidekit::backend::{Backend, BackendConfig};
use slidekit::metrics::{layer_confusion, metrics};
use slidekit::pipeline::{segment_slide, SegmentParams};
use slidekit::synthetic::{SyntheticSlide, SyntheticSpec};

#[test]
fn synthetic_slide_recovers_objects() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        width: 2048,
        height: 2048,
        blobs: 8,
        seed: 11,
        ..Default::default()
    };
    let slide = SyntheticSlide::generate(spec).unwrap();
    let pyr = slide.build_pyramid(&tmp.path().join("pyr"), 512).unwrap();
    let cfg = BackendConfig::default();
    let backend = Backend::from_config(&cfg).unwrap();
    let out = segment_slide(&pyr, &backend, &cfg.class_names, &SegmentParams::default(), &|_, _| {}).unwrap();
    let pred = out.to_document("s");
    let truth = slide.truth("s");
    assert_eq!(pred.layers[0].elements.len(), 8);

    let c = layer_confusion(&truth.layers[0], &pred.layers[0], 2048, 2048, None);
    let m = metrics(c).unwrap();
    assert!(m.f_score >= 0.99, "{}", m.summary_line());
    assert!(m.specificity >= 0.9999, "{}", m.summary_line());
    assert!(out.timing.analyzed_pixels < out.timing.slide_pixels);

    // the prediction survives both interchange formats unchanged
    let json = AnnotationDocument::from_json(&pred.to_json()).unwrap();
    assert_eq!(json.geometry_key(), pred.geometry_key());
    let xml = from_xml(&to_xml(&pred), "s").unwrap();
    assert_eq!(xml.geometry_key(), pred.geometry_key());
}
