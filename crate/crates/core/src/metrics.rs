//! Pixel-level segmentation metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{rasterize_layers_window, AnnotationDocument, AnnotationLayer};
use crate::backend::LabelMask;
use crate::components::PixelBox;
use crate::error::{Error, Result};
use crate::planner::merge_boxes;
use crate::pyramid::SlidePyramid;
use crate::tissue::{detect_tissue, tissue_bounds, DEFAULT_MIN_COMPONENT_PX, DEFAULT_THUMB_MAX_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Tallies one binarized pixel pair.
    #[inline]
    pub fn add(&mut self, truth: bool, pred: bool) {
        match (truth, pred) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ConfusionCounts::default(), |a, b| a + b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    PerSlide,
    MicroAverage,
}

/// Metrics whose formula hit 0/0 and were set by convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Degenerate {
    pub f_score: bool,
    pub mcc: bool,
    pub kappa: bool,
    pub iou: bool,
    pub sensitivity: bool,
    pub specificity: bool,
    pub precision: bool,
}

impl Degenerate {
    pub fn any(&self) -> bool {
        self.f_score || self.mcc || self.kappa || self.iou || self.sensitivity || self.specificity || self.precision
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f_score: f64,
    pub mcc: f64,
    pub kappa: f64,
    pub iou: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub counts: ConfusionCounts,
    pub scope: Scope,
    pub degenerate: Degenerate,
}

fn ratio(num: f64, den: f64, flag: &mut bool) -> f64 {
    if den == 0.0 {
        *flag = true;
        0.0
    } else {
        num / den
    }
}

/// One-vs-rest confusion for `class_id`.
pub fn confusion(gt: &LabelMask, pred: &LabelMask, class_id: u8) -> Result<ConfusionCounts> {
    if (gt.width, gt.height) != (pred.width, pred.height) {
        return Err(Error::DimMismatch(gt.width, gt.height, pred.width, pred.height));
    }
    Ok(confusion_slices(&gt.labels, &pred.labels, class_id))
}

/// One-vs-rest confusion over two equally long label slices, tallied in
/// parallel chunks.
pub fn confusion_slices(gt: &[u8], pred: &[u8], class_id: u8) -> ConfusionCounts {
    debug_assert_eq!(gt.len(), pred.len());
    gt.par_chunks(1 << 16)
        .zip(pred.par_chunks(1 << 16))
        .map(|(g, p)| {
            let mut c = ConfusionCounts::default();
            for (&a, &b) in g.iter().zip(p) {
                c.add(a == class_id, b == class_id);
            }
            c
        })
        .sum()
}

fn report(c: ConfusionCounts, scope: Scope) -> Result<MetricsReport> {
    let total = c.total();
    if total == 0 {
        return Err(Error::EmptyCounts);
    }
    let (tp, fp, fn_, tn, n) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64, total as f64);
    let mut d = Degenerate::default();
    let f_score = ratio(2.0 * tp, 2.0 * tp + fp + fn_, &mut d.f_score);
    let iou = ratio(tp, tp + fp + fn_, &mut d.iou);
    let sensitivity = ratio(tp, tp + fn_, &mut d.sensitivity);
    let specificity = ratio(tn, tn + fp, &mut d.specificity);
    let precision = ratio(tp, tp + fp, &mut d.precision);
    let accuracy = (tp + tn) / n;
    // factor the root to keep the product inside f64 range for huge counts
    let den = ((tp + fp) * (tp + fn_)).sqrt() * ((tn + fp) * (tn + fn_)).sqrt();
    let mcc = ratio(tp * tn - fp * fn_, den, &mut d.mcc);
    let p_e = ((tp + fp) / n) * ((tp + fn_) / n) + ((fn_ + tn) / n) * ((fp + tn) / n);
    // p_e == 1 exactly when both raters put every pixel in one class
    let p_e_one = (c.tp + c.fp == total && c.tp + c.fn_ == total) || (c.fn_ + c.tn == total && c.fp + c.tn == total);
    let kappa = if p_e_one {
        d.kappa = true;
        if c.fp + c.fn_ == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        (accuracy - p_e) / (1.0 - p_e)
    };
    Ok(MetricsReport {
        f_score,
        mcc,
        kappa,
        iou,
        sensitivity,
        specificity,
        precision,
        accuracy,
        counts: c,
        scope,
        degenerate: d,
    })
}

pub fn metrics(c: ConfusionCounts) -> Result<MetricsReport> {
    report(c, Scope::PerSlide)
}

/// Metrics of the component-wise sum of all counts.
pub fn micro_average(cs: &[ConfusionCounts]) -> Result<MetricsReport> {
    if cs.is_empty() {
        return Err(Error::EmptyCounts);
    }
    report(cs.iter().copied().sum(), Scope::MicroAverage)
}

impl MetricsReport {
    /// `F-score=… | MCC=… | Kappa=… | IOU=… | Sensitivity=… | Specificity=… | Precision=… | Accuracy=…`
    pub fn summary_line(&self) -> String {
        format!(
            "F-score={:.4} | MCC={:.4} | Kappa={:.4} | IOU={:.4} | Sensitivity={:.4} | Specificity={:.4} | Precision={:.4} | Accuracy={:.4}",
            self.f_score, self.mcc, self.kappa, self.iou, self.sensitivity, self.specificity, self.precision, self.accuracy
        )
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("report serializes")
    }
}

const BAND_ROWS: u32 = 256;

/// Level-0 confusion between two layers, each binarized as "inside the
/// layer", over `regions` (the whole `width0 x height0` extent when `None`).
/// Rasterizes in row bands to bound memory.
pub fn layer_confusion(
    gt: &AnnotationLayer,
    pred: &AnnotationLayer,
    width0: u32,
    height0: u32,
    regions: Option<&[PixelBox]>,
) -> ConfusionCounts {
    let whole = [PixelBox {
        x0: 0,
        y0: 0,
        x1: width0,
        y1: height0,
    }];
    let regions = regions.unwrap_or(&whole);
    let mut bands = Vec::new();
    for r in regions {
        let mut y = r.y0;
        while y < r.y1 {
            let y1 = (y + BAND_ROWS).min(r.y1);
            bands.push(PixelBox { x0: r.x0, y0: y, x1: r.x1, y1 });
            y = y1;
        }
    }
    // binarize each layer under a shared class id
    let mut g = gt.clone();
    g.class_id = 1;
    let mut p = pred.clone();
    p.class_id = 1;
    bands
        .par_iter()
        .map(|b| {
            let mut gm = vec![0u8; b.area() as usize];
            let mut pm = vec![0u8; b.area() as usize];
            rasterize_layers_window(&[&g], 0, *b, &mut gm);
            rasterize_layers_window(&[&p], 0, *b, &mut pm);
            let mut c = ConfusionCounts::default();
            for (&a, &b) in gm.iter().zip(&pm) {
                c.add(a != 0, b != 0);
            }
            c
        })
        .sum()
}

/// Pixels a layer comparison is evaluated over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalRegion {
    /// Every level-0 pixel of the slide.
    #[default]
    Slide,
    /// Bounding boxes of detected tissue only.
    Tissue,
}

/// Confusion of `pred_layer` in `pred` against `gt_layer` in `gt` over a
/// slide.
pub fn document_confusion(
    gt: &AnnotationDocument,
    gt_layer: &str,
    pred: &AnnotationDocument,
    pred_layer: &str,
    pyr: &SlidePyramid,
    region: EvalRegion,
) -> Result<ConfusionCounts> {
    let g = gt.layer(gt_layer).ok_or_else(|| Error::UnknownLayer(gt_layer.to_string()))?;
    let p = pred.layer(pred_layer).ok_or_else(|| Error::UnknownLayer(pred_layer.to_string()))?;
    let (w0, h0) = (pyr.width0(), pyr.height0());
    match region {
        EvalRegion::Slide => Ok(layer_confusion(g, p, w0, h0, None)),
        EvalRegion::Tissue => {
            let tissue = detect_tissue(pyr, DEFAULT_THUMB_MAX_DIM, DEFAULT_MIN_COMPONENT_PX)?;
            let boxes = merge_boxes(&tissue_bounds(&tissue, w0, h0), false);
            Ok(layer_confusion(g, p, w0, h0, Some(&boxes)))
        }
    }
}
