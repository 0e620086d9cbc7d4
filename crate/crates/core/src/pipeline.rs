//! Whole-slide segmentation: tissue gating, tiling, per-tile inference,
//! stitching, contour extraction and simplification.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::annotations::{default_color, AnnotationDocument, AnnotationLayer, PolygonElement, Source};
use crate::backend::{Backend, LabelMask};
use crate::components::PixelBox;
use crate::error::{Error, Result};
use crate::fabric::{extract_contours, simplify, StitchAccumulator, DEFAULT_EPSILON_PX, DEFAULT_MIN_AREA_PX};
use crate::planner::{plan_tiles, PlanOptions, TileOrigin, TilePlan, DEFAULT_OVERLAP};
use crate::pyramid::{RegionSpec, SlidePyramid, DEFAULT_TILE_SIZE};
use crate::tissue::{detect_tissue, tissue_bounds, TissueMask, DEFAULT_MIN_COMPONENT_PX, DEFAULT_THUMB_MAX_DIM};

/// Tiles handed to the stitcher at once; bounds the number of tile masks
/// alive at any time.
const BATCH_TILES: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentParams {
    pub tile_size: u32,
    pub overlap: u32,
    pub min_area_px: u64,
    pub epsilon_px: f64,
    pub thumb_max_dim: u32,
    pub min_component_px: u64,
    /// Skip tissue detection and tile the whole slide.
    pub full_grid: bool,
    /// Layer name per foreground class (class 1 first); defaults to the
    /// backend's class names.
    pub layer_names: Option<Vec<String>>,
    /// Worker threads for tile inference; all cores when `None`.
    pub workers: Option<usize>,
}

impl Default for SegmentParams {
    fn default() -> Self {
        SegmentParams {
            tile_size: DEFAULT_TILE_SIZE,
            overlap: DEFAULT_OVERLAP,
            min_area_px: DEFAULT_MIN_AREA_PX,
            epsilon_px: DEFAULT_EPSILON_PX,
            thumb_max_dim: DEFAULT_THUMB_MAX_DIM,
            min_component_px: DEFAULT_MIN_COMPONENT_PX,
            full_grid: false,
            layer_names: None,
            workers: None,
        }
    }
}

impl SegmentParams {
    pub fn validate(&self) -> Result<()> {
        crate::pyramid::check_tile_size(self.tile_size)?;
        if self.overlap >= self.tile_size {
            return Err(Error::InvalidParam(format!(
                "overlap {} must be smaller than tile size {}",
                self.overlap, self.tile_size
            )));
        }
        if !(self.epsilon_px >= 0.0) || !self.epsilon_px.is_finite() {
            return Err(Error::InvalidParam(format!("epsilon {} must be >= 0", self.epsilon_px)));
        }
        if self.thumb_max_dim < 16 {
            return Err(Error::InvalidParam("thumbnail size must be >= 16".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::InvalidParam("workers must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub slide_pixels: u64,
    pub analyzed_pixels: u64,
    pub wall_seconds: f64,
    pub tile_count: u64,
}

impl TimingRecord {
    pub const CSV_HEADER: &'static str = "slide_pixels,analyzed_pixels,wall_seconds,tile_count";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{}",
            self.slide_pixels, self.analyzed_pixels, self.wall_seconds, self.tile_count
        )
    }
}

#[derive(Debug, Clone)]
pub struct SegmentOutput {
    /// One layer per foreground class, in class order; may be empty.
    pub layers: Vec<AnnotationLayer>,
    pub timing: TimingRecord,
    pub plan: TilePlan,
    pub tissue: Option<TissueMask>,
    /// Hole rings and contours lost to simplification.
    pub dropped_rings: usize,
}

impl SegmentOutput {
    /// Document holding the non-empty predicted layers.
    pub fn to_document(&self, slide_id: &str) -> AnnotationDocument {
        let mut doc = AnnotationDocument::new(slide_id);
        doc.layers = self.layers.iter().filter(|l| !l.elements.is_empty()).cloned().collect();
        doc
    }
}

/// Groups tiles whose footprints touch or overlap into disjoint work regions,
/// each the bounding box of its tiles. Regions come back in raster order.
fn work_regions(plan: &TilePlan) -> Vec<(PixelBox, Vec<TileOrigin>)> {
    let n = plan.tiles.len();
    let fps: Vec<PixelBox> = plan.tiles.iter().map(|&t| plan.footprint(t)).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut a: usize) -> usize {
        while p[a] != a {
            p[a] = p[p[a]];
            a = p[a];
        }
        a
    }
    // tiles are sorted by (y, x): only later tiles starting above our bottom
    // edge can touch
    for i in 0..n {
        for j in i + 1..n {
            if fps[j].y0 > fps[i].y1 {
                break;
            }
            if fps[i].touches(&fps[j]) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<(PixelBox, Vec<usize>)> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push((fps[i], Vec::new()));
        }
        let g = &mut groups[slot[r]];
        g.0 = g.0.union(&fps[i]);
        g.1.push(i);
    }
    // bounding boxes of separate groups may still meet; fuse until disjoint
    loop {
        let mut fused = false;
        'outer: for a in 0..groups.len() {
            for b in a + 1..groups.len() {
                if groups[a].0.touches(&groups[b].0) {
                    let (bb, mut members) = groups.swap_remove(b);
                    groups[a].0 = groups[a].0.union(&bb);
                    groups[a].1.append(&mut members);
                    fused = true;
                    break 'outer;
                }
            }
        }
        if !fused {
            break;
        }
    }
    groups.sort_by_key(|g| (g.0.y0, g.0.x0));
    groups
        .into_iter()
        .map(|(b, mut idx)| {
            idx.sort_unstable();
            (b, idx.into_iter().map(|i| plan.tiles[i]).collect())
        })
        .collect()
}

fn infer(pyr: &SlidePyramid, backend: &Backend, plan: &TilePlan, t: TileOrigin) -> Result<((u32, u32), LabelMask)> {
    let fp = plan.footprint(t);
    let tile = pyr.read_region(RegionSpec::new(0, fp.x0, fp.y0, fp.width(), fp.height()))?;
    let mask = backend.infer_tile(&tile, (t.x, t.y))?;
    if (mask.width, mask.height) != (fp.width(), fp.height()) {
        return Err(Error::BackendTile {
            x: t.x,
            y: t.y,
            reason: format!("mask is {}x{}, tile is {}x{}", mask.width, mask.height, fp.width(), fp.height()),
        });
    }
    if mask.classes != backend.classes() {
        return Err(Error::ClassMismatch {
            expected: backend.classes(),
            got: mask.classes,
        });
    }
    Ok(((t.x, t.y), mask))
}

/// Segments a slide. `progress(done, total)` is called after every tile.
pub fn segment_slide(
    pyr: &SlidePyramid,
    backend: &Backend,
    class_names: &[String],
    params: &SegmentParams,
    progress: &(dyn Fn(usize, usize) + Sync),
) -> Result<SegmentOutput> {
    params.validate()?;
    let classes = backend.classes();
    let names: Vec<String> = match &params.layer_names {
        Some(n) => n.clone(),
        None => class_names.iter().skip(1).cloned().collect(),
    };
    if names.len() + 1 < classes as usize {
        return Err(Error::InvalidParam(format!(
            "{} layer names for {} foreground classes",
            names.len(),
            classes - 1
        )));
    }
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(w) = params.workers {
            b = b.num_threads(w);
        }
        b.build()
            .map_err(|e| Error::InvalidParam(format!("worker pool: {e}")))?
    };
    pool.install(|| run(pyr, backend, &names, params, progress))
}

fn run(
    pyr: &SlidePyramid,
    backend: &Backend,
    names: &[String],
    params: &SegmentParams,
    progress: &(dyn Fn(usize, usize) + Sync),
) -> Result<SegmentOutput> {
    let start = Instant::now();
    let (w0, h0) = (pyr.width0(), pyr.height0());
    let classes = backend.classes();
    let opts = PlanOptions {
        tile_size: params.tile_size,
        overlap: params.overlap,
        pad_small: true,
    };
    let (plan, tissue) = if params.full_grid {
        let whole = [PixelBox { x0: 0, y0: 0, x1: w0, y1: h0 }];
        (plan_tiles(pyr.slide_id(), &whole, w0, h0, opts, None)?, None)
    } else {
        let tissue = detect_tissue(pyr, params.thumb_max_dim, params.min_component_px)?;
        let bounds = tissue_bounds(&tissue, w0, h0);
        (plan_tiles(pyr.slide_id(), &bounds, w0, h0, opts, Some(&tissue))?, Some(tissue))
    };
    let total = plan.tiles.len();
    info!(slide = pyr.slide_id(), tiles = total, analyzed = plan.analyzed_pixels, "segmenting");
    progress(0, total);
    let done = AtomicUsize::new(0);

    let mut layers: Vec<AnnotationLayer> = (1..classes)
        .map(|c| AnnotationLayer::new(names[c as usize - 1].clone(), c, default_color(c)))
        .collect();
    let mut next_id = 1u64;
    let mut dropped = 0usize;
    for (bounds, tiles) in work_regions(&plan) {
        debug!(?bounds, tiles = tiles.len(), "work region");
        let mut acc = StitchAccumulator::new(bounds, classes);
        for batch in tiles.chunks(BATCH_TILES) {
            let masks: Vec<((u32, u32), LabelMask)> = batch
                .par_iter()
                .map(|&t| {
                    let r = infer(pyr, backend, &plan, t);
                    progress(done.fetch_add(1, Ordering::Relaxed) + 1, total);
                    r
                })
                .collect::<Result<_>>()?;
            acc.add_batch(&masks)?;
        }
        let region = acc.finish();
        for c in 1..classes {
            let contours = extract_contours(&region, c, params.min_area_px);
            let simplified: Vec<_> = contours
                .par_iter()
                .map(|k| simplify(k, params.epsilon_px))
                .collect::<Result<_>>()?;
            let layer = &mut layers[c as usize - 1];
            for s in simplified {
                dropped += s.dropped_holes;
                let Some(k) = s.contour else {
                    dropped += 1;
                    continue;
                };
                layer.elements.push(PolygonElement::new(format!("e{next_id}"), k.exterior, k.holes, Source::Predicted));
                next_id += 1;
            }
        }
    }
    let timing = TimingRecord {
        slide_pixels: w0 as u64 * h0 as u64,
        analyzed_pixels: plan.analyzed_pixels,
        wall_seconds: start.elapsed().as_secs_f64(),
        tile_count: total as u64,
    };
    Ok(SegmentOutput {
        layers,
        timing,
        plan,
        tissue,
        dropped_rings: dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::rasterize;
    use crate::backend::BackendConfig;
    use crate::pyramid::build_pyramid_from_image;
    use image::{Rgb, RgbImage};

    fn builtin() -> (Backend, Vec<String>) {
        let cfg = BackendConfig::default();
        (Backend::from_config(&cfg).unwrap(), cfg.class_names.clone())
    }

    fn noop(_: usize, _: usize) {}

    #[test]
    fn white_slide_is_empty() {
        let tmp = tempfile::tempdir().unwrap();
        let img = RgbImage::from_pixel(1024, 768, Rgb([255, 255, 255]));
        let p = build_pyramid_from_image(&img, &tmp.path().join("w"), 512, None).unwrap();
        let (b, names) = builtin();
        let out = segment_slide(&p, &b, &names, &SegmentParams::default(), &noop).unwrap();
        assert_eq!(out.timing.analyzed_pixels, 0);
        assert_eq!(out.timing.tile_count, 0);
        assert!(out.to_document("w").layers.is_empty());
    }

    #[test]
    fn squares_across_tiles_are_exact() {
        // dark squares on pink tissue, one straddling four tiles
        let tmp = tempfile::tempdir().unwrap();
        let mut img = RgbImage::from_pixel(1500, 1200, Rgb([245, 245, 245]));
        for y in 100..1100 {
            for x in 100..1400 {
                img.put_pixel(x, y, Rgb([215, 150, 190]));
            }
        }
        let squares = [(400u32, 380u32, 260u32), (900, 700, 100)];
        for &(sx, sy, s) in &squares {
            for y in sy..sy + s {
                for x in sx..sx + s {
                    img.put_pixel(x, y, Rgb([120, 40, 130]));
                }
            }
        }
        let p = build_pyramid_from_image(&img, &tmp.path().join("sq"), 256, None).unwrap();
        let (b, names) = builtin();
        let params = SegmentParams {
            tile_size: 256,
            overlap: 32,
            ..Default::default()
        };
        let calls = AtomicUsize::new(0);
        let out = segment_slide(&p, &b, &names, &params, &|_, _| {
            calls.fetch_add(1, Ordering::Relaxed);
        })
        .unwrap();
        assert_eq!(calls.load(Ordering::Relaxed), out.plan.tiles.len() + 1);
        let doc = out.to_document("sq");
        assert_eq!(doc.layers.len(), 1);
        assert_eq!(doc.layers[0].name, "glomerulus");
        assert_eq!(doc.layers[0].elements.len(), 2);
        let mask = rasterize(&doc, p.meta(), 0, None).unwrap();
        for y in 0..1200 {
            for x in 0..1500 {
                let inside = squares.iter().any(|&(sx, sy, s)| x >= sx && x < sx + s && y >= sy && y < sy + s);
                assert_eq!(mask.get(x, y) == 1, inside, "({x}, {y})");
            }
        }
        assert!(out.timing.analyzed_pixels <= out.timing.slide_pixels);
        assert!(out.timing.wall_seconds > 0.0);

        let full = segment_slide(&p, &b, &names, &SegmentParams { full_grid: true, ..params }, &noop).unwrap();
        assert_eq!(full.to_document("sq").geometry_key(), doc.geometry_key());
        assert_eq!(full.timing.analyzed_pixels, full.timing.slide_pixels);
        assert!(full.timing.tile_count >= out.timing.tile_count);
    }

    #[test]
    fn bad_params_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let img = RgbImage::from_pixel(300, 300, Rgb([255, 255, 255]));
        let p = build_pyramid_from_image(&img, &tmp.path().join("w"), 256, None).unwrap();
        let (b, names) = builtin();
        for bad in [
            SegmentParams { overlap: 512, ..Default::default() },
            SegmentParams { epsilon_px: -1.0, ..Default::default() },
            SegmentParams { tile_size: 300, ..Default::default() },
            SegmentParams { workers: Some(0), ..Default::default() },
        ] {
            assert!(matches!(segment_slide(&p, &b, &names, &bad, &noop), Err(Error::InvalidParam(_) | Error::InvalidTileSize(_))));
        }
    }

    #[test]
    fn timing_csv_row() {
        let t = TimingRecord {
            slide_pixels: 100,
            analyzed_pixels: 40,
            wall_seconds: 1.5,
            tile_count: 3,
        };
        assert_eq!(t.csv_row(), "100,40,1.500000,3");
    }
}
