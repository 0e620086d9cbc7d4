//! Level-0 patch windows covering the tissue region.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::components::PixelBox;
use crate::error::{Error, Result};
use crate::tissue::TissueMask;

pub const DEFAULT_OVERLAP: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanOptions {
    pub tile_size: u32,
    pub overlap: u32,
    /// Allow slides smaller than a tile; such tiles are clipped at the edge.
    pub pad_small: bool,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            tile_size: crate::pyramid::DEFAULT_TILE_SIZE,
            overlap: DEFAULT_OVERLAP,
            pad_small: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileOrigin {
    pub x: u32,
    pub y: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub slide_id: String,
    pub tile_size: u32,
    pub overlap: u32,
    pub width0: u32,
    pub height0: u32,
    /// Row-major by (y, x), no duplicates.
    pub tiles: Vec<TileOrigin>,
    /// Total area of the merged tissue boxes.
    pub analyzed_pixels: u64,
    /// Merged, pairwise disjoint tissue boxes the plan was built from.
    pub boxes: Vec<PixelBox>,
}

#[derive(Serialize)]
struct PlanLine<'a> {
    slide_id: &'a str,
    x: u32,
    y: u32,
    w: u32,
    h: u32,
}

impl TilePlan {
    /// Footprint of a tile, clipped to the slide.
    pub fn footprint(&self, t: TileOrigin) -> PixelBox {
        PixelBox {
            x0: t.x,
            y0: t.y,
            x1: (t.x + self.tile_size).min(self.width0),
            y1: (t.y + self.tile_size).min(self.height0),
        }
    }

    /// One JSON object per tile, newline separated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for &t in &self.tiles {
            let f = self.footprint(t);
            let line = PlanLine {
                slide_id: &self.slide_id,
                x: t.x,
                y: t.y,
                w: f.width(),
                h: f.height(),
            };
            out.push_str(&serde_json::to_string(&line).expect("plan line serializes"));
            out.push('\n');
        }
        out
    }
}

/// Merges boxes until no two intersect (or touch, when `merge_touching`).
/// Result is sorted.
pub fn merge_boxes(boxes: &[PixelBox], merge_touching: bool) -> Vec<PixelBox> {
    let mut out: Vec<PixelBox> = boxes.iter().copied().filter(|b| b.area() > 0).collect();
    loop {
        let mut merged = false;
        'outer: for i in 0..out.len() {
            for j in i + 1..out.len() {
                let hit = if merge_touching {
                    out[i].touches(&out[j])
                } else {
                    out[i].intersects(&out[j])
                };
                if hit {
                    let u = out[i].union(&out[j]);
                    out.swap_remove(j);
                    out[i] = u;
                    merged = true;
                    break 'outer;
                }
            }
        }
        if !merged {
            break;
        }
    }
    out.sort();
    out
}

fn axis_origins(start: u32, end: u32, tile: u32, stride: u32, extent: u32) -> Vec<u32> {
    let limit = extent.saturating_sub(tile);
    let mut v = Vec::new();
    let mut x = start;
    loop {
        v.push(x.min(limit));
        if x + tile >= end {
            break;
        }
        x += stride;
    }
    v
}

/// Plans tiles inside the given level-0 boxes.
///
/// Within each merged box, origins step by `tile_size - overlap` from the box
/// origin; tiles crossing the slide edge are pulled back to end at it. Tiles
/// whose footprint holds no tissue in `gate` are dropped.
pub fn plan_tiles(
    slide_id: &str,
    bounds: &[PixelBox],
    width0: u32,
    height0: u32,
    opts: PlanOptions,
    gate: Option<&TissueMask>,
) -> Result<TilePlan> {
    let PlanOptions {
        tile_size,
        overlap,
        pad_small,
    } = opts;
    if tile_size == 0 || overlap >= tile_size {
        return Err(Error::InvalidParam(format!(
            "overlap {overlap} must be smaller than tile size {tile_size}"
        )));
    }
    if (width0 < tile_size || height0 < tile_size) && !pad_small {
        return Err(Error::SlideSmallerThanTile {
            width: width0,
            height: height0,
            tile_size,
        });
    }
    let stride = tile_size - overlap;
    let clipped: Vec<PixelBox> = bounds
        .iter()
        .map(|b| PixelBox {
            x0: b.x0.min(width0),
            y0: b.y0.min(height0),
            x1: b.x1.min(width0),
            y1: b.y1.min(height0),
        })
        .collect();
    let boxes = merge_boxes(&clipped, false);
    let analyzed_pixels = boxes.iter().map(|b| b.area()).sum();

    let mut origins = BTreeSet::new();
    for b in &boxes {
        let xs = axis_origins(b.x0, b.x1, tile_size, stride, width0);
        let ys = axis_origins(b.y0, b.y1, tile_size, stride, height0);
        for &y in &ys {
            for &x in &xs {
                // BTreeSet ordering on (y, x) gives row-major order
                origins.insert((y, x));
            }
        }
    }
    let mut plan = TilePlan {
        slide_id: slide_id.to_string(),
        tile_size,
        overlap,
        width0,
        height0,
        tiles: Vec::with_capacity(origins.len()),
        analyzed_pixels,
        boxes,
    };
    for (y, x) in origins {
        let t = TileOrigin { x, y };
        if let Some(g) = gate {
            if !g.any_in_level0_box(&plan.footprint(t)) {
                continue;
            }
        }
        plan.tiles.push(t);
    }
    Ok(plan)
}
