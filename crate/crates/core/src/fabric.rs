//! Stitching per-tile masks into slide space and turning class regions into
//! polygon contours.
//!
//! Contours live on the pixel-corner lattice: a pixel `(x, y)` is the unit
//! square `[x, x+1] x [y, y+1]`. Exteriors have positive shoelace area in
//! image coordinates, holes negative. Components are 8-connected, holes
//! 4-connected, so rasterizing a contour (pixel centers, even-odd) gives back
//! exactly the component's pixels.

use rayon::prelude::*;
use tracing::warn;

use crate::backend::LabelMask;
use crate::components::{components_8, Component, PixelBox};
use crate::error::{Error, Result};
use crate::geometry::{signed_area2, Point};

pub const DEFAULT_MIN_AREA_PX: u64 = 400;
pub const DEFAULT_EPSILON_PX: f64 = 2.0;

const BAND_ROWS: usize = 64;

/// Labels assembled from overlapping tiles over a level-0 rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct StitchedRegion {
    pub origin: (u32, u32),
    pub width: u32,
    pub height: u32,
    pub classes: u8,
    pub labels: Vec<u8>,
    /// Winning confidence per pixel; present only when some tile carried
    /// confidences. Pixels no tile covered hold -1.
    pub votes: Option<Vec<f32>>,
}

impl StitchedRegion {
    pub fn bounds(&self) -> PixelBox {
        PixelBox {
            x0: self.origin.0,
            y0: self.origin.1,
            x1: self.origin.0 + self.width,
            y1: self.origin.1 + self.height,
        }
    }

    pub fn count(&self, class_id: u8) -> u64 {
        self.labels.iter().filter(|&&l| l == class_id).count() as u64
    }
}

/// Candidate ordering: higher confidence, then foreground over background,
/// then lower class id. A total order, so the result does not depend on the
/// order tiles arrive in.
#[inline]
fn beats(conf: f32, label: u8, best_conf: f32, best_label: u8) -> bool {
    if conf != best_conf {
        return conf > best_conf;
    }
    match (label == 0, best_label == 0) {
        (false, true) => true,
        (true, false) => false,
        _ => label < best_label,
    }
}

/// Order-independent accumulator for tile masks.
pub struct StitchAccumulator {
    region: StitchedRegion,
    /// Footprints added before votes were allocated.
    added: Vec<PixelBox>,
}

impl StitchAccumulator {
    pub fn new(bounds: PixelBox, classes: u8) -> Self {
        StitchAccumulator {
            region: StitchedRegion {
                origin: (bounds.x0, bounds.y0),
                width: bounds.width(),
                height: bounds.height(),
                classes,
                labels: vec![0; bounds.area() as usize],
                votes: None,
            },
            added: Vec::new(),
        }
    }

    fn ensure_votes(&mut self) {
        if self.region.votes.is_some() {
            return;
        }
        let w = self.region.width as usize;
        let mut votes = vec![-1.0f32; self.region.labels.len()];
        for b in &self.added {
            for y in b.y0..b.y1 {
                votes[y as usize * w + b.x0 as usize..y as usize * w + b.x1 as usize].fill(1.0);
            }
        }
        self.region.votes = Some(votes);
    }

    /// Adds a batch of tiles; rows are processed in parallel bands.
    pub fn add_batch(&mut self, tiles: &[((u32, u32), LabelMask)]) -> Result<()> {
        let classes = self.region.classes;
        let bounds = self.region.bounds();
        let mut local = Vec::with_capacity(tiles.len());
        for ((ox, oy), m) in tiles {
            if m.classes != classes {
                return Err(Error::ClassMismatch {
                    expected: classes,
                    got: m.classes,
                });
            }
            let fp = PixelBox {
                x0: *ox,
                y0: *oy,
                x1: ox + m.width,
                y1: oy + m.height,
            };
            if !bounds.contains_box(&fp) {
                return Err(Error::InvalidParam(format!(
                    "tile at ({ox}, {oy}) outside stitched region"
                )));
            }
            local.push(PixelBox {
                x0: fp.x0 - bounds.x0,
                y0: fp.y0 - bounds.y0,
                x1: fp.x1 - bounds.x0,
                y1: fp.y1 - bounds.y0,
            });
        }
        if tiles.iter().any(|(_, m)| m.confidence.is_some()) {
            self.ensure_votes();
        }
        let w = self.region.width as usize;
        let band_len = BAND_ROWS * w;
        let paint_band = |band_idx: usize, labels: &mut [u8], mut votes: Option<&mut [f32]>| {
            let y_start = (band_idx * BAND_ROWS) as u32;
            let y_end = y_start + (labels.len() / w.max(1)) as u32;
            for (k, (_, m)) in tiles.iter().enumerate() {
                let fp = local[k];
                let y0 = fp.y0.max(y_start);
                let y1 = fp.y1.min(y_end);
                for y in y0..y1 {
                    let src =
                        &m.labels[(y - fp.y0) as usize * m.width as usize..][..m.width as usize];
                    let row = (y - y_start) as usize * w + fp.x0 as usize;
                    let dst = &mut labels[row..row + m.width as usize];
                    match votes.as_deref_mut() {
                        None => {
                            for (d, &s) in dst.iter_mut().zip(src) {
                                if beats(1.0, s, 1.0, *d) {
                                    *d = s;
                                }
                            }
                        }
                        Some(v) => {
                            let vrow = &mut v[row..row + m.width as usize];
                            let conf = m.confidence.as_ref().map(|c| {
                                &c[(y - fp.y0) as usize * m.width as usize..][..m.width as usize]
                            });
                            for i in 0..src.len() {
                                let c = conf.map_or(1.0, |c| c[i]);
                                if beats(c, src[i], vrow[i], dst[i]) {
                                    dst[i] = src[i];
                                    vrow[i] = c;
                                }
                            }
                        }
                    }
                }
            }
        };
        match self.region.votes.as_mut() {
            None => self
                .region
                .labels
                .par_chunks_mut(band_len.max(1))
                .enumerate()
                .for_each(|(i, band)| paint_band(i, band, None)),
            Some(votes) => self
                .region
                .labels
                .par_chunks_mut(band_len.max(1))
                .zip(votes.par_chunks_mut(band_len.max(1)))
                .enumerate()
                .for_each(|(i, (band, vb))| paint_band(i, band, Some(vb))),
        }
        if self.region.votes.is_none() {
            self.added.extend(local);
        }
        Ok(())
    }

    pub fn finish(self) -> StitchedRegion {
        self.region
    }
}

/// Stitches tiles (level-0 origin, mask) into the smallest box covering them,
/// or into `bounds` when given.
pub fn stitch(
    tiles: &[((u32, u32), LabelMask)],
    bounds: Option<PixelBox>,
) -> Result<StitchedRegion> {
    let classes = tiles.first().map_or(2, |(_, m)| m.classes);
    let b = match bounds {
        Some(b) => b,
        None => tiles
            .iter()
            .map(|((x, y), m)| PixelBox {
                x0: *x,
                y0: *y,
                x1: x + m.width,
                y1: y + m.height,
            })
            .reduce(|a, b| a.union(&b))
            .unwrap_or(PixelBox {
                x0: 0,
                y0: 0,
                x1: 0,
                y1: 0,
            }),
    };
    let mut acc = StitchAccumulator::new(b, classes);
    acc.add_batch(tiles)?;
    Ok(acc.finish())
}

/// A closed polygon with holes, in level-0 pixel-corner coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Contour {
    pub class_id: u8,
    /// Positive shoelace area; no repeated closing vertex.
    pub exterior: Vec<Point>,
    /// Negative shoelace area each.
    pub holes: Vec<Vec<Point>>,
    /// Pixel count of the traced component.
    pub area_px: u64,
}

const DX: [i64; 4] = [1, 0, -1, 0];
const DY: [i64; 4] = [0, 1, 0, -1];
const NONE: u8 = 4;

/// Directed boundary edges of one component on its local corner lattice.
struct EdgeGraph {
    vw: usize,
    /// Up to two outgoing directions per vertex.
    out: Vec<[u8; 2]>,
    degree: Vec<u8>,
}

impl EdgeGraph {
    fn push(&mut self, vx: usize, vy: usize, dir: u8) {
        let v = vy * self.vw + vx;
        let slot = if self.out[v][0] == NONE { 0 } else { 1 };
        self.out[v][slot] = dir;
        self.degree[v] += 1;
    }

    fn take(&mut self, v: usize, incoming: Option<u8>) -> Option<u8> {
        let o = self.out[v];
        let pick = match (o[0] != NONE, o[1] != NONE) {
            (false, false) => return None,
            (true, false) => 0,
            (false, true) => 1,
            // saddle: turn so that diagonal foreground pixels stay joined
            (true, true) => {
                let Some(inc) = incoming else {
                    return Some(std::mem::replace(&mut self.out[v][0], NONE));
                };
                let want = (inc + 3) % 4;
                if o[0] == want {
                    0
                } else {
                    1
                }
            }
        };
        let d = o[pick];
        self.out[v][pick] = NONE;
        Some(d)
    }
}

fn trace_component(comp: &Component, offset: (i64, i64), class_id: u8) -> Contour {
    let bb = comp.bbox;
    // one pixel of padding on each side
    let lw = bb.width() as usize + 2;
    let lh = bb.height() as usize + 2;
    let mut bitmap = vec![false; lw * lh];
    for run in &comp.runs {
        let row = (run.y - bb.y0 + 1) as usize * lw;
        for x in run.x0..run.x1 {
            bitmap[row + (x - bb.x0 + 1) as usize] = true;
        }
    }
    let vw = lw + 1;
    let mut g = EdgeGraph {
        vw,
        out: vec![[NONE; 2]; vw * (lh + 1)],
        degree: vec![0; vw * (lh + 1)],
    };
    for y in 1..lh - 1 {
        for x in 1..lw - 1 {
            if !bitmap[y * lw + x] {
                continue;
            }
            if !bitmap[(y - 1) * lw + x] {
                g.push(x, y, 0);
            }
            if !bitmap[y * lw + x + 1] {
                g.push(x + 1, y, 1);
            }
            if !bitmap[(y + 1) * lw + x] {
                g.push(x + 1, y + 1, 2);
            }
            if !bitmap[y * lw + x - 1] {
                g.push(x, y + 1, 3);
            }
        }
    }

    let to_world = |vx: i64, vy: i64| {
        Point::new(
            (vx - 1 + bb.x0 as i64 + offset.0) as f64,
            (vy - 1 + bb.y0 as i64 + offset.1) as f64,
        )
    };

    let mut exteriors = Vec::new();
    let mut holes = Vec::new();
    for start in 0..g.out.len() {
        while g.out[start] != [NONE; 2] {
            let saddle_start = g.degree[start] == 2;
            let (sx, sy) = ((start % vw) as i64, (start / vw) as i64);
            let mut corners: Vec<(i64, i64)> = Vec::new();
            let (mut x, mut y) = (sx, sy);
            let mut incoming: Option<u8> = None;
            let mut first_dir: Option<u8> = None;
            loop {
                let v = y as usize * vw + x as usize;
                let Some(d) = g.take(v, incoming) else {
                    break;
                };
                if first_dir.is_none() {
                    first_dir = Some(d);
                }
                if incoming != Some(d) {
                    corners.push((x, y));
                }
                x += DX[d as usize];
                y += DY[d as usize];
                incoming = Some(d);
                // a saddle start closes only when arriving along the edge that
                // would have led into the first step
                if (x, y) == (sx, sy) && (!saddle_start || (d + 3) % 4 == first_dir.unwrap()) {
                    break;
                }
            }
            // the start vertex is a corner only if the ring turns there
            if first_dir == incoming && corners.first() == Some(&(sx, sy)) {
                corners.remove(0);
            }
            let area2: i64 = {
                let n = corners.len();
                (0..n)
                    .map(|i| {
                        let (ax, ay) = corners[i];
                        let (bx, by) = corners[(i + 1) % n];
                        ax * by - bx * ay
                    })
                    .sum()
            };
            // canonical start: smallest (y, x), first occurrence
            let k = (0..corners.len())
                .min_by_key(|&i| (corners[i].1, corners[i].0, i))
                .unwrap_or(0);
            corners.rotate_left(k);
            let ring: Vec<Point> = corners.into_iter().map(|(x, y)| to_world(x, y)).collect();
            if area2 > 0 {
                exteriors.push(ring);
            } else {
                holes.push(ring);
            }
        }
    }
    debug_assert_eq!(
        exteriors.len(),
        1,
        "an 8-connected component has one outer boundary"
    );
    holes.sort_by(|a, b| (a[0].y, a[0].x).partial_cmp(&(b[0].y, b[0].x)).unwrap());
    Contour {
        class_id,
        exterior: exteriors.swap_remove(0),
        holes,
        area_px: comp.area,
    }
}

/// Traces every 8-connected component of `class_id` with at least
/// `min_area_px` pixels. Contours come back in raster order of each
/// component's first pixel.
pub fn extract_contours(region: &StitchedRegion, class_id: u8, min_area_px: u64) -> Vec<Contour> {
    extract_from_labels(
        &region.labels,
        region.width,
        region.height,
        region.origin,
        class_id,
        min_area_px,
    )
}

/// As [`extract_contours`] on a bare row-major label raster.
pub fn extract_from_labels(
    labels: &[u8],
    width: u32,
    height: u32,
    origin: (u32, u32),
    class_id: u8,
    min_area_px: u64,
) -> Vec<Contour> {
    if class_id == 0 {
        return Vec::new();
    }
    let comps: Vec<Component> = components_8(labels, width, height, |v| v == class_id)
        .into_iter()
        .filter(|c| c.area >= min_area_px)
        .collect();
    let offset = (origin.0 as i64, origin.1 as i64);
    comps
        .par_iter()
        .map(|c| trace_component(c, offset, class_id))
        .collect()
}

fn seg_dist(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return ((p.x - a.x).powi(2) + (p.y - a.y).powi(2)).sqrt();
    }
    let t = ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2;
    if t <= 0.0 {
        ((p.x - a.x).powi(2) + (p.y - a.y).powi(2)).sqrt()
    } else if t >= 1.0 {
        ((p.x - b.x).powi(2) + (p.y - b.y).powi(2)).sqrt()
    } else {
        (dx * (p.y - a.y) - dy * (p.x - a.x)).abs() / len2.sqrt()
    }
}

/// Marks vertices of `chain` (by index into `pts`) to keep.
fn douglas_peucker(pts: &[Point], chain: &[usize], eps: f64, keep: &mut [bool]) {
    if chain.len() < 3 {
        return;
    }
    let mut stack = vec![(0usize, chain.len() - 1)];
    while let Some((lo, hi)) = stack.pop() {
        if hi <= lo + 1 {
            continue;
        }
        let (a, b) = (pts[chain[lo]], pts[chain[hi]]);
        let mut best = (lo, -1.0f64);
        for k in lo + 1..hi {
            let d = seg_dist(pts[chain[k]], a, b);
            if d > best.1 {
                best = (k, d);
            }
        }
        if best.1 > eps {
            keep[chain[best.0]] = true;
            stack.push((lo, best.0));
            stack.push((best.0, hi));
        }
    }
}

fn convex_hull_indices(pts: &[Point]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    idx.sort_by(|&a, &b| {
        (pts[a].x, pts[a].y, a)
            .partial_cmp(&(pts[b].x, pts[b].y, b))
            .unwrap()
    });
    let cross =
        |o: Point, a: Point, b: Point| (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
    let mut hull: Vec<usize> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &usize>> = if pass == 0 {
            Box::new(idx.iter())
        } else {
            Box::new(idx.iter().rev())
        };
        for &i in iter {
            while hull.len() >= start + 2
                && cross(pts[hull[hull.len() - 2]], pts[hull[hull.len() - 1]], pts[i]) <= 0.0
            {
                hull.pop();
            }
            hull.push(i);
        }
        hull.pop();
    }
    hull
}

/// Indices (i < j) of the two farthest-apart vertices; ties go to the
/// smallest pair.
fn farthest_pair(ring: &[Point]) -> (usize, usize) {
    let hull = convex_hull_indices(ring);
    let candidates = if hull.len() >= 2 {
        hull
    } else {
        (0..ring.len()).collect()
    };
    let mut best = (0usize, 1usize, -1.0f64);
    for a in 0..candidates.len() {
        for b in a + 1..candidates.len() {
            let (i, j) = {
                let (p, q) = (candidates[a], candidates[b]);
                (p.min(q), p.max(q))
            };
            let d = (ring[i].x - ring[j].x).powi(2) + (ring[i].y - ring[j].y).powi(2);
            if d > best.2 || (d == best.2 && (i, j) < (best.0, best.1)) {
                best = (i, j, d);
            }
        }
    }
    (best.0, best.1)
}

/// Douglas-Peucker on a closed ring anchored at its two farthest vertices.
/// Returns `None` when fewer than three vertices or no area would remain.
pub fn simplify_ring(ring: &[Point], epsilon: f64) -> Option<Vec<Point>> {
    let n = ring.len();
    if n < 3 {
        return None;
    }
    let (i, j) = farthest_pair(ring);
    let mut keep = vec![false; n];
    keep[i] = true;
    keep[j] = true;
    let chain_a: Vec<usize> = (i..=j).collect();
    let chain_b: Vec<usize> = (j..n).chain(0..=i).collect();
    douglas_peucker(ring, &chain_a, epsilon, &mut keep);
    douglas_peucker(ring, &chain_b, epsilon, &mut keep);
    let out: Vec<Point> = ring
        .iter()
        .zip(&keep)
        .filter_map(|(p, &k)| k.then_some(*p))
        .collect();
    if out.len() < 3 || signed_area2(&out) == 0.0 {
        return None;
    }
    Some(out)
}

/// Simplified contour plus the number of hole rings that collapsed.
#[derive(Debug, Clone, PartialEq)]
pub struct Simplified {
    pub contour: Option<Contour>,
    pub dropped_holes: usize,
}

/// Simplifies every ring of a contour with tolerance `epsilon_px`.
///
/// A hole that degenerates (or flips orientation) is dropped; a degenerate
/// exterior drops the whole contour.
pub fn simplify(c: &Contour, epsilon_px: f64) -> Result<Simplified> {
    if !(epsilon_px >= 0.0) {
        return Err(Error::InvalidParam(format!(
            "epsilon {epsilon_px} must be >= 0"
        )));
    }
    let Some(exterior) = simplify_ring(&c.exterior, epsilon_px).filter(|r| signed_area2(r) > 0.0)
    else {
        warn!(
            class_id = c.class_id,
            area_px = c.area_px,
            "contour degenerated during simplification; dropped"
        );
        return Ok(Simplified {
            contour: None,
            dropped_holes: c.holes.len(),
        });
    };
    let mut holes = Vec::with_capacity(c.holes.len());
    let mut dropped = 0;
    for h in &c.holes {
        match simplify_ring(h, epsilon_px).filter(|r| signed_area2(r) < 0.0) {
            Some(r) => holes.push(r),
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        warn!(
            class_id = c.class_id,
            dropped, "hole rings degenerated during simplification; dropped"
        );
    }
    Ok(Simplified {
        contour: Some(Contour {
            class_id: c.class_id,
            exterior,
            holes,
            area_px: c.area_px,
        }),
        dropped_holes: dropped,
    })
}
