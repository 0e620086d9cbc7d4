//! Deterministic synthetic slides: a pale tissue ellipse on a near-white
//! background, dotted with dark elliptical objects whose outlines are known
//! exactly.

use std::f64::consts::PI;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{default_color, AnnotationDocument, AnnotationLayer, PolygonElement, Source};
use crate::components::PixelBox;
use crate::error::{Error, Result};
use crate::geometry::{bounds, fill_polygon, round2, signed_area2, Point};
use crate::pyramid::{build_pyramid_with, SlidePyramid};

pub const BACKGROUND: [u8; 3] = [245, 245, 245];
pub const TISSUE: [u8; 3] = [215, 150, 190];
pub const OBJECT: [u8; 3] = [120, 40, 130];
pub const OBJECT_LAYER: &str = "glomerulus";

const BLOB_VERTICES: usize = 128;
const BLOB_GAP: f64 = 24.0;
const PLACEMENT_ATTEMPTS: usize = 2_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub width: u32,
    pub height: u32,
    pub blobs: usize,
    pub seed: u64,
    /// Share of the slide covered by the tissue ellipse, in `[0, 0.75]`.
    pub tissue_fraction: f64,
    /// Object radius range at 4096 px; scaled down for smaller slides.
    pub radius: [f64; 2],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            width: 4096,
            height: 4096,
            blobs: 25,
            seed: 7,
            tissue_fraction: 0.5,
            radius: [120.0, 220.0],
        }
    }
}

#[derive(Debug, Clone)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        if self.a <= 0.0 || self.b <= 0.0 {
            return false;
        }
        let (dx, dy) = ((x - self.cx) / self.a, (y - self.cy) / self.b);
        dx * dx + dy * dy <= 1.0
    }
}

#[derive(Debug, Clone)]
struct Blob {
    ring: Vec<Point>,
    bbox: PixelBox,
}

#[derive(Debug, Clone)]
pub struct SyntheticSlide {
    pub spec: SyntheticSpec,
    tissue: Ellipse,
    blobs: Vec<Blob>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn jitter(base: [u8; 3], amp: i32, h: u64) -> Rgb<u8> {
    let span = (2 * amp + 1) as u64;
    let mut px = [0u8; 3];
    for c in 0..3 {
        let n = ((h >> (c * 16)) % span) as i32 - amp;
        px[c] = (base[c] as i32 + n).clamp(0, 255) as u8;
    }
    Rgb(px)
}

impl SyntheticSlide {
    pub fn generate(spec: SyntheticSpec) -> Result<Self> {
        if spec.width == 0 || spec.height == 0 {
            return Err(Error::ZeroDimension);
        }
        if !(0.0..=0.75).contains(&spec.tissue_fraction) {
            return Err(Error::InvalidParam(format!(
                "tissue fraction {} must be in [0, 0.75]",
                spec.tissue_fraction
            )));
        }
        let [rlo, rhi] = spec.radius;
        if !(rlo > 0.0 && rhi >= rlo && rhi.is_finite()) {
            return Err(Error::InvalidParam(format!("bad radius range [{rlo}, {rhi}]")));
        }
        let (w, h) = (spec.width as f64, spec.height as f64);
        let s = (4.0 * spec.tissue_fraction / PI).sqrt();
        let tissue = Ellipse {
            cx: w / 2.0,
            cy: h / 2.0,
            a: w / 2.0 * s,
            b: h / 2.0 * s,
        };
        let scale = (w.min(h) / 4096.0).min(1.0);
        let (rlo, rhi) = ((rlo * scale).max(8.0), (rhi * scale).max(8.0));
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut placed: Vec<(f64, f64, f64)> = Vec::with_capacity(spec.blobs);
        let mut blobs = Vec::with_capacity(spec.blobs);
        let mut attempts = 0;
        while blobs.len() < spec.blobs {
            attempts += 1;
            if attempts > PLACEMENT_ATTEMPTS * spec.blobs.max(1) {
                return Err(Error::InvalidParam(format!(
                    "could only place {} of {} objects in the tissue",
                    blobs.len(),
                    spec.blobs
                )));
            }
            let r = rng.gen_range(rlo..=rhi);
            let margin = r + BLOB_GAP;
            let inner = Ellipse {
                a: tissue.a - margin,
                b: tissue.b - margin,
                ..tissue
            };
            if inner.a <= 0.0 || inner.b <= 0.0 {
                continue;
            }
            let cx = rng.gen_range(tissue.cx - inner.a..=tissue.cx + inner.a);
            let cy = rng.gen_range(tissue.cy - inner.b..=tissue.cy + inner.b);
            if !inner.contains(cx, cy) {
                continue;
            }
            if placed
                .iter()
                .any(|&(px, py, pr)| (px - cx).hypot(py - cy) < pr + r + BLOB_GAP)
            {
                continue;
            }
            let ry = rng.gen_range(0.8 * r..=r);
            let rot = rng.gen_range(0.0..PI);
            let (sin, cos) = rot.sin_cos();
            let mut ring: Vec<Point> = (0..BLOB_VERTICES)
                .map(|k| {
                    let t = 2.0 * PI * k as f64 / BLOB_VERTICES as f64;
                    let (ex, ey) = (r * t.cos(), ry * t.sin());
                    Point::new(round2(cx + ex * cos - ey * sin), round2(cy + ex * sin + ey * cos))
                })
                .collect();
            if signed_area2(&ring) < 0.0 {
                ring.reverse();
            }
            let (lo, hi) = bounds(&ring).expect("non-empty ring");
            let bbox = PixelBox {
                x0: lo.x.floor().max(0.0) as u32,
                y0: lo.y.floor().max(0.0) as u32,
                x1: (hi.x.ceil() as u32 + 1).min(spec.width),
                y1: (hi.y.ceil() as u32 + 1).min(spec.height),
            };
            placed.push((cx, cy, r));
            blobs.push(Blob { ring, bbox });
        }
        Ok(SyntheticSlide { spec, tissue, blobs })
    }

    /// Ground-truth annotations: one layer, class 1, one element per object.
    pub fn truth(&self, slide_id: &str) -> AnnotationDocument {
        let mut doc = AnnotationDocument::new(slide_id);
        let mut layer = AnnotationLayer::new(OBJECT_LAYER, 1, default_color(1));
        layer.elements = self
            .blobs
            .iter()
            .enumerate()
            .map(|(i, b)| PolygonElement::new(format!("e{}", i + 1), b.ring.clone(), Vec::new(), Source::Imported))
            .collect();
        doc.layers.push(layer);
        doc
    }

    pub fn object_count(&self) -> usize {
        self.blobs.len()
    }

    /// Renders the level-0 window at `(x, y)` of size `w x h`.
    pub fn render_tile(&self, x: u32, y: u32, w: u32, h: u32) -> RgbImage {
        let seed = splitmix(self.spec.seed);
        let mut img = RgbImage::new(w, h);
        for j in 0..h {
            for i in 0..w {
                let (gx, gy) = (x + i, y + j);
                let hash = splitmix(seed ^ ((gy as u64) << 32 | gx as u64));
                let px = if self.tissue.contains(gx as f64 + 0.5, gy as f64 + 0.5) {
                    jitter(TISSUE, 4, hash)
                } else {
                    jitter(BACKGROUND, 3, hash)
                };
                img.put_pixel(i, j, px);
            }
        }
        let window = PixelBox { x0: x, y0: y, x1: x + w, y1: y + h };
        for b in self.blobs.iter().filter(|b| b.bbox.intersects(&window)) {
            fill_polygon(&[b.ring.as_slice()], 1.0, window, |py, x0, x1| {
                for px in x0..x1 {
                    let hash = splitmix(seed.rotate_left(17) ^ ((py as u64) << 32 | px as u64));
                    img.put_pixel(px - x, py - y, jitter(OBJECT, 12, hash));
                }
            });
        }
        img
    }

    pub fn render(&self) -> RgbImage {
        self.render_tile(0, 0, self.spec.width, self.spec.height)
    }

    /// Writes the slide straight into a pyramid, one tile at a time.
    pub fn build_pyramid(&self, out_dir: &Path, tile_size: u32) -> Result<SlidePyramid> {
        build_pyramid_with(out_dir, self.spec.width, self.spec.height, tile_size, None, |x, y, w, h| {
            self.render_tile(x, y, w, h)
        })
    }
}
