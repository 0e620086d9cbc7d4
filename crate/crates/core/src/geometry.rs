//! Planar polygon helpers in level-0 pixel-corner coordinates.

use serde::{Deserialize, Serialize};

use crate::components::PixelBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    /// Rounded to two decimals, the serialization precision.
    pub fn rounded(self) -> Self {
        Point {
            x: round2(self.x),
            y: round2(self.y),
        }
    }
}

impl From<[f64; 2]> for Point {
    fn from(a: [f64; 2]) -> Self {
        Point { x: a[0], y: a[1] }
    }
}

/// Serialized coordinates carry at most two decimals.
impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [round2(p.x), round2(p.y)]
    }
}

pub fn round2(v: f64) -> f64 {
    let r = (v * 100.0).round() / 100.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Twice the signed shoelace area. Positive for the exterior orientation
/// used throughout (x right, y down: clockwise on screen).
pub fn signed_area2(ring: &[Point]) -> f64 {
    let n = ring.len();
    let mut s = 0.0;
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        s += a.x * b.y - b.x * a.y;
    }
    s
}

/// Even-odd containment test.
pub fn point_in_ring(p: Point, ring: &[Point]) -> bool {
    let n = ring.len();
    let mut inside = false;
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (a, b) = (ring[i], ring[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed segments intersect (including touching and collinear overlap).
pub fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// True when no two non-adjacent edges of the closed ring meet and no
/// vertex repeats.
pub fn ring_is_simple(ring: &[Point]) -> bool {
    let n = ring.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        for j in i + 1..n {
            if ring[i] == ring[j] {
                return false;
            }
        }
    }
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            let (c, d) = (ring[j], ring[(j + 1) % n]);
            if adjacent {
                // adjacent edges may only share their common vertex
                let shared = if j == i + 1 { b } else { a };
                let (other_a, other_b) = if j == i + 1 { (a, d) } else { (b, c) };
                if orient(other_a, shared, other_b) == 0.0 {
                    // collinear: folding back onto itself
                    let dot = (other_a.x - shared.x) * (other_b.x - shared.x)
                        + (other_a.y - shared.y) * (other_b.y - shared.y);
                    if dot > 0.0 {
                        return false;
                    }
                }
                continue;
            }
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// Axis-aligned bounds of a set of points, as (min, max).
pub fn bounds(points: &[Point]) -> Option<(Point, Point)> {
    let first = *points.first()?;
    let (mut lo, mut hi) = (first, first);
    for p in points {
        lo.x = lo.x.min(p.x);
        lo.y = lo.y.min(p.y);
        hi.x = hi.x.max(p.x);
        hi.y = hi.y.max(p.y);
    }
    Some((lo, hi))
}

/// Scan-converts a polygon made of closed rings with the even-odd rule.
///
/// Coordinates are multiplied by `scale` first (use `1 / 2^level` to target a
/// pyramid level). A pixel `(x, y)` is inside when its center
/// `(x + 0.5, y + 0.5)` is; centers lying exactly on a left edge count as
/// inside. `span(y, x0, x1)` receives inside runs clipped to `window`.
pub fn fill_polygon<F: FnMut(u32, u32, u32)>(
    rings: &[&[Point]],
    scale: f64,
    window: PixelBox,
    mut span: F,
) {
    let mut edges: Vec<(f64, f64, f64, f64)> = Vec::new();
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for ring in rings {
        let n = ring.len();
        if n < 3 {
            continue;
        }
        for i in 0..n {
            let a = ring[i];
            let b = ring[(i + 1) % n];
            let (ax, ay, bx, by) = (a.x * scale, a.y * scale, b.x * scale, b.y * scale);
            if ay != by {
                edges.push((ax, ay, bx, by));
                ymin = ymin.min(ay.min(by));
                ymax = ymax.max(ay.max(by));
            }
        }
    }
    if edges.is_empty() || window.width() == 0 || window.height() == 0 {
        return;
    }
    // rows whose centers fall inside [ymin, ymax)
    let row_lo = ((ymin - 0.5).ceil().max(window.y0 as f64)) as i64;
    let row_hi = ((ymax - 0.5).ceil().min(window.y1 as f64)) as i64;
    if row_lo >= row_hi {
        return;
    }
    let nrows = (row_hi - row_lo) as usize;
    let mut crossings: Vec<Vec<f64>> = vec![Vec::new(); nrows];
    for &(ax, ay, bx, by) in &edges {
        let (lo, hi) = if ay < by { (ay, by) } else { (by, ay) };
        // centers yc with lo <= yc < hi
        let r0 = ((lo - 0.5).ceil() as i64).max(row_lo);
        let r1 = ((hi - 0.5).ceil() as i64).min(row_hi);
        for r in r0..r1 {
            let yc = r as f64 + 0.5;
            let x = ax + (yc - ay) * (bx - ax) / (by - ay);
            crossings[(r - row_lo) as usize].push(x);
        }
    }
    for (k, xs) in crossings.iter_mut().enumerate() {
        if xs.len() < 2 {
            continue;
        }
        xs.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
        let y = (row_lo + k as i64) as u32;
        for pair in xs.chunks_exact(2) {
            // pixels with xa <= x + 0.5 < xb
            let x0 = ((pair[0] - 0.5).ceil().max(window.x0 as f64)) as i64;
            let x1 = ((pair[1] - 0.5).ceil().min(window.x1 as f64)) as i64;
            if x0 < x1 {
                span(y, x0 as u32, x1 as u32);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64)]) -> Vec<Point> {
        v.iter().map(|&(x, y)| Point::new(x, y)).collect()
    }

    fn raster(rings: &[&[Point]], w: u32, h: u32) -> Vec<u8> {
        let mut m = vec![0u8; (w * h) as usize];
        fill_polygon(
            rings,
            1.0,
            PixelBox {
                x0: 0,
                y0: 0,
                x1: w,
                y1: h,
            },
            |y, x0, x1| {
                for x in x0..x1 {
                    m[(y * w + x) as usize] = 1;
                }
            },
        );
        m
    }

    #[test]
    fn square_fills_its_pixels() {
        let sq = pts(&[(2.0, 2.0), (6.0, 2.0), (6.0, 6.0), (2.0, 6.0)]);
        let m = raster(&[&sq], 8, 8);
        for y in 0..8 {
            for x in 0..8 {
                let inside = (2..6).contains(&x) && (2..6).contains(&y);
                assert_eq!(m[y * 8 + x] == 1, inside);
            }
        }
        assert_eq!(signed_area2(&sq), 32.0);
    }

    #[test]
    fn hole_is_excluded() {
        let outer = pts(&[(0.0, 0.0), (6.0, 0.0), (6.0, 6.0), (0.0, 6.0)]);
        let hole = pts(&[(2.0, 2.0), (2.0, 4.0), (4.0, 4.0), (4.0, 2.0)]);
        let m = raster(&[&outer, &hole], 6, 6);
        assert_eq!(m.iter().filter(|&&v| v == 1).count(), 32);
        assert_eq!(m[2 * 6 + 2], 0);
    }

    #[test]
    fn window_clips() {
        let sq = pts(&[(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)]);
        let mut n = 0;
        fill_polygon(
            &[&sq],
            1.0,
            PixelBox {
                x0: 8,
                y0: 8,
                x1: 20,
                y1: 20,
            },
            |_, x0, x1| n += x1 - x0,
        );
        assert_eq!(n, 4);
        // half scale: 5x5
        let mut n = 0;
        fill_polygon(
            &[&sq],
            0.5,
            PixelBox {
                x0: 0,
                y0: 0,
                x1: 20,
                y1: 20,
            },
            |_, x0, x1| n += x1 - x0,
        );
        assert_eq!(n, 25);
    }

    #[test]
    fn simple_and_self_intersecting() {
        let tri = pts(&[(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)]);
        assert!(ring_is_simple(&tri));
        let bow = pts(&[(0.0, 0.0), (10.0, 10.0), (10.0, 0.0), (0.0, 10.0)]);
        assert!(!ring_is_simple(&bow));
        assert!(!ring_is_simple(&pts(&[(0.0, 0.0), (1.0, 1.0)])));
        let spike = pts(&[(0.0, 0.0), (10.0, 0.0), (5.0, 0.0), (5.0, 5.0)]);
        assert!(!ring_is_simple(&spike));
    }

    #[test]
    fn containment() {
        let sq = pts(&[(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0)]);
        assert!(point_in_ring(Point::new(1.0, 1.0), &sq));
        assert!(!point_in_ring(Point::new(5.0, 1.0), &sq));
    }

    #[test]
    fn round2_behaviour() {
        assert_eq!(round2(1.234), 1.23);
        assert_eq!(round2(-0.001), 0.0);
        assert_eq!(round2(10.0), 10.0);
    }
}
