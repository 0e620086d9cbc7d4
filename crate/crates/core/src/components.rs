//! Run-length connected-component labeling.
//!
//! Components are found on horizontal runs rather than per pixel, so memory
//! scales with the number of runs instead of the raster area. Used both for
//! tissue cleanup and for splitting class masks before contour tracing.

/// A horizontal run of matching pixels, `x0..x1` (exclusive) on row `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Run {
    pub y: u32,
    pub x0: u32,
    pub x1: u32,
}

impl Run {
    pub fn len(&self) -> u64 {
        (self.x1 - self.x0) as u64
    }

    pub fn is_empty(&self) -> bool {
        self.x1 == self.x0
    }
}

/// Axis-aligned pixel box, inclusive-exclusive.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub struct PixelBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelBox {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn intersects(&self, other: &PixelBox) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    /// Intersecting or sharing an edge.
    pub fn touches(&self, other: &PixelBox) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1 && self.y0 <= other.y1 && other.y0 <= self.y1
    }

    pub fn union(&self, other: &PixelBox) -> PixelBox {
        PixelBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    pub fn contains_point(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn contains_box(&self, other: &PixelBox) -> bool {
        other.x0 >= self.x0 && other.x1 <= self.x1 && other.y0 >= self.y0 && other.y1 <= self.y1
    }
}

#[derive(Debug, Clone)]
pub struct Component {
    /// Runs sorted by (y, x0).
    pub runs: Vec<Run>,
    pub area: u64,
    pub bbox: PixelBox,
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn push(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut a: u32) -> u32 {
        while self.parent[a as usize] != a {
            let gp = self.parent[self.parent[a as usize] as usize];
            self.parent[a as usize] = gp;
            a = gp;
        }
        a
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller index becomes root so labels follow raster order
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Extracts runs of pixels matching `pred` from a row-major raster.
pub fn runs_of<F: Fn(u8) -> bool>(data: &[u8], width: u32, height: u32, pred: F) -> Vec<Run> {
    let mut runs = Vec::new();
    let w = width as usize;
    for y in 0..height as usize {
        let row = &data[y * w..(y + 1) * w];
        let mut x = 0;
        while x < w {
            if pred(row[x]) {
                let start = x;
                while x < w && pred(row[x]) {
                    x += 1;
                }
                runs.push(Run {
                    y: y as u32,
                    x0: start as u32,
                    x1: x as u32,
                });
            } else {
                x += 1;
            }
        }
    }
    runs
}

/// Groups runs (sorted by y, then x0) into 8-connected components.
///
/// Components come back ordered by their first pixel in raster order.
pub fn group_runs_8(runs: Vec<Run>) -> Vec<Component> {
    if runs.is_empty() {
        return Vec::new();
    }
    let mut uf = UnionFind {
        parent: Vec::with_capacity(runs.len()),
    };
    for _ in 0..runs.len() {
        uf.push();
    }
    // indices of the previous row's runs
    let mut prev_start = 0usize;
    let mut prev_end = 0usize;
    let mut i = 0usize;
    while i < runs.len() {
        let y = runs[i].y;
        let row_start = i;
        while i < runs.len() && runs[i].y == y {
            i += 1;
        }
        let row_end = i;
        let prev_adjacent = row_start > 0 && prev_end > prev_start && runs[prev_start].y + 1 == y;
        if prev_adjacent {
            let mut p = prev_start;
            for c in row_start..row_end {
                let cur = runs[c];
                // 8-connectivity: previous run may end one pixel left or start one pixel right
                while p < prev_end && runs[p].x1 < cur.x0 {
                    p += 1;
                }
                let mut q = p;
                while q < prev_end && runs[q].x0 <= cur.x1 {
                    uf.union(c as u32, q as u32);
                    q += 1;
                }
            }
        }
        prev_start = row_start;
        prev_end = row_end;
    }

    let mut index_of_root: Vec<u32> = vec![u32::MAX; runs.len()];
    let mut comps: Vec<Component> = Vec::new();
    for (k, run) in runs.into_iter().enumerate() {
        let root = uf.find(k as u32) as usize;
        let slot = if index_of_root[root] == u32::MAX {
            index_of_root[root] = comps.len() as u32;
            comps.push(Component {
                runs: Vec::new(),
                area: 0,
                bbox: PixelBox {
                    x0: run.x0,
                    y0: run.y,
                    x1: run.x1,
                    y1: run.y + 1,
                },
            });
            comps.len() - 1
        } else {
            index_of_root[root] as usize
        };
        let c = &mut comps[slot];
        c.area += run.len();
        c.bbox.x0 = c.bbox.x0.min(run.x0);
        c.bbox.x1 = c.bbox.x1.max(run.x1);
        c.bbox.y1 = c.bbox.y1.max(run.y + 1);
        c.runs.push(run);
    }
    comps
}

/// 8-connected components of pixels matching `pred`.
pub fn components_8<F: Fn(u8) -> bool>(
    data: &[u8],
    width: u32,
    height: u32,
    pred: F,
) -> Vec<Component> {
    group_runs_8(runs_of(data, width, height, pred))
}
