//! Thumbnail thresholding to find the tissue-bearing part of a slide.

use image::RgbImage;
use num_bigint::BigUint;
use tracing::warn;

use crate::components::{components_8, PixelBox};
use crate::error::{Error, Result};
use crate::pyramid::SlidePyramid;

pub const DEFAULT_THUMB_MAX_DIM: u32 = 2048;
pub const DEFAULT_MIN_COMPONENT_PX: u64 = 64;

/// `round(0.299 R + 0.587 G + 0.114 B)` in exact integer arithmetic.
#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

pub fn luma_image(img: &RgbImage) -> Vec<u8> {
    img.as_raw()
        .chunks_exact(3)
        .map(|p| luma(p[0], p[1], p[2]))
        .collect()
}

pub fn histogram(values: &[u8]) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &v in values {
        h[v as usize] += 1;
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OtsuThreshold {
    /// Pixels with value `<= threshold` form the lower class.
    pub threshold: u8,
    /// No split separates two non-empty classes.
    pub degenerate: bool,
}

/// Otsu's threshold: the `t` maximizing between-class variance of the split
/// `[0..=t]` vs `[t+1..=255]`, smallest `t` on ties. Only splits leaving both
/// classes non-empty are candidates; when none exists the lowest occupied bin
/// is returned and the result is flagged degenerate.
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<OtsuThreshold> {
    let total: u128 = hist.iter().map(|&c| c as u128).sum();
    if total == 0 {
        return Err(Error::EmptyHistogram);
    }
    let sum_all: u128 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u128 * c as u128)
        .sum();

    // between-class variance * total^2 = (s0*n1 - s1*n0)^2 / (n0*n1)
    // compared exactly by cross-multiplication
    let mut best: Option<(u8, BigUint, BigUint)> = None;
    let (mut n0, mut s0) = (0u128, 0u128);
    for t in 0..255usize {
        n0 += hist[t] as u128;
        s0 += t as u128 * hist[t] as u128;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = sum_all - s0;
        let (a, b) = (s0 * n1, s1 * n0);
        let diff = BigUint::from(a.abs_diff(b));
        let num = &diff * &diff;
        let den = BigUint::from(n0) * BigUint::from(n1);
        let better = match &best {
            None => true,
            Some((_, bnum, bden)) => &num * bden > bnum * &den,
        };
        if better {
            best = Some((t as u8, num, den));
        }
    }
    Ok(match best {
        Some((t, _, _)) => OtsuThreshold {
            threshold: t,
            degenerate: false,
        },
        None => {
            let t = hist.iter().position(|&c| c > 0).unwrap() as u8;
            OtsuThreshold {
                threshold: t,
                degenerate: true,
            }
        }
    })
}

/// Binary tissue mask defined on a (possibly virtual) pyramid level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TissueMask {
    pub level: u32,
    pub width: u32,
    pub height: u32,
    /// Row-major, 1 = tissue.
    pub mask: Vec<u8>,
    pub tissue_pixel_count: u64,
    pub scale_to_level0: u32,
    pub threshold: u8,
    /// Set when thresholding found no usable split (uniform slide).
    pub degenerate: bool,
}

impl TissueMask {
    /// A mask that marks every pixel as tissue; used to force full-grid planning.
    pub fn all_tissue(width0: u32, height0: u32) -> Self {
        TissueMask {
            level: 0,
            width: width0,
            height: height0,
            mask: vec![1; width0 as usize * height0 as usize],
            tissue_pixel_count: width0 as u64 * height0 as u64,
            scale_to_level0: 1,
            threshold: 255,
            degenerate: false,
        }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.mask[y as usize * self.width as usize + x as usize] != 0
    }

    /// True when any mask pixel overlapping the level-0 box is tissue.
    pub fn any_in_level0_box(&self, b: &PixelBox) -> bool {
        let s = self.scale_to_level0;
        let x0 = b.x0 / s;
        let y0 = b.y0 / s;
        let x1 = b.x1.div_ceil(s).min(self.width);
        let y1 = b.y1.div_ceil(s).min(self.height);
        (y0..y1).any(|y| {
            let row = &self.mask[y as usize * self.width as usize..][..self.width as usize];
            row[x0 as usize..x1 as usize].iter().any(|&v| v != 0)
        })
    }

    /// Lossless 0/255 grayscale rendering for inspection.
    pub fn to_gray_image(&self) -> image::GrayImage {
        image::GrayImage::from_raw(
            self.width,
            self.height,
            self.mask
                .iter()
                .map(|&v| if v != 0 { 255 } else { 0 })
                .collect(),
        )
        .expect("mask buffer matches dims")
    }
}

/// Thresholds a thumbnail raster: luma at or below Otsu's threshold is
/// tissue, and 8-connected components smaller than `min_component_px` are
/// removed.
pub fn tissue_from_thumbnail(
    thumb: &RgbImage,
    level: u32,
    min_component_px: u64,
) -> Result<TissueMask> {
    let (w, h) = thumb.dimensions();
    let lum = luma_image(thumb);
    let otsu = otsu_threshold(&histogram(&lum))?;
    let scale = 1u32
        .checked_shl(level)
        .ok_or_else(|| Error::InvalidParam("level too deep".into()))?;
    let mut mask = vec![0u8; lum.len()];
    if otsu.degenerate {
        warn!("uniform thumbnail, tissue threshold is degenerate; mask left empty");
        return Ok(TissueMask {
            level,
            width: w,
            height: h,
            mask,
            tissue_pixel_count: 0,
            scale_to_level0: scale,
            threshold: otsu.threshold,
            degenerate: true,
        });
    }
    let t = otsu.threshold;
    let mut count = 0;
    for comp in components_8(&lum, w, h, |v| v <= t) {
        if comp.area < min_component_px {
            continue;
        }
        count += comp.area;
        for run in &comp.runs {
            let row = run.y as usize * w as usize;
            mask[row + run.x0 as usize..row + run.x1 as usize].fill(1);
        }
    }
    Ok(TissueMask {
        level,
        width: w,
        height: h,
        mask,
        tissue_pixel_count: count,
        scale_to_level0: scale,
        threshold: t,
        degenerate: false,
    })
}

pub fn detect_tissue(
    p: &SlidePyramid,
    thumb_max_dim: u32,
    min_component_px: u64,
) -> Result<TissueMask> {
    let thumb = p.thumbnail(thumb_max_dim)?;
    tissue_from_thumbnail(&thumb.image, thumb.level, min_component_px)
}

/// One level-0 bounding box per 8-connected tissue component, clamped to the
/// slide.
pub fn tissue_bounds(m: &TissueMask, width0: u32, height0: u32) -> Vec<PixelBox> {
    let s = m.scale_to_level0;
    components_8(&m.mask, m.width, m.height, |v| v != 0)
        .into_iter()
        .filter_map(|c| {
            let b = PixelBox {
                x0: (c.bbox.x0 * s).min(width0),
                y0: (c.bbox.y0 * s).min(height0),
                x1: (c.bbox.x1 * s).min(width0),
                y1: (c.bbox.y1 * s).min(height0),
            };
            (b.x1 > b.x0 && b.y1 > b.y0).then_some(b)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use rand::{Rng, SeedableRng};

    /// Textbook between-class variance w0*w1*(mu0-mu1)^2, exact rationals.
    fn brute_force_otsu(hist: &[u64; 256]) -> Option<u8> {
        let total: u64 = hist.iter().sum();
        let tot = BigRational::from_integer(BigInt::from(total));
        let mut best: Option<(u8, BigRational)> = None;
        for t in 0..256usize {
            let n0: u64 = hist[..=t].iter().sum();
            let n1 = total - n0;
            if n0 == 0 || n1 == 0 {
                continue;
            }
            let m0: u64 = hist[..=t]
                .iter()
                .enumerate()
                .map(|(i, &c)| i as u64 * c)
                .sum();
            let m1: u64 = hist[t + 1..]
                .iter()
                .enumerate()
                .map(|(i, &c)| (i + t + 1) as u64 * c)
                .sum();
            let r = |v: u64| BigRational::from_integer(BigInt::from(v));
            let w0 = r(n0) / &tot;
            let w1 = r(n1) / &tot;
            let mu0 = r(m0) / r(n0);
            let mu1 = r(m1) / r(n1);
            let d = mu0 - mu1;
            let var = w0 * w1 * &d * &d;
            if best.as_ref().map_or(true, |(_, b)| var > *b) {
                best = Some((t as u8, var));
            }
        }
        best.map(|(t, _)| t)
    }

    #[test]
    fn single_bin_is_degenerate() {
        let mut h = [0u64; 256];
        h[77] = 500;
        let o = otsu_threshold(&h).unwrap();
        assert_eq!(
            o,
            OtsuThreshold {
                threshold: 77,
                degenerate: true
            }
        );
    }

    #[test]
    fn two_peaks_pick_lowest_maximizer() {
        let mut h = [0u64; 256];
        h[50] = 40;
        h[200] = 60;
        assert_eq!(brute_force_otsu(&h), Some(50));
        assert_eq!(otsu_threshold(&h).unwrap().threshold, 50);
    }

    #[test]
    fn uniform_histogram() {
        let h = [10u64; 256];
        assert_eq!(brute_force_otsu(&h), Some(127));
        assert_eq!(otsu_threshold(&h).unwrap().threshold, 127);
    }

    #[test]
    fn empty_histogram_errors() {
        assert!(matches!(
            otsu_threshold(&[0; 256]),
            Err(Error::EmptyHistogram)
        ));
    }

    #[test]
    fn agrees_with_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let mut h = [0u64; 256];
            let occupied = rng.gen_range(1..256);
            for _ in 0..occupied {
                h[rng.gen_range(0..256)] += rng.gen_range(1..10_000);
            }
            let want = brute_force_otsu(&h);
            let got = otsu_threshold(&h).unwrap();
            match want {
                Some(t) => assert_eq!((got.threshold, got.degenerate), (t, false)),
                None => assert!(got.degenerate),
            }
        }
    }

    #[test]
    fn luma_rounds() {
        assert_eq!(luma(255, 255, 255), 255);
        assert_eq!(luma(0, 0, 0), 0);
        assert_eq!(luma(128, 128, 128), 128);
        // 0.299*1 = 0.299 -> 0 ; 0.587*1 -> 1
        assert_eq!(luma(1, 0, 0), 0);
        assert_eq!(luma(0, 1, 0), 1);
    }

    #[test]
    fn white_slide_has_no_tissue() {
        let img = RgbImage::from_pixel(64, 64, Rgb([255, 255, 255]));
        let m = tissue_from_thumbnail(&img, 0, 64).unwrap();
        assert_eq!(m.tissue_pixel_count, 0);
        assert!(m.degenerate);
        assert!(tissue_bounds(&m, 64, 64).is_empty());
    }

    #[test]
    fn gray_block_is_exact_mask() {
        let mut img = RgbImage::from_pixel(300, 300, Rgb([255, 255, 255]));
        for y in 100..200 {
            for x in 50..150 {
                img.put_pixel(x, y, Rgb([128, 128, 128]));
            }
        }
        let m = tissue_from_thumbnail(&img, 0, 50).unwrap();
        // oracle: direct per-pixel rule
        for y in 0..300 {
            for x in 0..300 {
                let inside = (50..150).contains(&x) && (100..200).contains(&y);
                assert_eq!(m.get(x, y), inside, "({x},{y})");
            }
        }
        assert_eq!(m.tissue_pixel_count, 10_000);
    }

    #[test]
    fn small_components_removed() {
        let mut img = RgbImage::from_pixel(200, 200, Rgb([250, 250, 250]));
        for y in 10..60 {
            for x in 10..60 {
                img.put_pixel(x, y, Rgb([120, 60, 120]));
            }
        }
        // 10-pixel blob
        for x in 150..160 {
            img.put_pixel(x, 150, Rgb([120, 60, 120]));
        }
        let m = tissue_from_thumbnail(&img, 2, 50).unwrap();
        assert_eq!(m.tissue_pixel_count, 2500);
        assert!(!m.get(155, 150));
        let b = tissue_bounds(&m, 800, 800);
        assert_eq!(
            b,
            vec![PixelBox {
                x0: 40,
                y0: 40,
                x1: 240,
                y1: 240
            }]
        );
    }

    #[test]
    fn bounds_scale_to_level0() {
        let mut mask = vec![0u8; 40 * 20];
        for y in 5..=8 {
            for x in 10..=20 {
                mask[y * 40 + x] = 1;
            }
        }
        let m = TissueMask {
            level: 4,
            width: 40,
            height: 20,
            tissue_pixel_count: 44,
            mask,
            scale_to_level0: 16,
            threshold: 0,
            degenerate: false,
        };
        assert_eq!(
            tissue_bounds(&m, 640, 320),
            vec![PixelBox {
                x0: 160,
                y0: 80,
                x1: 336,
                y1: 144
            }]
        );
        // clamped to slide bounds
        assert_eq!(
            tissue_bounds(&m, 300, 100),
            vec![PixelBox {
                x0: 160,
                y0: 80,
                x1: 300,
                y1: 100
            }]
        );
    }

    #[test]
    fn every_tissue_pixel_inside_bounds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (w, h) = (rng.gen_range(5..60u32), rng.gen_range(5..60u32));
            let mask: Vec<u8> = (0..w * h).map(|_| rng.gen_bool(0.2) as u8).collect();
            let count = mask.iter().map(|&v| v as u64).sum();
            let m = TissueMask {
                level: 1,
                width: w,
                height: h,
                mask,
                tissue_pixel_count: count,
                scale_to_level0: 2,
                threshold: 0,
                degenerate: false,
            };
            let boxes = tissue_bounds(&m, w * 2, h * 2);
            for y in 0..h {
                for x in 0..w {
                    if m.get(x, y) {
                        assert!(boxes.iter().any(|b| b.contains_point(x * 2, y * 2)
                            && b.contains_point(x * 2 + 1, y * 2 + 1)));
                    }
                }
            }
        }
    }
}
