//! Multi-resolution tile pyramids on disk.
//!
//! Layout of a pyramid directory:
//!
//! ```text
//! meta.json                 {"width0", "height0", "tile_size", "levels", "mpp"}
//! tiles/{level}/{x}_{y}.png lossless RGB tiles, x/y are tile indices
//! ```
//!
//! Level `L` has dimensions `ceil(width0 / 2^L) x ceil(height0 / 2^L)` and is
//! produced from level `L-1` by a 2x2 box average with integer truncation.
//! Edge tiles keep their true size. The top level fits inside a single tile.

use std::fs;
use std::io::{BufWriter, Write};
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ImageEncoder, RgbImage};
use lru::LruCache;
use parking_lot::Mutex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TILE_SIZES: [u32; 3] = [256, 512, 1024];
pub const DEFAULT_TILE_SIZE: u32 = 512;
pub const DEFAULT_CACHE_TILES: usize = 1024;

/// Contents of `meta.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PyramidMeta {
    pub width0: u32,
    pub height0: u32,
    pub tile_size: u32,
    pub levels: u32,
    pub mpp: Option<f64>,
}

/// A region of one pyramid level, in that level's pixel grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionSpec {
    pub level: u32,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl RegionSpec {
    pub fn new(level: u32, x: u32, y: u32, w: u32, h: u32) -> Self {
        RegionSpec { level, x, y, w, h }
    }
}

/// Dimension of a level after `level` ceil-halvings.
pub fn level_extent(extent0: u32, level: u32) -> u32 {
    if level >= 32 {
        return 1;
    }
    let d = 1u64 << level;
    (extent0 as u64).div_ceil(d) as u32
}

/// Smallest level count such that the top level fits in one tile.
pub fn level_count(width0: u32, height0: u32, tile_size: u32) -> u32 {
    let mut levels = 1;
    while level_extent(width0, levels - 1) > tile_size
        || level_extent(height0, levels - 1) > tile_size
    {
        levels += 1;
    }
    levels
}

/// 2x2 box average; odd trailing rows/columns average only the pixels present.
pub fn downsample_half(src: &RgbImage) -> RgbImage {
    let (w, h) = src.dimensions();
    let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));
    let mut out = RgbImage::new(ow, oh);
    let s = src.as_raw();
    let stride = w as usize * 3;
    out.as_mut()
        .par_chunks_mut(ow as usize * 3)
        .enumerate()
        .for_each(|(oy, row)| {
            let y0 = oy * 2;
            let y1 = (y0 + 1).min(h as usize - 1);
            let rows_n = if y1 != y0 { 2 } else { 1 };
            for ox in 0..ow as usize {
                let x0 = ox * 2;
                let x1 = (x0 + 1).min(w as usize - 1);
                let cols_n = if x1 != x0 { 2 } else { 1 };
                let n = (rows_n * cols_n) as u32;
                for c in 0..3 {
                    let mut sum = s[y0 * stride + x0 * 3 + c] as u32;
                    if cols_n == 2 {
                        sum += s[y0 * stride + x1 * 3 + c] as u32;
                    }
                    if rows_n == 2 {
                        sum += s[y1 * stride + x0 * 3 + c] as u32;
                        if cols_n == 2 {
                            sum += s[y1 * stride + x1 * 3 + c] as u32;
                        }
                    }
                    row[ox * 3 + c] = (sum / n) as u8;
                }
            }
        });
    out
}

fn map_image_error(err: image::ImageError, path: &Path) -> Error {
    match err {
        image::ImageError::IoError(e) if e.kind() == std::io::ErrorKind::StorageFull => {
            Error::DiskFull {
                path: path.to_path_buf(),
            }
        }
        image::ImageError::IoError(e) => Error::io(format!("writing {}", path.display()), e),
        other => Error::Encode(other),
    }
}

fn map_io_error(err: std::io::Error, path: &Path) -> Error {
    if err.kind() == std::io::ErrorKind::StorageFull {
        Error::DiskFull {
            path: path.to_path_buf(),
        }
    } else {
        Error::io(format!("writing {}", path.display()), err)
    }
}

/// Lossless PNG encoding used for tiles, masks and patches.
pub fn encode_png_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    PngEncoder::new_with_quality(&mut buf, CompressionType::Fast, FilterType::Sub)
        .write_image(
            img.as_raw(),
            img.width(),
            img.height(),
            image::ExtendedColorType::Rgb8,
        )
        .map_err(Error::Encode)?;
    Ok(buf)
}

pub fn write_png_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    let bytes = encode_png_rgb(img)?;
    write_file(path, &bytes)
}

pub fn write_png_gray(data: &[u8], w: u32, h: u32, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    PngEncoder::new_with_quality(&mut buf, CompressionType::Fast, FilterType::Sub)
        .write_image(data, w, h, image::ExtendedColorType::L8)
        .map_err(|e| map_image_error(e, path))?;
    write_file(path, &buf)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| map_io_error(e, path))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes).map_err(|e| map_io_error(e, path))?;
    w.flush().map_err(|e| map_io_error(e, path))?;
    Ok(())
}

pub fn check_tile_size(tile_size: u32) -> Result<()> {
    if TILE_SIZES.contains(&tile_size) {
        Ok(())
    } else {
        Err(Error::InvalidTileSize(tile_size))
    }
}

fn tile_path(root: &Path, level: u32, tx: u32, ty: u32) -> PathBuf {
    root.join("tiles")
        .join(level.to_string())
        .join(format!("{tx}_{ty}.png"))
}

fn write_level_tiles(root: &Path, level: u32, img: &RgbImage, tile_size: u32) -> Result<()> {
    let dir = root.join("tiles").join(level.to_string());
    fs::create_dir_all(&dir).map_err(|e| map_io_error(e, &dir))?;
    let (w, h) = img.dimensions();
    let cols = w.div_ceil(tile_size);
    let rows = h.div_ceil(tile_size);
    (0..rows * cols).into_par_iter().try_for_each(|i| {
        let (tx, ty) = (i % cols, i / cols);
        let x = tx * tile_size;
        let y = ty * tile_size;
        let tw = tile_size.min(w - x);
        let th = tile_size.min(h - y);
        let tile = image::imageops::crop_imm(img, x, y, tw, th).to_image();
        write_png_rgb(&tile, &tile_path(root, level, tx, ty))
    })
}

/// Builds a pyramid whose level-0 pixels are produced tile by tile by `source`.
///
/// `source(x, y, w, h)` must return exactly `w x h` pixels of level 0 starting
/// at `(x, y)`. Level 0 is never held in memory as a whole; level 1 is
/// accumulated from downsampled level-0 tiles.
pub fn build_pyramid_with<F>(
    out_dir: &Path,
    width0: u32,
    height0: u32,
    tile_size: u32,
    mpp: Option<f64>,
    source: F,
) -> Result<SlidePyramid>
where
    F: Fn(u32, u32, u32, u32) -> RgbImage + Sync,
{
    check_tile_size(tile_size)?;
    if width0 == 0 || height0 == 0 {
        return Err(Error::ZeroDimension);
    }
    let levels = level_count(width0, height0, tile_size);
    let meta = PyramidMeta {
        width0,
        height0,
        tile_size,
        levels,
        mpp,
    };
    let l0 = out_dir.join("tiles").join("0");
    fs::create_dir_all(&l0).map_err(|e| map_io_error(e, &l0))?;

    let cols = width0.div_ceil(tile_size);
    let rows = height0.div_ceil(tile_size);
    let (w1, h1) = (level_extent(width0, 1), level_extent(height0, 1));
    let half = tile_size / 2;
    let level1 = Mutex::new(RgbImage::new(w1, h1));

    // tile_size is even, so each level-0 tile maps onto whole 2x2 blocks of level 1
    (0..rows * cols)
        .into_par_iter()
        .try_for_each(|i| -> Result<()> {
            let (tx, ty) = (i % cols, i / cols);
            let x = tx * tile_size;
            let y = ty * tile_size;
            let tw = tile_size.min(width0 - x);
            let th = tile_size.min(height0 - y);
            let tile = source(x, y, tw, th);
            if tile.dimensions() != (tw, th) {
                return Err(Error::InvalidParam(format!(
                    "tile source returned {:?}, expected {}x{}",
                    tile.dimensions(),
                    tw,
                    th
                )));
            }
            write_png_rgb(&tile, &tile_path(out_dir, 0, tx, ty))?;
            if levels > 1 {
                let small = downsample_half(&tile);
                let mut l1 = level1.lock();
                image::imageops::replace(&mut *l1, &small, (tx * half) as i64, (ty * half) as i64);
            }
            Ok(())
        })?;

    let mut current = level1.into_inner();
    for level in 1..levels {
        write_level_tiles(out_dir, level, &current, tile_size)?;
        if level + 1 < levels {
            current = downsample_half(&current);
        }
    }

    let meta_path = out_dir.join("meta.json");
    let json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    write_file(&meta_path, &json)?;
    SlidePyramid::open(out_dir)
}

/// Builds a pyramid from an in-memory RGB raster.
pub fn build_pyramid_from_image(
    img: &RgbImage,
    out_dir: &Path,
    tile_size: u32,
    mpp: Option<f64>,
) -> Result<SlidePyramid> {
    let (w, h) = img.dimensions();
    build_pyramid_with(out_dir, w, h, tile_size, mpp, |x, y, tw, th| {
        image::imageops::crop_imm(img, x, y, tw, th).to_image()
    })
}

/// Decodes a PNG/TIFF/JPEG source and writes its pyramid to `out_dir`.
pub fn build_pyramid(source: &Path, out_dir: &Path, tile_size: u32) -> Result<SlidePyramid> {
    check_tile_size(tile_size)?;
    let img = image::ImageReader::open(source)
        .map_err(|e| Error::io(format!("opening {}", source.display()), e))?
        .with_guessed_format()
        .map_err(|e| Error::io(format!("reading {}", source.display()), e))?
        .decode()
        .map_err(|e| Error::Decode {
            path: source.to_path_buf(),
            source: e,
        })?
        .into_rgb8();
    build_pyramid_from_image(&img, out_dir, tile_size, None)
}

/// Decodes an in-memory encoded raster into RGB.
pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory(bytes).map_err(Error::DecodeBytes)?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::ZeroDimension);
    }
    Ok(img.into_rgb8())
}

type TileKey = (u32, u32, u32);

/// Thumbnail together with the (possibly virtual) level it represents.
#[derive(Debug, Clone)]
pub struct Thumbnail {
    pub image: RgbImage,
    /// Number of halvings from level 0; may exceed the stored level count.
    pub level: u32,
}

/// Read handle on a pyramid directory. Immutable after build; safe to share.
pub struct SlidePyramid {
    slide_id: String,
    meta: PyramidMeta,
    root: PathBuf,
    cache: Mutex<LruCache<TileKey, Arc<RgbImage>>>,
}

impl std::fmt::Debug for SlidePyramid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SlidePyramid")
            .field("slide_id", &self.slide_id)
            .field("meta", &self.meta)
            .field("root", &self.root)
            .finish_non_exhaustive()
    }
}

impl SlidePyramid {
    pub fn open(root: &Path) -> Result<Self> {
        Self::open_with_cache(root, DEFAULT_CACHE_TILES)
    }

    pub fn open_with_cache(root: &Path, cache_tiles: usize) -> Result<Self> {
        let invalid = |reason: String| Error::InvalidPyramid {
            path: root.to_path_buf(),
            reason,
        };
        let meta_path = root.join("meta.json");
        let bytes = fs::read(&meta_path).map_err(|e| invalid(format!("meta.json: {e}")))?;
        let meta: PyramidMeta =
            serde_json::from_slice(&bytes).map_err(|e| invalid(format!("meta.json: {e}")))?;
        if meta.width0 == 0 || meta.height0 == 0 {
            return Err(invalid("zero dimension".into()));
        }
        check_tile_size(meta.tile_size).map_err(|e| invalid(e.to_string()))?;
        let expected = level_count(meta.width0, meta.height0, meta.tile_size);
        if meta.levels != expected {
            return Err(invalid(format!(
                "levels {} but dimensions imply {expected}",
                meta.levels
            )));
        }
        let slide_id = root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "slide".to_string());
        let cap = NonZeroUsize::new(cache_tiles.max(1)).unwrap();
        Ok(SlidePyramid {
            slide_id,
            meta,
            root: root.to_path_buf(),
            cache: Mutex::new(LruCache::new(cap)),
        })
    }

    pub fn with_slide_id(mut self, slide_id: impl Into<String>) -> Self {
        self.slide_id = slide_id.into();
        self
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    pub fn meta(&self) -> &PyramidMeta {
        &self.meta
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn width0(&self) -> u32 {
        self.meta.width0
    }

    pub fn height0(&self) -> u32 {
        self.meta.height0
    }

    pub fn tile_size(&self) -> u32 {
        self.meta.tile_size
    }

    pub fn levels(&self) -> u32 {
        self.meta.levels
    }

    pub fn level_dims(&self, level: u32) -> Result<(u32, u32)> {
        self.check_level(level)?;
        Ok((
            level_extent(self.meta.width0, level),
            level_extent(self.meta.height0, level),
        ))
    }

    /// Tile grid (columns, rows) at a level.
    pub fn tile_grid(&self, level: u32) -> Result<(u32, u32)> {
        let (w, h) = self.level_dims(level)?;
        Ok((
            w.div_ceil(self.meta.tile_size),
            h.div_ceil(self.meta.tile_size),
        ))
    }

    fn check_level(&self, level: u32) -> Result<()> {
        if level >= self.meta.levels {
            Err(Error::LevelOutOfRange {
                level,
                levels: self.meta.levels,
            })
        } else {
            Ok(())
        }
    }

    pub fn tile_path(&self, level: u32, tx: u32, ty: u32) -> Result<PathBuf> {
        let (cols, rows) = self.tile_grid(level)?;
        if tx >= cols || ty >= rows {
            return Err(Error::RegionOutOfBounds);
        }
        Ok(tile_path(&self.root, level, tx, ty))
    }

    /// Encoded bytes of one tile file, exactly as stored.
    pub fn tile_bytes(&self, level: u32, tx: u32, ty: u32) -> Result<Vec<u8>> {
        let path = self.tile_path(level, tx, ty)?;
        fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
    }

    fn expected_tile_dims(&self, level: u32, tx: u32, ty: u32) -> Result<(u32, u32)> {
        let (w, h) = self.level_dims(level)?;
        let t = self.meta.tile_size;
        Ok((t.min(w - tx * t), t.min(h - ty * t)))
    }

    /// Decoded tile, served from the LRU cache when present.
    pub fn read_tile(&self, level: u32, tx: u32, ty: u32) -> Result<Arc<RgbImage>> {
        let key = (level, tx, ty);
        if let Some(t) = self.cache.lock().get(&key) {
            return Ok(Arc::clone(t));
        }
        let path = self.tile_path(level, tx, ty)?;
        let img = image::open(&path)
            .map_err(|e| Error::InvalidPyramid {
                path: path.clone(),
                reason: e.to_string(),
            })?
            .into_rgb8();
        let expected = self.expected_tile_dims(level, tx, ty)?;
        if img.dimensions() != expected {
            return Err(Error::InvalidPyramid {
                path,
                reason: format!("tile is {:?}, expected {:?}", img.dimensions(), expected),
            });
        }
        let tile = Arc::new(img);
        self.cache.lock().put(key, Arc::clone(&tile));
        Ok(tile)
    }

    /// Checks that every tile exists and decodes to its declared size.
    pub fn verify(&self) -> Result<()> {
        for level in 0..self.meta.levels {
            let (cols, rows) = self.tile_grid(level)?;
            for ty in 0..rows {
                for tx in 0..cols {
                    self.read_tile(level, tx, ty)?;
                }
            }
        }
        Ok(())
    }

    /// Reads a region, clamped to the level bounds.
    pub fn read_region(&self, r: RegionSpec) -> Result<RgbImage> {
        let (lw, lh) = self.level_dims(r.level)?;
        if r.w == 0 || r.h == 0 || r.x >= lw || r.y >= lh {
            return Err(Error::RegionOutOfBounds);
        }
        let w = r.w.min(lw - r.x);
        let h = r.h.min(lh - r.y);
        let t = self.meta.tile_size;
        let mut out = RgbImage::new(w, h);
        let out_stride = w as usize * 3;
        for ty in r.y / t..=(r.y + h - 1) / t {
            for tx in r.x / t..=(r.x + w - 1) / t {
                let tile = self.read_tile(r.level, tx, ty)?;
                let (tile_x, tile_y) = (tx * t, ty * t);
                let x0 = r.x.max(tile_x);
                let x1 = (r.x + w).min(tile_x + tile.width());
                let y0 = r.y.max(tile_y);
                let y1 = (r.y + h).min(tile_y + tile.height());
                let span = (x1 - x0) as usize * 3;
                let tile_stride = tile.width() as usize * 3;
                let src = tile.as_raw();
                let dst = out.as_mut();
                for y in y0..y1 {
                    let s = (y - tile_y) as usize * tile_stride + (x0 - tile_x) as usize * 3;
                    let d = (y - r.y) as usize * out_stride + (x0 - r.x) as usize * 3;
                    dst[d..d + span].copy_from_slice(&src[s..s + span]);
                }
            }
        }
        Ok(out)
    }

    /// Whole level as one raster.
    pub fn read_level(&self, level: u32) -> Result<RgbImage> {
        let (w, h) = self.level_dims(level)?;
        self.read_region(RegionSpec::new(level, 0, 0, w, h))
    }

    /// The largest stored level fitting in `max_dim`, or the top level halved
    /// further until it fits.
    pub fn thumbnail(&self, max_dim: u32) -> Result<Thumbnail> {
        if max_dim < 16 {
            return Err(Error::InvalidParam(format!(
                "thumbnail max_dim {max_dim} < 16"
            )));
        }
        for level in 0..self.meta.levels {
            let (w, h) = self.level_dims(level)?;
            if w.max(h) <= max_dim {
                return Ok(Thumbnail {
                    image: self.read_level(level)?,
                    level,
                });
            }
        }
        let mut level = self.meta.levels - 1;
        let mut img = self.read_level(level)?;
        while img.width().max(img.height()) > max_dim {
            img = downsample_half(&img);
            level += 1;
        }
        Ok(Thumbnail { image: img, level })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn dims_of(p: &SlidePyramid) -> Vec<(u32, u32)> {
        (0..p.levels()).map(|l| p.level_dims(l).unwrap()).collect()
    }

    #[test]
    fn level_count_examples() {
        assert_eq!(level_count(1024, 1024, 512), 2);
        assert_eq!(level_count(4096, 1024, 512), 4);
        assert_eq!(level_count(512, 512, 512), 1);
        assert_eq!(level_count(1, 1, 256), 1);
        assert_eq!(level_count(513, 10, 512), 2);
    }

    #[test]
    fn builds_expected_levels() {
        let d = tmp();
        let img = RgbImage::from_pixel(4096, 1024, Rgb([10, 20, 30]));
        let p = build_pyramid_from_image(&img, d.path(), 512, None).unwrap();
        assert_eq!(
            dims_of(&p),
            vec![(4096, 1024), (2048, 512), (1024, 256), (512, 128)]
        );
        p.verify().unwrap();
    }

    #[test]
    fn uniform_source_stays_uniform() {
        let d = tmp();
        let img = RgbImage::from_pixel(2048, 2048, Rgb([128, 128, 128]));
        let p = build_pyramid_from_image(&img, d.path(), 512, None).unwrap();
        for level in 0..p.levels() {
            let (cols, rows) = p.tile_grid(level).unwrap();
            for ty in 0..rows {
                for tx in 0..cols {
                    let t = p.read_tile(level, tx, ty).unwrap();
                    assert!(t.pixels().all(|px| *px == Rgb([128, 128, 128])));
                }
            }
        }
    }

    #[test]
    fn odd_edges_average_present_pixels() {
        let img = RgbImage::from_fn(3, 3, |x, y| Rgb([(x * 10 + y) as u8, 0, 255]));
        let h = downsample_half(&img);
        assert_eq!(h.dimensions(), (2, 2));
        // (0+1+10+11)/4 = 5 with truncation
        assert_eq!(h.get_pixel(0, 0)[0], 5);
        // right column pair (20, 21) -> 20
        assert_eq!(h.get_pixel(1, 0)[0], 20);
        assert_eq!(h.get_pixel(1, 1)[0], 22);
        assert_eq!(h.get_pixel(0, 1)[0], 7);
    }

    #[test]
    fn full_tile_region_matches_tile_file() {
        let d = tmp();
        let img = RgbImage::from_fn(1024, 700, |x, y| {
            Rgb([(x % 251) as u8, (y % 241) as u8, ((x ^ y) % 256) as u8])
        });
        let p = build_pyramid_from_image(&img, d.path(), 512, None).unwrap();
        let region = p.read_region(RegionSpec::new(0, 512, 0, 512, 512)).unwrap();
        let file = image::open(p.tile_path(0, 1, 0).unwrap())
            .unwrap()
            .into_rgb8();
        assert_eq!(region.as_raw(), file.as_raw());
        let px = p.read_region(RegionSpec::new(0, 0, 0, 1, 1)).unwrap();
        assert_eq!(px.get_pixel(0, 0), img.get_pixel(0, 0));
        // edge tile keeps its true size
        assert_eq!(p.read_tile(0, 1, 1).unwrap().dimensions(), (512, 188));
    }

    #[test]
    fn straddling_region_is_mosaic() {
        let d = tmp();
        let colors = [[255, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 0]];
        let img = RgbImage::from_fn(512, 512, |x, y| {
            let k = (x / 256 + 2 * (y / 256)) as usize;
            Rgb(colors[k])
        });
        let p = build_pyramid_from_image(&img, d.path(), 256, None).unwrap();
        let r = p
            .read_region(RegionSpec::new(0, 200, 200, 100, 100))
            .unwrap();
        for (x, y, px) in r.enumerate_pixels() {
            let k = (((x + 200) >= 256) as usize) + 2 * (((y + 200) >= 256) as usize);
            assert_eq!(px.0, colors[k]);
        }
    }

    #[test]
    fn region_errors_and_clamping() {
        let d = tmp();
        let img = RgbImage::from_pixel(300, 200, Rgb([1, 2, 3]));
        let p = build_pyramid_from_image(&img, d.path(), 256, None).unwrap();
        assert!(matches!(
            p.read_region(RegionSpec::new(5, 0, 0, 1, 1)),
            Err(Error::LevelOutOfRange { .. })
        ));
        assert!(matches!(
            p.read_region(RegionSpec::new(0, 300, 0, 1, 1)),
            Err(Error::RegionOutOfBounds)
        ));
        let r = p
            .read_region(RegionSpec::new(0, 250, 150, 100, 100))
            .unwrap();
        assert_eq!(r.dimensions(), (50, 50));
    }

    #[test]
    fn thumbnail_uses_halvings() {
        let d = tmp();
        let img = RgbImage::from_pixel(4096, 4096, Rgb([200, 100, 50]));
        let p = build_pyramid_from_image(&img, d.path(), 512, None).unwrap();
        let t = p.thumbnail(512).unwrap();
        assert_eq!((t.image.dimensions(), t.level), ((512, 512), 3));
        let t = p.thumbnail(300).unwrap();
        assert_eq!((t.image.dimensions(), t.level), ((256, 256), 4));
        let t = p.thumbnail(10_000).unwrap();
        assert_eq!((t.image.dimensions(), t.level), ((4096, 4096), 0));
        assert!(p.thumbnail(8).is_err());
    }

    #[test]
    fn rejects_bad_tile_size_and_undecodable_source() {
        let d = tmp();
        let img = RgbImage::new(10, 10);
        assert!(matches!(
            build_pyramid_from_image(&img, d.path(), 300, None),
            Err(Error::InvalidTileSize(300))
        ));
        let bad = d.path().join("bad.png");
        fs::write(&bad, b"not an image").unwrap();
        assert!(matches!(
            build_pyramid(&bad, &d.path().join("out"), 512),
            Err(Error::Decode { .. })
        ));
    }

    #[test]
    fn build_is_deterministic() {
        let a = tmp();
        let b = tmp();
        let img = RgbImage::from_fn(900, 600, |x, y| {
            Rgb([(x * 7 % 256) as u8, (y * 3 % 256) as u8, 9])
        });
        build_pyramid_from_image(&img, a.path(), 256, None).unwrap();
        build_pyramid_from_image(&img, b.path(), 256, None).unwrap();
        for entry in walk(a.path()) {
            let rel = entry.strip_prefix(a.path()).unwrap();
            assert_eq!(
                fs::read(&entry).unwrap(),
                fs::read(b.path().join(rel)).unwrap()
            );
        }
    }

    fn walk(p: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                out.extend(walk(&path));
            } else {
                out.push(path);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn level_recurrence(w in 1u32..10_000, h in 1u32..10_000, ts in prop::sample::select(TILE_SIZES.to_vec())) {
            let levels = level_count(w, h, ts);
            for l in 1..levels {
                prop_assert_eq!(level_extent(w, l), level_extent(w, l - 1).div_ceil(2));
                prop_assert_eq!(level_extent(h, l), level_extent(h, l - 1).div_ceil(2));
            }
            let top = levels - 1;
            prop_assert!(level_extent(w, top) <= ts && level_extent(h, top) <= ts);
            if top > 0 {
                prop_assert!(level_extent(w, top - 1) > ts || level_extent(h, top - 1) > ts);
            }
        }
    }

    #[test]
    fn adjacent_reads_concatenate() {
        let d = tmp();
        let img = RgbImage::from_fn(700, 500, |x, y| {
            Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8])
        });
        let p = build_pyramid_from_image(&img, d.path(), 256, None).unwrap();
        let whole = p
            .read_region(RegionSpec::new(0, 100, 50, 400, 300))
            .unwrap();
        let left = p
            .read_region(RegionSpec::new(0, 100, 50, 170, 300))
            .unwrap();
        let right = p
            .read_region(RegionSpec::new(0, 270, 50, 230, 300))
            .unwrap();
        for (x, y, px) in whole.enumerate_pixels() {
            let expect = if x < 170 {
                left.get_pixel(x, y)
            } else {
                right.get_pixel(x - 170, y)
            };
            assert_eq!(px, expect);
        }
        // level 1 too
        let whole = p.read_region(RegionSpec::new(1, 0, 0, 350, 250)).unwrap();
        let top = p.read_region(RegionSpec::new(1, 0, 0, 350, 100)).unwrap();
        assert_eq!(
            &whole.as_raw()[..top.as_raw().len()],
            top.as_raw().as_slice()
        );
    }

    #[test]
    fn concurrent_reads_identical() {
        let d = tmp();
        let img = RgbImage::from_fn(1024, 1024, |x, y| {
            Rgb([(x % 256) as u8, (y % 256) as u8, 7])
        });
        build_pyramid_from_image(&img, d.path(), 256, None).unwrap();
        let p = Arc::new(SlidePyramid::open_with_cache(d.path(), 3).unwrap());
        let reference = p
            .read_region(RegionSpec::new(0, 100, 100, 600, 600))
            .unwrap();
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let p = Arc::clone(&p);
                std::thread::spawn(move || {
                    p.read_region(RegionSpec::new(0, 100, 100, 600, 600))
                        .unwrap()
                })
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap().as_raw(), reference.as_raw());
        }
    }
}
