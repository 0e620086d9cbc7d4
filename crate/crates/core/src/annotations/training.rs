//! Export of (RGB patch, label mask) pairs for training.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::index::sample;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{rasterize_layers_window, AnnotationDocument, AnnotationLayer};
use crate::error::{Error, Result};
use crate::planner::{plan_tiles, PlanOptions, TileOrigin};
use crate::pyramid::{write_png_gray, write_png_rgb, RegionSpec, SlidePyramid};
use crate::tissue::{detect_tissue, tissue_bounds, DEFAULT_MIN_COMPONENT_PX, DEFAULT_THUMB_MAX_DIM};

pub const DEFAULT_PATCH_SIZE: u32 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchExportOptions {
    pub patch_size: u32,
    pub overlap: u32,
    pub background_ratio: f64,
    pub seed: u64,
    pub thumb_max_dim: u32,
    pub min_component_px: u64,
}

impl Default for PatchExportOptions {
    fn default() -> Self {
        PatchExportOptions {
            patch_size: DEFAULT_PATCH_SIZE,
            overlap: 0,
            background_ratio: 0.0,
            seed: 0,
            thumb_max_dim: DEFAULT_THUMB_MAX_DIM,
            min_component_px: DEFAULT_MIN_COMPONENT_PX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's folder.
    pub patch: PathBuf,
    pub mask: PathBuf,
    pub slide_id: String,
    pub origin: [u32; 2],
    pub annotated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub folder: PathBuf,
    pub patch_size: u32,
    /// Indexed by mask value.
    pub class_names: Vec<String>,
    pub seed: u64,
    pub background_ratio: f64,
    pub entries: Vec<ManifestEntry>,
}

impl TrainingManifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn load(folder: &Path) -> Result<Self> {
        let path = folder.join(Self::FILE_NAME);
        let bytes = fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Schema {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn positives(&self) -> usize {
        self.entries.iter().filter(|e| e.annotated).count()
    }
}

struct Candidate {
    slide: usize,
    origin: TileOrigin,
    mask: Vec<u8>,
}

fn file_stem(slide_id: &str) -> String {
    slide_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes patches for every planned tissue tile holding annotation from
/// `layers`, plus `floor(background_ratio * positives)` seeded picks among
/// the remaining tissue tiles, and a `manifest.json` describing them.
///
/// Patches near the slide edge are padded with white (mask: background).
pub fn export_training_patches(
    slides: &[(&AnnotationDocument, &SlidePyramid)],
    layers: &[&str],
    opts: &PatchExportOptions,
    out_dir: &Path,
) -> Result<TrainingManifest> {
    if !(opts.background_ratio >= 0.0) {
        return Err(Error::InvalidParam("background_ratio must be >= 0".into()));
    }
    if layers.is_empty() {
        return Err(Error::InvalidParam("no layers selected".into()));
    }
    let t = opts.patch_size;
    let mut class_names = vec!["background".to_string()];
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (si, (doc, pyr)) in slides.iter().enumerate() {
        let selected: Vec<&AnnotationLayer> = doc.layers.iter().filter(|l| layers.contains(&l.name.as_str())).collect();
        if let Some(missing) = layers.iter().find(|n| doc.layer(n).is_none()) {
            return Err(Error::UnknownLayer(format!("{missing} (slide {})", doc.slide_id)));
        }
        for l in &selected {
            let k = l.class_id as usize;
            if class_names.len() <= k {
                class_names.resize_with(k + 1, String::new);
            }
            if class_names[k].is_empty() {
                class_names[k] = l.name.clone();
            }
        }
        let tissue = detect_tissue(pyr, opts.thumb_max_dim, opts.min_component_px)?;
        let bounds = tissue_bounds(&tissue, pyr.width0(), pyr.height0());
        let plan = plan_tiles(
            pyr.slide_id(),
            &bounds,
            pyr.width0(),
            pyr.height0(),
            PlanOptions {
                tile_size: t,
                overlap: opts.overlap,
                pad_small: true,
            },
            Some(&tissue),
        )?;
        let masks: Vec<Candidate> = plan
            .tiles
            .par_iter()
            .map(|&origin| {
                let fp = plan.footprint(origin);
                let mut mask = vec![0u8; fp.area() as usize];
                rasterize_layers_window(&selected, 0, fp, &mut mask);
                Candidate { slide: si, origin, mask }
            })
            .collect();
        for c in masks {
            if c.mask.iter().any(|&v| v != 0) {
                positives.push(c);
            } else {
                negatives.push(c);
            }
        }
    }
    for (k, n) in class_names.iter_mut().enumerate() {
        if n.is_empty() {
            *n = format!("class{k}");
        }
    }
    if positives.is_empty() {
        return Err(Error::EmptyTrainingLayer);
    }
    let want = ((opts.background_ratio * positives.len() as f64).floor() as usize).min(negatives.len());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    let mut picked: Vec<usize> = sample(&mut rng, negatives.len(), want).into_vec();
    picked.sort_unstable();
    let mut chosen: Vec<(Candidate, bool)> = positives.into_iter().map(|c| (c, true)).collect();
    let mut negatives: Vec<Option<Candidate>> = negatives.into_iter().map(Some).collect();
    chosen.extend(picked.into_iter().map(|i| (negatives[i].take().expect("picked once"), false)));

    for sub in ["patches", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    let entries: Vec<ManifestEntry> = chosen
        .par_iter()
        .map(|(c, annotated)| {
            let (doc, pyr) = slides[c.slide];
            let (x, y) = (c.origin.x, c.origin.y);
            let w = t.min(pyr.width0() - x);
            let h = t.min(pyr.height0() - y);
            let region = pyr.read_region(RegionSpec::new(0, x, y, w, h))?;
            let mut patch = RgbImage::from_pixel(t, t, Rgb([255, 255, 255]));
            image::imageops::replace(&mut patch, &region, 0, 0);
            let mut mask = vec![0u8; (t * t) as usize];
            for row in 0..h as usize {
                mask[row * t as usize..row * t as usize + w as usize]
                    .copy_from_slice(&c.mask[row * w as usize..(row + 1) * w as usize]);
            }
            let name = format!("{}_{x}_{y}.png", file_stem(&doc.slide_id));
            let patch_rel = Path::new("patches").join(&name);
            let mask_rel = Path::new("masks").join(&name);
            write_png_rgb(&patch, &out_dir.join(&patch_rel))?;
            write_png_gray(&mask, t, t, &out_dir.join(&mask_rel))?;
            Ok(ManifestEntry {
                patch: patch_rel,
                mask: mask_rel,
                slide_id: doc.slide_id.clone(),
                origin: [x, y],
                annotated: *annotated,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = TrainingManifest {
        folder: out_dir.to_path_buf(),
        patch_size: t,
        class_names,
        seed: opts.seed,
        background_ratio: opts.background_ratio,
        entries,
    };
    let path = out_dir.join(TrainingManifest::FILE_NAME);
    let bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(manifest)
}
