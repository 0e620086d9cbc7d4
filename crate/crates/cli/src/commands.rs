use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use slidekit::annotations::{
    export_training_patches, from_xml_with_warnings, rasterize, to_xml, AnnotationDocument, AnnotationLayer,
    PatchExportOptions,
};
use slidekit::backend::{Backend, BackendConfig};
use slidekit::metrics::{document_confusion, metrics, micro_average, EvalRegion, MetricsReport};
use slidekit::pipeline::{segment_slide, SegmentParams, TimingRecord};
use slidekit::pyramid::{build_pyramid, write_png_gray, write_png_rgb, SlidePyramid};
use slidekit::synthetic::{SyntheticSlide, SyntheticSpec};
use slidekit::tissue::detect_tissue;
use slidekit::Error;
use slidekit_service::ServiceConfig;
use tracing::{info, warn};

use crate::{
    BuildPyramidArgs, Command, ConvertArgs, ExportPatchesArgs, MakeSyntheticArgs, MaskExportArgs, MetricsArgs,
    SegmentArgs, ServeArgs, TissueArgs,
};

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Usage(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::Usage(_) => "usage",
        }
    }

    pub fn is_validation(&self) -> bool {
        match self {
            CliError::Core(e) => e.is_validation(),
            CliError::Usage(_) => true,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::BuildPyramid(a) => build_pyramid_cmd(a),
        Command::Segment(a) => segment(a),
        Command::Tissue(a) => tissue(a),
        Command::Convert(a) => convert(a),
        Command::MaskExport(a) => mask_export(a),
        Command::Metrics(a) => metrics_cmd(a),
        Command::ExportPatches(a) => export_patches(a),
        Command::MakeSynthetic(a) => make_synthetic(a),
        Command::Serve(a) => serve(a),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e).into())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e).into())
}

fn is_xml(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("xml"))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads a JSON or XML document, chosen by extension.
fn load_doc(path: &Path, slide_id: Option<&str>) -> Result<AnnotationDocument> {
    let bytes = read(path)?;
    let (doc, warnings) = if is_xml(path) {
        from_xml_with_warnings(&bytes, slide_id.unwrap_or(&stem(path)))?
    } else {
        AnnotationDocument::from_json_with_warnings(&bytes)?
    };
    for w in warnings {
        warn!(file = %path.display(), "{w}");
    }
    Ok(doc)
}

fn encode_doc(path: &Path, doc: &AnnotationDocument) -> Vec<u8> {
    if is_xml(path) {
        to_xml(doc)
    } else {
        doc.to_json_pretty()
    }
}

fn build_pyramid_cmd(a: BuildPyramidArgs) -> Result<()> {
    let p = build_pyramid(&a.src, &a.out_dir, a.tile_size)?;
    let m = p.meta();
    println!("{}x{} px, {} levels, tile {}", m.width0, m.height0, m.levels, m.tile_size);
    Ok(())
}

fn append_timing(path: &Path, t: &TimingRecord) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(TimingRecord::CSV_HEADER);
        text.push('\n');
    }
    text.push_str(&t.csv_row());
    text.push('\n');
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(format!("appending to {}", path.display()), e).into())
}

fn segment(a: SegmentArgs) -> Result<()> {
    let pyr = SlidePyramid::open(&a.pyramid)?;
    let cfg = match &a.backend {
        Some(p) => BackendConfig::load(p)?,
        None => BackendConfig::default(),
    };
    let backend = Backend::from_config(&cfg)?;
    let params = SegmentParams {
        tile_size: a.tile_size,
        overlap: a.overlap,
        min_area_px: a.min_area,
        epsilon_px: a.epsilon,
        full_grid: a.full_grid,
        layer_names: a.layer_names,
        workers: a.workers,
        ..Default::default()
    };
    let reported = AtomicUsize::new(0);
    let out = segment_slide(&pyr, &backend, &cfg.class_names, &params, &|done, total| {
        let pct = if total == 0 { 100 } else { done * 100 / total };
        if pct >= reported.load(Ordering::Relaxed) + 10 || done == total {
            reported.store(pct, Ordering::Relaxed);
            info!("tiles {done}/{total}");
        }
    })?;
    let doc = out.to_document(pyr.slide_id());
    info!(
        objects = doc.element_count(),
        tiles = out.timing.tile_count,
        analyzed = out.timing.analyzed_pixels,
        seconds = out.timing.wall_seconds,
        "segmented"
    );
    match &a.out {
        Some(p) => write(p, &encode_doc(p, &doc))?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(&doc.to_json())
                .and_then(|_| stdout.write_all(b"\n"))
                .map_err(|e| Error::io("writing stdout", e))?;
        }
    }
    if let Some(t) = &a.timing {
        append_timing(t, &out.timing)?;
    }
    Ok(())
}

fn tissue(a: TissueArgs) -> Result<()> {
    let pyr = SlidePyramid::open(&a.pyramid)?;
    let m = detect_tissue(&pyr, a.thumb_max_dim, a.min_component)?;
    let gray: Vec<u8> = m.mask.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    write_png_gray(&gray, m.width, m.height, &a.out)?;
    println!(
        "level {} ({}x{}), threshold {}{}, tissue {} px",
        m.level,
        m.width,
        m.height,
        m.threshold,
        if m.degenerate { " (degenerate)" } else { "" },
        m.tissue_pixel_count
    );
    Ok(())
}

fn convert(a: ConvertArgs) -> Result<()> {
    let doc = load_doc(&a.input, a.slide_id.as_deref())?;
    write(&a.output, &encode_doc(&a.output, &doc))
}

fn mask_export(a: MaskExportArgs) -> Result<()> {
    let doc = load_doc(&a.doc, None)?;
    let pyr = SlidePyramid::open(&a.pyramid)?;
    let names: Option<Vec<&str>> = a.layers.as_ref().map(|v| v.iter().map(String::as_str).collect());
    let mask = rasterize(&doc, pyr.meta(), a.level, names.as_deref())?;
    write_png_gray(&mask.labels, mask.width, mask.height, &a.out)?;
    Ok(())
}

fn parse_region(s: &str) -> Result<EvalRegion> {
    match s {
        "slide" => Ok(EvalRegion::Slide),
        "tissue" => Ok(EvalRegion::Tissue),
        _ => Err(CliError::Usage(format!("--region must be slide or tissue, not {s:?}"))),
    }
}

struct Pair {
    gt: PathBuf,
    pred: PathBuf,
    pyramid: PathBuf,
}

fn batch_pairs(tsv: &Path) -> Result<Vec<Pair>> {
    let text = String::from_utf8(read(tsv)?).map_err(|_| CliError::Usage(format!("{} is not UTF-8", tsv.display())))?;
    let base = tsv.parent().unwrap_or(Path::new(""));
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let [gt, pred, pyramid] = cols[..] else {
            return Err(CliError::Usage(format!(
                "{}:{}: expected 3 tab-separated columns, found {}",
                tsv.display(),
                i + 1,
                cols.len()
            )));
        };
        pairs.push(Pair {
            gt: base.join(gt),
            pred: base.join(pred),
            pyramid: base.join(pyramid),
        });
    }
    if pairs.is_empty() {
        return Err(CliError::Usage(format!("{} lists no pairs", tsv.display())));
    }
    Ok(pairs)
}

fn pair_counts(p: &Pair, a: &MetricsArgs, region: EvalRegion) -> Result<slidekit::metrics::ConfusionCounts> {
    let gt = load_doc(&p.gt, None)?;
    let mut pred = load_doc(&p.pred, None)?;
    let pyr = SlidePyramid::open(&p.pyramid)?;
    let gt_layer = match &a.gt_layer {
        Some(l) => l.clone(),
        None => gt
            .layers
            .first()
            .map(|l| l.name.clone())
            .ok_or_else(|| CliError::Usage(format!("{} has no layers", p.gt.display())))?,
    };
    let pred_layer = match &a.pred_layer {
        Some(l) => l.clone(),
        None if pred.layer(&gt_layer).is_some() || pred.layers.is_empty() => gt_layer.clone(),
        None => pred.layers[0].name.clone(),
    };
    if pred.layer(&pred_layer).is_none() && pred.layers.is_empty() {
        // nothing was predicted: every pixel is a negative
        pred.layers.push(AnnotationLayer::new(pred_layer.clone(), 1, [0, 0, 0]));
    }
    Ok(document_confusion(&gt, &gt_layer, &pred, &pred_layer, &pyr, region)?)
}

fn metrics_cmd(a: MetricsArgs) -> Result<()> {
    let region = parse_region(&a.region)?;
    let report: MetricsReport = match (&a.batch, &a.gt, &a.pred, &a.pyramid) {
        (Some(tsv), None, None, None) => {
            let pairs = batch_pairs(tsv)?;
            let mut counts = Vec::with_capacity(pairs.len());
            for p in &pairs {
                let c = pair_counts(p, &a, region)?;
                println!("{}\t{}", p.gt.display(), metrics(c)?.summary_line());
                counts.push(c);
            }
            micro_average(&counts)?
        }
        (None, Some(gt), Some(pred), Some(pyramid)) => {
            let p = Pair {
                gt: gt.clone(),
                pred: pred.clone(),
                pyramid: pyramid.clone(),
            };
            metrics(pair_counts(&p, &a, region)?)?
        }
        _ => {
            return Err(CliError::Usage(
                "give either <gt> <pred> --pyramid P, or --batch list.tsv alone".into(),
            ))
        }
    };
    println!("{}", report.summary_line());
    if let Some(p) = &a.json {
        write(p, &report.to_json())?;
    }
    Ok(())
}

fn export_patches(a: ExportPatchesArgs) -> Result<()> {
    let doc = load_doc(&a.doc, None)?;
    let pyr = SlidePyramid::open(&a.pyramid)?.with_slide_id(doc.slide_id.clone());
    let opts = PatchExportOptions {
        patch_size: a.patch_size,
        background_ratio: a.background_ratio,
        seed: a.seed,
        ..Default::default()
    };
    let layers: Vec<&str> = a.layers.iter().map(String::as_str).collect();
    let m = export_training_patches(&[(&doc, &pyr)], &layers, &opts, &a.out)?;
    println!("{} patches ({} annotated) in {}", m.entries.len(), m.positives(), m.folder.display());
    Ok(())
}

fn make_synthetic(a: MakeSyntheticArgs) -> Result<()> {
    if a.out.is_none() && a.pyramid.is_none() {
        return Err(CliError::Usage("give --out, --pyramid or both".into()));
    }
    let slide = SyntheticSlide::generate(SyntheticSpec {
        width: a.size,
        height: a.size,
        blobs: a.blobs,
        seed: a.seed,
        tissue_fraction: a.tissue_fraction,
        ..Default::default()
    })?;
    if let Some(out) = &a.out {
        write_png_rgb(&slide.render(), out)?;
    }
    if let Some(dir) = &a.pyramid {
        slide.build_pyramid(dir, a.tile_size)?;
    }
    if let Some(t) = &a.truth {
        let id = a
            .out
            .as_deref()
            .map(stem)
            .or_else(|| a.pyramid.as_deref().map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned()))
            .unwrap_or_default();
        write(t, &encode_doc(t, &slide.truth(&id)))?;
    }
    println!("{}x{} px, {} objects", a.size, a.size, slide.object_count());
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::Usage(format!("bad address {}:{}: {e}", a.host, a.port)))?;
    let default_backend = match &a.backend {
        Some(p) => BackendConfig::load(p)?,
        None => BackendConfig::default(),
    };
    let cfg = ServiceConfig {
        data_dir: a.data_dir,
        max_jobs: a.max_jobs,
        workers: a.workers,
        default_backend,
        ..Default::default()
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io("starting runtime", e))?;
    rt.block_on(slidekit_service::serve(cfg, addr))?;
    Ok(())
}
