//! On-disk layout of the data directory.
//!
//! ```text
//! blobs/<sha256>               uploaded source bytes
//! pyramids/<sha256>-t<tile>/   pyramid built from a blob (shared by uploads)
//! slides/<id>/slide.json       slide record
//! slides/<id>/annotations/current.json
//! slides/<id>/annotations/history/rev-<n>.json
//! training/<folder>/           exported training data
//! timing.csv
//! ```

use std::fs;
use std::io::Write;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, OnceLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use slidekit::annotations::AnnotationDocument;
use slidekit::pipeline::TimingRecord;
use slidekit::pyramid::SlidePyramid;
use slidekit::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlideStatus {
    Building,
    Ready,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideInfo {
    pub id: String,
    pub name: String,
    pub status: SlideStatus,
    pub sha256: String,
    pub tile_size: u32,
    pub width: u32,
    pub height: u32,
    pub levels: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub created_at: DateTime<Utc>,
}

pub struct Slide {
    pub info: parking_lot::Mutex<SlideInfo>,
    pub pyramid: OnceLock<Arc<SlidePyramid>>,
    /// Current annotations; holding the lock serializes writers.
    pub doc: tokio::sync::Mutex<AnnotationDocument>,
}

impl Slide {
    pub fn id(&self) -> String {
        self.info.lock().id.clone()
    }

    pub fn snapshot(&self) -> SlideInfo {
        self.info.lock().clone()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes via a temporary sibling and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().expect("file path has a parent");
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[derive(Debug, Clone)]
pub struct DataDir {
    root: PathBuf,
}

impl DataDir {
    pub fn open(root: &Path) -> Result<Self> {
        for sub in ["blobs", "pyramids", "slides", "training"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
        }
        let dd = DataDir { root: root.to_path_buf() };
        if !dd.timing_path().exists() {
            write_atomic(&dd.timing_path(), format!("{}\n", TimingRecord::CSV_HEADER).as_bytes())?;
        }
        Ok(dd)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn blob_path(&self, sha: &str) -> PathBuf {
        self.root.join("blobs").join(sha)
    }

    pub fn pyramid_dir(&self, sha: &str, tile_size: u32) -> PathBuf {
        self.root.join("pyramids").join(format!("{sha}-t{tile_size}"))
    }

    pub fn slide_dir(&self, id: &str) -> PathBuf {
        self.root.join("slides").join(id)
    }

    pub fn timing_path(&self) -> PathBuf {
        self.root.join("timing.csv")
    }

    /// Resolves a client-supplied training folder, which must stay inside
    /// `training/`.
    pub fn training_dir(&self, folder: &str) -> Result<PathBuf> {
        let rel = Path::new(folder);
        let ok = !folder.is_empty() && rel.components().all(|c| matches!(c, Component::Normal(_)));
        if !ok {
            return Err(Error::InvalidParam(format!("training folder {folder:?} must be a relative path without '..'")));
        }
        Ok(self.root.join("training").join(rel))
    }

    pub fn save_info(&self, info: &SlideInfo) -> Result<()> {
        let json = serde_json::to_vec_pretty(info).expect("slide info serializes");
        write_atomic(&self.slide_dir(&info.id).join("slide.json"), &json)
    }

    pub fn save_doc(&self, id: &str, doc: &AnnotationDocument) -> Result<()> {
        let dir = self.slide_dir(id).join("annotations");
        let json = doc.to_json_pretty();
        write_atomic(&dir.join("history").join(format!("rev-{:06}.json", doc.revision)), &json)?;
        write_atomic(&dir.join("current.json"), &json)
    }

    pub fn load_doc(&self, id: &str) -> Result<AnnotationDocument> {
        let path = self.slide_dir(id).join("annotations").join("current.json");
        match fs::read(&path) {
            Ok(bytes) => AnnotationDocument::from_json(&bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(AnnotationDocument::new(id)),
            Err(e) => Err(Error::io(format!("reading {}", path.display()), e)),
        }
    }

    pub fn append_timing(&self, t: &TimingRecord) -> Result<()> {
        let path = self.timing_path();
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        writeln!(f, "{}", t.csv_row()).map_err(|e| Error::io(format!("appending to {}", path.display()), e))
    }

    /// Slide records found on disk, oldest first.
    pub fn load_slides(&self) -> Result<Vec<SlideInfo>> {
        let dir = self.root.join("slides");
        let mut out = Vec::new();
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
        for entry in entries.flatten() {
            let path = entry.path().join("slide.json");
            let Ok(bytes) = fs::read(&path) else { continue };
            match serde_json::from_slice::<SlideInfo>(&bytes) {
                Ok(info) => out.push(info),
                Err(e) => tracing::warn!(path = %path.display(), error = %e, "skipping unreadable slide record"),
            }
        }
        out.sort_by(|a, b| (a.created_at, &a.id).cmp(&(b.created_at, &b.id)));
        Ok(out)
    }
}
