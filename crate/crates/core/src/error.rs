use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("cannot decode image: {0}")]
    DecodeBytes(#[source] image::ImageError),
    #[error("cannot encode image: {0}")]
    Encode(#[source] image::ImageError),
    #[error("image has zero width or height")]
    ZeroDimension,
    #[error("invalid tile size {0}; expected 256, 512 or 1024")]
    InvalidTileSize(u32),
    #[error("insufficient disk space writing {path}")]
    DiskFull { path: PathBuf },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid pyramid at {path}: {reason}")]
    InvalidPyramid { path: PathBuf, reason: String },
    #[error("level {level} out of range (pyramid has {levels} levels)")]
    LevelOutOfRange { level: u32, levels: u32 },
    #[error("region lies outside level bounds")]
    RegionOutOfBounds,
    #[error("empty histogram")]
    EmptyHistogram,
    #[error("slide smaller than tile ({width}x{height} < {tile_size})")]
    SlideSmallerThanTile {
        width: u32,
        height: u32,
        tile_size: u32,
    },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("invalid backend config: {0}")]
    BackendConfig(String),
    #[error("backend is not trainable")]
    NotTrainable,
    #[error("backend failed on tile at ({x}, {y}): {reason}")]
    BackendTile { x: u32, y: u32, reason: String },
    #[error("backend protocol error: {0}")]
    Protocol(String),
    #[error("backend process error: {0}")]
    Process(String),
    #[error("class-count mismatch: expected {expected}, got {got}")]
    ClassMismatch { expected: u8, got: u8 },
    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("malformed XML at line {line}: {message}")]
    Xml { line: usize, message: String },
    #[error("unknown element id {0}")]
    UnknownElement(String),
    #[error("unknown layer {0}")]
    UnknownLayer(String),
    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),
    #[error("empty training layer")]
    EmptyTrainingLayer,
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimMismatch(u32, u32, u32, u32),
    #[error("empty confusion counts")]
    EmptyCounts,
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Stable snake_case identifier for the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Decode { .. } | Error::DecodeBytes(_) => "decode",
            Error::Encode(_) => "encode",
            Error::ZeroDimension => "zero_dimension",
            Error::InvalidTileSize(_) => "invalid_tile_size",
            Error::DiskFull { .. } => "disk_full",
            Error::Io { .. } => "io",
            Error::InvalidPyramid { .. } => "invalid_pyramid",
            Error::LevelOutOfRange { .. } => "level_out_of_range",
            Error::RegionOutOfBounds => "region_out_of_bounds",
            Error::EmptyHistogram => "empty_histogram",
            Error::SlideSmallerThanTile { .. } => "slide_smaller_than_tile",
            Error::InvalidParam(_) => "invalid_param",
            Error::BackendConfig(_) => "backend_config",
            Error::NotTrainable => "not_trainable",
            Error::BackendTile { .. } => "backend_tile",
            Error::Protocol(_) => "protocol",
            Error::Process(_) => "process",
            Error::ClassMismatch { .. } => "class_mismatch",
            Error::Schema { .. } => "schema",
            Error::Xml { .. } => "xml",
            Error::UnknownElement(_) => "unknown_element",
            Error::UnknownLayer(_) => "unknown_layer",
            Error::InvalidPolygon(_) => "invalid_polygon",
            Error::EmptyTrainingLayer => "empty_training_layer",
            Error::DimMismatch(..) => "dim_mismatch",
            Error::EmptyCounts => "empty_counts",
        }
    }

    /// True for errors caused by bad input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidTileSize(_)
                | Error::ZeroDimension
                | Error::LevelOutOfRange { .. }
                | Error::RegionOutOfBounds
                | Error::EmptyHistogram
                | Error::SlideSmallerThanTile { .. }
                | Error::InvalidParam(_)
                | Error::BackendConfig(_)
                | Error::NotTrainable
                | Error::ClassMismatch { .. }
                | Error::Schema { .. }
                | Error::Xml { .. }
                | Error::UnknownElement(_)
                | Error::UnknownLayer(_)
                | Error::InvalidPolygon(_)
                | Error::EmptyTrainingLayer
                | Error::DimMismatch(..)
                | Error::EmptyCounts
                | Error::Decode { .. }
                | Error::DecodeBytes(_)
        )
    }
}
