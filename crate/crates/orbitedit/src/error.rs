//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("view index {index} out of range for {n_views} views")]
    ViewIndex { index: usize, n_views: usize },

    #[error("shift offset {p} out of range for a ring of {n} views")]
    ShiftRange { p: usize, n: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("invalid scene: {0}")]
    Scene(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("edit refers to tag '{tag}' which is not in the scene")]
    EditTarget { tag: String },

    #[error("invalid edit: {0}")]
    Edit(String),

    #[error("anchor view 0 coincides with the identity view; fusion weights would be degenerate")]
    DegenerateAnchor,

    #[error("edit changes no visible pixels in any view")]
    NoVisibleChange { per_view: Vec<usize> },

    #[error("attention tap rejected: {0}")]
    Injection(String),

    #[error("sampler state is already at t=0 and cannot step further")]
    StepAtZero,

    #[error("sampler hook failed at timestep {t}")]
    Hook {
        t: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training failed: {0}")]
    Train(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("integrity check failed for {path}: {detail}")]
    Integrity { path: String, detail: String },

    #[error("metric inputs do not match: {0}")]
    Metric(String),

    #[error("output directory is locked (lock file {0} exists; remove it if no other run is active)")]
    Locked(String),

    #[error("unrecognized file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("TOML error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}
