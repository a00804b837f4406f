use std::path::PathBuf;

/// Errors produced by every fallible operation in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("gaussian {index} has a zero-norm rotation quaternion")]
    ZeroQuaternion { index: usize },

    #[error("skinning weight row {row} sums to {sum} (expected 1)")]
    InvalidSkinWeights { row: usize, sum: f64 },

    #[error("skinning weight row {row} has negative entry {value}")]
    NegativeSkinWeight { row: usize, value: f64 },

    #[error("joint index {index} out of range for a rig with {joints} joints")]
    InvalidJoint { index: usize, joints: usize },

    #[error("joint {joint} is not a rigid transform: {reason}")]
    NonRigidJoint { joint: usize, reason: String },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid cylinder volume: {0}")]
    InvalidCylinder(String),

    #[error("splat record from gaussian {source_index} is not finite")]
    NonFiniteRecord { source_index: usize },

    #[error("non-finite gradient in group `{group}` at index {index}")]
    NonFiniteGradient { group: String, index: usize },

    #[error("render trace does not match inputs: {0}")]
    TraceMismatch(String),

    #[error("need at least {needed} frames, found {found}")]
    InsufficientFrames { needed: usize, found: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error(
        "truncated file: needed {needed} bytes at offset {offset}, only {available} available"
    )]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("count mismatch for {what}: header declares {declared}, data holds {actual}")]
    CountMismatch {
        what: &'static str,
        declared: usize,
        actual: usize,
    },

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("frame {frame}: missing {kind} (looked for {path})")]
    MissingFrameFile {
        frame: u32,
        kind: &'static str,
        path: PathBuf,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dims(what: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected,
            found,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
