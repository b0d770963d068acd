use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("label {label} has {found} shots, at least {required} required")]
    Coverage {
        label: usize,
        found: usize,
        required: usize,
    },

    #[error("histogram peaks never separate into {expected} classes inside the window")]
    InsufficientSeparation { expected: usize },

    #[error("window {start:.3e}..{end:.3e} s lies outside the waveform extent {first:.3e}..{last:.3e} s")]
    Window {
        start: f64,
        end: f64,
        first: f64,
        last: f64,
    },

    #[error("invalid shot container: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
