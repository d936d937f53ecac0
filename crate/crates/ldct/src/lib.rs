//! Robust cross-domain low-dose CT denoising.
//!
//! The reconstruction network is a conv/deconv encoder-decoder whose last
//! encoder and decoder layers carry factorized-Gaussian weight posteriors.
//! Training aligns the noise statistics of a labeled source domain and an
//! unlabeled target domain in two places at once: in latent space, by
//! matching the covariance of Monte-Carlo embeddings of each input across
//! domains ([`bnua`]), and in image space, by adversarially matching the
//! distributions of input-minus-reconstruction residuals ([`rda`]).
//!
//! The crate ships a synthetic two-domain phantom pipeline ([`data`]) so the
//! whole method can be exercised end to end on a laptop, plus the usual
//! image-quality metrics ([`metrics`]) and a training/checkpoint/report
//! stack ([`training`], [`report`]).

use std::path::PathBuf;

pub mod autodiff;
pub mod bnua;
pub mod data;
pub mod metrics;
pub mod model;
pub mod rda;
pub mod report;
pub mod rng;
pub mod training;
pub mod variational;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("malformed log {path}: row {row}: {detail}")]
    MalformedLog {
        path: PathBuf,
        row: usize,
        detail: String,
    },

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
