//! Panel data, preprocessing, batch samplers, the synthetic market, and
//! panel file I/O.

mod io;
mod panel;
mod preprocess;
mod sample;
mod synth;

pub use io::{decode_panel, encode_panel, read_panel, read_returns_csv, write_panel, write_returns_csv, GLPN_HEADER_LEN, GLPN_MAGIC, GLPN_VERSION};
pub use panel::{DayRange, FeaturePanel, ReturnPanel};
pub use preprocess::{preprocess, standardize, winsorize, PreprocessStats, WinsorRule};
pub use sample::{cross_section_at, sample_day, sample_window, window_at, CrossSectionBatch, WindowBatch};
pub use synth::{generate_synthetic, SynthConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{what}: expected shape {expected:?}, got {actual:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("sampling failed: {0}")]
    Sampling(String),
    #[error("not a panel file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported panel file version {0}")]
    BadVersion(u16),
    #[error("truncated panel file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("malformed returns file: {0}")]
    Returns(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
