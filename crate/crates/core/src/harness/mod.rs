//! File formats, synthetic data and benchmark runners used by the CLI.

pub mod bench;
pub mod dataset;
pub mod pgm;
pub mod synth;
pub mod trace;

use std::path::Path;

use crate::error::Result;

pub(crate) fn with_path(path: &Path, e: std::io::Error) -> crate::error::MrlrError {
    std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into()
}

/// Reads a whole file, naming the path in any I/O error.
pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| with_path(path, e))
}
