//! Face alignment by misalignment-robust locality-constrained representation.
//!
//! A query face observed under an unknown similarity warp is aligned to a
//! dictionary of training faces by Gauss-Newton steps. Each outer iteration
//! ranks atoms with a locality adaptor; each inner iteration solves a
//! penalized least-squares step by block elimination against a cached Gram
//! inverse. Aligned faces can then be classified by collaborative (l2) or
//! sparse (l1) representation.

pub mod align;
pub mod dictionary;
pub mod error;
pub mod harness;
pub mod image;
pub mod parallel;
pub mod recognize;
mod screen;
pub mod solver;
pub mod transform;

pub use align::{align, AlignConfig, AlignResult, IterationRecord};
pub use dictionary::{Dictionary, Label, LocalSelection, LocalityAdaptor, SubDictionary};
pub use error::{MrlrError, Result};
pub use image::{Frame, Image, JacobianMatrix};
pub use recognize::{Coder, CodingResult};
pub use solver::{GramCache, StepSolution};
pub use transform::{Rect, SimilarityParams};
