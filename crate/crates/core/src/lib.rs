//! Multi-dictionary tensor decomposition.
//!
//! A 3-way tensor is modelled as `⟦Φ₁Y₁, Φ₂Y₂, Φ₃Y₃⟧`, a CPD whose factors
//! are sparse codes `Yᵢ` over fixed analytical dictionaries `Φᵢ`. The
//! encodings are fitted with ADMM ([`solver::solve`]), optionally imputing
//! missing cells densely or through a sparse fill-in scheme.

pub mod dictionary;
pub mod dump;
pub mod error;
pub mod io;
pub mod rank;
pub mod solver;
pub mod synth;
pub mod tensor;

pub use dictionary::{DictSpec, Dictionary, Graph};
pub use error::{MdtdError, Result};
pub use solver::{Codes, solve, FitReport, ImputeMode, MdtdModel, SolverConfig, TensorRef};
pub use tensor::{FactorMatrix, Mask, SparseTensor3, Tensor3};
