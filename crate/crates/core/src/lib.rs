//! Frequency-domain wave solvers on 2D grids: reference FDFD, Robin-coupled
//! subdomains, the overlapping domain-decomposition loop, and synthetic
//! training data generation.

pub mod datagen;
pub mod dataset;
pub mod ddm;
pub mod error;
pub mod fdfd;
pub mod field;
pub mod io;
pub mod multifrontal;
pub mod robin;
pub mod sparse;
pub mod subdomain;

pub use error::{Error, Result};
pub use field::{
    relative_l1, Array2D, ComplexField2D, GridSpec, MaterialMap, RealField2D, SourceMap,
    WavevectorConvention,
};
pub use num_complex::Complex64 as c64;
