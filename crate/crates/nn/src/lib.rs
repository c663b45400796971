//! Neural subdomain solver: the self-modulating Fourier neural operator,
//! hybrid data/physics losses and a small training loop.

pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod inputs;
pub mod losses;
pub mod model;
pub mod reference;
pub mod solver;
pub mod spectral;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{NnError, Result};
pub use model::{count_flops, count_params, FlopCount, InitOptions, SmFno, SmFnoConfig};
pub use tensor::{Real, Tensor};
