//! Trained networks as DDM subdomain backends.

use rayon::prelude::*;
use snapddm_core::subdomain::{SubdomainClass, SubdomainProblem, SubdomainSolver};
use snapddm_core::{ComplexField2D, Error as CoreError};

use crate::error::{NnError, Result};
use crate::inputs::{decode, encode_problem, in_channels};
use crate::model::SmFno;
use crate::tensor::Real;

/// One network serving one subdomain class.
pub struct NeuralSubdomainSolver<T: Real> {
    model: SmFno<T>,
    class: SubdomainClass,
    name: String,
}

impl<T: Real> NeuralSubdomainSolver<T> {
    pub fn new(model: SmFno<T>, class: SubdomainClass) -> Result<Self> {
        if model.config.in_channels != in_channels(class) {
            return Err(NnError::Mismatch(format!(
                "{class} needs {} input channels, model has {}",
                in_channels(class),
                model.config.in_channels
            )));
        }
        let name = format!("smfno-{class}");
        Ok(Self { model, class, name })
    }

    pub fn class(&self) -> SubdomainClass {
        self.class
    }

    pub fn model(&self) -> &SmFno<T> {
        &self.model
    }

    pub fn predict(&self, p: &SubdomainProblem) -> Result<ComplexField2D> {
        if p.class != self.class {
            return Err(NnError::Mismatch(format!("{} problem sent to the {} network", p.class, self.class)));
        }
        let (nx, ny) = p.shape();
        let s = self.model.config.size;
        if (nx, ny) != (s, s) {
            return Err(NnError::InputShape { expected: format!("{s}x{s}"), got: format!("{nx}x{ny}") });
        }
        let e = encode_problem::<T>(p)?;
        let (out, _) = self.model.forward(&e.input, false)?;
        Ok(decode(&out, nx, ny, &e.scaling))
    }
}

impl<T: Real> SubdomainSolver for NeuralSubdomainSolver<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn solve_batch(&self, problems: &[&SubdomainProblem]) -> Vec<snapddm_core::Result<ComplexField2D>> {
        problems
            .par_iter()
            .enumerate()
            .map(|(id, p)| self.predict(p).map_err(|e| CoreError::SubdomainFailure { id, reason: e.to_string() }))
            .collect()
    }
}
