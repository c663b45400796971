//! Subdomain data <-> network tensors.
//!
//! Channel stacks per class:
//! material `[(eps - 1) / 15, Re g, Im g]`, source `[Re J, Im J, Re g, Im g]`,
//! PML `[profile / 40, Re g, Im g]`. Boundary data sit on the one-cell frame.
//! Every sample is divided by `s = mean |g|`; the network predicts
//! `H k0 delta / s`, which keeps targets of order one.

use num_complex::Complex64 as c64;
use snapddm_core::datagen::SubdomainSample;
use snapddm_core::robin::{rasterize_traces, BoundaryTraceSet};
use snapddm_core::subdomain::{SubdomainClass, SubdomainProblem};
use snapddm_core::{ComplexField2D, RealField2D};

use crate::error::{NnError, Result};
use crate::tensor::Real;

pub const PML_PROFILE_SCALE: f64 = 1.0 / 40.0;

pub fn in_channels(class: SubdomainClass) -> usize {
    match class {
        SubdomainClass::Material | SubdomainClass::Pml => 3,
        SubdomainClass::Source => 4,
    }
}

/// Per-sample normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaling {
    /// Divides the boundary data and sources.
    pub data: f64,
    pub k0_delta: f64,
}

impl Scaling {
    pub fn new(g: &BoundaryTraceSet, source: &ComplexField2D, k0_delta: f64) -> Self {
        let mg = g.mean_abs();
        let data = if mg > 0.0 {
            mg
        } else {
            let ms = source.mean_abs();
            if ms > 0.0 {
                ms
            } else {
                1.0
            }
        };
        Self { data, k0_delta }
    }

    /// Factor from physical `H` to the network target.
    pub fn field_factor(&self) -> f64 {
        self.k0_delta / self.data
    }
}

pub struct Encoded<T> {
    pub class: SubdomainClass,
    pub input: Vec<T>,
    pub scaling: Scaling,
}

pub fn encode<T: Real>(
    class: SubdomainClass,
    eps: &RealField2D,
    source: &ComplexField2D,
    pml_profile: &RealField2D,
    g: &BoundaryTraceSet,
    k0_delta: f64,
) -> Result<Encoded<T>> {
    let (nx, ny) = eps.shape();
    if source.shape() != (nx, ny) || pml_profile.shape() != (nx, ny) || g.block_shape() != (nx, ny) {
        return Err(NnError::InputShape {
            expected: format!("{nx}x{ny} channels"),
            got: format!("source {:?}, profile {:?}, traces {:?}", source.shape(), pml_profile.shape(), g.block_shape()),
        });
    }
    let scaling = Scaling::new(g, source, k0_delta);
    let inv = 1.0 / scaling.data;
    let (gre, gim) = rasterize_traces(g);
    let mut planes: Vec<Vec<f64>> = match class {
        SubdomainClass::Material => vec![eps.as_slice().iter().map(|e| (e - 1.0) / 15.0).collect()],
        SubdomainClass::Source => vec![
            source.as_slice().iter().map(|j| j.re * inv).collect(),
            source.as_slice().iter().map(|j| j.im * inv).collect(),
        ],
        SubdomainClass::Pml => vec![pml_profile.as_slice().iter().map(|p| p * PML_PROFILE_SCALE).collect()],
    };
    planes.push(gre.as_slice().iter().map(|v| v * inv).collect());
    planes.push(gim.as_slice().iter().map(|v| v * inv).collect());
    Ok(Encoded { class, input: planes.into_iter().flatten().map(T::of).collect(), scaling })
}

pub fn encode_sample<T: Real>(s: &SubdomainSample, k0_delta: f64) -> Result<Encoded<T>> {
    encode(s.class, &s.eps, &s.source, &s.pml_profile, &s.g, k0_delta)
}

pub fn encode_problem<T: Real>(p: &SubdomainProblem) -> Result<Encoded<T>> {
    let (nx, ny) = p.shape();
    let profile = p.stretch.as_ref().map(|s| s.sigma_image()).unwrap_or_else(|| RealField2D::filled(nx, ny, 0.0));
    encode(p.class, &p.eps, &p.source, &profile, &p.g, p.k0_delta)
}

/// `[Re, Im]` planes of the scaled field.
pub fn target<T: Real>(h: &ComplexField2D, scaling: &Scaling) -> Vec<T> {
    let f = scaling.field_factor();
    let re = h.as_slice().iter().map(|v| T::of(v.re * f));
    let im = h.as_slice().iter().map(|v| T::of(v.im * f));
    re.chain(im).collect()
}

/// Scaled complex field from `[Re, Im]` planes, without undoing the scaling.
pub fn planes_to_field<T: Real>(out: &[T], nx: usize, ny: usize) -> ComplexField2D {
    let n = nx * ny;
    ComplexField2D::from_fn(nx, ny, |x, y| {
        let i = x * ny + y;
        c64::new(out[i].as_f64(), out[n + i].as_f64())
    })
}

/// Physical field from network output.
pub fn decode<T: Real>(out: &[T], nx: usize, ny: usize, scaling: &Scaling) -> ComplexField2D {
    let mut h = planes_to_field(out, nx, ny);
    h.scale(c64::new(1.0 / scaling.field_factor(), 0.0));
    h
}
