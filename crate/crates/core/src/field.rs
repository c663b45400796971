//! Grid geometry and the 2D arrays shared by every solver.
//!
//! Everything downstream works in nondimensional units: lengths in cells,
//! `mu0 = 1`, and the wave operator becomes
//! `div((1/eps) grad H) + (k0*delta)^2 H = -i (k0*delta) J`.
//! Only [`GridSpec`] carries physical units.

use std::f64::consts::PI;

use num_complex::Complex64 as c64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DELTA: f64 = 6.25e-9;
pub const DEFAULT_LAMBDA0: f64 = 1.05e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    /// Cell size in meters.
    pub delta: f64,
    /// Vacuum wavelength in meters.
    pub lambda0: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        Self::with_units(nx, ny, DEFAULT_DELTA, DEFAULT_LAMBDA0)
    }

    pub fn with_units(nx: usize, ny: usize, delta: f64, lambda0: f64) -> Result<Self> {
        let g = Self {
            nx,
            ny,
            delta,
            lambda0,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 8 || self.ny < 8 {
            return Err(Error::InvalidGrid(format!(
                "grid must be at least 8x8, got {}x{}",
                self.nx, self.ny
            )));
        }
        if !(self.delta > 0.0) || !(self.lambda0 > 0.0) {
            return Err(Error::InvalidGrid(
                "delta and lambda0 must be positive".into(),
            ));
        }
        if self.k0_delta() >= 1.0 {
            return Err(Error::InvalidGrid(format!(
                "under-resolved: k0*delta = {:.4} >= 1",
                self.k0_delta()
            )));
        }
        Ok(())
    }

    /// Vacuum wavenumber in 1/m.
    pub fn k0(&self) -> f64 {
        2.0 * PI / self.lambda0
    }

    /// Nondimensional wavenumber per cell.
    pub fn k0_delta(&self) -> f64 {
        self.k0() * self.delta
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How the local wavenumber used in Robin conditions scales with permittivity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WavevectorConvention {
    /// `k = k0 * eps`
    #[serde(alias = "paper_linear_eps")]
    #[default]
    LinearEps,
    /// `k = k0 * sqrt(eps)`
    SqrtEps,
}

impl WavevectorConvention {
    pub fn k_delta(self, k0_delta: f64, eps: f64) -> f64 {
        match self {
            Self::LinearEps => k0_delta * eps,
            Self::SqrtEps => k0_delta * eps.sqrt(),
        }
    }
}

impl std::str::FromStr for WavevectorConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_linear_eps" | "linear_eps" | "linear" => Ok(Self::LinearEps),
            "sqrt_eps" | "sqrt" => Ok(Self::SqrtEps),
            other => Err(Error::InvalidParams(format!(
                "unknown wavevector convention '{other}'"
            ))),
        }
    }
}

/// Row-major 2D array indexed by `(x, y)`; the flat index is `x * ny + y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Array2D<T> {
    nx: usize,
    ny: usize,
    data: Vec<T>,
}

pub type ComplexField2D = Array2D<c64>;
pub type RealField2D = Array2D<f64>;

impl<T: Clone> Array2D<T> {
    pub fn filled(nx: usize, ny: usize, value: T) -> Self {
        Self {
            nx,
            ny,
            data: vec![value; nx * ny],
        }
    }

    pub fn from_vec(nx: usize, ny: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != nx * ny {
            return Err(Error::Format(format!(
                "expected {} values for a {nx}x{ny} array, got {}",
                nx * ny,
                data.len()
            )));
        }
        Ok(Self { nx, ny, data })
    }

    pub fn from_fn(nx: usize, ny: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(nx * ny);
        for x in 0..nx {
            for y in 0..ny {
                data.push(f(x, y));
            }
        }
        Self { nx, ny, data }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.nx && y < self.ny);
        x * self.ny + y
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[x * self.ny + y]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        let i = self.idx(x, y);
        self.data[i] = v;
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        let i = self.idx(x, y);
        &mut self.data[i]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Clone>(&self, f: impl FnMut(&T) -> U) -> Array2D<U> {
        Array2D {
            nx: self.nx,
            ny: self.ny,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Copies the `w x h` window whose lower corner is `(ox, oy)`.
    pub fn crop(&self, ox: usize, oy: usize, w: usize, h: usize) -> Self {
        assert!(ox + w <= self.nx && oy + h <= self.ny, "crop out of bounds");
        Self::from_fn(w, h, |x, y| self.get(ox + x, oy + y).clone())
    }

    /// Rotates by `quarter_turns * 90` degrees counter-clockwise in the
    /// `(x, y)` plane: the cell at `(x, y)` moves to `(ny - 1 - y, x)`.
    pub fn rot90(&self, quarter_turns: usize) -> Self {
        let mut out = self.clone();
        for _ in 0..quarter_turns % 4 {
            let (nx, ny) = out.shape();
            out = Self::from_fn(ny, nx, |x, y| out.get(y, ny - 1 - x).clone());
        }
        out
    }

    pub fn same_shape<U>(&self, other: &Array2D<U>) -> Result<()> {
        if self.shape() != (other.nx, other.ny) {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                got: (other.nx, other.ny),
            });
        }
        Ok(())
    }
}

impl Array2D<c64> {
    pub fn zeros(nx: usize, ny: usize) -> Self {
        Self::filled(nx, ny, c64::new(0.0, 0.0))
    }

    pub fn mean_abs(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.norm()).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub fn scale(&mut self, s: c64) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

/// Mean absolute difference normalized by the mean absolute reference value.
pub fn relative_l1(a: &ComplexField2D, b: &ComplexField2D) -> Result<f64> {
    b.same_shape(a)?;
    let n = b.len() as f64;
    let denom = b.as_slice().iter().map(|v| v.norm()).sum::<f64>() / n;
    if denom == 0.0 {
        return Err(Error::DegenerateReference);
    }
    let num = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).norm())
        .sum::<f64>()
        / n;
    Ok(num / denom)
}

/// Relative permittivity per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialMap(RealField2D);

impl MaterialMap {
    pub fn new(eps: RealField2D) -> Result<Self> {
        if let Some(bad) = eps.as_slice().iter().find(|&&e| !(e >= 1.0) || !e.is_finite()) {
            return Err(Error::InvalidMaterial(format!(
                "permittivity must be finite and >= 1, found {bad}"
            )));
        }
        Ok(Self(eps))
    }

    pub fn uniform(nx: usize, ny: usize, eps: f64) -> Result<Self> {
        Self::new(RealField2D::filled(nx, ny, eps))
    }

    pub fn eps(&self) -> &RealField2D {
        &self.0
    }

    pub fn into_inner(self) -> RealField2D {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        *self.0.get(x, y)
    }

    pub fn max(&self) -> f64 {
        self.0.as_slice().iter().copied().fold(1.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.0.as_slice().iter().sum::<f64>() / self.0.len() as f64
    }
}

/// Complex magnetic current density per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceMap(ComplexField2D);

impl SourceMap {
    pub fn new(j: ComplexField2D) -> Self {
        Self(j)
    }

    pub fn zeros(nx: usize, ny: usize) -> Self {
        Self(ComplexField2D::zeros(nx, ny))
    }

    pub fn j(&self) -> &ComplexField2D {
        &self.0
    }

    pub fn j_mut(&mut self) -> &mut ComplexField2D {
        &mut self.0
    }

    pub fn into_inner(self) -> ComplexField2D {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> c64 {
        *self.0.get(x, y)
    }

    pub fn is_zero(&self) -> bool {
        self.0.as_slice().iter().all(|v| *v == c64::new(0.0, 0.0))
    }

    pub fn support(&self) -> usize {
        self.0
            .as_slice()
            .iter()
            .filter(|v| **v != c64::new(0.0, 0.0))
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(rng: &mut ChaCha8Rng, nx: usize, ny: usize) -> ComplexField2D {
        ComplexField2D::from_fn(nx, ny, |_, _| {
            c64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    #[test]
    fn default_grid_k0_delta() {
        let g = GridSpec::new(64, 64).unwrap();
        let expected = 2.0 * PI * 6.25e-9 / 1.05e-6;
        assert!((g.k0_delta() - expected).abs() < 1e-15);
        assert!((g.k0_delta() - 0.037400).abs() < 1e-6);
    }

    #[test]
    fn grid_rejects_bad_shapes() {
        assert!(GridSpec::new(4, 64).is_err());
        assert!(GridSpec::with_units(64, 64, 1.0, 2.0).is_err());
        assert!(GridSpec::with_units(64, 64, -1.0, 2.0).is_err());
    }

    #[test]
    fn relative_l1_identity_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_field(&mut rng, 16, 16);
        assert_eq!(relative_l1(&b, &b).unwrap(), 0.0);
        let a = b.map(|v| v * 1.05);
        assert!((relative_l1(&a, &b).unwrap() - 0.05).abs() < 1e-14);
    }

    #[test]
    fn relative_l1_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_field(&mut rng, 64, 64);
        let b = random_field(&mut rng, 64, 64);
        let mut num = 0.0;
        let mut den = 0.0;
        for x in 0..64 {
            for y in 0..64 {
                let (p, q) = (a.get(x, y), b.get(x, y));
                num += ((p.re - q.re).powi(2) + (p.im - q.im).powi(2)).sqrt();
                den += (q.re * q.re + q.im * q.im).sqrt();
            }
        }
        let oracle = num / den;
        assert!((relative_l1(&a, &b).unwrap() - oracle).abs() < 1e-14);
    }

    #[test]
    fn relative_l1_errors() {
        let a = ComplexField2D::zeros(8, 8);
        let b = ComplexField2D::zeros(8, 9);
        assert!(matches!(relative_l1(&a, &b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(
            relative_l1(&a, &a.clone()),
            Err(Error::DegenerateReference)
        ));
    }

    #[test]
    fn rot90_four_times_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_field(&mut rng, 5, 7);
        assert_eq!(a.rot90(4), a);
        let r = a.rot90(1);
        assert_eq!(r.shape(), (7, 5));
        assert_eq!(*r.get(6, 0), *a.get(0, 0));
    }

    #[test]
    fn material_rejects_sub_unity() {
        assert!(MaterialMap::uniform(8, 8, 0.5).is_err());
        assert!(MaterialMap::uniform(8, 8, 1.0).is_ok());
    }

    proptest::proptest! {
        #[test]
        fn relative_l1_phase_invariant(seed in 0u64..1000, phase in 0.0f64..6.28) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_field(&mut rng, 8, 8);
            let b = random_field(&mut rng, 8, 8);
            let rot = c64::from_polar(1.0, phase);
            let r0 = relative_l1(&a, &b).unwrap();
            let r1 = relative_l1(&a.map(|v| v * rot), &b.map(|v| v * rot)).unwrap();
            proptest::prop_assert!(r0 >= 0.0);
            proptest::prop_assert!((r0 - r1).abs() < 1e-12);
        }
    }
}
