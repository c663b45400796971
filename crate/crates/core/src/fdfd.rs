//! Global finite-difference frequency-domain solver with uniaxial PML and
//! Bloch-periodic sides.
//!
//! The discrete operator at cell `(x, y)` is
//! `(1/sx) Dx((1/(eps sx)) Dx H) + (1/sy) Dy((1/(eps sy)) Dy H) + (k0 delta)^2 H`
//! on a 5-point stencil, with `1/eps` and the stretch factors averaged onto
//! cell faces.

use std::time::Instant;

use num_complex::Complex64 as c64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ComplexField2D, GridSpec, MaterialMap, RealField2D, SourceMap};
use crate::multifrontal::{GridLayout, MultifrontalLu};
use crate::sparse::{SparseBuilder, SparseOperator};

const ZERO: c64 = c64::new(0.0, 0.0);
const ONE: c64 = c64::new(1.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// `x = 0`
    Left,
    /// `x = nx - 1`
    Right,
    /// `y = ny - 1`
    Top,
    /// `y = 0`
    Bottom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PmlSides {
    pub left: bool,
    pub right: bool,
    pub top: bool,
    pub bottom: bool,
}

impl PmlSides {
    pub const ALL: Self = Self {
        left: true,
        right: true,
        top: true,
        bottom: true,
    };
    pub const NONE: Self = Self {
        left: false,
        right: false,
        top: false,
        bottom: false,
    };

    pub fn contains(&self, side: Side) -> bool {
        match side {
            Side::Left => self.left,
            Side::Right => self.right,
            Side::Top => self.top,
            Side::Bottom => self.bottom,
        }
    }

    pub fn any(&self) -> bool {
        self.left || self.right || self.top || self.bottom
    }

    pub fn from_sides(sides: &[Side]) -> Self {
        let mut s = Self::NONE;
        for side in sides {
            match side {
                Side::Left => s.left = true,
                Side::Right => s.right = true,
                Side::Top => s.top = true,
                Side::Bottom => s.bottom = true,
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PmlSpec {
    pub thickness: usize,
    /// Polynomial grade of the conductivity profile.
    pub exponent: f64,
    pub target_reflection: f64,
    pub sides: PmlSides,
}

impl Default for PmlSpec {
    fn default() -> Self {
        Self {
            thickness: 40,
            exponent: 3.0,
            target_reflection: 1e-12,
            sides: PmlSides::ALL,
        }
    }
}

impl PmlSpec {
    pub fn none() -> Self {
        Self {
            sides: PmlSides::NONE,
            ..Self::default()
        }
    }

    pub fn with_thickness(thickness: usize) -> Self {
        Self {
            thickness,
            ..Self::default()
        }
    }

    pub fn is_active(&self) -> bool {
        self.sides.any() && self.thickness > 0
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        if !self.is_active() {
            return Ok(());
        }
        if self.thickness < 8 {
            return Err(Error::InvalidPml(format!(
                "thickness {} < 8 cells",
                self.thickness
            )));
        }
        if 2 * self.thickness >= grid.nx.min(grid.ny) {
            return Err(Error::InvalidPml(format!(
                "thickness {} is at least half the {}x{} domain",
                self.thickness, grid.nx, grid.ny
            )));
        }
        if !(2.0..=4.0).contains(&self.exponent) {
            return Err(Error::InvalidPml(format!(
                "grade {} outside [2, 4]",
                self.exponent
            )));
        }
        if !(self.target_reflection > 0.0 && self.target_reflection < 1.0) {
            return Err(Error::InvalidPml(format!(
                "target reflection {} outside (0, 1)",
                self.target_reflection
            )));
        }
        Ok(())
    }

    pub fn sigma_max(&self, k0_delta: f64) -> f64 {
        -(self.exponent + 1.0) * self.target_reflection.ln()
            / (2.0 * self.thickness as f64 * k0_delta)
    }

    /// Per-cell stretch factors along one axis of length `n`.
    pub fn axis_stretch(&self, n: usize, low: bool, high: bool, k0_delta: f64) -> Vec<c64> {
        let t = self.thickness;
        let smax = self.sigma_max(k0_delta);
        (0..n)
            .map(|i| {
                let d = if low && i < t {
                    (t - i) as f64
                } else if high && i + t >= n {
                    (i + t + 1 - n) as f64
                } else {
                    0.0
                };
                c64::new(1.0, smax * (d / t as f64).powf(self.exponent))
            })
            .collect()
    }

    /// `(sx, sy)` stretch profiles for the whole grid.
    pub fn stretch_profiles(&self, grid: &GridSpec) -> (Vec<c64>, Vec<c64>) {
        if !self.is_active() {
            return (vec![ONE; grid.nx], vec![ONE; grid.ny]);
        }
        let k = grid.k0_delta();
        (
            self.axis_stretch(grid.nx, self.sides.left, self.sides.right, k),
            self.axis_stretch(grid.ny, self.sides.bottom, self.sides.top, k),
        )
    }

    pub fn in_pml(&self, grid: &GridSpec, x: usize, y: usize) -> bool {
        if !self.is_active() {
            return false;
        }
        let t = self.thickness;
        (self.sides.left && x < t)
            || (self.sides.right && x + t >= grid.nx)
            || (self.sides.bottom && y < t)
            || (self.sides.top && y + t >= grid.ny)
    }

    pub fn mask(&self, grid: &GridSpec) -> crate::field::Array2D<bool> {
        crate::field::Array2D::from_fn(grid.nx, grid.ny, |x, y| self.in_pml(grid, x, y))
    }

    /// `Im sx(x) + Im sy(y)`: the scalar PML descriptor stored with samples.
    pub fn sigma_map(&self, grid: &GridSpec) -> RealField2D {
        let (sx, sy) = self.stretch_profiles(grid);
        RealField2D::from_fn(grid.nx, grid.ny, |x, y| sx[x].im + sy[y].im)
    }

    /// Cells forced to zero: the outermost ring on PML sides.
    pub fn is_dirichlet(&self, grid: &GridSpec, x: usize, y: usize) -> bool {
        self.is_active()
            && ((self.sides.left && x == 0)
                || (self.sides.right && x + 1 == grid.nx)
                || (self.sides.bottom && y == 0)
                || (self.sides.top && y + 1 == grid.ny))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    Y,
}

/// Bloch-periodic wrap along one axis: `H(x + n) = phase * H(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlochSpec {
    pub axis: Axis,
    pub phase: c64,
}

impl BlochSpec {
    pub fn new(axis: Axis, phase: c64) -> Result<Self> {
        let b = Self { axis, phase };
        b.validate()?;
        Ok(b)
    }

    pub fn periodic(axis: Axis) -> Self {
        Self { axis, phase: ONE }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.phase.is_finite() || (self.phase.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidBloch(format!(
                "|phase| = {} is not 1",
                self.phase.norm()
            )));
        }
        Ok(())
    }
}

/// Wrap phases per axis, `None` for a non-periodic axis.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Wrap {
    pub x: Option<c64>,
    pub y: Option<c64>,
}

impl Wrap {
    pub fn from_bloch(bloch: &[BlochSpec]) -> Result<Self> {
        let mut w = Self::default();
        for b in bloch {
            b.validate()?;
            let slot = match b.axis {
                Axis::X => &mut w.x,
                Axis::Y => &mut w.y,
            };
            if slot.is_some() {
                return Err(Error::InvalidBloch(format!(
                    "axis {:?} given twice",
                    b.axis
                )));
            }
            *slot = Some(b.phase);
        }
        Ok(w)
    }
}

/// Per-cell 5-point coefficients `[center, west, east, south, north]`.
#[derive(Debug, Clone)]
pub struct Stencil {
    nx: usize,
    ny: usize,
    coeffs: Vec<[c64; 5]>,
}

impl Stencil {
    /// Builds coefficients for every cell. Faces beyond a non-wrapping
    /// border reuse the cell's own material and stretch.
    pub fn new(eps: &RealField2D, k0_delta: f64, sx: &[c64], sy: &[c64], wrap: Wrap) -> Self {
        let (nx, ny) = eps.shape();
        assert_eq!(sx.len(), nx);
        assert_eq!(sy.len(), ny);
        let inv: Vec<f64> = eps.as_slice().iter().map(|e| 1.0 / e).collect();
        let k2 = c64::new(k0_delta * k0_delta, 0.0);
        let mut coeffs = Vec::with_capacity(nx * ny);
        for x in 0..nx {
            let xw = if x > 0 { Some(x - 1) } else { wrap.x.map(|_| nx - 1) };
            let xe = if x + 1 < nx { Some(x + 1) } else { wrap.x.map(|_| 0) };
            for y in 0..ny {
                let ys = if y > 0 { Some(y - 1) } else { wrap.y.map(|_| ny - 1) };
                let yn = if y + 1 < ny { Some(y + 1) } else { wrap.y.map(|_| 0) };
                let here = inv[x * ny + y];
                let face = |other: Option<usize>, s: &[c64], i: usize, other_inv: &dyn Fn(usize) -> f64| {
                    let (ie, sf) = match other {
                        Some(j) => (0.5 * (here + other_inv(j)), 0.5 * (s[i] + s[j])),
                        None => (here, s[i]),
                    };
                    ie / (s[i] * sf)
                };
                let w = face(xw, sx, x, &|j| inv[j * ny + y]);
                let e = face(xe, sx, x, &|j| inv[j * ny + y]);
                let s = face(ys, sy, y, &|j| inv[x * ny + j]);
                let n = face(yn, sy, y, &|j| inv[x * ny + j]);
                coeffs.push([k2 - (w + e + s + n), w, e, s, n]);
            }
        }
        Self { nx, ny, coeffs }
    }

    /// Plain stencil without stretch or wrap.
    pub fn unstretched(eps: &RealField2D, k0_delta: f64) -> Self {
        let (nx, ny) = eps.shape();
        Self::new(eps, k0_delta, &vec![ONE; nx], &vec![ONE; ny], Wrap::default())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn at(&self, x: usize, y: usize) -> &[c64; 5] {
        &self.coeffs[x * self.ny + y]
    }

    /// Stencil applied on interior cells; the one-cell border is zero.
    pub fn apply_interior(&self, h: &ComplexField2D) -> ComplexField2D {
        assert_eq!(h.shape(), (self.nx, self.ny));
        let ny = self.ny;
        let d = h.as_slice();
        ComplexField2D::from_fn(self.nx, self.ny, |x, y| {
            if x == 0 || y == 0 || x + 1 == self.nx || y + 1 == self.ny {
                return ZERO;
            }
            let i = x * ny + y;
            let c = &self.coeffs[i];
            c[0] * d[i] + c[1] * d[i - ny] + c[2] * d[i + ny] + c[3] * d[i - 1] + c[4] * d[i + 1]
        })
    }

    /// Conjugate transpose of [`Self::apply_interior`].
    pub fn adjoint_interior(&self, r: &ComplexField2D) -> ComplexField2D {
        assert_eq!(r.shape(), (self.nx, self.ny));
        let ny = self.ny;
        let mut out = ComplexField2D::zeros(self.nx, self.ny);
        let o = out.as_mut_slice();
        for x in 1..self.nx - 1 {
            for y in 1..self.ny - 1 {
                let i = x * ny + y;
                let v = r.as_slice()[i];
                let c = &self.coeffs[i];
                o[i] += c[0].conj() * v;
                o[i - ny] += c[1].conj() * v;
                o[i + ny] += c[2].conj() * v;
                o[i - 1] += c[3].conj() * v;
                o[i + 1] += c[4].conj() * v;
            }
        }
        out
    }
}

fn check_inputs(eps: &MaterialMap, grid: &GridSpec, pml: &PmlSpec, wrap: &Wrap) -> Result<()> {
    grid.validate()?;
    let (nx, ny) = eps.shape();
    if (nx, ny) != grid.shape() {
        return Err(Error::ShapeMismatch {
            expected: grid.shape(),
            got: (nx, ny),
        });
    }
    pml.validate(grid)?;
    if pml.is_active() {
        if wrap.x.is_some() && (pml.sides.left || pml.sides.right) {
            return Err(Error::InvalidBloch("x axis is both periodic and absorbing".into()));
        }
        if wrap.y.is_some() && (pml.sides.top || pml.sides.bottom) {
            return Err(Error::InvalidBloch("y axis is both periodic and absorbing".into()));
        }
    }
    if let Some(e) = eps.eps().as_slice().iter().find(|e| !(**e >= 1.0)) {
        return Err(Error::InvalidMaterial(format!("permittivity {e} < 1")));
    }
    Ok(())
}

/// Assembles the global operator. Rows of the Dirichlet ring are identity
/// rows, and couplings into the ring are dropped so the pattern stays
/// structurally symmetric.
pub fn assemble_operator(
    eps: &MaterialMap,
    grid: &GridSpec,
    pml: &PmlSpec,
    bloch: &[BlochSpec],
) -> Result<SparseOperator> {
    let wrap = Wrap::from_bloch(bloch)?;
    check_inputs(eps, grid, pml, &wrap)?;
    let (nx, ny) = grid.shape();
    let (sx, sy) = pml.stretch_profiles(grid);
    let st = Stencil::new(eps.eps(), grid.k0_delta(), &sx, &sy, wrap);
    let mut b = SparseBuilder::new(nx * ny, 5 * nx * ny);
    let mut row = Vec::with_capacity(5);
    for x in 0..nx {
        for y in 0..ny {
            let i = x * ny + y;
            row.clear();
            if pml.is_dirichlet(grid, x, y) {
                row.push((i, ONE));
                b.push_row(row.iter().copied());
                continue;
            }
            let c = st.at(x, y);
            row.push((i, c[0]));
            let mut push = |nx_: usize, ny_: usize, coeff: c64, phase: c64| {
                if !pml.is_dirichlet(grid, nx_, ny_) {
                    row.push((nx_ * ny + ny_, coeff * phase));
                }
            };
            if x > 0 {
                push(x - 1, y, c[1], ONE);
            } else if let Some(p) = wrap.x {
                push(nx - 1, y, c[1], p.conj());
            }
            if x + 1 < nx {
                push(x + 1, y, c[2], ONE);
            } else if let Some(p) = wrap.x {
                push(0, y, c[2], p);
            }
            if y > 0 {
                push(x, y - 1, c[3], ONE);
            } else if let Some(p) = wrap.y {
                push(x, ny - 1, c[3], p.conj());
            }
            if y + 1 < ny {
                push(x, y + 1, c[4], ONE);
            } else if let Some(p) = wrap.y {
                push(x, 0, c[4], p);
            }
            b.push_row(row.iter().copied());
        }
    }
    Ok(b.finish())
}

/// Right-hand side `-i (k0 delta) J`, zero on the Dirichlet ring.
pub fn assemble_rhs(source: &SourceMap, grid: &GridSpec, pml: &PmlSpec) -> Vec<c64> {
    let (nx, ny) = grid.shape();
    let f = c64::new(0.0, -grid.k0_delta());
    let mut rhs = Vec::with_capacity(nx * ny);
    for x in 0..nx {
        for y in 0..ny {
            rhs.push(if pml.is_dirichlet(grid, x, y) {
                ZERO
            } else {
                f * source.at(x, y)
            });
        }
    }
    rhs
}

#[derive(Debug, Clone)]
pub struct GlobalSolution {
    pub field: ComplexField2D,
    /// `||A H - rhs||_1 / ||rhs||_1`
    pub relative_residual: f64,
    pub factor_bytes: usize,
    pub factor_seconds: f64,
    pub solve_seconds: f64,
}

pub fn solve_global_report(
    eps: &MaterialMap,
    source: &SourceMap,
    grid: &GridSpec,
    pml: &PmlSpec,
    bloch: &[BlochSpec],
) -> Result<GlobalSolution> {
    if source.shape() != grid.shape() {
        return Err(Error::ShapeMismatch {
            expected: grid.shape(),
            got: source.shape(),
        });
    }
    let op = assemble_operator(eps, grid, pml, bloch)?;
    let wrap = Wrap::from_bloch(bloch)?;
    let layout = GridLayout {
        nx: grid.nx,
        ny: grid.ny,
        periodic_x: wrap.x.is_some(),
        periodic_y: wrap.y.is_some(),
    };
    let t0 = Instant::now();
    let lu = MultifrontalLu::factor(layout, &op).map_err(|e| match e {
        Error::Singular(msg) => Error::Singular(format!(
            "{msg}; eps in [{:.3}, {:.3}], mean {:.3}",
            eps.eps().as_slice().iter().cloned().fold(f64::INFINITY, f64::min),
            eps.max(),
            eps.mean()
        )),
        other => other,
    })?;
    let factor_seconds = t0.elapsed().as_secs_f64();
    let rhs = assemble_rhs(source, grid, pml);
    let t1 = Instant::now();
    let h = lu.solve(&rhs);
    let solve_seconds = t1.elapsed().as_secs_f64();
    let relative_residual = op.relative_residual_l1(&h, &rhs);
    log::debug!(
        "global solve {}x{}: factor {:.2}s ({:.1} MiB), solve {:.2}s, residual {:.2e}",
        grid.nx,
        grid.ny,
        factor_seconds,
        lu.factor_bytes() as f64 / (1 << 20) as f64,
        solve_seconds,
        relative_residual
    );
    Ok(GlobalSolution {
        field: ComplexField2D::from_vec(grid.nx, grid.ny, h)?,
        relative_residual,
        factor_bytes: lu.factor_bytes(),
        factor_seconds,
        solve_seconds,
    })
}

pub fn solve_global(
    eps: &MaterialMap,
    source: &SourceMap,
    grid: &GridSpec,
    pml: &PmlSpec,
    bloch: &[BlochSpec],
) -> Result<ComplexField2D> {
    solve_global_report(eps, source, grid, pml, bloch).map(|s| s.field)
}

/// Per-cell residual `div((1/eps) grad H) + (k0 delta)^2 H + i (k0 delta) J`
/// on interior cells without stretch; the border ring is zero.
pub fn pde_residual_map(
    eps: &MaterialMap,
    h: &ComplexField2D,
    source: &SourceMap,
    grid: &GridSpec,
) -> Result<ComplexField2D> {
    eps.eps().same_shape(h)?;
    h.same_shape(source.j())?;
    let st = Stencil::unstretched(eps.eps(), grid.k0_delta());
    let mut r = st.apply_interior(h);
    let (nx, ny) = h.shape();
    let f = c64::new(0.0, grid.k0_delta());
    for x in 1..nx - 1 {
        for y in 1..ny - 1 {
            *r.get_mut(x, y) += f * source.at(x, y);
        }
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn grid(n: usize) -> GridSpec {
        GridSpec::new(n, n).unwrap()
    }

    #[test]
    fn sigma_max_matches_formula() {
        let p = PmlSpec::default();
        let s = p.sigma_max(0.0374);
        assert!((s - 36.94).abs() < 0.01, "{s}");
        let k = grid(100).k0_delta();
        let expected = -4.0 * (1e-12f64).ln() / (2.0 * 40.0 * k);
        assert!((p.sigma_max(k) - expected).abs() < 1e-12);
    }

    #[test]
    fn stretch_profile_is_symmetric_and_unity_inside() {
        let p = PmlSpec::default();
        let s = p.axis_stretch(200, true, true, 0.0374);
        for i in 0..200 {
            assert!((s[i] - s[199 - i]).norm() < 1e-12);
        }
        assert_eq!(s[40], ONE);
        assert_eq!(s[159], ONE);
        assert!((s[0].im - p.sigma_max(0.0374)).abs() < 1e-12);
        assert!(s[39].im > 0.0 && s[39].im < s[38].im);
    }

    #[test]
    fn validation_errors() {
        let g = grid(64);
        let eps = MaterialMap::uniform(64, 64, 1.0).unwrap();
        assert!(matches!(
            assemble_operator(&eps, &g, &PmlSpec::with_thickness(32), &[]),
            Err(Error::InvalidPml(_))
        ));
        assert!(matches!(
            assemble_operator(&eps, &g, &PmlSpec::with_thickness(4), &[]),
            Err(Error::InvalidPml(_))
        ));
        assert!(matches!(
            assemble_operator(&eps, &g, &PmlSpec::with_thickness(10), &[BlochSpec::periodic(Axis::X)]),
            Err(Error::InvalidBloch(_))
        ));
        assert!(BlochSpec::new(Axis::X, c64::new(1.1, 0.0)).is_err());
        let bad = MaterialMap::uniform(32, 32, 1.0).unwrap();
        assert!(matches!(
            assemble_operator(&bad, &g, &PmlSpec::none(), &[]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    fn periodic_both() -> [BlochSpec; 2] {
        [BlochSpec::periodic(Axis::X), BlochSpec::periodic(Axis::Y)]
    }

    #[test]
    fn constant_field_gives_k_squared() {
        let g = grid(24);
        let eps = MaterialMap::uniform(24, 24, 1.0).unwrap();
        let a = assemble_operator(&eps, &g, &PmlSpec::none(), &periodic_both()).unwrap();
        let k2 = g.k0_delta().powi(2);
        for v in a.apply(&vec![ONE; 24 * 24]) {
            assert!((v - c64::new(k2, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn plane_wave_dispersion_error() {
        // Three periods across 64 cells.
        let n = 64;
        let kappa = 2.0 * PI * 3.0 / n as f64;
        let lambda0 = 2.0 * PI * 1.0 / kappa;
        let g = GridSpec::with_units(n, n, 1.0, lambda0).unwrap();
        assert!((g.k0_delta() - kappa).abs() < 1e-14);
        let eps = MaterialMap::uniform(n, n, 1.0).unwrap();
        let a = assemble_operator(&eps, &g, &PmlSpec::none(), &periodic_both()).unwrap();
        let h: Vec<c64> = (0..n * n)
            .map(|i| c64::from_polar(1.0, kappa * (i / n) as f64))
            .collect();
        let r = a.apply(&h);
        let closed = 2.0 * kappa.cos() - 2.0 + kappa * kappa;
        for (ri, hi) in r.iter().zip(&h) {
            assert!((ri - hi * closed).norm() < 1e-12);
            assert!(ri.norm() <= kappa.powi(4) / 12.0 * 1.001);
        }
    }

    #[test]
    fn bloch_wrap_couples_with_phase() {
        // A Bloch wave with a non-integer number of periods.
        let (nx, ny) = (20, 12);
        let q = 0.37;
        let phase = c64::from_polar(1.0, q * nx as f64);
        let g = GridSpec::new(nx, ny).unwrap();
        let eps = MaterialMap::uniform(nx, ny, 1.0).unwrap();
        let bloch = [BlochSpec::new(Axis::X, phase).unwrap(), BlochSpec::periodic(Axis::Y)];
        let a = assemble_operator(&eps, &g, &PmlSpec::none(), &bloch).unwrap();
        let h: Vec<c64> = (0..nx * ny)
            .map(|i| c64::from_polar(1.0, q * (i / ny) as f64))
            .collect();
        let r = a.apply(&h);
        let closed = 2.0 * q.cos() - 2.0 + g.k0_delta().powi(2);
        for (ri, hi) in r.iter().zip(&h) {
            assert!((ri - hi * closed).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_source_gives_zero_field() {
        let g = grid(48);
        let eps = MaterialMap::uniform(48, 48, 2.0).unwrap();
        let h = solve_global(&eps, &SourceMap::zeros(48, 48), &g, &PmlSpec::with_thickness(10), &[]).unwrap();
        assert_eq!(h.max_abs(), 0.0);
    }

    fn point_source(n: usize, x: usize, y: usize) -> SourceMap {
        let mut s = SourceMap::zeros(n, n);
        s.j_mut().set(x, y, ONE);
        s
    }

    #[test]
    fn point_source_decays_and_residual_small() {
        let n = 128;
        let g = grid(n);
        let eps = MaterialMap::uniform(n, n, 1.0).unwrap();
        let pml = PmlSpec::with_thickness(20);
        let sol = solve_global_report(&eps, &point_source(n, 64, 64), &g, &pml, &[]).unwrap();
        assert!(sol.relative_residual < 1e-8, "{}", sol.relative_residual);
        let h = &sol.field;
        for d in 5..(64 - 20) {
            for (a, b) in [
                (h.get(64 + d, 64), h.get(64 + d + 1, 64)),
                (h.get(64 - d, 64), h.get(64 - d - 1, 64)),
                (h.get(64, 64 + d), h.get(64, 64 + d + 1)),
                (h.get(64, 64 - d), h.get(64, 64 - d - 1)),
            ] {
                assert!(b.norm() < a.norm(), "not decaying at distance {d}");
            }
        }
        let r = pde_residual_map(&eps, h, &point_source(n, 64, 64), &g).unwrap();
        let mut sum = 0.0;
        let mut cnt = 0;
        for x in 21..n - 21 {
            for y in 21..n - 21 {
                sum += r.get(x, y).norm();
                cnt += 1;
            }
        }
        assert!(sum / (cnt as f64) < 1e-8);
    }

    #[test]
    fn reciprocity_in_lossless_interior() {
        let n = 96;
        let g = grid(n);
        let eps = MaterialMap::new(RealField2D::from_fn(n, n, |x, y| {
            1.0 + 3.0 * (((x * 7 + y * 3) % 11) as f64 / 11.0)
        }))
        .unwrap();
        let pml = PmlSpec::with_thickness(16);
        let (a, b) = ((30, 41), (60, 52));
        let ha = solve_global(&eps, &point_source(n, a.0, a.1), &g, &pml, &[]).unwrap();
        let hb = solve_global(&eps, &point_source(n, b.0, b.1), &g, &pml, &[]).unwrap();
        let (p, q) = (ha.get(b.0, b.1), hb.get(a.0, a.1));
        assert!((p - q).norm() / p.norm() < 0.01);
    }

    #[test]
    fn bloch_solution_satisfies_wraparound_rows() {
        let (nx, ny) = (32, 80);
        let g = GridSpec::new(nx, ny).unwrap();
        let eps = MaterialMap::new(RealField2D::from_fn(nx, ny, |x, y| if (x + y) % 5 == 0 { 3.0 } else { 1.0 })).unwrap();
        let phase = c64::from_polar(1.0, 0.8);
        let pml = PmlSpec {
            thickness: 12,
            sides: PmlSides::from_sides(&[Side::Top, Side::Bottom]),
            ..PmlSpec::default()
        };
        let mut src = SourceMap::zeros(nx, ny);
        for x in 0..nx {
            src.j_mut().set(x, 20, ONE);
        }
        let sol = solve_global_report(&eps, &src, &g, &pml, &[BlochSpec::new(Axis::X, phase).unwrap()]).unwrap();
        assert!(sol.relative_residual < 1e-8);
        // Rebuild the east-edge rows with an explicit ghost column H(nx) = phase * H(0).
        let h = &sol.field;
        let (sx, sy) = pml.stretch_profiles(&g);
        let st = Stencil::new(eps.eps(), g.k0_delta(), &sx, &sy, Wrap { x: Some(phase), y: None });
        let x = nx - 1;
        for y in 13..ny - 13 {
            let c = st.at(x, y);
            let ghost = phase * h.get(0, y);
            let lhs = c[0] * h.get(x, y) + c[1] * h.get(x - 1, y) + c[2] * ghost + c[3] * h.get(x, y - 1) + c[4] * h.get(x, y + 1);
            let rhs = c64::new(0.0, -g.k0_delta()) * src.at(x, y);
            assert!((lhs - rhs).norm() < 1e-10);
        }
    }

    #[test]
    fn residual_of_zero_is_zero() {
        let g = grid(16);
        let eps = MaterialMap::uniform(16, 16, 3.0).unwrap();
        let r = pde_residual_map(&eps, &ComplexField2D::zeros(16, 16), &SourceMap::zeros(16, 16), &g).unwrap();
        assert_eq!(r.max_abs(), 0.0);
    }

    #[test]
    fn adjoint_matches_inner_product() {
        let n = 12;
        let eps = RealField2D::from_fn(n, n, |x, y| 1.0 + ((x * y) % 4) as f64);
        let s: Vec<c64> = (0..n).map(|i| c64::new(1.0, i as f64 * 0.1)).collect();
        let st = Stencil::new(&eps, 0.2, &s, &s, Wrap::default());
        let u = ComplexField2D::from_fn(n, n, |x, y| c64::new((x as f64).sin(), (y as f64).cos()));
        let v = ComplexField2D::from_fn(n, n, |x, y| c64::new((x * y) as f64 * 0.01, 1.0 / (1 + x + y) as f64));
        let au = st.apply_interior(&u);
        let atv = st.adjoint_interior(&v);
        let lhs: c64 = au.as_slice().iter().zip(v.as_slice()).map(|(a, b)| a * b.conj()).sum();
        let rhs: c64 = u.as_slice().iter().zip(atv.as_slice()).map(|(a, b)| a * b.conj()).sum();
        assert!((lhs - rhs).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn operator_is_structurally_symmetric(
            n in 20usize..40,
            seed in any::<u64>(),
            mode in 0usize..4,
        ) {
            let g = GridSpec::new(n, n + 3).unwrap();
            let eps = MaterialMap::new(RealField2D::from_fn(n, n + 3, |x, y| {
                1.0 + ((seed >> ((x + y) % 60)) & 7) as f64
            })).unwrap();
            let (pml, bloch): (PmlSpec, Vec<BlochSpec>) = match mode {
                0 => (PmlSpec::with_thickness(8), vec![]),
                1 => (PmlSpec::none(), vec![BlochSpec::periodic(Axis::X), BlochSpec::periodic(Axis::Y)]),
                2 => (PmlSpec { thickness: 8, sides: PmlSides::from_sides(&[Side::Top, Side::Bottom]), ..PmlSpec::default() },
                      vec![BlochSpec::new(Axis::X, c64::from_polar(1.0, 0.3)).unwrap()]),
                _ => (PmlSpec::none(), vec![]),
            };
            let a = assemble_operator(&eps, &g, &pml, &bloch).unwrap();
            prop_assert!(a.is_structurally_symmetric());
            prop_assert!(a.has_full_diagonal());
            prop_assert!(a.max_row_nnz() <= 5);
        }

        #[test]
        fn residual_perturbation_is_local(px in 1usize..15, py in 1usize..15, d in 0.01f64..1.0) {
            let n = 16;
            let g = grid(n);
            let eps = MaterialMap::new(RealField2D::from_fn(n, n, |x, y| 1.0 + ((x + 2 * y) % 3) as f64)).unwrap();
            let h = ComplexField2D::from_fn(n, n, |x, y| c64::new((x as f64 * 0.3).cos(), (y as f64 * 0.2).sin()));
            let src = SourceMap::zeros(n, n);
            let r0 = pde_residual_map(&eps, &h, &src, &g).unwrap();
            let mut h2 = h.clone();
            *h2.get_mut(px, py) += c64::new(d, -d);
            let r1 = pde_residual_map(&eps, &h2, &src, &g).unwrap();
            for x in 0..n {
                for y in 0..n {
                    let near = x.abs_diff(px) + y.abs_diff(py) <= 1;
                    if !near {
                        prop_assert_eq!(r0.get(x, y), r1.get(x, y));
                    }
                }
            }
        }
    }
}
