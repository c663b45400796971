//! Synthetic training data: random dielectric geometries, random line
//! sources, full-wave reference solves, and 64x64 crops.

use std::f64::consts::PI;

use num_complex::Complex64 as c64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::ddm::DdmProblem;
use crate::error::{Error, Result};
use crate::fdfd::{solve_global_report, PmlSpec, Stencil, Wrap};
use crate::field::{Array2D, ComplexField2D, GridSpec, MaterialMap, RealField2D, SourceMap, WavevectorConvention};
use crate::robin::{extract_trace_set, BoundaryTraceSet};
use crate::subdomain::{LocalStretch, SubdomainClass, SubdomainProblem, SUBDOMAIN_SIZE};

pub type Mask = Array2D<bool>;

pub const EPS_MIN: f64 = 1.0;
pub const EPS_MAX: f64 = 16.0;
const MAX_GEOMETRY_ATTEMPTS: usize = 8;

/// Deterministic child seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over a combined word
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryParams {
    pub nx: usize,
    pub ny: usize,
    pub threshold: f64,
    pub erode_sigma: f64,
    /// Semi-axes of the dilation ellipse in cells.
    pub dilate_axes: (f64, f64),
    /// Tilt of the dilation ellipse in radians.
    pub dilate_angle: f64,
    pub smooth_sigma: f64,
    pub rng_seed: u64,
}

impl Default for GeometryParams {
    fn default() -> Self {
        Self {
            nx: 128,
            ny: 128,
            threshold: 0.5,
            erode_sigma: 3.0,
            dilate_axes: (3.0, 1.5),
            dilate_angle: 0.6,
            smooth_sigma: 1.5,
            rng_seed: 0,
        }
    }
}

impl GeometryParams {
    pub fn validate(&self) -> Result<()> {
        self.validate_lengths()?;
        if !(self.threshold > 0.05 && self.threshold < 0.95) {
            return Err(Error::InvalidParams(format!(
                "threshold {} outside (0.05, 0.95)",
                self.threshold
            )));
        }
        Ok(())
    }

    fn validate_lengths(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::InvalidParams("empty geometry".into()));
        }
        let lens = [self.erode_sigma, self.dilate_axes.0, self.dilate_axes.1, self.smooth_sigma];
        if lens.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || !self.dilate_angle.is_finite() {
            return Err(Error::InvalidParams(format!("lengths must be positive: {lens:?}")));
        }
        Ok(())
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &RealField2D, sigma: f64) -> RealField2D {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (nx, ny) = img.shape();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let tmp = RealField2D::from_fn(nx, ny, |x, y| {
        k.iter().enumerate().map(|(i, w)| w * img.get(clamp(x as isize + i as isize - r, nx), y)).sum()
    });
    RealField2D::from_fn(nx, ny, |x, y| {
        k.iter().enumerate().map(|(i, w)| w * tmp.get(x, clamp(y as isize + i as isize - r, ny))).sum()
    })
}

fn to_real(mask: &Mask) -> RealField2D {
    mask.map(|&b| if b { 1.0 } else { 0.0 })
}

fn dilate_ellipse(mask: &Mask, a: f64, b: f64, angle: f64) -> Mask {
    let (nx, ny) = mask.shape();
    let r = a.max(b).ceil() as isize;
    let (c, s) = (angle.cos(), angle.sin());
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dx| (-r..=r).map(move |dy| (dx, dy)))
        .filter(|&(dx, dy)| {
            let u = c * dx as f64 + s * dy as f64;
            let v = -s * dx as f64 + c * dy as f64;
            (u / a).powi(2) + (v / b).powi(2) <= 1.0
        })
        .collect();
    Mask::from_fn(nx, ny, |x, y| {
        offsets.iter().any(|&(dx, dy)| {
            let (px, py) = (x as isize + dx, y as isize + dy);
            px >= 0 && py >= 0 && (px as usize) < nx && (py as usize) < ny && *mask.get(px as usize, py as usize)
        })
    })
}

pub fn fill_fraction(mask: &Mask) -> f64 {
    mask.as_slice().iter().filter(|b| **b).count() as f64 / mask.len() as f64
}

fn mask_attempt(p: &GeometryParams, seed: u64) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = RealField2D::from_fn(p.nx, p.ny, |_, _| rng.random::<f64>());
    let binary = noise.map(|&v| v > p.threshold);
    let eroded = gaussian_blur(&to_real(&binary), p.erode_sigma).map(|&v| v > 0.5);
    let dilated = dilate_ellipse(&eroded, p.dilate_axes.0, p.dilate_axes.1, p.dilate_angle);
    gaussian_blur(&to_real(&dilated), p.smooth_sigma).map(|&v| v > 0.5)
}

/// Noise, threshold, Gaussian erosion, tilted-ellipse dilation, smoothing.
/// All-empty or all-full results are retried with fresh sub-seeds.
pub fn gen_binary_mask(p: &GeometryParams) -> Result<Mask> {
    p.validate_lengths()?;
    if !(p.threshold > 0.0 && p.threshold < 1.0) {
        return Err(Error::InvalidParams(format!("threshold {} outside (0, 1)", p.threshold)));
    }
    let mut last = 0.0;
    for attempt in 0..MAX_GEOMETRY_ATTEMPTS {
        let m = mask_attempt(p, sub_seed(p.rng_seed, attempt as u64));
        last = fill_fraction(&m);
        if last > 0.0 && last < 1.0 {
            return Ok(m);
        }
        log::debug!("degenerate mask (fill {last}) on attempt {attempt}");
    }
    Err(Error::DegenerateGeometry {
        attempts: MAX_GEOMETRY_ATTEMPTS,
        reason: format!("mask fill fraction stuck at {last}"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaterialMode {
    /// Gaussian random field with the given correlation length in cells.
    Grf { corr_len: f64 },
    /// Voronoi cells around `points` random seeds.
    Voronoi { points: usize },
}

impl Default for MaterialMode {
    fn default() -> Self {
        Self::Grf { corr_len: 16.0 }
    }
}

fn fft2_in_place(data: &mut [c64], nx: usize, ny: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let fy = if inverse { planner.plan_fft_inverse(ny) } else { planner.plan_fft_forward(ny) };
    for row in data.chunks_mut(ny) {
        fy.process(row);
    }
    let fx = if inverse { planner.plan_fft_inverse(nx) } else { planner.plan_fft_forward(nx) };
    let mut col = vec![c64::new(0.0, 0.0); nx];
    for y in 0..ny {
        for x in 0..nx {
            col[x] = data[x * ny + y];
        }
        fx.process(&mut col);
        for x in 0..nx {
            data[x * ny + y] = col[x];
        }
    }
}

/// Spectrally filtered white noise, amplitude `(1 + (k l)^2)^(-3/2)`.
pub fn gaussian_random_field(nx: usize, ny: usize, corr_len: f64, seed: u64) -> RealField2D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<c64> = (0..nx * ny).map(|_| c64::new(rng.sample(StandardNormal), 0.0)).collect();
    fft2_in_place(&mut data, nx, ny, false);
    let freq = |i: usize, n: usize| {
        let f = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
        2.0 * PI * f / n as f64
    };
    for x in 0..nx {
        for y in 0..ny {
            let k2 = freq(x, nx).powi(2) + freq(y, ny).powi(2);
            data[x * ny + y] *= (1.0 + k2 * corr_len * corr_len).powf(-1.5);
        }
    }
    fft2_in_place(&mut data, nx, ny, true);
    RealField2D::from_vec(nx, ny, data.into_iter().map(|v| v.re).collect()).expect("shape")
}

/// Grayscale permittivity inside `mask`, vacuum outside.
pub fn gen_grayscale_material(mask: &Mask, mode: MaterialMode, seed: u64) -> Result<MaterialMap> {
    let (nx, ny) = mask.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: RealField2D = match mode {
        MaterialMode::Grf { corr_len } => {
            if !(corr_len > 0.0) {
                return Err(Error::InvalidParams(format!("correlation length {corr_len}")));
            }
            let f = gaussian_random_field(nx, ny, corr_len, rng.random());
            let inside = f.as_slice().iter().zip(mask.as_slice()).filter(|(_, m)| **m).map(|(v, _)| *v);
            let (lo, hi) = inside.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            let span = if hi > lo { hi - lo } else { 1.0 };
            f.map(|&v| (EPS_MIN + (EPS_MAX - EPS_MIN) * (v - lo) / span).clamp(EPS_MIN, EPS_MAX))
        }
        MaterialMode::Voronoi { points } => {
            if points == 0 {
                return Err(Error::InvalidParams("voronoi needs at least one point".into()));
            }
            let seeds: Vec<(f64, f64, f64)> = (0..points)
                .map(|_| {
                    (
                        rng.random::<f64>() * nx as f64,
                        rng.random::<f64>() * ny as f64,
                        rng.random_range(EPS_MIN..=EPS_MAX),
                    )
                })
                .collect();
            RealField2D::from_fn(nx, ny, |x, y| {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                seeds
                    .iter()
                    .min_by(|a, b| {
                        let da = (a.0 - px).powi(2) + (a.1 - py).powi(2);
                        let db = (b.0 - px).powi(2) + (b.1 - py).powi(2);
                        da.total_cmp(&db)
                    })
                    .expect("at least one point")
                    .2
            })
        }
    };
    let eps = RealField2D::from_fn(nx, ny, |x, y| if *mask.get(x, y) { *values.get(x, y) } else { 1.0 });
    MaterialMap::new(eps)
}

/// Linearly maps `[1, 16]` onto `[1, max_eps]`.
pub fn rescale_material(eps: &MaterialMap, max_eps: f64) -> Result<MaterialMap> {
    if !(max_eps >= 1.0) {
        return Err(Error::InvalidParams(format!("max permittivity {max_eps} < 1")));
    }
    MaterialMap::new(eps.eps().map(|&e| 1.0 + (e - 1.0) * (max_eps - 1.0) / (EPS_MAX - 1.0)))
}

/// `sum_k a_k sin(2 pi k t / L + phi_k)` for `t = 0..len`.
pub fn line_profile(len: usize, amps: &[f64], phases: &[f64]) -> Vec<f64> {
    (0..len)
        .map(|t| {
            amps.iter()
                .zip(phases)
                .enumerate()
                .map(|(k, (a, p))| a * (2.0 * PI * (k + 1) as f64 * t as f64 / len as f64 + p).sin())
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSourceParams {
    /// Distance of each line from the grid border (first non-PML cell).
    pub inset: usize,
    pub modes: usize,
    pub seed: u64,
}

/// Four 1-cell lines on a square ring at `inset`, each a random sinusoid
/// mix times a random complex phase; normalized to unit mean |J| over the
/// source cells.
pub fn gen_line_sources(grid: &GridSpec, p: &LineSourceParams) -> Result<SourceMap> {
    let (nx, ny) = grid.shape();
    if 2 * p.inset + 2 > nx.min(ny) || p.modes == 0 {
        return Err(Error::InvalidParams(format!(
            "inset {} with {} modes does not fit a {nx}x{ny} grid",
            p.inset, p.modes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut j = ComplexField2D::zeros(nx, ny);
    let (x0, x1, y0, y1) = (p.inset, nx - 1 - p.inset, p.inset, ny - 1 - p.inset);
    let lines: [(bool, usize); 4] = [(false, y0), (false, y1), (true, x0), (true, x1)];
    for (vertical, at) in lines {
        let amps: Vec<f64> = (0..p.modes).map(|_| rng.random::<f64>()).collect();
        let phases: Vec<f64> = (0..p.modes).map(|_| rng.random::<f64>() * 2.0 * PI).collect();
        let rot = c64::from_polar(1.0, rng.random::<f64>() * 2.0 * PI);
        let (lo, hi) = if vertical { (y0, y1) } else { (x0, x1) };
        let prof = line_profile(hi - lo + 1, &amps, &phases);
        for (t, v) in prof.into_iter().enumerate() {
            let (x, y) = if vertical { (at, lo + t) } else { (lo + t, at) };
            *j.get_mut(x, y) += rot * v;
        }
    }
    let nz: Vec<f64> = j.as_slice().iter().map(|v| v.norm()).filter(|v| *v > 0.0).collect();
    let mean = nz.iter().sum::<f64>() / nz.len().max(1) as f64;
    if mean > 0.0 {
        j.scale(c64::new(1.0 / mean, 0.0));
    }
    Ok(SourceMap::new(j))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationParams {
    pub n: usize,
    pub pml_thickness: usize,
    pub geometry: GeometryParams,
    pub material: MaterialMode,
    /// Permittivity ceiling after rescaling; 16 keeps the full range.
    pub max_eps: f64,
    pub source_inset: usize,
    pub source_modes: usize,
    pub seed: u64,
}

impl SimulationParams {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            pml_thickness: 40,
            geometry: GeometryParams { nx: n, ny: n, ..GeometryParams::default() },
            material: MaterialMode::default(),
            max_eps: EPS_MAX,
            source_inset: 40,
            source_modes: 8,
            seed,
        }
    }
}

/// A solved global problem.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub grid: GridSpec,
    pub eps: MaterialMap,
    pub source: SourceMap,
    pub pml: PmlSpec,
    pub h: ComplexField2D,
    pub relative_residual: f64,
}

/// Builds the random device (geometry, material, sources) without solving.
pub fn gen_device(p: &SimulationParams) -> Result<(GridSpec, MaterialMap, SourceMap, PmlSpec)> {
    let grid = GridSpec::new(p.n, p.n)?;
    let geom = GeometryParams { nx: p.n, ny: p.n, rng_seed: sub_seed(p.seed, 1), ..p.geometry };
    geom.validate()?;
    let mask = gen_binary_mask(&geom)?;
    let mut eps = gen_grayscale_material(&mask, p.material, sub_seed(p.seed, 2))?;
    if p.max_eps < EPS_MAX {
        eps = rescale_material(&eps, p.max_eps)?;
    }
    let source = gen_line_sources(
        &grid,
        &LineSourceParams { inset: p.source_inset, modes: p.source_modes, seed: sub_seed(p.seed, 3) },
    )?;
    Ok((grid, eps, source, PmlSpec::with_thickness(p.pml_thickness)))
}

pub fn simulate(p: &SimulationParams) -> Result<Simulation> {
    let (grid, eps, source, pml) = gen_device(p)?;
    let sol = solve_global_report(&eps, &source, &grid, &pml, &[])?;
    Ok(Simulation { grid, eps, source, pml, h: sol.field, relative_residual: sol.relative_residual })
}

/// A random device suited to decomposition: PML all around and the four
/// source lines inset past the first ring of tiles.
pub fn device_problem(n: usize, max_eps: f64, material: MaterialMode, seed: u64, convention: WavevectorConvention) -> Result<DdmProblem> {
    let mut p = SimulationParams::new(n, seed);
    p.material = material;
    p.max_eps = max_eps;
    p.source_inset = SUBDOMAIN_SIZE + 2;
    let (grid, eps, source, pml) = gen_device(&p)?;
    Ok(DdmProblem { grid, eps, source, pml, bloch: vec![], convention })
}

/// One 64x64 training example.
#[derive(Debug, Clone, PartialEq)]
pub struct SubdomainSample {
    pub eps: RealField2D,
    pub source: ComplexField2D,
    /// `Im sx + Im sy` for PML samples, zero otherwise.
    pub pml_profile: RealField2D,
    pub g: BoundaryTraceSet,
    pub h: ComplexField2D,
    pub class: SubdomainClass,
}

impl SubdomainSample {
    pub fn size(&self) -> usize {
        self.eps.nx()
    }

    pub fn rot90(&self, q: usize) -> Self {
        Self {
            eps: self.eps.rot90(q),
            source: self.source.rot90(q),
            pml_profile: self.pml_profile.rot90(q),
            g: self.g.rot90(q),
            h: self.h.rot90(q),
            class: self.class,
        }
    }

    pub fn stretch(&self) -> Option<LocalStretch> {
        (self.class == SubdomainClass::Pml).then(|| LocalStretch::from_sigma_image(&self.pml_profile))
    }

    pub fn to_problem(&self, k0_delta: f64, convention: WavevectorConvention) -> SubdomainProblem {
        SubdomainProblem {
            class: self.class,
            eps: self.eps.clone(),
            source: self.source.clone(),
            stretch: self.stretch(),
            g: self.g.clone(),
            dirichlet: [false; 4],
            convention,
            k0_delta,
        }
    }

    /// The interior 5-point residual under the sample's own operator
    /// (stretched for PML samples); border ring is zero.
    pub fn residual(&self, k0_delta: f64) -> ComplexField2D {
        let n = self.size();
        let one = c64::new(1.0, 0.0);
        let (sx, sy) = match self.stretch() {
            Some(s) => (s.sx, s.sy),
            None => (vec![one; n], vec![one; self.eps.ny()]),
        };
        let st = Stencil::new(&self.eps, k0_delta, &sx, &sy, Wrap::default());
        let mut r = st.apply_interior(&self.h);
        let f = c64::new(0.0, k0_delta);
        for x in 1..n - 1 {
            for y in 1..self.eps.ny() - 1 {
                *r.get_mut(x, y) += f * self.source.get(x, y);
            }
        }
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    pub count: usize,
    pub seed: u64,
    pub augment_rot: bool,
    /// Deterministic grid of origins with this stride instead of random draws.
    pub stride: Option<usize>,
    pub convention: WavevectorConvention,
}

fn classify(sim: &Simulation, ox: usize, oy: usize, s: usize) -> Option<SubdomainClass> {
    let mut pml = false;
    let mut src = false;
    for x in ox..ox + s {
        for y in oy..oy + s {
            pml |= sim.pml.in_pml(&sim.grid, x, y);
            src |= sim.source.at(x, y).norm() != 0.0;
        }
    }
    match (pml, src) {
        (true, true) => None,
        (true, false) => Some(SubdomainClass::Pml),
        (false, true) => Some(SubdomainClass::Source),
        (false, false) => Some(SubdomainClass::Material),
    }
}

fn make_sample(sim: &Simulation, ox: usize, oy: usize, class: SubdomainClass, conv: WavevectorConvention, sigma: &RealField2D) -> Result<SubdomainSample> {
    let s = SUBDOMAIN_SIZE;
    let eps = sim.eps.eps().crop(ox, oy, s, s);
    let h = sim.h.crop(ox, oy, s, s);
    let k0 = sim.grid.k0_delta();
    let k = eps.map(|&e| conv.k_delta(k0, e));
    Ok(SubdomainSample {
        g: extract_trace_set(&h, &k)?,
        source: if class == SubdomainClass::Source { sim.source.j().crop(ox, oy, s, s) } else { ComplexField2D::zeros(s, s) },
        pml_profile: if class == SubdomainClass::Pml { sigma.crop(ox, oy, s, s) } else { RealField2D::filled(s, s, 0.0) },
        eps,
        h,
        class,
    })
}

/// Crops samples from a solved simulation. Crops holding both PML and
/// source cells are redrawn.
pub fn crop_subdomains(sim: &Simulation, p: &CropParams) -> Result<Vec<SubdomainSample>> {
    let s = SUBDOMAIN_SIZE;
    let (nx, ny) = sim.grid.shape();
    if nx < s || ny < s {
        return Err(Error::InvalidParams(format!("{nx}x{ny} grid is smaller than a {s}x{s} crop")));
    }
    let sigma = sim.pml.sigma_map(&sim.grid);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut out = Vec::with_capacity(p.count);
    let mut origins: Vec<(usize, usize)> = Vec::new();
    if let Some(stride) = p.stride {
        let stride = stride.max(1);
        for ox in (0..=nx - s).step_by(stride) {
            for oy in (0..=ny - s).step_by(stride) {
                origins.push((ox, oy));
            }
        }
    }
    let mut draws = 0usize;
    let max_draws = 100 * p.count.max(1);
    let mut next = 0usize;
    while out.len() < p.count {
        let (ox, oy) = if p.stride.is_some() {
            if next >= origins.len() {
                break;
            }
            next += 1;
            origins[next - 1]
        } else {
            draws += 1;
            if draws > max_draws {
                return Err(Error::InvalidParams(format!(
                    "only {} valid crops after {max_draws} draws",
                    out.len()
                )));
            }
            (rng.random_range(0..=nx - s), rng.random_range(0..=ny - s))
        };
        let Some(class) = classify(sim, ox, oy, s) else { continue };
        let sample = make_sample(sim, ox, oy, class, p.convention, &sigma)?;
        let q = if p.augment_rot { rng.random_range(0..4) } else { 0 };
        out.push(if q == 0 { sample } else { sample.rot90(q) });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::relative_l1;
    use crate::subdomain::solve_subdomain_exact;

    #[test]
    fn masks_are_deterministic() {
        let p = GeometryParams { rng_seed: 42, ..GeometryParams::default() };
        assert_eq!(gen_binary_mask(&p).unwrap(), gen_binary_mask(&p).unwrap());
        let q = GeometryParams { rng_seed: 43, ..p };
        assert_ne!(gen_binary_mask(&p).unwrap(), gen_binary_mask(&q).unwrap());
    }

    #[test]
    fn extreme_threshold_exhausts_retries() {
        let p = GeometryParams { threshold: 0.999, nx: 48, ny: 48, ..GeometryParams::default() };
        assert!(p.validate().is_err());
        match gen_binary_mask(&p) {
            Err(Error::DegenerateGeometry { attempts, .. }) => assert_eq!(attempts, 8),
            other => panic!("expected degenerate geometry, got {other:?}"),
        }
        assert!(gen_binary_mask(&GeometryParams { threshold: 1.0, ..p }).is_err());
    }

    #[test]
    fn default_fill_fraction_calibration() {
        let inside = (0..100)
            .filter(|&s| {
                let f = fill_fraction(&gen_binary_mask(&GeometryParams { rng_seed: s, ..GeometryParams::default() }).unwrap());
                (0.2..=0.8).contains(&f)
            })
            .count();
        assert!(inside >= 90, "{inside} of 100 masks in [0.2, 0.8]");
    }

    #[test]
    fn material_edge_cases() {
        let empty = Mask::filled(32, 32, false);
        for mode in [MaterialMode::Grf { corr_len: 16.0 }, MaterialMode::Voronoi { points: 5 }] {
            let e = gen_grayscale_material(&empty, mode, 1).unwrap();
            assert!(e.eps().as_slice().iter().all(|&v| v == 1.0));
        }
        let full = Mask::filled(32, 32, true);
        let e = gen_grayscale_material(&full, MaterialMode::Voronoi { points: 1 }, 7).unwrap();
        let v0 = e.at(0, 0);
        assert!(e.eps().as_slice().iter().all(|&v| v == v0));
        assert!((1.0..=16.0).contains(&v0));
    }

    #[test]
    fn grf_histogram_spans_range() {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in 0..100 {
            let mask = gen_binary_mask(&GeometryParams { nx: 64, ny: 64, rng_seed: s, ..GeometryParams::default() }).unwrap();
            let e = gen_grayscale_material(&mask, MaterialMode::default(), s).unwrap();
            for (v, m) in e.eps().as_slice().iter().zip(mask.as_slice()) {
                assert!((1.0..=16.0).contains(v));
                if *m {
                    lo = lo.min(*v);
                    hi = hi.max(*v);
                }
            }
        }
        assert!(lo < 1.5 && hi > 15.0, "[{lo}, {hi}]");
    }

    #[test]
    fn single_mode_profile_is_pure_sinusoid() {
        let p = line_profile(50, &[1.0], &[0.0]);
        for (t, v) in p.iter().enumerate() {
            assert!((v - (2.0 * PI * t as f64 / 50.0).sin()).abs() < 1e-15);
        }
    }

    #[test]
    fn line_sources_normalized_and_deterministic() {
        let g = GridSpec::new(200, 200).unwrap();
        let p = LineSourceParams { inset: 40, modes: 8, seed: 9 };
        let a = gen_line_sources(&g, &p).unwrap();
        assert_eq!(a, gen_line_sources(&g, &p).unwrap());
        let mags: Vec<f64> = a.j().as_slice().iter().map(|v| v.norm()).filter(|v| *v > 0.0).collect();
        let mean = mags.iter().sum::<f64>() / mags.len() as f64;
        assert!((mean - 1.0).abs() < 1e-12);
        // Four lines of 120 cells sharing 4 corners.
        assert!(a.support() <= 4 * 120 - 4 && a.support() > 400);
        assert_eq!(a.at(40, 100).norm() > 0.0, true);
        assert_eq!(a.at(39, 100).norm(), 0.0);
    }

    fn small_sim(seed: u64) -> Simulation {
        let mut p = SimulationParams::new(192, seed);
        p.pml_thickness = 20;
        p.source_inset = 20 + SUBDOMAIN_SIZE + 2;
        simulate(&p).unwrap()
    }

    #[test]
    fn crops_are_consistent_and_round_trip() {
        let sim = small_sim(5);
        assert!(sim.relative_residual < 1e-8);
        let crops = crop_subdomains(
            &sim,
            &CropParams { count: 40, seed: 3, augment_rot: true, stride: None, convention: WavevectorConvention::LinearEps },
        )
        .unwrap();
        assert_eq!(crops.len(), 40);
        let k0 = sim.grid.k0_delta();
        let mut seen = [0usize; 3];
        for c in &crops {
            seen[c.class.as_u8() as usize] += 1;
            let has_src = c.source.max_abs() > 0.0;
            let has_pml = c.pml_profile.as_slice().iter().any(|v| *v != 0.0);
            assert!(!(has_src && has_pml));
            assert_eq!(has_pml, c.class == SubdomainClass::Pml);
            assert!(c.eps.as_slice().iter().all(|e| (1.0..=16.0).contains(e)));
            let r = c.residual(k0);
            let inner: f64 = r.as_slice().iter().map(|v| v.norm()).sum::<f64>() / (62.0 * 62.0);
            assert!(inner < 1e-7, "{:?} residual {inner:e}", c.class);
            let solved = solve_subdomain_exact(&c.to_problem(k0, WavevectorConvention::LinearEps)).unwrap();
            assert!(relative_l1(&solved, &c.h).unwrap() < 1e-6);
        }
        assert!(seen.iter().all(|&n| n > 0), "{seen:?}");
    }

    #[test]
    fn rotation_commutes_with_residual() {
        let sim = small_sim(8);
        let crops = crop_subdomains(
            &sim,
            &CropParams { count: 6, seed: 1, augment_rot: false, stride: None, convention: WavevectorConvention::LinearEps },
        )
        .unwrap();
        let k0 = sim.grid.k0_delta();
        for c in &crops {
            for q in 1..4 {
                let a = c.rot90(q).residual(k0);
                let b = c.residual(k0).rot90(q);
                for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
                    assert!((u - v).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn plane_wave_crop_traces() {
        let n = 96;
        let kappa = GridSpec::new(n, n).unwrap().k0_delta();
        let sim = Simulation {
            grid: GridSpec::new(n, n).unwrap(),
            eps: MaterialMap::uniform(n, n, 1.0).unwrap(),
            source: SourceMap::zeros(n, n),
            pml: PmlSpec::none(),
            h: ComplexField2D::from_fn(n, n, |x, _| c64::from_polar(1.0, kappa * x as f64)),
            relative_residual: 0.0,
        };
        let s = &crop_subdomains(&sim, &CropParams { count: 1, seed: 0, augment_rot: false, stride: Some(16), convention: WavevectorConvention::LinearEps }).unwrap()[0];
        let i = c64::new(0.0, 1.0);
        for t in 0..64 {
            // Analytic i k H - dH/dn: 2ik H on the west edge, 0 on the east edge.
            let hw = s.h.get(0, t);
            
            assert!((s.g.edges[0][t] - 2.0 * i * kappa * hw).norm() <= kappa * kappa);
            assert!(s.g.edges[1][t].norm() <= kappa * kappa);
        }
    }

    #[test]
    fn device_problem_tiles() {
        let p = device_problem(304, 2.25, MaterialMode::default(), 3, WavevectorConvention::LinearEps).unwrap();
        assert!(p.eps.max() <= 2.25 + 1e-12);
        let t = crate::ddm::tile(&p.grid, 4, &p.source, &p.pml, &[]).unwrap();
        assert_eq!((t.tiles_x, t.tiles_y), (5, 5));
        assert_eq!(t.count(SubdomainClass::Pml), 16);
        assert!(t.count(SubdomainClass::Source) > 0);
    }
}
