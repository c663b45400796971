//! Overlapping Schwarz iteration over fixed-size blocks.
//!
//! The domain is covered by `size x size` tiles advancing by
//! `stride = size - overlap`. Each sweep solves every tile from the Robin
//! data of the previous sweep (Jacobi), then samples each donor's fresh field
//! on its neighbours' boundary lines to build the next Robin data.
//!
//! On a Bloch-periodic axis the tiles wrap around. A tile's local arrays
//! are stored in unwrapped coordinates, where a cell `X >= n` holds
//! `phase * H(X - n)`.

use std::time::Instant;

use num_complex::Complex64 as c64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdfd::{pde_residual_map, BlochSpec, PmlSpec, Wrap};
use crate::field::{Array2D, ComplexField2D, GridSpec, MaterialMap, RealField2D, SourceMap, WavevectorConvention};
use crate::robin::{extract_g, BoundaryTraceSet, Edge};
use crate::subdomain::{LocalStretch, SubdomainClass, SubdomainProblem, SubdomainSolver, SUBDOMAIN_SIZE};

/// Where a receiver edge takes its Robin data from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Donor {
    pub tile: usize,
    /// Donor-local index of the receiver's boundary line.
    pub line: usize,
    /// Multiplies the donated trace (Bloch wrap), 1 otherwise.
    pub phase: c64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub id: usize,
    pub ix: usize,
    pub iy: usize,
    /// Origin in unwrapped global coordinates.
    pub ox: usize,
    pub oy: usize,
    pub class: SubdomainClass,
    /// Per edge (`W, E, N, S`).
    pub donors: [Option<Donor>; 4],
    pub dirichlet: [bool; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tiling {
    pub nx: usize,
    pub ny: usize,
    pub size: usize,
    pub overlap: usize,
    pub stride: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub wrap: Wrap,
    pub tiles: Vec<Tile>,
}

/// Tile counts for one axis, or the nearest valid sizes on failure.
fn axis_tiles(n: usize, size: usize, stride: usize, periodic: bool) -> std::result::Result<usize, String> {
    if periodic {
        if n % stride == 0 && n / stride >= 2 && n >= size {
            return Ok(n / stride);
        }
        let lo = (n / stride).max(2) * stride;
        let lo = if lo > n { None } else { Some(lo) };
        let hi = ((n / stride + 1).max(2) * stride).max(size.div_ceil(stride) * stride);
        return Err(format!(
            "periodic extent {n} must be a multiple of stride {stride} and at least {size}; nearest valid: {}{hi}",
            lo.filter(|&l| l >= size).map(|l| format!("{l}, ")).unwrap_or_default()
        ));
    }
    if n == size {
        return Ok(1);
    }
    if n > size && (n - size) % stride == 0 {
        return Ok((n - size) / stride + 1);
    }
    let below = if n > size { Some(size + (n - size) / stride * stride) } else { None };
    let above = if n > size { size + ((n - size) / stride + 1) * stride } else { size };
    Err(format!(
        "extent {n} is not {size} + k*{stride}; nearest valid: {}{above}",
        below.map(|b| format!("{b}, ")).unwrap_or_default()
    ))
}

/// Builds the tiling and classifies each tile.
pub fn tile(
    grid: &GridSpec,
    overlap: usize,
    source: &SourceMap,
    pml: &PmlSpec,
    bloch: &[BlochSpec],
) -> Result<Tiling> {
    let size = SUBDOMAIN_SIZE;
    if !(2..=32).contains(&overlap) {
        return Err(Error::InvalidTiling(format!("overlap {overlap} outside [2, 32]")));
    }
    let wrap = Wrap::from_bloch(bloch)?;
    let (nx, ny) = grid.shape();
    if source.shape() != (nx, ny) {
        return Err(Error::ShapeMismatch {
            expected: (nx, ny),
            got: source.shape(),
        });
    }
    pml.validate(grid)?;
    let stride = size - overlap;
    let tx = axis_tiles(nx, size, stride, wrap.x.is_some()).map_err(|e| Error::InvalidTiling(format!("x: {e}")))?;
    let ty = axis_tiles(ny, size, stride, wrap.y.is_some()).map_err(|e| Error::InvalidTiling(format!("y: {e}")))?;

    let mut tiles = Vec::with_capacity(tx * ty);
    for ix in 0..tx {
        for iy in 0..ty {
            let (ox, oy) = (ix * stride, iy * stride);
            let mut has_pml = false;
            let mut has_src = false;
            for x in ox..ox + size {
                for y in oy..oy + size {
                    let (gx, gy) = (x % nx, y % ny);
                    has_pml |= pml.in_pml(grid, gx, gy);
                    has_src |= source.at(gx, gy).norm() != 0.0;
                }
            }
            if has_pml && has_src {
                return Err(Error::InvalidTiling(format!(
                    "tile ({ix}, {iy}) at ({ox}, {oy}) contains both PML and source cells; increase margin"
                )));
            }
            let class = if has_pml {
                SubdomainClass::Pml
            } else if has_src {
                SubdomainClass::Source
            } else {
                SubdomainClass::Material
            };
            let id = ix * ty + iy;
            let mut donors = [None; 4];
            let mut dirichlet = [false; 4];
            let one = c64::new(1.0, 0.0);
            // W: receiver line 0 is donor line `stride`.
            donors[Edge::W.index()] = if ix > 0 {
                Some(Donor { tile: id - ty, line: stride, phase: one })
            } else {
                wrap.x.map(|p| Donor { tile: (tx - 1) * ty + iy, line: stride, phase: p.conj() })
            };
            donors[Edge::E.index()] = if ix + 1 < tx {
                Some(Donor { tile: id + ty, line: overlap - 1, phase: one })
            } else {
                wrap.x.map(|p| Donor { tile: iy, line: overlap - 1, phase: p })
            };
            donors[Edge::S.index()] = if iy > 0 {
                Some(Donor { tile: id - 1, line: stride, phase: one })
            } else {
                wrap.y.map(|p| Donor { tile: ix * ty + ty - 1, line: stride, phase: p.conj() })
            };
            donors[Edge::N.index()] = if iy + 1 < ty {
                Some(Donor { tile: id + 1, line: overlap - 1, phase: one })
            } else {
                wrap.y.map(|p| Donor { tile: ix * ty, line: overlap - 1, phase: p })
            };
            if class == SubdomainClass::Pml && pml.is_active() {
                let s = pml.sides;
                dirichlet[Edge::W.index()] = donors[0].is_none() && s.left;
                dirichlet[Edge::E.index()] = donors[1].is_none() && s.right;
                dirichlet[Edge::N.index()] = donors[2].is_none() && s.top;
                dirichlet[Edge::S.index()] = donors[3].is_none() && s.bottom;
            }
            tiles.push(Tile { id, ix, iy, ox, oy, class, donors, dirichlet });
        }
    }
    Ok(Tiling { nx, ny, size, overlap, stride, tiles_x: tx, tiles_y: ty, wrap, tiles })
}

impl Tiling {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn count(&self, class: SubdomainClass) -> usize {
        self.tiles.iter().filter(|t| t.class == class).count()
    }

    /// Bloch factor picked up by unwrapped coordinate `(x, y)`.
    fn phase_at(&self, x: usize, y: usize) -> c64 {
        let mut p = c64::new(1.0, 0.0);
        if let Some(px) = self.wrap.x {
            for _ in 0..x / self.nx {
                p *= px;
            }
        }
        if let Some(py) = self.wrap.y {
            for _ in 0..y / self.ny {
                p *= py;
            }
        }
        p
    }

    /// Restriction of a global complex field to a tile.
    pub fn restrict(&self, field: &ComplexField2D, tile: &Tile) -> ComplexField2D {
        ComplexField2D::from_fn(self.size, self.size, |x, y| {
            let (ux, uy) = (tile.ox + x, tile.oy + y);
            self.phase_at(ux, uy) * field.get(ux % self.nx, uy % self.ny)
        })
    }

    pub fn restrict_real(&self, field: &RealField2D, tile: &Tile) -> RealField2D {
        RealField2D::from_fn(self.size, self.size, |x, y| *field.get((tile.ox + x) % self.nx, (tile.oy + y) % self.ny))
    }

    /// 1D blend weight of local index `i` along one axis.
    fn ramp(&self, i: usize, low_neighbor: bool, high_neighbor: bool) -> f64 {
        let o = self.overlap as f64;
        if low_neighbor && i < self.overlap {
            (i as f64 + 0.5) / o
        } else if high_neighbor && i >= self.stride {
            (self.size as f64 - i as f64 - 0.5) / o
        } else {
            1.0
        }
    }

    pub fn weight(&self, tile: &Tile, x: usize, y: usize) -> f64 {
        let d = &tile.donors;
        self.ramp(x, d[Edge::W.index()].is_some(), d[Edge::E.index()].is_some())
            * self.ramp(y, d[Edge::S.index()].is_some(), d[Edge::N.index()].is_some())
    }

    /// Sum of blend weights per global cell; identically one for a valid tiling.
    pub fn weight_sum(&self) -> RealField2D {
        let mut w = RealField2D::filled(self.nx, self.ny, 0.0);
        for t in &self.tiles {
            for x in 0..self.size {
                for y in 0..self.size {
                    *w.get_mut((t.ox + x) % self.nx, (t.oy + y) % self.ny) += self.weight(t, x, y);
                }
            }
        }
        w
    }
}

/// A global problem to be solved by decomposition.
#[derive(Debug, Clone)]
pub struct DdmProblem {
    pub grid: GridSpec,
    pub eps: MaterialMap,
    pub source: SourceMap,
    pub pml: PmlSpec,
    pub bloch: Vec<BlochSpec>,
    pub convention: WavevectorConvention,
}

/// Tiling plus the per-tile block problems (with empty Robin data).
#[derive(Debug, Clone)]
pub struct DdmSetup {
    pub tiling: Tiling,
    pub blocks: Vec<SubdomainProblem>,
    k_maps: Vec<RealField2D>,
    /// Cells used for the residual metric and oracle comparison.
    pub measure_mask: Array2D<bool>,
}

impl DdmSetup {
    pub fn new(problem: &DdmProblem, overlap: usize) -> Result<Self> {
        let grid = &problem.grid;
        if problem.eps.shape() != grid.shape() {
            return Err(Error::ShapeMismatch {
                expected: grid.shape(),
                got: problem.eps.shape(),
            });
        }
        let tiling = tile(grid, overlap, &problem.source, &problem.pml, &problem.bloch)?;
        let (sx, sy) = problem.pml.stretch_profiles(grid);
        let k0 = grid.k0_delta();
        let n = tiling.size;
        let blocks: Vec<SubdomainProblem> = tiling
            .tiles
            .iter()
            .map(|t| {
                let stretch = (t.class == SubdomainClass::Pml).then(|| LocalStretch {
                    sx: (0..n).map(|x| sx[(t.ox + x) % grid.nx]).collect(),
                    sy: (0..n).map(|y| sy[(t.oy + y) % grid.ny]).collect(),
                });
                SubdomainProblem {
                    class: t.class,
                    eps: tiling.restrict_real(problem.eps.eps(), t),
                    source: tiling.restrict(problem.source.j(), t),
                    stretch,
                    g: BoundaryTraceSet::zeros(n, n),
                    dirichlet: t.dirichlet,
                    convention: problem.convention,
                    k0_delta: k0,
                }
            })
            .collect();
        let k_maps = blocks.iter().map(SubdomainProblem::k_map).collect();
        let pml_mask = problem.pml.mask(grid);
        let (nx, ny) = grid.shape();
        // Skip PML cells, cells whose stencil reaches into PML, and the border.
        let measure_mask = Array2D::from_fn(nx, ny, |x, y| {
            x > 0
                && y > 0
                && x + 1 < nx
                && y + 1 < ny
                && ![(x, y), (x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)]
                    .iter()
                    .any(|&(a, b)| *pml_mask.get(a, b))
        });
        Ok(Self { tiling, blocks, k_maps, measure_mask })
    }

    pub fn problem_with(&self, tile: usize, g: &BoundaryTraceSet) -> SubdomainProblem {
        let mut p = self.blocks[tile].clone();
        p.g = g.clone();
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdmState {
    pub iteration: usize,
    pub fields: Vec<ComplexField2D>,
    pub traces: Vec<BoundaryTraceSet>,
}

impl DdmState {
    /// Zero fields and zero Robin data.
    pub fn zero(setup: &DdmSetup) -> Self {
        let n = setup.tiling.size;
        let count = setup.tiling.len();
        Self {
            iteration: 0,
            fields: vec![ComplexField2D::zeros(n, n); count],
            traces: vec![BoundaryTraceSet::zeros(n, n); count],
        }
    }

    /// State whose fields are restrictions of `global` and whose Robin data
    /// are sampled from those fields.
    pub fn from_global(setup: &DdmSetup, global: &ComplexField2D) -> Result<Self> {
        let fields: Vec<ComplexField2D> = setup.tiling.tiles.iter().map(|t| setup.tiling.restrict(global, t)).collect();
        let traces = exchange(setup, &fields)?;
        Ok(Self { iteration: 0, fields, traces })
    }
}

/// Per-class batched solvers.
#[derive(Clone, Copy, Default)]
pub struct SolverSet<'a> {
    slots: [Option<&'a dyn SubdomainSolver>; 3],
}

impl<'a> SolverSet<'a> {
    pub fn uniform(solver: &'a dyn SubdomainSolver) -> Self {
        Self { slots: [Some(solver); 3] }
    }

    pub fn with(mut self, class: SubdomainClass, solver: &'a dyn SubdomainSolver) -> Self {
        self.slots[class.as_u8() as usize] = Some(solver);
        self
    }

    pub fn get(&self, class: SubdomainClass) -> Option<&'a dyn SubdomainSolver> {
        self.slots[class.as_u8() as usize]
    }
}

/// New Robin data for every tile from the given tile fields.
pub fn exchange(setup: &DdmSetup, fields: &[ComplexField2D]) -> Result<Vec<BoundaryTraceSet>> {
    let n = setup.tiling.size;
    setup
        .tiling
        .tiles
        .par_iter()
        .map(|t| {
            let mut g = BoundaryTraceSet::zeros(n, n);
            for e in Edge::ALL {
                if let Some(d) = t.donors[e.index()] {
                    let mut v = extract_g(&fields[d.tile], &setup.k_maps[d.tile], e, d.line)?;
                    if d.phase != c64::new(1.0, 0.0) {
                        v.iter_mut().for_each(|x| *x *= d.phase);
                    }
                    *g.edge_mut(e) = v;
                }
            }
            Ok(g)
        })
        .collect()
}

/// One Jacobi sweep: solve all tiles from the current Robin data, then
/// exchange.
pub fn ddm_iterate(state: &DdmState, setup: &DdmSetup, solvers: &SolverSet) -> Result<DdmState> {
    let count = setup.tiling.len();
    let problems: Vec<SubdomainProblem> = (0..count).map(|i| setup.problem_with(i, &state.traces[i])).collect();
    let mut fields: Vec<Option<ComplexField2D>> = vec![None; count];
    for class in SubdomainClass::ALL {
        let ids: Vec<usize> = (0..count).filter(|&i| problems[i].class == class).collect();
        if ids.is_empty() {
            continue;
        }
        let solver = solvers.get(class).ok_or_else(|| Error::MissingSolver(class.to_string()))?;
        let batch: Vec<&SubdomainProblem> = ids.iter().map(|&i| &problems[i]).collect();
        for (&i, r) in ids.iter().zip(solver.solve_batch(&batch)) {
            let h = r.map_err(|e| Error::SubdomainFailure { id: i, reason: e.to_string() })?;
            if h.shape() != problems[i].shape() || !h.is_finite() {
                return Err(Error::SubdomainFailure {
                    id: i,
                    reason: "solver returned a malformed or non-finite field".into(),
                });
            }
            fields[i] = Some(h);
        }
    }
    let fields: Vec<ComplexField2D> = fields.into_iter().map(|f| f.expect("every tile solved")).collect();
    let traces = exchange(setup, &fields)?;
    Ok(DdmState { iteration: state.iteration + 1, fields, traces })
}

/// Partition-of-unity blend of the tile fields into a global field.
pub fn stitch(state: &DdmState, tiling: &Tiling) -> ComplexField2D {
    let mut out = ComplexField2D::zeros(tiling.nx, tiling.ny);
    for (t, f) in tiling.tiles.iter().zip(&state.fields) {
        for x in 0..tiling.size {
            for y in 0..tiling.size {
                let (ux, uy) = (t.ox + x, t.oy + y);
                let w = tiling.weight(t, x, y);
                let v = tiling.phase_at(ux, uy).conj() * f.get(x, y) * w;
                *out.get_mut(ux % tiling.nx, uy % tiling.ny) += v;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DdmConfig {
    pub max_iters: usize,
    /// Stop once the normalized residual falls below this.
    pub residual_threshold: f64,
    pub overlap: usize,
    pub divergence_factor: f64,
    pub divergence_window: usize,
}

impl Default for DdmConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            residual_threshold: 1e-3,
            overlap: 4,
            divergence_factor: 10.0,
            divergence_window: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// Mean `|pde residual|` over measured cells.
    pub mean_pde_residual: f64,
    /// The same mean divided by the mean `|k0 delta J|` over measured cells.
    pub normalized_residual: f64,
    pub rel_l1_vs_oracle: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct DdmOutcome {
    pub field: ComplexField2D,
    pub trace: Vec<IterationRecord>,
    pub converged: bool,
    pub state: DdmState,
}

fn masked_mean(values: &ComplexField2D, mask: &Array2D<bool>) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (v, &m) in values.as_slice().iter().zip(mask.as_slice()) {
        if m {
            s += v.norm();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// `mean |a - b| / mean |b|` over the masked cells.
pub fn masked_relative_l1(a: &ComplexField2D, b: &ComplexField2D, mask: &Array2D<bool>) -> Result<f64> {
    a.same_shape(b)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for ((p, q), &m) in a.as_slice().iter().zip(b.as_slice()).zip(mask.as_slice()) {
        if m {
            num += (p - q).norm();
            den += q.norm();
        }
    }
    if den == 0.0 {
        return Err(Error::DegenerateReference);
    }
    Ok(num / den)
}

/// Iterates from zero until `max_iters` or the residual threshold.
pub fn run_ddm(
    problem: &DdmProblem,
    setup: &DdmSetup,
    config: &DdmConfig,
    solvers: &SolverSet,
    oracle: Option<&ComplexField2D>,
) -> Result<DdmOutcome> {
    let mask = &setup.measure_mask;
    let src_scale = {
        let scaled = problem.source.j().map(|j| j * problem.grid.k0_delta());
        masked_mean(&scaled, mask)
    };
    let mut state = DdmState::zero(setup);
    let mut trace = Vec::new();
    let mut field = ComplexField2D::zeros(problem.grid.nx, problem.grid.ny);
    let mut best = f64::INFINITY;
    let mut above = 0usize;
    let mut converged = false;
    let start = Instant::now();
    for _ in 0..config.max_iters {
        state = ddm_iterate(&state, setup, solvers)?;
        field = stitch(&state, &setup.tiling);
        let r = pde_residual_map(&problem.eps, &field, &problem.source, &problem.grid)?;
        let mean = masked_mean(&r, mask);
        let normalized = if src_scale > 0.0 { mean / src_scale } else { mean };
        let rel = match oracle {
            Some(o) => Some(masked_relative_l1(&field, o, mask)?),
            None => None,
        };
        trace.push(IterationRecord {
            iter: state.iteration,
            mean_pde_residual: mean,
            normalized_residual: normalized,
            rel_l1_vs_oracle: rel,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        log::debug!("ddm iter {}: residual {normalized:.3e} rel_l1 {rel:?}", state.iteration);
        if !normalized.is_finite() {
            return Err(Error::Diverged { iteration: state.iteration, residual: normalized, minimum: best });
        }
        if normalized < config.residual_threshold {
            converged = true;
            break;
        }
        best = best.min(normalized);
        if normalized > config.divergence_factor * best {
            above += 1;
            if above >= config.divergence_window {
                return Err(Error::Diverged { iteration: state.iteration, residual: normalized, minimum: best });
            }
        } else {
            above = 0;
        }
    }
    Ok(DdmOutcome { field, trace, converged, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdfd::{solve_global, Axis, PmlSides, Side};
    use crate::subdomain::ExactSubdomainSolver;
    use crate::relative_l1;

    fn grid(nx: usize, ny: usize) -> GridSpec {
        GridSpec::new(nx, ny).unwrap()
    }

    #[test]
    fn tile_counts_and_errors() {
        let g = grid(904, 904);
        let src = SourceMap::zeros(904, 904);
        let t = tile(&g, 4, &src, &PmlSpec::default(), &[]).unwrap();
        assert_eq!((t.tiles_x, t.tiles_y), (15, 15));
        let ring = t.tiles.iter().filter(|t| t.ix == 0 || t.iy == 0 || t.ix == 14 || t.iy == 14);
        assert!(ring.clone().all(|t| t.class == SubdomainClass::Pml));
        assert_eq!(t.count(SubdomainClass::Pml), 56);

        let single = tile(&grid(64, 64), 7, &SourceMap::zeros(64, 64), &PmlSpec::none(), &[]).unwrap();
        assert_eq!(single.len(), 1);
        assert!(single.tiles[0].donors.iter().all(Option::is_none));

        let err = tile(&grid(320, 320), 4, &SourceMap::zeros(320, 320), &PmlSpec::none(), &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("304") && msg.contains("364"), "{msg}");
        assert!(tile(&grid(64, 64), 1, &SourceMap::zeros(64, 64), &PmlSpec::none(), &[]).is_err());
    }

    #[test]
    fn pml_and_source_in_one_tile_is_rejected() {
        let g = grid(184, 184);
        let mut src = SourceMap::zeros(184, 184);
        src.j_mut().set(45, 90, c64::new(1.0, 0.0));
        let err = tile(&g, 4, &src, &PmlSpec::default(), &[]).unwrap_err();
        assert!(err.to_string().contains("increase margin"));
    }

    #[test]
    fn weights_form_partition_of_unity() {
        for (n, o, bloch) in [
            (64usize, 4usize, false),
            (184, 4, false),
            (250, 2, false),
            (160, 32, false),
            (180, 4, true),
            (248, 2, true),
        ] {
            let g = grid(n, n);
            let b: Vec<BlochSpec> = if bloch { vec![BlochSpec::periodic(Axis::X)] } else { vec![] };
            let ny = if bloch { 64 + 2 * (64 - o) } else { n };
            let g = if bloch { grid(n, ny) } else { g };
            let t = tile(&g, o, &SourceMap::zeros(g.nx, g.ny), &PmlSpec::none(), &b).unwrap();
            let w = t.weight_sum();
            let max_dev = w.as_slice().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
            assert!(max_dev < 1e-12, "n={n} o={o}: {max_dev}");
            for tl in &t.tiles {
                for x in 0..64 {
                    for y in 0..64 {
                        let v = t.weight(tl, x, y);
                        assert!((0.0..=1.0).contains(&v));
                    }
                }
            }
        }
    }

    #[test]
    fn stitch_identity_cases() {
        let g = grid(64, 64);
        let problem = uniform_problem(g, PmlSpec::none(), vec![]);
        let setup = DdmSetup::new(&problem, 4).unwrap();
        let f = ComplexField2D::from_fn(64, 64, |x, y| c64::new(x as f64, y as f64));
        let state = DdmState::from_global(&setup, &f).unwrap();
        assert_eq!(stitch(&state, &setup.tiling), f);

        let g = grid(184, 124);
        let problem = uniform_problem(g, PmlSpec::none(), vec![]);
        let setup = DdmSetup::new(&problem, 4).unwrap();
        let f = ComplexField2D::from_fn(184, 124, |x, y| c64::new((x * y) as f64, 1.0));
        let state = DdmState::from_global(&setup, &f).unwrap();
        let s = stitch(&state, &setup.tiling);
        for (a, b) in s.as_slice().iter().zip(f.as_slice()) {
            assert!((a - b).norm() <= 1e-12 * b.norm().max(1.0));
        }
    }

    fn uniform_problem(grid: GridSpec, pml: PmlSpec, bloch: Vec<BlochSpec>) -> DdmProblem {
        DdmProblem {
            grid,
            eps: MaterialMap::uniform(grid.nx, grid.ny, 1.0).unwrap(),
            source: SourceMap::zeros(grid.nx, grid.ny),
            pml,
            bloch,
            convention: WavevectorConvention::LinearEps,
        }
    }

    #[test]
    fn zero_source_stays_zero() {
        let problem = uniform_problem(grid(124, 124), PmlSpec::none(), vec![]);
        let setup = DdmSetup::new(&problem, 4).unwrap();
        let exact = ExactSubdomainSolver::new();
        let solvers = SolverSet::uniform(&exact);
        let mut s = DdmState::zero(&setup);
        for _ in 0..3 {
            s = ddm_iterate(&s, &setup, &solvers).unwrap();
            assert!(s.fields.iter().all(|f| f.max_abs() == 0.0));
        }
    }

    #[test]
    fn max_iters_zero_returns_zero_field() {
        let problem = uniform_problem(grid(64, 64), PmlSpec::none(), vec![]);
        let setup = DdmSetup::new(&problem, 4).unwrap();
        let exact = ExactSubdomainSolver::new();
        let cfg = DdmConfig { max_iters: 0, ..DdmConfig::default() };
        let out = run_ddm(&problem, &setup, &cfg, &SolverSet::uniform(&exact), None).unwrap();
        assert!(out.trace.is_empty());
        assert_eq!(out.field.max_abs(), 0.0);
    }

    #[test]
    fn missing_solver_is_reported() {
        let problem = uniform_problem(grid(64, 64), PmlSpec::none(), vec![]);
        let setup = DdmSetup::new(&problem, 4).unwrap();
        let exact = ExactSubdomainSolver::new();
        let solvers = SolverSet::default().with(SubdomainClass::Pml, &exact);
        assert!(matches!(
            ddm_iterate(&DdmState::zero(&setup), &setup, &solvers),
            Err(Error::MissingSolver(_))
        ));
    }

    fn line_source_problem(n: usize, pml: usize, inset: usize, eps: MaterialMap) -> DdmProblem {
        let g = grid(n, n);
        let mut src = SourceMap::zeros(n, n);
        for t in inset..n - inset {
            src.j_mut().set(t, inset, c64::from_polar(1.0, 0.05 * t as f64));
        }
        DdmProblem {
            grid: g,
            eps,
            source: src,
            pml: PmlSpec::with_thickness(pml),
            bloch: vec![],
            convention: WavevectorConvention::LinearEps,
        }
    }

    #[test]
    fn single_tile_matches_global_operator() {
        // A lone PML tile pins its whole frame, exactly like the global ring,
        // so its block operator is the global operator.
        let n = 64;
        let g = grid(n, n);
        let eps = MaterialMap::new(RealField2D::from_fn(n, n, |x, y| 1.0 + ((x + y) % 4) as f64 * 0.3)).unwrap();
        let pml = PmlSpec::with_thickness(8);
        let problem = DdmProblem {
            grid: g,
            eps: eps.clone(),
            source: SourceMap::zeros(n, n),
            pml,
            bloch: vec![],
            convention: WavevectorConvention::LinearEps,
        };
        let setup = DdmSetup::new(&problem, 4).unwrap();
        assert_eq!(setup.tiling.len(), 1);
        assert_eq!(setup.blocks[0].dirichlet, [true; 4]);
        let op = setup.blocks[0].assemble_operator().unwrap();
        let gop = crate::fdfd::assemble_operator(&eps, &g, &pml, &[]).unwrap();
        assert_eq!(op, gop);

        // Without PML the single tile is one Robin solve.
        let mut src = SourceMap::zeros(n, n);
        src.j_mut().set(30, 33, c64::new(1.0, 0.0));
        let problem = DdmProblem { source: src, pml: PmlSpec::none(), ..problem };
        let setup = DdmSetup::new(&problem, 4).unwrap();
        let exact = ExactSubdomainSolver::new();
        let cfg = DdmConfig { max_iters: 1, ..DdmConfig::default() };
        let out = run_ddm(&problem, &setup, &cfg, &SolverSet::uniform(&exact), None).unwrap();
        let direct = crate::subdomain::solve_subdomain_exact(&setup.blocks[0]).unwrap();
        assert!(relative_l1(&out.field, &direct).unwrap() < 1e-12);
        let rhs = setup.blocks[0].assemble_rhs();
        let res = setup.blocks[0].assemble_operator().unwrap().relative_residual_l1(out.field.as_slice(), &rhs);
        assert!(res < 1e-10);
    }

    #[test]
    fn fixed_point_of_true_solution() {
        let n = 244;
        let eps = MaterialMap::new(RealField2D::from_fn(n, n, |x, y| {
            if ((x as f64 - 120.0).powi(2) + (y as f64 - 130.0).powi(2)) < 900.0 { 2.25 } else { 1.0 }
        }))
        .unwrap();
        let problem = line_source_problem(n, 40, 66, eps);
        let truth = solve_global(&problem.eps, &problem.source, &problem.grid, &problem.pml, &[]).unwrap();
        let setup = DdmSetup::new(&problem, 4).unwrap();
        let exact = ExactSubdomainSolver::new();
        let s0 = DdmState::from_global(&setup, &truth).unwrap();
        let s1 = ddm_iterate(&s0, &setup, &SolverSet::uniform(&exact)).unwrap();
        for (a, b) in s1.fields.iter().zip(&s0.fields) {
            if b.max_abs() > 0.0 {
                assert!(relative_l1(a, b).unwrap() < 1e-8);
            }
        }
        let st = stitch(&s1, &setup.tiling);
        assert!(relative_l1(&st, &truth).unwrap() < 1e-8);
    }

    #[test]
    fn fixed_point_with_bloch_wrap() {
        let (nx, ny) = (180, 244);
        let eps = MaterialMap::new(RealField2D::from_fn(nx, ny, |x, y| 1.0 + 0.5 * (((x / 9) + (y / 7)) % 2) as f64)).unwrap();
        let phase = c64::from_polar(1.0, 0.7);
        let mut src = SourceMap::zeros(nx, ny);
        for x in 0..nx {
            src.j_mut().set(x, 70, c64::from_polar(1.0, 0.7 * x as f64 / nx as f64));
        }
        let problem = DdmProblem {
            grid: grid(nx, ny),
            eps,
            source: src,
            pml: PmlSpec { thickness: 40, sides: PmlSides::from_sides(&[Side::Top, Side::Bottom]), ..PmlSpec::default() },
            bloch: vec![BlochSpec::new(Axis::X, phase).unwrap()],
            convention: WavevectorConvention::LinearEps,
        };
        let truth = solve_global(&problem.eps, &problem.source, &problem.grid, &problem.pml, &problem.bloch).unwrap();
        let setup = DdmSetup::new(&problem, 4).unwrap();
        assert_eq!(setup.tiling.tiles_x, 3);
        let exact = ExactSubdomainSolver::new();
        let s0 = DdmState::from_global(&setup, &truth).unwrap();
        let s1 = ddm_iterate(&s0, &setup, &SolverSet::uniform(&exact)).unwrap();
        let st = stitch(&s1, &setup.tiling);
        assert!(relative_l1(&st, &truth).unwrap() < 1e-8);
    }

    #[test]
    fn two_tile_strip_converges_geometrically() {
        let g = GridSpec::new(124, 64).unwrap();
        let mut src = SourceMap::zeros(124, 64);
        for y in 10..54 {
            src.j_mut().set(30, y, c64::new(1.0, 0.0));
        }
        let problem = DdmProblem {
            grid: g,
            eps: MaterialMap::uniform(124, 64, 1.0).unwrap(),
            source: src,
            pml: PmlSpec::none(),
            bloch: vec![],
            convention: WavevectorConvention::LinearEps,
        };
        let setup = DdmSetup::new(&problem, 4).unwrap();
        assert_eq!(setup.tiling.len(), 2);
        // The decomposed problem keeps Robin data g = 0 on the outer edges,
        // so the oracle is the 2-tile fixed point, computed by long iteration.
        let exact = ExactSubdomainSolver::new();
        let solvers = SolverSet::uniform(&exact);
        let mut s = DdmState::zero(&setup);
        let mut history = Vec::new();
        for _ in 0..60 {
            s = ddm_iterate(&s, &setup, &solvers).unwrap();
            history.push(stitch(&s, &setup.tiling));
        }
        let limit = history.last().unwrap().clone();
        let errs: Vec<f64> = history[..12].iter().map(|h| relative_l1(h, &limit).unwrap()).collect();
        for w in errs.windows(2) {
            assert!(w[1] < w[0], "{errs:?}");
        }
        assert!(errs[11] < 0.5 * errs[1]);
    }

    #[test]
    fn jacobi_sweep_is_deterministic() {
        let n = 184;
        let problem = line_source_problem(n, 40, 66, MaterialMap::uniform(n, n, 1.5).unwrap());
        let setup = DdmSetup::new(&problem, 4).unwrap();
        let exact = ExactSubdomainSolver::new();
        let solvers = SolverSet::uniform(&exact);
        let run = || {
            let mut s = DdmState::zero(&setup);
            for _ in 0..3 {
                s = ddm_iterate(&s, &setup, &solvers).unwrap();
            }
            s
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = pool.install(run);
        assert_eq!(a, c);
    }
}
