//! Robin boundary-value problems on small blocks and the exact sparse
//! direct backend that solves them.
//!
//! Interior cells carry the global 5-point stencil (stretched inside PML).
//! Perimeter cells replace it with `(i k - 1) H_b + H_inward = g_b`, the
//! discrete Robin condition matching [`crate::robin::extract_g`]. A corner
//! cell sits on two edges and takes the sum of both edge equations.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use num_complex::Complex64 as c64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdfd::{Stencil, Wrap};
use crate::field::{ComplexField2D, RealField2D, WavevectorConvention};
use crate::multifrontal::{GridLayout, MultifrontalLu};
use crate::robin::{BoundaryTraceSet, Edge};
use crate::sparse::{SparseBuilder, SparseOperator};

pub const SUBDOMAIN_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubdomainClass {
    Material,
    Source,
    Pml,
}

impl SubdomainClass {
    pub const ALL: [SubdomainClass; 3] = [Self::Material, Self::Source, Self::Pml];

    pub fn as_u8(self) -> u8 {
        match self {
            Self::Material => 0,
            Self::Source => 1,
            Self::Pml => 2,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Self::Material),
            1 => Ok(Self::Source),
            2 => Ok(Self::Pml),
            _ => Err(Error::Format(format!("unknown subdomain class tag {v}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Material => "material",
            Self::Source => "source",
            Self::Pml => "pml",
        }
    }
}

impl fmt::Display for SubdomainClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SubdomainClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "material" => Ok(Self::Material),
            "source" => Ok(Self::Source),
            "pml" => Ok(Self::Pml),
            other => Err(Error::InvalidParams(format!("unknown subdomain class '{other}'"))),
        }
    }
}

/// Per-axis PML stretch factors restricted to a block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalStretch {
    pub sx: Vec<c64>,
    pub sy: Vec<c64>,
}

impl LocalStretch {
    /// `Im sx(x) + Im sy(y)`.
    pub fn sigma_image(&self) -> RealField2D {
        RealField2D::from_fn(self.sx.len(), self.sy.len(), |x, y| self.sx[x].im + self.sy[y].im)
    }

    /// Inverse of [`Self::sigma_image`], exact whenever the block contains at
    /// least one unstretched row and one unstretched column.
    pub fn from_sigma_image(img: &RealField2D) -> Self {
        let (nx, ny) = img.shape();
        let row_min: Vec<f64> = (0..nx)
            .map(|x| (0..ny).map(|y| *img.get(x, y)).fold(f64::INFINITY, f64::min))
            .collect();
        let col_min: Vec<f64> = (0..ny)
            .map(|y| (0..nx).map(|x| *img.get(x, y)).fold(f64::INFINITY, f64::min))
            .collect();
        // row_min(x) = sigma_x(x) + min(sigma_y), and symmetrically for columns.
        let base = row_min.iter().cloned().fold(f64::INFINITY, f64::min).max(0.0);
        let sx = row_min.iter().map(|&v| c64::new(1.0, v.max(0.0))).collect();
        let sy = col_min.iter().map(|&v| c64::new(1.0, (v - base).max(0.0))).collect();
        Self { sx, sy }
    }

    pub fn is_trivial(&self) -> bool {
        self.sx.iter().chain(&self.sy).all(|s| s.im == 0.0 && s.re == 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubdomainProblem {
    pub class: SubdomainClass,
    pub eps: RealField2D,
    pub source: ComplexField2D,
    pub stretch: Option<LocalStretch>,
    pub g: BoundaryTraceSet,
    /// Per edge (`W, E, N, S`): `true` pins the perimeter line to zero
    /// instead of imposing the Robin condition.
    pub dirichlet: [bool; 4],
    pub convention: WavevectorConvention,
    pub k0_delta: f64,
}

impl SubdomainProblem {
    pub fn shape(&self) -> (usize, usize) {
        self.eps.shape()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.eps.shape();
        if shape.0 < 3 || shape.1 < 3 {
            return Err(Error::InvalidParams(format!("block {shape:?} is too small")));
        }
        self.eps.same_shape(&self.source)?;
        if self.g.block_shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape,
                got: self.g.block_shape(),
            });
        }
        self.g.validate()?;
        if let Some(s) = &self.stretch {
            if (s.sx.len(), s.sy.len()) != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape,
                    got: (s.sx.len(), s.sy.len()),
                });
            }
        }
        if let Some(e) = self.eps.as_slice().iter().find(|e| !(**e >= 1.0)) {
            return Err(Error::InvalidMaterial(format!("permittivity {e} < 1")));
        }
        let has_source = self.source.as_slice().iter().any(|v| v.norm() != 0.0);
        let has_pml = self.stretch.as_ref().is_some_and(|s| !s.is_trivial());
        let ok = match self.class {
            SubdomainClass::Material => !has_source && !has_pml,
            SubdomainClass::Source => !has_pml,
            SubdomainClass::Pml => !has_source,
        };
        if !ok {
            return Err(Error::InvalidParams(format!(
                "{} block with source={has_source}, pml={has_pml}",
                self.class
            )));
        }
        Ok(())
    }

    pub fn k_map(&self) -> RealField2D {
        let conv = self.convention;
        let k0 = self.k0_delta;
        self.eps.map(|&e| conv.k_delta(k0, e))
    }

    /// Identifies everything that enters the system matrix.
    pub fn operator_key(&self) -> OperatorKey {
        let bits = |v: &[c64]| v.iter().flat_map(|c| [c.re.to_bits(), c.im.to_bits()]).collect::<Vec<_>>();
        OperatorKey {
            shape: self.shape(),
            eps: self.eps.as_slice().iter().map(|e| e.to_bits()).collect(),
            stretch: self
                .stretch
                .as_ref()
                .filter(|s| !s.is_trivial())
                .map(|s| (bits(&s.sx), bits(&s.sy))),
            dirichlet: self.dirichlet,
            convention: self.convention,
            k0_delta: self.k0_delta.to_bits(),
        }
    }

    fn is_pinned(&self, x: usize, y: usize) -> bool {
        let (nx, ny) = self.shape();
        edges_of(x, y, nx, ny).any(|e| self.dirichlet[e.index()])
    }

    pub fn assemble_operator(&self) -> Result<SparseOperator> {
        self.validate()?;
        let (nx, ny) = self.shape();
        let one = c64::new(1.0, 0.0);
        let (sx, sy) = match &self.stretch {
            Some(s) => (s.sx.clone(), s.sy.clone()),
            None => (vec![one; nx], vec![one; ny]),
        };
        let st = Stencil::new(&self.eps, self.k0_delta, &sx, &sy, Wrap::default());
        let k = self.k_map();
        let mut b = SparseBuilder::new(nx * ny, 5 * nx * ny);
        let mut row: Vec<(usize, c64)> = Vec::with_capacity(5);
        for x in 0..nx {
            for y in 0..ny {
                let i = x * ny + y;
                row.clear();
                let on_edge = x == 0 || y == 0 || x + 1 == nx || y + 1 == ny;
                if on_edge {
                    if self.is_pinned(x, y) {
                        row.push((i, one));
                    } else {
                        for e in edges_of(x, y, nx, ny) {
                            let (xi, yi) = inward_cell(e, x, y);
                            row.push((i, c64::new(-1.0, *k.get(x, y))));
                            row.push((xi * ny + yi, one));
                        }
                    }
                } else {
                    let c = st.at(x, y);
                    row.push((i, c[0]));
                    for (j, (xn, yn)) in [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)].into_iter().enumerate() {
                        if !self.is_pinned(xn, yn) {
                            row.push((xn * ny + yn, c[j + 1]));
                        }
                    }
                }
                b.push_row(row.iter().copied());
            }
        }
        Ok(b.finish())
    }

    pub fn assemble_rhs(&self) -> Vec<c64> {
        let (nx, ny) = self.shape();
        let f = c64::new(0.0, -self.k0_delta);
        let mut rhs = Vec::with_capacity(nx * ny);
        for x in 0..nx {
            for y in 0..ny {
                let on_edge = x == 0 || y == 0 || x + 1 == nx || y + 1 == ny;
                rhs.push(if !on_edge {
                    f * self.source.get(x, y)
                } else if self.is_pinned(x, y) {
                    c64::new(0.0, 0.0)
                } else {
                    edges_of(x, y, nx, ny)
                        .map(|e| {
                            let t = if e.is_vertical() { y } else { x };
                            self.g.edge(e)[t]
                        })
                        .sum()
                });
            }
        }
        rhs
    }
}

fn edges_of(x: usize, y: usize, nx: usize, ny: usize) -> impl Iterator<Item = Edge> {
    [
        (x == 0).then_some(Edge::W),
        (x + 1 == nx).then_some(Edge::E),
        (y + 1 == ny).then_some(Edge::N),
        (y == 0).then_some(Edge::S),
    ]
    .into_iter()
    .flatten()
}

fn inward_cell(e: Edge, x: usize, y: usize) -> (usize, usize) {
    match e {
        Edge::W => (x + 1, y),
        Edge::E => (x - 1, y),
        Edge::N => (x, y - 1),
        Edge::S => (x, y + 1),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OperatorKey {
    shape: (usize, usize),
    eps: Vec<u64>,
    stretch: Option<(Vec<u64>, Vec<u64>)>,
    dirichlet: [bool; 4],
    convention: WavevectorConvention,
    k0_delta: u64,
}

/// A factored block operator, reusable for any `g` and source.
#[derive(Debug)]
pub struct BlockFactor {
    op: SparseOperator,
    lu: MultifrontalLu,
    shape: (usize, usize),
}

impl BlockFactor {
    pub fn new(p: &SubdomainProblem) -> Result<Self> {
        let op = p.assemble_operator()?;
        let (nx, ny) = p.shape();
        let lu = MultifrontalLu::factor(GridLayout::plain(nx, ny), &op).map_err(|e| match e {
            Error::Singular(msg) => {
                let eps = p.eps.as_slice();
                let lo = eps.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = eps.iter().cloned().fold(0.0, f64::max);
                let mean = eps.iter().sum::<f64>() / eps.len() as f64;
                Error::Singular(format!(
                    "{msg}; {} block eps in [{lo:.3}, {hi:.3}], mean {mean:.3} (possible cavity resonance)",
                    p.class
                ))
            }
            other => other,
        })?;
        Ok(Self { op, lu, shape: (nx, ny) })
    }

    pub fn solve(&self, p: &SubdomainProblem) -> Result<ComplexField2D> {
        if p.shape() != self.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                got: p.shape(),
            });
        }
        let rhs = p.assemble_rhs();
        let h = self.lu.solve(&rhs);
        let res = self.op.relative_residual_l1(&h, &rhs);
        if !(res < 1e-8) && rhs.iter().any(|v| v.norm() > 0.0) {
            log::warn!("subdomain solve residual {res:.3e}");
        }
        ComplexField2D::from_vec(self.shape.0, self.shape.1, h)
    }

    pub fn operator(&self) -> &SparseOperator {
        &self.op
    }

    pub fn factor_bytes(&self) -> usize {
        self.lu.factor_bytes()
    }
}

/// Cold exact solve of one block problem.
pub fn solve_subdomain_exact(p: &SubdomainProblem) -> Result<ComplexField2D> {
    BlockFactor::new(p)?.solve(p)
}

/// A batched block solver usable by the decomposition engine.
pub trait SubdomainSolver: Send + Sync {
    fn name(&self) -> &str;

    /// Solves every problem; results are in input order.
    fn solve_batch(&self, problems: &[&SubdomainProblem]) -> Vec<Result<ComplexField2D>>;
}

/// Exact backend with a factorization cache keyed by the operator content.
/// Concurrent lookups share a read lock; inserts take the write lock. When
/// an insert would exceed the entry or byte budget the cache is flushed.
#[derive(Debug)]
pub struct ExactSubdomainSolver {
    cache: RwLock<FactorCache>,
    max_entries: usize,
    max_bytes: usize,
}

#[derive(Debug, Default)]
struct FactorCache {
    map: HashMap<OperatorKey, Arc<BlockFactor>>,
    bytes: usize,
}

impl Default for ExactSubdomainSolver {
    fn default() -> Self {
        Self::with_capacity(4096)
    }
}

pub const DEFAULT_CACHE_BYTES: usize = 1 << 30;

impl ExactSubdomainSolver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(max_entries: usize) -> Self {
        Self::with_budget(max_entries, DEFAULT_CACHE_BYTES)
    }

    pub fn with_budget(max_entries: usize, max_bytes: usize) -> Self {
        Self { cache: RwLock::new(FactorCache::default()), max_entries, max_bytes }
    }

    pub fn cached_factors(&self) -> usize {
        self.cache.read().expect("cache poisoned").map.len()
    }

    pub fn cached_bytes(&self) -> usize {
        self.cache.read().expect("cache poisoned").bytes
    }

    pub fn clear(&self) {
        let mut c = self.cache.write().expect("cache poisoned");
        c.map.clear();
        c.bytes = 0;
    }

    pub fn factor_for(&self, p: &SubdomainProblem) -> Result<Arc<BlockFactor>> {
        let key = p.operator_key();
        if let Some(f) = self.cache.read().expect("cache poisoned").map.get(&key) {
            return Ok(f.clone());
        }
        let f = Arc::new(BlockFactor::new(p)?);
        let mut cache = self.cache.write().expect("cache poisoned");
        if let Some(existing) = cache.map.get(&key) {
            return Ok(existing.clone());
        }
        let size = f.factor_bytes();
        if self.max_entries == 0 || size > self.max_bytes {
            return Ok(f);
        }
        if cache.map.len() >= self.max_entries || cache.bytes + size > self.max_bytes {
            log::debug!("flushing {} cached factors ({} bytes)", cache.map.len(), cache.bytes);
            cache.map.clear();
            cache.bytes = 0;
        }
        cache.bytes += size;
        cache.map.insert(key, f.clone());
        Ok(f)
    }

    pub fn solve(&self, p: &SubdomainProblem) -> Result<ComplexField2D> {
        self.factor_for(p)?.solve(p)
    }
}

impl SubdomainSolver for ExactSubdomainSolver {
    fn name(&self) -> &str {
        "exact"
    }

    fn solve_batch(&self, problems: &[&SubdomainProblem]) -> Vec<Result<ComplexField2D>> {
        problems.par_iter().map(|p| self.solve(p)).collect()
    }
}
