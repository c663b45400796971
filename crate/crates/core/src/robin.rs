//! Robin boundary data `g = i k H - dH/dn` on the edges of a rectangular
//! block, its image encoding, and the boundary residual.
//!
//! The normal derivative is the one-sided two-point difference
//! `H_b - H_inward` in cell units.

use num_complex::Complex64 as c64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ComplexField2D, GridSpec, MaterialMap, RealField2D, WavevectorConvention};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Edge {
    /// `x = 0`, outward normal `-x`
    W,
    /// `x = nx - 1`, outward normal `+x`
    E,
    /// `y = ny - 1`, outward normal `+y`
    N,
    /// `y = 0`, outward normal `-y`
    S,
}

impl Edge {
    pub const ALL: [Edge; 4] = [Edge::W, Edge::E, Edge::N, Edge::S];

    pub fn name(self) -> &'static str {
        match self {
            Edge::W => "W",
            Edge::E => "E",
            Edge::N => "N",
            Edge::S => "S",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Edge::W => 0,
            Edge::E => 1,
            Edge::N => 2,
            Edge::S => 3,
        }
    }

    pub fn opposite(self) -> Edge {
        match self {
            Edge::W => Edge::E,
            Edge::E => Edge::W,
            Edge::N => Edge::S,
            Edge::S => Edge::N,
        }
    }

    /// Whether traces on this edge run along `y` (W/E) rather than `x`.
    pub fn is_vertical(self) -> bool {
        matches!(self, Edge::W | Edge::E)
    }

    /// Length of the edge on an `nx x ny` block.
    pub fn len(self, nx: usize, ny: usize) -> usize {
        if self.is_vertical() {
            ny
        } else {
            nx
        }
    }

    /// Index of the perimeter line on an `nx x ny` block.
    pub fn perimeter_line(self, nx: usize, ny: usize) -> usize {
        match self {
            Edge::W | Edge::S => 0,
            Edge::E => nx - 1,
            Edge::N => ny - 1,
        }
    }

    /// Cell `(x, y)` at position `t` along trace line `line`.
    pub fn cell(self, line: usize, t: usize) -> (usize, usize) {
        if self.is_vertical() {
            (line, t)
        } else {
            (t, line)
        }
    }

    /// The line one cell inward from `line`, against the outward normal.
    pub fn inward(self, line: usize, extent: usize) -> Option<usize> {
        match self {
            Edge::W | Edge::S => (line + 1 < extent).then_some(line + 1),
            Edge::E | Edge::N => line.checked_sub(1).filter(|_| line < extent),
        }
    }
}

/// Robin data on the four edges of a block, stored in `W, E, N, S` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryTraceSet {
    pub edges: [Vec<c64>; 4],
}

impl BoundaryTraceSet {
    pub fn zeros(nx: usize, ny: usize) -> Self {
        Self {
            edges: [
                vec![c64::new(0.0, 0.0); ny],
                vec![c64::new(0.0, 0.0); ny],
                vec![c64::new(0.0, 0.0); nx],
                vec![c64::new(0.0, 0.0); nx],
            ],
        }
    }

    pub fn edge(&self, e: Edge) -> &[c64] {
        &self.edges[e.index()]
    }

    pub fn edge_mut(&mut self, e: Edge) -> &mut Vec<c64> {
        &mut self.edges[e.index()]
    }

    /// `(nx, ny)` implied by the edge lengths.
    pub fn block_shape(&self) -> (usize, usize) {
        (self.edges[2].len(), self.edges[0].len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.edges[0].len() != self.edges[1].len() || self.edges[2].len() != self.edges[3].len() {
            return Err(Error::InvalidParams("opposite edges differ in length".into()));
        }
        if !self.is_finite() {
            return Err(Error::InvalidParams("non-finite boundary trace".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.edges.iter().flatten().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.edges.iter().flatten().all(|v| v.re == 0.0 && v.im == 0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = &c64> {
        self.edges.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut c64> {
        self.edges.iter_mut().flatten()
    }

    pub fn mean_abs(&self) -> f64 {
        let n: usize = self.edges.iter().map(Vec::len).sum();
        self.iter().map(|v| v.norm()).sum::<f64>() / n as f64
    }

    pub fn scale(&mut self, s: c64) {
        self.iter_mut().for_each(|v| *v *= s);
    }

    /// Same data on the block rotated by `quarter_turns * 90` degrees,
    /// consistent with [`crate::field::Array2D::rot90`].
    pub fn rot90(&self, quarter_turns: usize) -> Self {
        let mut g = self.clone();
        for _ in 0..quarter_turns % 4 {
            // (x, y) -> (ny - 1 - y, x): N -> W, S -> E, and W -> S, E -> N
            // with the along-edge index reversed.
            let [w, e, n, s] = &g.edges;
            let new_e = s.clone();
            let new_w = n.clone();
            let new_s: Vec<c64> = w.iter().rev().cloned().collect();
            let new_n: Vec<c64> = e.iter().rev().cloned().collect();
            g = Self {
                edges: [new_w, new_e, new_n, new_s],
            };
        }
        g
    }
}

pub fn wavevector_map(eps: &MaterialMap, grid: &GridSpec, convention: WavevectorConvention) -> RealField2D {
    let k0 = grid.k0_delta();
    eps.eps().map(|&e| convention.k_delta(k0, e))
}

/// `g[t] = i k H[t] - (H[t] - H_inward[t])` along trace line `line`.
pub fn extract_g(h: &ComplexField2D, k_map: &RealField2D, edge: Edge, line: usize) -> Result<Vec<c64>> {
    h.same_shape(k_map)?;
    let (nx, ny) = h.shape();
    let extent = if edge.is_vertical() { nx } else { ny };
    let inner = edge.inward(line, extent).ok_or(Error::NoInwardNeighbor {
        edge: edge.name(),
        index: line,
        extent,
    })?;
    Ok((0..edge.len(nx, ny))
        .map(|t| {
            let (x, y) = edge.cell(line, t);
            let (xi, yi) = edge.cell(inner, t);
            let hb = *h.get(x, y);
            c64::new(0.0, *k_map.get(x, y)) * hb - (hb - h.get(xi, yi))
        })
        .collect())
}

/// Robin data on the block's own perimeter.
pub fn extract_trace_set(h: &ComplexField2D, k_map: &RealField2D) -> Result<BoundaryTraceSet> {
    let (nx, ny) = h.shape();
    let mut g = BoundaryTraceSet::zeros(nx, ny);
    for e in Edge::ALL {
        *g.edge_mut(e) = extract_g(h, k_map, e, e.perimeter_line(nx, ny))?;
    }
    Ok(g)
}

/// Writes `Re g` and `Im g` on the one-cell frame of zero images. Corner
/// pixels hold the mean of their two edges.
pub fn rasterize_traces(g: &BoundaryTraceSet) -> (RealField2D, RealField2D) {
    let (nx, ny) = g.block_shape();
    let mut acc = ComplexField2D::zeros(nx, ny);
    let mut hits = vec![0u8; nx * ny];
    for e in Edge::ALL {
        let line = e.perimeter_line(nx, ny);
        for (t, v) in g.edge(e).iter().enumerate() {
            let (x, y) = e.cell(line, t);
            *acc.get_mut(x, y) += v;
            hits[x * ny + y] += 1;
        }
    }
    for (v, &k) in acc.as_mut_slice().iter_mut().zip(&hits) {
        if k > 1 {
            *v /= k as f64;
        }
    }
    (acc.map(|v| v.re), acc.map(|v| v.im))
}

/// Reads edge traces back off a rasterized frame. Corners come back as the
/// stored mean.
pub fn derasterize(re: &RealField2D, im: &RealField2D) -> Result<BoundaryTraceSet> {
    re.same_shape(im)?;
    let (nx, ny) = re.shape();
    let mut g = BoundaryTraceSet::zeros(nx, ny);
    for e in Edge::ALL {
        let line = e.perimeter_line(nx, ny);
        for (t, v) in g.edge_mut(e).iter_mut().enumerate() {
            let (x, y) = e.cell(line, t);
            *v = c64::new(*re.get(x, y), *im.get(x, y));
        }
    }
    Ok(g)
}

/// Mean `|g - (i k H - dH/dn)|` over all edge positions.
pub fn bc_residual(h: &ComplexField2D, k_map: &RealField2D, g: &BoundaryTraceSet) -> Result<f64> {
    let (nx, ny) = h.shape();
    if g.block_shape() != (nx, ny) {
        return Err(Error::ShapeMismatch {
            expected: (nx, ny),
            got: g.block_shape(),
        });
    }
    let model = extract_trace_set(h, k_map)?;
    let n: usize = g.edges.iter().map(Vec::len).sum();
    Ok(g.iter().zip(model.iter()).map(|(a, b)| (a - b).norm()).sum::<f64>() / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field(n: usize, seed: u64) -> ComplexField2D {
        ComplexField2D::from_fn(n, n, |x, y| {
            let t = (seed % 1000) as f64 * 0.001 + x as f64 * 0.37 + y as f64 * 0.11;
            c64::new(t.sin() * (1.0 + 0.01 * y as f64), (t * 1.7).cos())
        })
    }

    #[test]
    fn wavevector_conventions() {
        let g = GridSpec::new(16, 16).unwrap();
        let k0 = g.k0_delta();
        let one = MaterialMap::uniform(16, 16, 1.0).unwrap();
        for c in [WavevectorConvention::LinearEps, WavevectorConvention::SqrtEps] {
            assert!(wavevector_map(&one, &g, c).as_slice().iter().all(|&k| (k - k0).abs() < 1e-15));
        }
        let four = MaterialMap::uniform(16, 16, 4.0).unwrap();
        let lin = wavevector_map(&four, &g, WavevectorConvention::LinearEps);
        let sq = wavevector_map(&four, &g, WavevectorConvention::SqrtEps);
        assert!((lin.get(3, 3) - 4.0 * k0).abs() < 1e-15);
        assert!((sq.get(3, 3) - 2.0 * k0).abs() < 1e-15);
    }

    #[test]
    fn constant_field_gives_ik_c() {
        let c = c64::new(0.7, -1.2);
        let kappa = 0.05;
        let h = ComplexField2D::filled(10, 10, c);
        let k = RealField2D::filled(10, 10, kappa);
        for e in Edge::ALL {
            for v in extract_g(&h, &k, e, 4).unwrap() {
                assert!((v - c64::new(0.0, kappa) * c).norm() < 1e-15);
            }
        }
        let z = extract_g(&ComplexField2D::zeros(10, 10), &k, Edge::N, 9).unwrap();
        assert!(z.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn plane_wave_on_east_edge() {
        let kappa = 0.2;
        let n = 16;
        let h = ComplexField2D::from_fn(n, n, |x, _| c64::from_polar(1.0, kappa * x as f64));
        let k = RealField2D::filled(n, n, kappa);
        let g = extract_g(&h, &k, Edge::E, n - 1).unwrap();
        let i = c64::new(0.0, 1.0);
        let factor = i * kappa - (1.0 - (-i * kappa).exp());
        for (t, v) in g.iter().enumerate() {
            let hb = h.get(n - 1, t);
            assert!((v - factor * hb).norm() < 1e-14);
            // i k H - dH/dn with the exact derivative is zero for an outgoing wave;
            // the two-point stencil leaves an O(k^2) remainder.
            assert!(v.norm() <= kappa * kappa);
        }
    }

    #[test]
    fn border_without_inward_neighbor_errors() {
        let h = ComplexField2D::zeros(8, 8);
        let k = RealField2D::filled(8, 8, 0.1);
        assert!(matches!(extract_g(&h, &k, Edge::W, 7), Err(Error::NoInwardNeighbor { .. })));
        assert!(matches!(extract_g(&h, &k, Edge::E, 0), Err(Error::NoInwardNeighbor { .. })));
        assert!(matches!(extract_g(&h, &k, Edge::N, 0), Err(Error::NoInwardNeighbor { .. })));
        assert!(matches!(extract_g(&h, &k, Edge::S, 7), Err(Error::NoInwardNeighbor { .. })));
    }

    #[test]
    fn rasterize_single_entry_and_zero() {
        let (re, im) = rasterize_traces(&BoundaryTraceSet::zeros(64, 64));
        assert_eq!(re.as_slice().iter().chain(im.as_slice()).filter(|v| **v != 0.0).count(), 0);
        let mut g = BoundaryTraceSet::zeros(64, 64);
        g.edge_mut(Edge::W)[20] = c64::new(1.0, -2.0);
        let (re, im) = rasterize_traces(&g);
        assert_eq!(re.as_slice().iter().filter(|v| **v != 0.0).count(), 1);
        assert_eq!(im.as_slice().iter().filter(|v| **v != 0.0).count(), 1);
        assert_eq!(*re.get(0, 20), 1.0);
        assert_eq!(*im.get(0, 20), -2.0);
    }

    #[test]
    fn rasterized_corners_are_means() {
        let mut g = BoundaryTraceSet::zeros(8, 8);
        g.edge_mut(Edge::W)[0] = c64::new(2.0, 0.0);
        g.edge_mut(Edge::S)[0] = c64::new(4.0, 2.0);
        let (re, im) = rasterize_traces(&g);
        assert_eq!((*re.get(0, 0), *im.get(0, 0)), (3.0, 1.0));
    }

    #[test]
    fn residual_bound_for_edge_perturbation() {
        let n = 64;
        let h = field(n, 3);
        let k = RealField2D::filled(n, n, 0.0374);
        let g = extract_trace_set(&h, &k).unwrap();
        assert!(bc_residual(&h, &k, &g).unwrap() < 1e-14);
        let d = 1e-3;
        let mut h2 = h.clone();
        *h2.get_mut(0, 30) += d;
        let r = bc_residual(&h2, &k, &g).unwrap();
        assert!(r <= (0.0374f64.hypot(1.0) + 2.0) * d / 256.0 + 1e-15, "{r}");
        assert!(r > 0.0);
    }

    #[test]
    fn residual_with_zero_g_is_mean_model() {
        let n = 12;
        let h = field(n, 9);
        let k = RealField2D::filled(n, n, 0.3);
        let model = extract_trace_set(&h, &k).unwrap();
        let r = bc_residual(&h, &k, &BoundaryTraceSet::zeros(n, n)).unwrap();
        assert!((r - model.mean_abs()).abs() < 1e-15);
    }

    #[test]
    fn trace_rotation_matches_field_rotation() {
        let n = 9;
        let h = ComplexField2D::from_fn(n, 7, |x, y| c64::new(x as f64, (y * y) as f64));
        let k = RealField2D::from_fn(n, 7, |x, y| 0.1 + 0.01 * (x + 2 * y) as f64);
        let g = extract_trace_set(&h, &k).unwrap();
        for q in 0..4 {
            let gr = extract_trace_set(&h.rot90(q), &k.rot90(q)).unwrap();
            assert_eq!(gr, g.rot90(q), "quarter turns {q}");
        }
    }

    proptest! {
        #[test]
        fn extract_is_linear(s1 in any::<u64>(), s2 in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0, line in 1usize..10) {
            let n = 12;
            let (h1, h2) = (field(n, s1), field(n, s2));
            let k = RealField2D::from_fn(n, n, |x, y| 0.01 * (1 + x + y) as f64);
            let (ca, cb) = (c64::new(a, 0.5), c64::new(b, -0.25));
            let combo = ComplexField2D::from_fn(n, n, |x, y| ca * h1.get(x, y) + cb * h2.get(x, y));
            for e in Edge::ALL {
                let g1 = extract_g(&h1, &k, e, line).unwrap();
                let g2 = extract_g(&h2, &k, e, line).unwrap();
                let gc = extract_g(&combo, &k, e, line).unwrap();
                for t in 0..n {
                    prop_assert!((gc[t] - (ca * g1[t] + cb * g2[t])).norm() < 1e-13);
                }
            }
        }

        #[test]
        fn residual_of_own_traces_vanishes(seed in any::<u64>(), sqrt in any::<bool>()) {
            let n = 16;
            let h = field(n, seed);
            let eps = MaterialMap::new(RealField2D::from_fn(n, n, |x, y| 1.0 + ((seed as usize + x * y) % 15) as f64)).unwrap();
            let conv = if sqrt { WavevectorConvention::SqrtEps } else { WavevectorConvention::LinearEps };
            let k = wavevector_map(&eps, &GridSpec::new(n, n).unwrap(), conv);
            let g = extract_trace_set(&h, &k).unwrap();
            prop_assert!(bc_residual(&h, &k, &g).unwrap() < 1e-14);
        }

        #[test]
        fn raster_round_trip_except_corners(seed in any::<u64>()) {
            let n = 64;
            let mut g = BoundaryTraceSet::zeros(n, n);
            for (i, v) in g.iter_mut().enumerate() {
                let t = (seed % 977) as f64 + i as f64;
                *v = c64::new(t.sin(), t.cos());
            }
            let (re, im) = rasterize_traces(&g);
            let back = derasterize(&re, &im).unwrap();
            for e in Edge::ALL {
                for t in 1..n - 1 {
                    prop_assert_eq!(back.edge(e)[t], g.edge(e)[t]);
                }
            }
        }
    }
}
