//! Sparse direct LU for nearest-neighbour operators on a 2D grid.
//!
//! Unknowns are ordered by geometric nested dissection of the grid
//! rectangle. Each separator becomes a dense front that is partially
//! factored with row pivoting restricted to its fully-summed block; the
//! Schur complement is passed up to the parent separator. Dense kernels
//! come from `faer`. Periodic axes are cut twice at the root so every
//! remaining piece is an ordinary rectangle.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::lu::partial_pivoting::factor::{lu_in_place, lu_in_place_scratch};
use faer::linalg::matmul::matmul;
use faer::linalg::triangular_solve::{
    solve_lower_triangular_in_place, solve_unit_lower_triangular_in_place,
    solve_upper_triangular_in_place,
};
use faer::reborrow::{Reborrow, ReborrowMut};
use faer::{Accum, Mat, Par};
use num_complex::Complex64 as c64;

use crate::error::{Error, Result};
use crate::sparse::SparseOperator;

/// Regions with at most this many cells are factored as one dense front.
const LEAF_CELLS: usize = 64;
const UNSET: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridLayout {
    pub nx: usize,
    pub ny: usize,
    pub periodic_x: bool,
    pub periodic_y: bool,
}

impl GridLayout {
    pub fn plain(nx: usize, ny: usize) -> Self {
        Self {
            nx,
            ny,
            periodic_x: false,
            periodic_y: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

impl Rect {
    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    fn is_empty(&self) -> bool {
        self.x0 >= self.x1 || self.y0 >= self.y1
    }

    fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

#[derive(Debug)]
struct Node {
    rect: Rect,
    sep: Vec<usize>,
    bnd: Vec<usize>,
    children: Vec<usize>,
}

#[derive(Debug)]
struct Front {
    /// Packed `L` (unit lower) and `U` of the fully-summed block.
    lu: Mat<c64>,
    perm: Vec<usize>,
    /// `A_BS U^{-1}`
    w1: Mat<c64>,
    /// `L^{-1} P A_SB`
    w2: Mat<c64>,
}

#[derive(Debug)]
pub struct MultifrontalLu {
    n: usize,
    nodes: Vec<Node>,
    fronts: Vec<Front>,
}

fn dissect(layout: &GridLayout, rect: Rect, nodes: &mut Vec<Node>) -> usize {
    let w = rect.x1 - rect.x0;
    let h = rect.y1 - rect.y0;
    let ny = layout.ny;
    let (sep, pieces) = if rect.area() <= LEAF_CELLS {
        let mut sep = Vec::with_capacity(rect.area());
        for x in rect.x0..rect.x1 {
            for y in rect.y0..rect.y1 {
                sep.push(x * ny + y);
            }
        }
        (sep, vec![])
    } else if w >= h {
        let xm = rect.x0 + w / 2;
        let sep = (rect.y0..rect.y1).map(|y| xm * ny + y).collect();
        let left = Rect { x1: xm, ..rect };
        let right = Rect { x0: xm + 1, ..rect };
        (sep, vec![left, right])
    } else {
        let ym = rect.y0 + h / 2;
        let sep = (rect.x0..rect.x1).map(|x| x * ny + ym).collect();
        let low = Rect { y1: ym, ..rect };
        let high = Rect { y0: ym + 1, ..rect };
        (sep, vec![low, high])
    };
    let children = pieces
        .into_iter()
        .filter(|r| !r.is_empty())
        .map(|r| dissect(layout, r, nodes))
        .collect();
    nodes.push(Node {
        rect,
        sep,
        bnd: Vec::new(),
        children,
    });
    nodes.len() - 1
}

fn build_tree(layout: &GridLayout) -> Vec<Node> {
    let (nx, ny) = (layout.nx, layout.ny);
    let whole = Rect {
        x0: 0,
        x1: nx,
        y0: 0,
        y1: ny,
    };
    let mut nodes = Vec::new();
    if !layout.periodic_x && !layout.periodic_y {
        dissect(layout, whole, &mut nodes);
        return nodes;
    }
    let cuts = |n: usize, periodic: bool| -> (Vec<usize>, Vec<(usize, usize)>) {
        if periodic && n >= 4 {
            let m = n / 2;
            (vec![0, m], vec![(1, m), (m + 1, n)])
        } else {
            (vec![], vec![(0, n)])
        }
    };
    let (xc, xr) = cuts(nx, layout.periodic_x);
    let (yc, yr) = cuts(ny, layout.periodic_y);
    let mut sep = Vec::new();
    for x in 0..nx {
        for y in 0..ny {
            if xc.contains(&x) || yc.contains(&y) {
                sep.push(x * ny + y);
            }
        }
    }
    let mut children = Vec::new();
    for &(x0, x1) in &xr {
        for &(y0, y1) in &yr {
            let r = Rect { x0, x1, y0, y1 };
            if !r.is_empty() {
                children.push(dissect(layout, r, &mut nodes));
            }
        }
    }
    nodes.push(Node {
        rect: whole,
        sep,
        bnd: Vec::new(),
        children,
    });
    nodes
}

/// Symmetrized adjacency pattern (`A + A^T`, no diagonal) in CSR form.
fn symmetric_pattern(op: &SparseOperator) -> (Vec<usize>, Vec<u32>) {
    let n = op.dim();
    let mut pairs: Vec<(u32, u32)> = Vec::with_capacity(2 * op.nnz());
    for (r, c, _) in op.entries() {
        if r != c {
            pairs.push((r as u32, c as u32));
            pairs.push((c as u32, r as u32));
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    let mut ptr = vec![0usize; n + 1];
    for &(r, _) in &pairs {
        ptr[r as usize + 1] += 1;
    }
    for i in 0..n {
        ptr[i + 1] += ptr[i];
    }
    (ptr, pairs.into_iter().map(|p| p.1).collect())
}

impl MultifrontalLu {
    /// Factors `op`, whose unknowns are the cells of `layout` in `(x, y)`
    /// row-major order and whose couplings connect only grid neighbours
    /// (including wrap-around on periodic axes).
    pub fn factor(layout: GridLayout, op: &SparseOperator) -> Result<Self> {
        let (nx, ny) = (layout.nx, layout.ny);
        let n = nx * ny;
        assert_eq!(op.dim(), n, "operator does not match grid layout");

        let mut nodes = build_tree(&layout);
        let (adj_ptr, adj) = symmetric_pattern(op);

        let mut pos = vec![UNSET; n];
        let mut next = 0u32;
        for node in &nodes {
            for &c in &node.sep {
                pos[c] = next;
                next += 1;
            }
        }
        debug_assert_eq!(next as usize, n);

        for node in nodes.iter_mut() {
            let r = node.rect;
            let mut bnd = Vec::new();
            let on_perimeter =
                |x: usize, y: usize| x == r.x0 || x + 1 == r.x1 || y == r.y0 || y + 1 == r.y1;
            for x in r.x0..r.x1 {
                for y in r.y0..r.y1 {
                    if !on_perimeter(x, y) {
                        continue;
                    }
                    let cell = x * ny + y;
                    for &nb in &adj[adj_ptr[cell]..adj_ptr[cell + 1]] {
                        let nb = nb as usize;
                        if !r.contains(nb / ny, nb % ny) {
                            bnd.push(nb);
                        }
                    }
                }
            }
            bnd.sort_unstable_by_key(|&c| pos[c]);
            bnd.dedup();
            node.bnd = bnd;
        }

        let mut loc = vec![UNSET; n];
        let mut updates: Vec<Option<Mat<c64>>> = (0..nodes.len()).map(|_| None).collect();
        let mut fronts = Vec::with_capacity(nodes.len());

        for (id, node) in nodes.iter().enumerate() {
            let s = node.sep.len();
            let b = node.bnd.len();
            let nf = s + b;
            for (k, &c) in node.sep.iter().chain(&node.bnd).enumerate() {
                loc[c] = k as u32;
            }

            let mut f = Mat::<c64>::zeros(nf, nf);
            for &r in &node.sep {
                let lr = loc[r] as usize;
                f[(lr, lr)] += op.get(r, r);
                for &c in &adj[adj_ptr[r]..adj_ptr[r + 1]] {
                    let c = c as usize;
                    if pos[c] < pos[r] {
                        continue;
                    }
                    let lc = loc[c];
                    debug_assert!(lc != UNSET, "coupling escapes the front");
                    let lc = lc as usize;
                    f[(lr, lc)] += op.get(r, c);
                    f[(lc, lr)] += op.get(c, r);
                }
            }
            for &child in &node.children {
                let upd = updates[child].take().expect("child update consumed twice");
                let cb = &nodes[child].bnd;
                for (j, &cj) in cb.iter().enumerate() {
                    let lj = loc[cj] as usize;
                    for (i, &ci) in cb.iter().enumerate() {
                        f[(loc[ci] as usize, lj)] += upd[(i, j)];
                    }
                }
            }

            let mut perm = vec![0usize; s];
            let mut perm_inv = vec![0usize; s];
            {
                let (mut ss, mut sb, mut bs, mut bb) = f.as_mut().split_at_mut(s, s);
                let mut mem = MemBuffer::new(lu_in_place_scratch::<usize, c64>(
                    s,
                    s,
                    Par::Seq,
                    Default::default(),
                ));
                lu_in_place(
                    ss.rb_mut(),
                    &mut perm,
                    &mut perm_inv,
                    Par::Seq,
                    MemStack::new(&mut mem),
                    Default::default(),
                );

                let (mut pmin, mut pmax) = (f64::INFINITY, 0.0f64);
                for i in 0..s {
                    let p = ss[(i, i)].norm();
                    pmin = pmin.min(p);
                    pmax = pmax.max(p);
                }
                if !(pmin > pmax * 1e-15) || !pmax.is_finite() {
                    return Err(Error::Singular(format!(
                        "front {id} ({s} pivots, {b} coupled): min |pivot| = {pmin:.3e}, max |pivot| = {pmax:.3e}"
                    )));
                }

                if b > 0 {
                    let tmp = sb.to_owned();
                    for j in 0..b {
                        for i in 0..s {
                            sb[(i, j)] = tmp[(perm[i], j)];
                        }
                    }
                    solve_unit_lower_triangular_in_place(ss.rb(), sb.rb_mut(), Par::Seq);
                    solve_lower_triangular_in_place(
                        ss.rb().transpose(),
                        bs.rb_mut().transpose_mut(),
                        Par::Seq,
                    );
                    matmul(
                        bb.rb_mut(),
                        Accum::Add,
                        bs.rb(),
                        sb.rb(),
                        c64::new(-1.0, 0.0),
                        Par::Seq,
                    );
                }
            }

            let front = Front {
                lu: f.as_ref().submatrix(0, 0, s, s).to_owned(),
                perm,
                w1: f.as_ref().submatrix(s, 0, b, s).to_owned(),
                w2: f.as_ref().submatrix(0, s, s, b).to_owned(),
            };
            if b > 0 {
                updates[id] = Some(f.as_ref().submatrix(s, s, b, b).to_owned());
            }
            drop(f);
            fronts.push(front);

            for &c in node.sep.iter().chain(&node.bnd) {
                loc[c] = UNSET;
            }
        }

        Ok(Self { n, nodes, fronts })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Bytes held by the stored factors.
    pub fn factor_bytes(&self) -> usize {
        self.fronts
            .iter()
            .map(|f| {
                (f.lu.nrows() * f.lu.ncols() + f.w1.nrows() * f.w1.ncols() + f.w2.nrows() * f.w2.ncols())
                    * std::mem::size_of::<c64>()
                    + f.perm.len() * std::mem::size_of::<usize>()
            })
            .sum()
    }

    pub fn solve(&self, rhs: &[c64]) -> Vec<c64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, x: &mut [c64]) {
        assert_eq!(x.len(), self.n);
        let one = c64::new(1.0, 0.0);
        for (node, fr) in self.nodes.iter().zip(&self.fronts) {
            let s = node.sep.len();
            let mut t = Mat::<c64>::from_fn(s, 1, |i, _| x[node.sep[fr.perm[i]]]);
            solve_unit_lower_triangular_in_place(fr.lu.as_ref(), t.as_mut(), Par::Seq);
            if !node.bnd.is_empty() {
                let mut u = Mat::<c64>::zeros(node.bnd.len(), 1);
                matmul(u.as_mut(), Accum::Replace, fr.w1.as_ref(), t.as_ref(), one, Par::Seq);
                for (j, &c) in node.bnd.iter().enumerate() {
                    x[c] -= u[(j, 0)];
                }
            }
            for (i, &c) in node.sep.iter().enumerate() {
                x[c] = t[(i, 0)];
            }
        }
        for (node, fr) in self.nodes.iter().zip(&self.fronts).rev() {
            let s = node.sep.len();
            let mut t = Mat::<c64>::from_fn(s, 1, |i, _| x[node.sep[i]]);
            if !node.bnd.is_empty() {
                let xb = Mat::<c64>::from_fn(node.bnd.len(), 1, |j, _| x[node.bnd[j]]);
                matmul(t.as_mut(), Accum::Add, fr.w2.as_ref(), xb.as_ref(), -one, Par::Seq);
            }
            solve_upper_triangular_in_place(fr.lu.as_ref(), t.as_mut(), Par::Seq);
            for (i, &c) in node.sep.iter().enumerate() {
                x[c] = t[(i, 0)];
            }
        }
    }
}
