//! Compressed sparse row storage for the discretized wave operator.

use num_complex::Complex64 as c64;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<c64>,
}

/// Row-by-row builder. Duplicate columns within a row are summed.
#[derive(Debug)]
pub struct SparseBuilder {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<c64>,
    scratch: Vec<(usize, c64)>,
}

impl SparseBuilder {
    pub fn new(n: usize, nnz_hint: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        Self {
            n,
            row_ptr,
            col_idx: Vec::with_capacity(nnz_hint),
            values: Vec::with_capacity(nnz_hint),
            scratch: Vec::with_capacity(8),
        }
    }

    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, c64)>) {
        self.scratch.clear();
        self.scratch.extend(entries);
        self.scratch.sort_by_key(|e| e.0);
        let mut last: Option<usize> = None;
        for &(c, v) in &self.scratch {
            debug_assert!(c < self.n);
            if last == Some(c) {
                *self.values.last_mut().unwrap() += v;
            } else {
                self.col_idx.push(c);
                self.values.push(v);
                last = Some(c);
            }
        }
        self.row_ptr.push(self.col_idx.len());
    }

    pub fn finish(self) -> SparseOperator {
        assert_eq!(self.row_ptr.len(), self.n + 1, "every row must be pushed");
        SparseOperator {
            n: self.n,
            row_ptr: self.row_ptr,
            col_idx: self.col_idx,
            values: self.values,
        }
    }
}

impl SparseOperator {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[c64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn max_row_nnz(&self) -> usize {
        (0..self.n)
            .map(|i| self.row_ptr[i + 1] - self.row_ptr[i])
            .max()
            .unwrap_or(0)
    }

    pub fn get(&self, i: usize, j: usize) -> c64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => c64::new(0.0, 0.0),
        }
    }

    pub fn apply(&self, x: &[c64]) -> Vec<c64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|i| {
                let (cols, vals) = self.row(i);
                cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum()
            })
            .collect()
    }

    /// `true` when every stored `(i, j)` has a stored `(j, i)`.
    pub fn is_structurally_symmetric(&self) -> bool {
        (0..self.n).all(|i| {
            let (cols, _) = self.row(i);
            cols.iter().all(|&j| self.row(j).0.binary_search(&i).is_ok())
        })
    }

    pub fn has_full_diagonal(&self) -> bool {
        (0..self.n).all(|i| self.get(i, i) != c64::new(0.0, 0.0))
    }

    /// `sum |A x - b| / sum |b|`.
    pub fn relative_residual_l1(&self, x: &[c64], b: &[c64]) -> f64 {
        let ax = self.apply(x);
        let num: f64 = ax.iter().zip(b).map(|(p, q)| (p - q).norm()).sum();
        let den: f64 = b.iter().map(|q| q.norm()).sum();
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }

    pub(crate) fn entries(&self) -> impl Iterator<Item = (usize, usize, c64)> + '_ {
        (0..self.n).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&c, &v)| (i, c, v))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_merges_duplicates_and_sorts() {
        let mut b = SparseBuilder::new(2, 4);
        b.push_row([(1, c64::new(1.0, 0.0)), (0, c64::new(2.0, 0.0)), (1, c64::new(0.5, 1.0))]);
        b.push_row([(1, c64::new(3.0, 0.0))]);
        let a = b.finish();
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.get(0, 1), c64::new(1.5, 1.0));
        assert_eq!(a.get(1, 0), c64::new(0.0, 0.0));
        assert!(!a.is_structurally_symmetric());
        let y = a.apply(&[c64::new(1.0, 0.0), c64::new(0.0, 1.0)]);
        assert_eq!(y[0], c64::new(2.0, 0.0) + c64::new(1.5, 1.0) * c64::new(0.0, 1.0));
        assert_eq!(y[1], c64::new(0.0, 3.0));
    }
}
