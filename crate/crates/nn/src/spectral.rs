//! Truncated 2D DFT on an `n x n` grid restricted to the retained modes:
//! `kx` in `[0, m) U [n - m, n)` and `ky` in `[0, m)`.
//!
//! Only retained coefficients are ever formed, as two dense passes against
//! precomputed twiddles. Forward is unnormalized; `inverse_re` returns the
//! real part of the unnormalized inverse sum and callers apply `1/n^2`.

use std::f64::consts::PI;

use num_complex::Complex;

use crate::tensor::Real;

#[derive(Debug, Clone)]
pub struct TruncatedDft<T> {
    n: usize,
    m: usize,
    /// `[y][ky]`: `exp(-2 pi i ky y / n)`.
    tw_y: Vec<Complex<T>>,
    /// `[x][kxi]`: `exp(-2 pi i kx x / n)` over the retained `kx`.
    tw_x: Vec<Complex<T>>,
}

impl<T: Real> TruncatedDft<T> {
    pub fn new(n: usize, m: usize) -> Self {
        assert!(m >= 1 && 2 * m <= n, "modes {m} do not fit grid {n}");
        let tw = |k: usize, r: usize| {
            let a = -2.0 * PI * ((k * r) % n) as f64 / n as f64;
            Complex::new(T::of(a.cos()), T::of(a.sin()))
        };
        let kxs = Self::kx_list(n, m);
        let tw_y = (0..n).flat_map(|y| (0..m).map(move |ky| (y, ky))).map(|(y, ky)| tw(ky, y)).collect();
        let tw_x = (0..n).flat_map(|x| kxs.iter().map(move |&kx| (x, kx))).map(|(x, kx)| tw(kx, x)).collect();
        Self { n, m, tw_y, tw_x }
    }

    pub fn kx_list(n: usize, m: usize) -> Vec<usize> {
        (0..m).chain(n - m..n).collect()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of retained coefficients, `2 m * m`.
    pub fn modes(&self) -> usize {
        2 * self.m * self.m
    }

    /// `out[kxi * m + ky] = sum_r x[r] exp(-i k.r)`.
    pub fn forward(&self, x: &[T], out: &mut [Complex<T>]) {
        let (n, m) = (self.n, self.m);
        debug_assert_eq!(x.len(), n * n);
        let mut rows = vec![Complex::new(T::zero(), T::zero()); n * m];
        for (xi, row) in rows.chunks_mut(m).enumerate() {
            let src = &x[xi * n..(xi + 1) * n];
            for (y, &v) in src.iter().enumerate() {
                if v == T::zero() {
                    continue;
                }
                let tw = &self.tw_y[y * m..(y + 1) * m];
                for (acc, t) in row.iter_mut().zip(tw) {
                    acc.re += v * t.re;
                    acc.im += v * t.im;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = Complex::new(T::zero(), T::zero()));
        let mk = 2 * m;
        for xi in 0..n {
            let row = &rows[xi * m..(xi + 1) * m];
            let tw = &self.tw_x[xi * mk..(xi + 1) * mk];
            for (kxi, t) in tw.iter().enumerate() {
                let dst = &mut out[kxi * m..(kxi + 1) * m];
                for (d, r) in dst.iter_mut().zip(row) {
                    *d += t * r;
                }
            }
        }
    }

    /// `out[r] = Re sum_k c[k] exp(+i k.r)`, overwriting `out`.
    pub fn inverse_re(&self, c: &[Complex<T>], out: &mut [T]) {
        let (n, m) = (self.n, self.m);
        let mk = 2 * m;
        let mut cols = vec![Complex::new(T::zero(), T::zero()); m];
        for xi in 0..n {
            cols.iter_mut().for_each(|v| *v = Complex::new(T::zero(), T::zero()));
            let tw = &self.tw_x[xi * mk..(xi + 1) * mk];
            for (kxi, t) in tw.iter().enumerate() {
                let tc = t.conj();
                for (acc, v) in cols.iter_mut().zip(&c[kxi * m..(kxi + 1) * m]) {
                    *acc += tc * v;
                }
            }
            let dst = &mut out[xi * n..(xi + 1) * n];
            for (y, d) in dst.iter_mut().enumerate() {
                let tw = &self.tw_y[y * m..(y + 1) * m];
                // Re(u * conj(t)) = u.re t.re + u.im t.im
                let mut s = T::zero();
                for (u, t) in cols.iter().zip(tw) {
                    s += u.re * t.re + u.im * t.im;
                }
                *d = s;
            }
        }
    }
}
