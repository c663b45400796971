//! Square-kernel 2D convolution, zero padding `k / 2`, channel-major maps.

use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvShape {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_hw(&self) -> (usize, usize) {
        let p = self.pad();
        ((self.h + 2 * p - self.k) / self.stride + 1, (self.w + 2 * p - self.k) / self.stride + 1)
    }

    pub fn weights(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    pub fn flops(&self) -> u64 {
        let (ho, wo) = self.out_hw();
        2 * (ho * wo * self.weights()) as u64
    }

    /// Visits `(output pixel, input pixel, kernel tap)` for every in-bounds tap.
    #[inline]
    fn taps(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_hw();
        let p = self.pad() as isize;
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - p;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - p;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        f(oy * wo + ox, iy as usize * self.w + ix as usize, ky * self.k + kx);
                    }
                }
            }
        }
    }
}

pub fn conv_forward<T: Real>(s: &ConvShape, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let (ho, wo) = s.out_hw();
    let (hw, ohw, kk) = (s.h * s.w, ho * wo, s.k * s.k);
    let mut out = vec![T::zero(); s.cout * ohw];
    for (co, plane) in out.chunks_mut(ohw).enumerate() {
        plane.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..s.cin {
            let src = &input[ci * hw..(ci + 1) * hw];
            let wk = &weight[(co * s.cin + ci) * kk..(co * s.cin + ci + 1) * kk];
            s.taps(|o, i, t| plane[o] += wk[t] * src[i]);
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `want_input` is set.
pub fn conv_backward<T: Real>(
    s: &ConvShape,
    input: &[T],
    weight: &[T],
    gout: &[T],
    gw: &mut [T],
    gb: &mut [T],
    want_input: bool,
) -> Option<Vec<T>> {
    let (ho, wo) = s.out_hw();
    let (hw, ohw, kk) = (s.h * s.w, ho * wo, s.k * s.k);
    let mut gin = want_input.then(|| vec![T::zero(); s.cin * hw]);
    for co in 0..s.cout {
        let g = &gout[co * ohw..(co + 1) * ohw];
        gb[co] += g.iter().copied().sum::<T>();
        for ci in 0..s.cin {
            let src = &input[ci * hw..(ci + 1) * hw];
            let base = (co * s.cin + ci) * kk;
            let gwk = &mut gw[base..base + kk];
            s.taps(|o, i, t| gwk[t] += g[o] * src[i]);
            if let Some(gi) = gin.as_mut() {
                let wk = &weight[base..base + kk];
                let dst = &mut gi[ci * hw..(ci + 1) * hw];
                s.taps(|o, i, t| dst[i] += wk[t] * g[o]);
            }
        }
    }
    gin
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn shapes() {
        let s = ConvShape { cin: 1, cout: 1, k: 3, stride: 2, h: 64, w: 64 };
        assert_eq!(s.out_hw(), (32, 32));
        let s = ConvShape { k: 1, ..s };
        assert_eq!(s.out_hw(), (32, 32));
        let s = ConvShape { k: 3, stride: 1, h: 7, w: 5, ..s };
        assert_eq!(s.out_hw(), (7, 5));
    }

    #[test]
    fn identity_kernel() {
        let s = ConvShape { cin: 1, cout: 1, k: 3, stride: 1, h: 4, w: 5 };
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        assert_eq!(conv_forward(&s, &x, &w, &[0.5]), x.iter().map(|v| v + 0.5).collect::<Vec<_>>());
    }

    #[test]
    fn backward_is_adjoint() {
        let s = ConvShape { cin: 2, cout: 3, k: 3, stride: 2, h: 7, w: 6 };
        let f = |i: usize, a: f64| ((i as f64 + 1.0) * a).sin();
        let x: Vec<f64> = (0..s.cin * s.h * s.w).map(|i| f(i, 0.7)).collect();
        let w: Vec<f64> = (0..s.weights()).map(|i| f(i, 1.3)).collect();
        let (ho, wo) = s.out_hw();
        let g: Vec<f64> = (0..s.cout * ho * wo).map(|i| f(i, 0.3)).collect();
        let zero = vec![0.0; s.cout];
        let y = conv_forward(&s, &x, &w, &zero);
        let mut gw = vec![0.0; s.weights()];
        let mut gb = vec![0.0; s.cout];
        let gx = conv_backward(&s, &x, &w, &g, &mut gw, &mut gb, true).unwrap();
        // Linear in x and in w: <g, conv(x)> = <gx, x> = <gw, w>.
        let lhs = dot(&g, &y);
        assert!((lhs - dot(&gx, &x)).abs() < 1e-10);
        assert!((lhs - dot(&gw, &w)).abs() < 1e-10);
        assert!((gb[1] - g[ho * wo..2 * ho * wo].iter().sum::<f64>()).abs() < 1e-12);
    }
}
