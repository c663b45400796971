//! Plain residual FNO forward built on full 2-D FFTs.
//!
//! Shares the lift, spectral weights, pointwise mixing and projection of an
//! `SmFno` but has no modulation path. Used as an independent check of the
//! truncated-DFT implementation.

use num_complex::Complex;
use rustfft::{FftNum, FftPlanner};

use crate::error::{NnError, Result};
use crate::model::SmFno;
use crate::spectral::TruncatedDft;
use crate::tensor::{leaky, Real};

fn fft2<T: Real + FftNum>(planner: &mut FftPlanner<T>, data: &mut [Complex<T>], n: usize, inverse: bool) {
    let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
    for row in data.chunks_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(T::zero(), T::zero()); n];
    for y in 0..n {
        for x in 0..n {
            col[x] = data[x * n + y];
        }
        fft.process(&mut col);
        for x in 0..n {
            data[x * n + y] = col[x];
        }
    }
}

pub fn plain_fno_forward<T: Real + FftNum>(model: &SmFno<T>, input: &[T]) -> Result<Vec<T>> {
    let c = &model.config;
    let (s, p, n, ch, ci, m) = (c.size, c.pad, c.grid(), c.channels, c.in_channels, c.modes);
    if input.len() != ci * s * s {
        return Err(NnError::InputShape { expected: format!("{} values", ci * s * s), got: input.len().to_string() });
    }
    let (nn, ss) = (n * n, s * s);
    let zero = Complex::new(T::zero(), T::zero());
    let slope = T::of(c.leaky_slope);
    let mut planner = FftPlanner::new();

    let mut x = vec![T::zero(); ch * nn];
    for o in 0..ch {
        for u in 0..s {
            for v in 0..s {
                let mut acc = model.lift_b.data[o];
                for j in 0..ci {
                    acc += model.lift_w.data[o * ci + j] * input[j * ss + u * s + v];
                }
                x[o * nn + (u + p) * n + v + p] = acc;
            }
        }
    }

    let kx = TruncatedDft::<T>::kx_list(n, m);
    let scale = T::of(1.0 / nn as f64);
    for layer in &model.layers {
        let spectra: Vec<Vec<Complex<T>>> = (0..ch)
            .map(|i| {
                let mut buf: Vec<Complex<T>> = x[i * nn..(i + 1) * nn].iter().map(|&v| Complex::new(v, T::zero())).collect();
                fft2(&mut planner, &mut buf, n, false);
                buf
            })
            .collect();
        let r = &layer.spectral.data;
        let mut z = vec![T::zero(); ch * nn];
        for o in 0..ch {
            let mut out = vec![zero; nn];
            for (kxi, &fx) in kx.iter().enumerate() {
                for ky in 0..m {
                    let k = kxi * m + ky;
                    let mut acc = zero;
                    for (i, spec) in spectra.iter().enumerate() {
                        let b = 2 * ((k * ch + i) * ch + o);
                        acc += Complex::new(r[b], r[b + 1]) * spec[fx * n + ky];
                    }
                    out[fx * n + ky] = acc;
                }
            }
            fft2(&mut planner, &mut out, n, true);
            for (cell, zv) in z[o * nn..(o + 1) * nn].iter_mut().enumerate() {
                let mut acc = out[cell].re * scale + layer.mix_b.data[o];
                for i in 0..ch {
                    acc += layer.mix_w.data[o * ch + i] * x[i * nn + cell];
                }
                *zv = acc;
            }
        }
        x.iter_mut().zip(&z).for_each(|(xv, zv)| *xv += leaky(*zv, slope));
    }

    let co = c.out_channels;
    let mut out = vec![T::zero(); co * ss];
    for o in 0..co {
        for u in 0..s {
            for v in 0..s {
                let mut acc = model.proj_b.data[o];
                for i in 0..ch {
                    acc += model.proj_w.data[o * ch + i] * x[i * nn + (u + p) * n + v + p];
                }
                out[o * ss + u * s + v] = acc;
            }
        }
    }
    Ok(out)
}
