//! Self-modulating Fourier neural operator for one 64x64 subdomain.
//!
//! Dataflow: lift -> zero pad -> L residual Fourier layers -> crop -> project.
//! Each layer computes `x + leaky(W x + b + spectral(x))`, where the spectral
//! weights of layer `l` are multiplied by a complex `[C][C]` modulation
//! tensor broadcast over the retained modes. The modulation tensors come from
//! a small convolutional encoder of the same input.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{conv_backward, conv_forward, ConvShape};
use crate::error::{NnError, Result};
use crate::spectral::TruncatedDft;
use crate::tensor::{leaky, leaky_grad, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmFnoConfig {
    pub layers: usize,
    pub channels: usize,
    /// Retained modes per axis (`kx` keeps both signs).
    pub modes: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Side of the square input.
    pub size: usize,
    pub pad: usize,
    pub leaky_slope: f64,
    pub latent_dim: usize,
    pub enc_channels: usize,
    pub enc_blocks: usize,
}

impl SmFnoConfig {
    fn base(in_channels: usize, layers: usize, channels: usize, modes: usize) -> Self {
        Self {
            layers,
            channels,
            modes,
            in_channels,
            out_channels: 2,
            size: 64,
            pad: 20,
            leaky_slope: 0.01,
            latent_dim: 128,
            enc_channels: 32,
            enc_blocks: 3,
        }
    }

    pub fn v1(in_channels: usize) -> Self {
        Self::base(in_channels, 16, 16, 16)
    }

    pub fn v2(in_channels: usize) -> Self {
        Self::base(in_channels, 16, 24, 16)
    }

    /// Desk-scale model used for overfit experiments.
    pub fn toy(in_channels: usize) -> Self {
        Self { enc_channels: 8, ..Self::base(in_channels, 4, 8, 8) }
    }

    /// Small f64 model for finite-difference checks on 16x16 inputs.
    pub fn check() -> Self {
        Self { size: 16, pad: 8, enc_channels: 4, latent_dim: 8, ..Self::base(3, 2, 4, 4) }
    }

    /// Side of the padded working grid.
    pub fn grid(&self) -> usize {
        self.size + 2 * self.pad
    }

    pub fn retained_modes(&self) -> usize {
        2 * self.modes * self.modes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NnError::InvalidConfig(m));
        if self.layers == 0 || self.channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad(format!("layers, channels and channel counts must be positive: {self:?}"));
        }
        if self.modes == 0 || 2 * self.modes > self.grid() {
            return bad(format!("modes {} exceed half the padded grid {}", self.modes, self.grid()));
        }
        if self.size < 1 << self.enc_blocks || self.enc_channels == 0 || self.latent_dim == 0 {
            return bad(format!("encoder does not fit a {} input", self.size));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky slope {}", self.leaky_slope));
        }
        Ok(())
    }

    fn enc_side(&self, block: usize) -> usize {
        let mut s = self.size;
        for _ in 0..block {
            s = (s - 1) / 2 + 1;
        }
        s
    }

    fn stem_shape(&self) -> ConvShape {
        ConvShape { cin: self.in_channels, cout: self.enc_channels, k: 3, stride: 1, h: self.size, w: self.size }
    }

    fn block_shapes(&self, b: usize) -> [ConvShape; 3] {
        let (ce, s) = (self.enc_channels, self.enc_side(b));
        let so = self.enc_side(b + 1);
        [
            ConvShape { cin: ce, cout: ce, k: 3, stride: 2, h: s, w: s },
            ConvShape { cin: ce, cout: ce, k: 3, stride: 1, h: so, w: so },
            ConvShape { cin: ce, cout: ce, k: 1, stride: 2, h: s, w: s },
        ]
    }

    fn head_len(&self) -> usize {
        2 * self.channels * self.channels
    }
}

/// Closed-form parameter count.
pub fn count_params(c: &SmFnoConfig) -> usize {
    let (ci, ch, ce, d) = (c.in_channels, c.channels, c.enc_channels, c.latent_dim);
    let lift = ch * ci + ch;
    let layer = 2 * c.retained_modes() * ch * ch + ch * ch + ch;
    let proj = c.out_channels * ch + c.out_channels;
    let stem = 9 * ci * ce + ce;
    let block = 2 * (9 * ce * ce + ce) + ce * ce + ce;
    let fc = ce * d + d + d * d + d;
    let head = d * c.head_len() + c.head_len();
    lift + c.layers * layer + proj + stem + c.enc_blocks * block + fc + c.layers * head
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopCount {
    /// `2 L (N C^2 + N C log2 N)` with `N` the padded grid cell count.
    pub fft: f64,
    pub dense: f64,
    pub encoder: f64,
    pub total: f64,
}

pub fn count_flops(c: &SmFnoConfig) -> FlopCount {
    let n = (c.grid() * c.grid()) as f64;
    let (l, ch) = (c.layers as f64, c.channels as f64);
    let fft = if c.layers == 0 { 0.0 } else { 2.0 * l * (n * ch * ch + n * ch * n.log2()) };
    let s2 = (c.size * c.size) as f64;
    let dense = 2.0 * s2 * (c.in_channels * c.channels) as f64
        + l * (2.0 * n * ch * ch + 8.0 * c.retained_modes() as f64 * ch * ch)
        + 2.0 * s2 * ch * c.out_channels as f64;
    let mut encoder = c.stem_shape().flops() as f64;
    for b in 0..c.enc_blocks {
        encoder += c.block_shapes(b).iter().map(|s| s.flops() as f64).sum::<f64>();
    }
    let d = c.latent_dim as f64;
    encoder += 2.0 * (c.enc_channels as f64 * d + d * d) + l * 2.0 * d * c.head_len() as f64;
    FlopCount { fft, dense, encoder, total: fft + dense + encoder }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FourierLayer<T> {
    /// `[2M * M][C_in][C_out][re, im]`.
    pub spectral: Tensor<T>,
    /// `[C_out][C_in]`.
    pub mix_w: Tensor<T>,
    pub mix_b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock<T> {
    pub down_w: Tensor<T>,
    pub down_b: Tensor<T>,
    pub conv_w: Tensor<T>,
    pub conv_b: Tensor<T>,
    pub skip_w: Tensor<T>,
    pub skip_b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub stem_w: Tensor<T>,
    pub stem_b: Tensor<T>,
    pub blocks: Vec<ResBlock<T>>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
    /// Per layer `[2 C^2][latent]`; row `(i C + o) * 2 + {0: re, 1: im}`.
    pub head_w: Vec<Tensor<T>>,
    pub head_b: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct SmFno<T: Real> {
    pub config: SmFnoConfig,
    pub lift_w: Tensor<T>,
    pub lift_b: Tensor<T>,
    pub layers: Vec<FourierLayer<T>>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    pub encoder: Encoder<T>,
    dft: TruncatedDft<T>,
}

impl<T: Real> PartialEq for SmFno<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors() == other.tensors()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InitOptions {
    pub seed: u64,
    /// Random modulation heads instead of the identity-modulation start.
    pub random_heads: bool,
    /// Random biases instead of zeros; keeps pre-activations away from the
    /// LeakyReLU kink in the zero padding, which finite differences need.
    pub random_biases: bool,
}

/// Ordered tensor names for a config; matches `tensors()`.
pub fn tensor_names(c: &SmFnoConfig) -> Vec<String> {
    let mut v: Vec<String> = vec!["lift.w".into(), "lift.b".into()];
    for l in 0..c.layers {
        v.extend([format!("layer{l}.spectral"), format!("layer{l}.mix.w"), format!("layer{l}.mix.b")]);
    }
    v.extend(["proj.w".into(), "proj.b".into(), "enc.stem.w".into(), "enc.stem.b".into()]);
    for b in 0..c.enc_blocks {
        for part in ["down.w", "down.b", "conv.w", "conv.b", "skip.w", "skip.b"] {
            v.push(format!("enc.block{b}.{part}"));
        }
    }
    v.extend(["enc.fc1.w".into(), "enc.fc1.b".into(), "enc.fc2.w".into(), "enc.fc2.b".into()]);
    for l in 0..c.layers {
        v.extend([format!("enc.head{l}.w"), format!("enc.head{l}.b")]);
    }
    v
}

/// Ordered tensor shapes for a config; matches `tensor_names`.
pub fn tensor_shapes(c: &SmFnoConfig) -> Vec<Vec<usize>> {
    let (ci, ch, ce, d) = (c.in_channels, c.channels, c.enc_channels, c.latent_dim);
    let mut v = vec![vec![ch, ci], vec![ch]];
    for _ in 0..c.layers {
        v.extend([vec![c.retained_modes(), ch, ch, 2], vec![ch, ch], vec![ch]]);
    }
    v.extend([vec![c.out_channels, ch], vec![c.out_channels], vec![ce, ci, 3, 3], vec![ce]]);
    for _ in 0..c.enc_blocks {
        v.extend([vec![ce, ce, 3, 3], vec![ce], vec![ce, ce, 3, 3], vec![ce], vec![ce, ce, 1, 1], vec![ce]]);
    }
    v.extend([vec![d, ce], vec![d], vec![d, d], vec![d]]);
    for _ in 0..c.layers {
        v.extend([vec![c.head_len(), d], vec![c.head_len()]]);
    }
    v
}

impl<T: Real> SmFno<T> {
    /// Builds a model from tensors in `tensor_names` order.
    pub fn from_tensors(config: SmFnoConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = tensor_shapes(&config);
        if tensors.len() != shapes.len() {
            return Err(NnError::Mismatch(format!("{} tensors, config needs {}", tensors.len(), shapes.len())));
        }
        for ((t, s), name) in tensors.iter().zip(&shapes).zip(tensor_names(&config)) {
            if &t.shape != s || t.data.len() != s.iter().product::<usize>() {
                return Err(NnError::Mismatch(format!("{name}: shape {:?}, expected {s:?}", t.shape)));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let lift_w = next();
        let lift_b = next();
        let layers = (0..config.layers)
            .map(|_| FourierLayer { spectral: next(), mix_w: next(), mix_b: next() })
            .collect();
        let proj_w = next();
        let proj_b = next();
        let stem_w = next();
        let stem_b = next();
        let blocks = (0..config.enc_blocks)
            .map(|_| ResBlock {
                down_w: next(),
                down_b: next(),
                conv_w: next(),
                conv_b: next(),
                skip_w: next(),
                skip_b: next(),
            })
            .collect();
        let (fc1_w, fc1_b, fc2_w, fc2_b) = (next(), next(), next(), next());
        let mut head_w = Vec::new();
        let mut head_b = Vec::new();
        for _ in 0..config.layers {
            head_w.push(next());
            head_b.push(next());
        }
        Ok(Self {
            dft: TruncatedDft::new(config.grid(), config.modes),
            config,
            lift_w,
            lift_b,
            layers,
            proj_w,
            proj_b,
            encoder: Encoder { stem_w, stem_b, blocks, fc1_w, fc1_b, fc2_w, fc2_b, head_w, head_b },
        })
    }

    pub fn zeros(config: SmFnoConfig) -> Result<Self> {
        let t = tensor_shapes(&config).iter().map(|s| Tensor::zeros(s)).collect();
        Self::from_tensors(config, t)
    }

    pub fn init(config: SmFnoConfig, opts: InitOptions) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut uni = |shape: &[usize], bound: f64| Tensor::from_fn(shape, || rng.random_range(-bound..=bound));
        let (ci, ch, ce, d) = (config.in_channels, config.channels, config.enc_channels, config.latent_dim);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let mut t = Vec::new();
        t.push(uni(&[ch, ci], fan(ci)));
        t.push(Tensor::zeros(&[ch]));
        for _ in 0..config.layers {
            t.push(uni(&[config.retained_modes(), ch, ch, 2], 1.0 / (ch * ch) as f64));
            t.push(uni(&[ch, ch], fan(ch)));
            t.push(Tensor::zeros(&[ch]));
        }
        t.push(uni(&[config.out_channels, ch], fan(ch)));
        t.push(Tensor::zeros(&[config.out_channels]));
        t.push(uni(&[ce, ci, 3, 3], fan(9 * ci)));
        t.push(Tensor::zeros(&[ce]));
        for _ in 0..config.enc_blocks {
            t.push(uni(&[ce, ce, 3, 3], fan(9 * ce)));
            t.push(Tensor::zeros(&[ce]));
            t.push(uni(&[ce, ce, 3, 3], fan(9 * ce)));
            t.push(Tensor::zeros(&[ce]));
            t.push(uni(&[ce, ce, 1, 1], fan(ce)));
            t.push(Tensor::zeros(&[ce]));
        }
        t.push(uni(&[d, ce], fan(ce)));
        t.push(Tensor::zeros(&[d]));
        t.push(uni(&[d, d], fan(d)));
        t.push(Tensor::zeros(&[d]));
        for _ in 0..config.layers {
            if opts.random_heads {
                t.push(uni(&[config.head_len(), d], 0.5 * fan(d)));
                t.push(uni(&[config.head_len()], 0.1));
            } else {
                t.push(Tensor::zeros(&[config.head_len(), d]));
                t.push(Tensor::zeros(&[config.head_len()]));
            }
        }
        if opts.random_biases {
            for (tensor, name) in t.iter_mut().zip(tensor_names(&config)) {
                if name.ends_with(".b") && !name.starts_with("enc.head") {
                    *tensor = uni(&tensor.shape.clone(), 0.5);
                }
            }
        }
        Self::from_tensors(config, t)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("valid config")
    }

    pub fn cast<U: Real>(&self) -> SmFno<U> {
        SmFno::from_tensors(self.config, self.tensors().into_iter().map(|t| t.cast()).collect()).expect("same config")
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.lift_w, &self.lift_b];
        for l in &self.layers {
            v.extend([&l.spectral, &l.mix_w, &l.mix_b]);
        }
        let e = &self.encoder;
        v.extend([&self.proj_w, &self.proj_b, &e.stem_w, &e.stem_b]);
        for b in &e.blocks {
            v.extend([&b.down_w, &b.down_b, &b.conv_w, &b.conv_b, &b.skip_w, &b.skip_b]);
        }
        v.extend([&e.fc1_w, &e.fc1_b, &e.fc2_w, &e.fc2_b]);
        for (w, b) in e.head_w.iter().zip(&e.head_b) {
            v.extend([w, b]);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.lift_w, &mut self.lift_b];
        for l in &mut self.layers {
            v.extend([&mut l.spectral, &mut l.mix_w, &mut l.mix_b]);
        }
        let e = &mut self.encoder;
        v.extend([&mut self.proj_w, &mut self.proj_b, &mut e.stem_w, &mut e.stem_b]);
        for b in &mut e.blocks {
            v.extend([&mut b.down_w, &mut b.down_b, &mut b.conv_w, &mut b.conv_b, &mut b.skip_w, &mut b.skip_b]);
        }
        v.extend([&mut e.fc1_w, &mut e.fc1_b, &mut e.fc2_w, &mut e.fc2_b]);
        for (w, b) in e.head_w.iter_mut().zip(e.head_b.iter_mut()) {
            v.extend([w, b]);
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// `self += s * other`, tensor by tensor.
    pub fn axpy(&mut self, s: T, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += s * *y;
            }
        }
    }

    fn slope(&self) -> T {
        T::of(self.config.leaky_slope)
    }

    fn check_input(&self, input: &[T]) -> Result<()> {
        let c = &self.config;
        let want = c.in_channels * c.size * c.size;
        if input.len() != want {
            return Err(NnError::InputShape {
                expected: format!("{} x {} x {} = {want} values", c.in_channels, c.size, c.size),
                got: format!("{} values", input.len()),
            });
        }
        Ok(())
    }

    /// Modulation tensors `[C][C]` (index `i C + o`) for every layer.
    pub fn modulation(&self, input: &[T]) -> Result<Vec<Vec<Complex<T>>>> {
        self.check_input(input)?;
        Ok(self.encode(input, false).0)
    }

    fn encode(&self, input: &[T], keep: bool) -> (Vec<Vec<Complex<T>>>, Option<EncoderCache<T>>) {
        let c = &self.config;
        let e = &self.encoder;
        let a = self.slope();
        let act = |v: &mut Vec<T>| v.iter_mut().for_each(|z| *z = leaky(*z, a));
        let mut stem = conv_forward(&c.stem_shape(), input, &e.stem_w.data, &e.stem_b.data);
        act(&mut stem);
        let mut x = stem.clone();
        let mut blocks = Vec::with_capacity(c.enc_blocks);
        for (b, blk) in e.blocks.iter().enumerate() {
            let [down, conv, skip] = c.block_shapes(b);
            let mut mid = conv_forward(&down, &x, &blk.down_w.data, &blk.down_b.data);
            act(&mut mid);
            let mut out = conv_forward(&conv, &mid, &blk.conv_w.data, &blk.conv_b.data);
            let sk = conv_forward(&skip, &x, &blk.skip_w.data, &blk.skip_b.data);
            out.iter_mut().zip(&sk).for_each(|(o, s)| *o = leaky(*o + *s, a));
            let input = std::mem::replace(&mut x, out);
            if keep {
                blocks.push(BlockCache { input, mid, out: x.clone() });
            }
        }
        let side = c.enc_side(c.enc_blocks);
        let hw = side * side;
        let inv = T::of(1.0 / hw as f64);
        let gap: Vec<T> = x.chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let h1 = dense(&e.fc1_w.data, &e.fc1_b.data, &gap, a);
        let h2 = dense(&e.fc2_w.data, &e.fc2_b.data, &h1, a);
        let ch = c.channels;
        let mods = (0..c.layers)
            .map(|l| {
                let raw = affine(&e.head_w[l].data, &e.head_b[l].data, &h2);
                (0..ch * ch).map(|j| Complex::new(T::one() + raw[2 * j], raw[2 * j + 1])).collect()
            })
            .collect();
        let cache = keep.then(|| EncoderCache { stem, blocks, gap, h1, h2 });
        (mods, cache)
    }

    /// Forward pass on a `[in_channels][size][size]` stack, returning
    /// `[out_channels][size][size]`. With `keep` the intermediates needed by
    /// `backward` are retained.
    pub fn forward(&self, input: &[T], keep: bool) -> Result<(Vec<T>, Cache<T>)> {
        self.check_input(input)?;
        let (mods, enc) = self.encode(input, keep);
        self.forward_with(input, mods, enc, keep)
    }

    /// Forward pass with externally supplied modulation tensors.
    pub fn forward_modulated(&self, input: &[T], mods: Vec<Vec<Complex<T>>>) -> Result<Vec<T>> {
        self.check_input(input)?;
        Ok(self.forward_with(input, mods, None, false)?.0)
    }

    fn forward_with(
        &self,
        input: &[T],
        mods: Vec<Vec<Complex<T>>>,
        enc: Option<EncoderCache<T>>,
        keep: bool,
    ) -> Result<(Vec<T>, Cache<T>)> {
        let c = &self.config;
        let (s, p, n, ch, ci) = (c.size, c.pad, c.grid(), c.channels, c.in_channels);
        let (nn, ss, q) = (n * n, s * s, c.retained_modes());
        let a = self.slope();

        let mut x = vec![T::zero(); ch * nn];
        for o in 0..ch {
            let w = &self.lift_w.data[o * ci..(o + 1) * ci];
            let b = self.lift_b.data[o];
            for u in 0..s {
                for v in 0..s {
                    let mut acc = b;
                    for (j, wj) in w.iter().enumerate() {
                        acc += *wj * input[j * ss + u * s + v];
                    }
                    x[o * nn + (u + p) * n + v + p] = acc;
                }
            }
        }

        let mut cache = Cache {
            input: input.to_vec(),
            modulation: Vec::new(),
            xs: Vec::new(),
            zs: Vec::new(),
            xhat: Vec::new(),
            enc,
            retained: keep,
        };
        let scale = T::of(1.0 / nn as f64);
        for (l, layer) in self.layers.iter().enumerate() {
            let md = &mods[l];
            let mut xh = vec![Complex::new(T::zero(), T::zero()); ch * q];
            for i in 0..ch {
                self.dft.forward(&x[i * nn..(i + 1) * nn], &mut xh[i * q..(i + 1) * q]);
            }
            let r = &layer.spectral.data;
            let mut yh = vec![Complex::new(T::zero(), T::zero()); ch * q];
            for k in 0..q {
                for i in 0..ch {
                    let xv = xh[i * q + k];
                    let base = (k * ch + i) * ch;
                    for o in 0..ch {
                        let w = Complex::new(r[2 * (base + o)], r[2 * (base + o) + 1]) * md[i * ch + o];
                        yh[o * q + k] += w * xv;
                    }
                }
            }
            let mut z = vec![T::zero(); ch * nn];
            for o in 0..ch {
                let zo = &mut z[o * nn..(o + 1) * nn];
                self.dft.inverse_re(&yh[o * q..(o + 1) * q], zo);
                let b = layer.mix_b.data[o];
                zo.iter_mut().for_each(|v| *v = *v * scale + b);
                for i in 0..ch {
                    let w = layer.mix_w.data[o * ch + i];
                    for (zv, xv) in zo.iter_mut().zip(&x[i * nn..(i + 1) * nn]) {
                        *zv += w * *xv;
                    }
                }
            }
            if !z.iter().all(|v| v.is_finite()) {
                return Err(NnError::NonFinite { layer: l });
            }
            let next: Vec<T> = x.iter().zip(&z).map(|(xv, zv)| *xv + leaky(*zv, a)).collect();
            if keep {
                cache.xs.push(std::mem::replace(&mut x, next));
                cache.zs.push(z);
                cache.xhat.push(xh);
            } else {
                x = next;
            }
        }

        let co = c.out_channels;
        let mut out = vec![T::zero(); co * ss];
        for o in 0..co {
            let w = &self.proj_w.data[o * ch..(o + 1) * ch];
            for u in 0..s {
                for v in 0..s {
                    let mut acc = self.proj_b.data[o];
                    for (i, wi) in w.iter().enumerate() {
                        acc += *wi * x[i * nn + (u + p) * n + v + p];
                    }
                    out[o * ss + u * s + v] = acc;
                }
            }
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(NnError::NonFinite { layer: c.layers });
        }
        if keep {
            cache.xs.push(x);
            cache.modulation = mods;
        }
        Ok((out, cache))
    }

    /// Reverse-mode gradients of a scalar loss given `d loss / d output`.
    pub fn backward(&self, cache: &Cache<T>, gout: &[T]) -> Result<Self> {
        let c = &self.config;
        if !cache.retained || cache.xs.len() != c.layers + 1 || cache.enc.is_none() {
            return Err(NnError::MissingCache);
        }
        let (s, p, n, ch, ci, co) = (c.size, c.pad, c.grid(), c.channels, c.in_channels, c.out_channels);
        let (nn, ss, q) = (n * n, s * s, c.retained_modes());
        if gout.len() != co * ss {
            return Err(NnError::InputShape { expected: format!("{} values", co * ss), got: format!("{}", gout.len()) });
        }
        let a = self.slope();
        let mut g = self.zeros_like();

        let xl = &cache.xs[c.layers];
        let mut gx = vec![T::zero(); ch * nn];
        for o in 0..co {
            let go = &gout[o * ss..(o + 1) * ss];
            g.proj_b.data[o] += go.iter().copied().sum::<T>();
            for i in 0..ch {
                let w = self.proj_w.data[o * ch + i];
                let mut acc = T::zero();
                for u in 0..s {
                    let row = (u + p) * n + p;
                    for v in 0..s {
                        let gv = go[u * s + v];
                        acc += gv * xl[i * nn + row + v];
                        gx[i * nn + row + v] += w * gv;
                    }
                }
                g.proj_w.data[o * ch + i] += acc;
            }
        }

        let scale = T::of(1.0 / nn as f64);
        let zero = Complex::new(T::zero(), T::zero());
        let mut gmods: Vec<Vec<Complex<T>>> = vec![vec![zero; ch * ch]; c.layers];
        for l in (0..c.layers).rev() {
            let layer = &self.layers[l];
            let gl = &mut g.layers[l];
            let (x, z, xh, md) = (&cache.xs[l], &cache.zs[l], &cache.xhat[l], &cache.modulation[l]);
            let gz: Vec<T> = gx.iter().zip(z).map(|(gv, zv)| *gv * leaky_grad(*zv, a)).collect();
            for o in 0..ch {
                let go = &gz[o * nn..(o + 1) * nn];
                gl.mix_b.data[o] += go.iter().copied().sum::<T>();
                for i in 0..ch {
                    let w = layer.mix_w.data[o * ch + i];
                    let xi = &x[i * nn..(i + 1) * nn];
                    let mut acc = T::zero();
                    for ((gxv, gv), xv) in gx[i * nn..(i + 1) * nn].iter_mut().zip(go).zip(xi) {
                        acc += *gv * *xv;
                        *gxv += w * *gv;
                    }
                    gl.mix_w.data[o * ch + i] += acc;
                }
            }
            let mut gy = vec![zero; ch * q];
            for o in 0..ch {
                self.dft.forward(&gz[o * nn..(o + 1) * nn], &mut gy[o * q..(o + 1) * q]);
            }
            gy.iter_mut().for_each(|v| *v = *v * scale);
            let r = &layer.spectral.data;
            let gr = &mut gl.spectral.data;
            let gm = &mut gmods[l];
            let mut gxh = vec![zero; ch * q];
            for k in 0..q {
                for i in 0..ch {
                    let xv = xh[i * q + k];
                    let base = (k * ch + i) * ch;
                    let mut acc = zero;
                    for o in 0..ch {
                        let idx = 2 * (base + o);
                        let rv = Complex::new(r[idx], r[idx + 1]);
                        let m = md[i * ch + o];
                        let gyv = gy[o * q + k];
                        let ga = gyv * xv.conj();
                        let grv = ga * m.conj();
                        gr[idx] += grv.re;
                        gr[idx + 1] += grv.im;
                        gm[i * ch + o] += ga * rv.conj();
                        acc += gyv * (rv * m).conj();
                    }
                    gxh[i * q + k] = acc;
                }
            }
            let mut tmp = vec![T::zero(); nn];
            for i in 0..ch {
                self.dft.inverse_re(&gxh[i * q..(i + 1) * q], &mut tmp);
                for (d, t) in gx[i * nn..(i + 1) * nn].iter_mut().zip(&tmp) {
                    *d += *t;
                }
            }
        }

        let input = &cache.input;
        for o in 0..ch {
            for u in 0..s {
                for v in 0..s {
                    let gv = gx[o * nn + (u + p) * n + v + p];
                    g.lift_b.data[o] += gv;
                    for j in 0..ci {
                        g.lift_w.data[o * ci + j] += gv * input[j * ss + u * s + v];
                    }
                }
            }
        }

        self.encoder_backward(cache.enc.as_ref().expect("checked"), &gmods, input, &mut g);
        Ok(g)
    }

    fn encoder_backward(&self, ec: &EncoderCache<T>, gmods: &[Vec<Complex<T>>], input: &[T], g: &mut Self) {
        let c = &self.config;
        let a = self.slope();
        let e = &self.encoder;
        let ge = &mut g.encoder;
        let d = c.latent_dim;
        let mut gh2 = vec![T::zero(); d];
        for l in 0..c.layers {
            let graw: Vec<T> = gmods[l].iter().flat_map(|v| [v.re, v.im]).collect();
            affine_backward(&e.head_w[l].data, &ec.h2, &graw, &mut ge.head_w[l].data, &mut ge.head_b[l].data, &mut gh2);
        }
        let gh1 = dense_backward(&e.fc2_w.data, &ec.h1, &ec.h2, &gh2, a, &mut ge.fc2_w.data, &mut ge.fc2_b.data);
        let ggap = dense_backward(&e.fc1_w.data, &ec.gap, &ec.h1, &gh1, a, &mut ge.fc1_w.data, &mut ge.fc1_b.data);

        let side = c.enc_side(c.enc_blocks);
        let hw = side * side;
        let inv = T::of(1.0 / hw as f64);
        let mut gx: Vec<T> = ggap.iter().flat_map(|gv| std::iter::repeat_n(*gv * inv, hw)).collect();
        for b in (0..c.enc_blocks).rev() {
            let [down, conv, skip] = c.block_shapes(b);
            let (blk, gb, bc) = (&e.blocks[b], &mut ge.blocks[b], &ec.blocks[b]);
            let gpre: Vec<T> = gx.iter().zip(&bc.out).map(|(gv, o)| *gv * leaky_grad(*o, a)).collect();
            let gmid = conv_backward(&conv, &bc.mid, &blk.conv_w.data, &gpre, &mut gb.conv_w.data, &mut gb.conv_b.data, true)
                .expect("requested");
            let gmid: Vec<T> = gmid.iter().zip(&bc.mid).map(|(gv, m)| *gv * leaky_grad(*m, a)).collect();
            let mut gin = conv_backward(&down, &bc.input, &blk.down_w.data, &gmid, &mut gb.down_w.data, &mut gb.down_b.data, true)
                .expect("requested");
            let gsk = conv_backward(&skip, &bc.input, &blk.skip_w.data, &gpre, &mut gb.skip_w.data, &mut gb.skip_b.data, true)
                .expect("requested");
            gin.iter_mut().zip(&gsk).for_each(|(u, v)| *u += *v);
            gx = gin;
        }
        let gstem: Vec<T> = gx.iter().zip(&ec.stem).map(|(gv, o)| *gv * leaky_grad(*o, a)).collect();
        conv_backward(&c.stem_shape(), input, &e.stem_w.data, &gstem, &mut ge.stem_w.data, &mut ge.stem_b.data, false);
    }
}

fn affine<T: Real>(w: &[T], b: &[T], x: &[T]) -> Vec<T> {
    b.iter()
        .enumerate()
        .map(|(o, bo)| *bo + w[o * x.len()..(o + 1) * x.len()].iter().zip(x).map(|(u, v)| *u * *v).sum::<T>())
        .collect()
}

fn dense<T: Real>(w: &[T], b: &[T], x: &[T], slope: T) -> Vec<T> {
    affine(w, b, x).into_iter().map(|v| leaky(v, slope)).collect()
}

fn affine_backward<T: Real>(w: &[T], x: &[T], gy: &[T], gw: &mut [T], gb: &mut [T], gx: &mut [T]) {
    let n = x.len();
    for (o, g) in gy.iter().enumerate() {
        gb[o] += *g;
        for j in 0..n {
            gw[o * n + j] += *g * x[j];
            gx[j] += w[o * n + j] * *g;
        }
    }
}

fn dense_backward<T: Real>(w: &[T], x: &[T], y: &[T], gy: &[T], slope: T, gw: &mut [T], gb: &mut [T]) -> Vec<T> {
    let gpre: Vec<T> = gy.iter().zip(y).map(|(g, v)| *g * leaky_grad(*v, slope)).collect();
    let mut gx = vec![T::zero(); x.len()];
    affine_backward(w, x, &gpre, gw, gb, &mut gx);
    gx
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    input: Vec<T>,
    mid: Vec<T>,
    out: Vec<T>,
}

#[derive(Debug, Clone)]
struct EncoderCache<T> {
    stem: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    gap: Vec<T>,
    h1: Vec<T>,
    h2: Vec<T>,
}

/// Forward intermediates for `backward`.
#[derive(Debug, Clone)]
pub struct Cache<T> {
    input: Vec<T>,
    modulation: Vec<Vec<Complex<T>>>,
    xs: Vec<Vec<T>>,
    zs: Vec<Vec<T>>,
    xhat: Vec<Vec<Complex<T>>>,
    enc: Option<EncoderCache<T>>,
    retained: bool,
}

impl<T: Real> Cache<T> {
    pub fn is_retained(&self) -> bool {
        self.retained
    }

    /// Which side of the LeakyReLU kink every activation sits on.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut v: Vec<bool> = self.zs.iter().flatten().map(|z| *z > T::zero()).collect();
        if let Some(e) = &self.enc {
            let stages = std::iter::once(&e.stem)
                .chain(e.blocks.iter().flat_map(|b| [&b.mid, &b.out]))
                .chain([&e.h1, &e.h2]);
            v.extend(stages.flatten().map(|z| *z > T::zero()));
        }
        v
    }
}
