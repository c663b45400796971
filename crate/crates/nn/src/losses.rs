//! Hybrid data/physics loss `L_data + alpha (L_pde + c L_bc)` and the
//! epoch-wise rescaling of `alpha`.
//!
//! All terms are evaluated on scaled fields (see `inputs`). Gradients with
//! respect to a complex field use `dL/dRe + i dL/dIm`.

use num_complex::Complex64 as c64;
use serde::{Deserialize, Serialize};
use snapddm_core::datagen::SubdomainSample;
use snapddm_core::fdfd::{Stencil, Wrap};
use snapddm_core::robin::{extract_trace_set, BoundaryTraceSet, Edge};
use snapddm_core::subdomain::SubdomainClass;
use snapddm_core::{ComplexField2D, RealField2D, WavevectorConvention};

use crate::inputs::Scaling;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the boundary term inside the physics loss.
    pub c: f64,
    /// Target ratio `alpha L_physics / L_data`.
    pub alpha_prime: f64,
    pub alpha: f64,
    pub warmup_epochs: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { c: 1.0, alpha_prime: 0.3, alpha: 0.0, warmup_epochs: 0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub data: f64,
    pub pde: f64,
    pub bc: f64,
}

impl LossTerms {
    pub fn physics(&self, c: f64) -> f64 {
        self.pde + c * self.bc
    }
}

pub fn total_loss(t: &LossTerms, cfg: &LossConfig) -> f64 {
    t.data + cfg.alpha * t.physics(cfg.c)
}

/// End-of-epoch update after `completed_epochs` epochs.
pub fn update_alpha(cfg: &LossConfig, completed_epochs: usize, mean_data: f64, mean_physics: f64) -> LossConfig {
    let mut next = *cfg;
    if completed_epochs < cfg.warmup_epochs {
        next.alpha = 0.0;
    } else if mean_physics > 0.0 && mean_physics.is_finite() && mean_data.is_finite() {
        next.alpha = cfg.alpha_prime * mean_data / mean_physics;
    } else {
        log::warn!("physics loss is {mean_physics}; keeping alpha = {}", cfg.alpha);
    }
    next
}

/// Everything the physics terms need for one sample, in scaled units.
#[derive(Debug, Clone)]
pub struct PhysicsContext {
    stencil: Stencil,
    k_map: RealField2D,
    /// `i k0 delta J`, scaled; zero outside the source class.
    forcing: Option<ComplexField2D>,
    g: BoundaryTraceSet,
}

impl PhysicsContext {
    pub fn new(
        class: SubdomainClass,
        eps: &RealField2D,
        source: &ComplexField2D,
        pml_profile: &RealField2D,
        g: &BoundaryTraceSet,
        scaling: &Scaling,
        convention: WavevectorConvention,
    ) -> Self {
        let (nx, ny) = eps.shape();
        let k0 = scaling.k0_delta;
        let f = scaling.field_factor();
        let stencil = if class == SubdomainClass::Pml {
            let s = snapddm_core::subdomain::LocalStretch::from_sigma_image(pml_profile);
            Stencil::new(eps, k0, &s.sx, &s.sy, Wrap::default())
        } else {
            let one = vec![c64::new(1.0, 0.0); nx.max(ny)];
            Stencil::new(eps, k0, &one[..nx], &one[..ny], Wrap::default())
        };
        let forcing = (class == SubdomainClass::Source).then(|| {
            let mut j = source.clone();
            j.scale(c64::new(0.0, k0 * f));
            j
        });
        let mut g = g.clone();
        g.scale(c64::new(f, 0.0));
        Self { stencil, k_map: eps.map(|&e| convention.k_delta(k0, e)), forcing, g }
    }

    pub fn from_sample(s: &SubdomainSample, scaling: &Scaling, convention: WavevectorConvention) -> Self {
        Self::new(s.class, &s.eps, &s.source, &s.pml_profile, &s.g, scaling, convention)
    }

    fn pde_residual(&self, pred: &ComplexField2D) -> ComplexField2D {
        let mut r = self.stencil.apply_interior(pred);
        if let Some(j) = &self.forcing {
            let (nx, ny) = r.shape();
            for x in 1..nx - 1 {
                for y in 1..ny - 1 {
                    *r.get_mut(x, y) += j.get(x, y);
                }
            }
        }
        r
    }

    /// `extract(pred) - g` on every edge.
    fn bc_misfit(&self, pred: &ComplexField2D) -> BoundaryTraceSet {
        let mut m = extract_trace_set(pred, &self.k_map).expect("block is at least 2x2");
        for (a, b) in m.iter_mut().zip(self.g.iter()) {
            *a -= b;
        }
        m
    }
}

fn unit(v: c64) -> c64 {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        c64::new(0.0, 0.0)
    }
}

fn interior_count(nx: usize, ny: usize) -> f64 {
    ((nx - 2) * (ny - 2)) as f64
}

pub fn loss_terms(pred: &ComplexField2D, truth: &ComplexField2D, ctx: &PhysicsContext) -> LossTerms {
    let (nx, ny) = pred.shape();
    let data = pred.as_slice().iter().zip(truth.as_slice()).map(|(a, b)| (a - b).norm()).sum::<f64>() / (nx * ny) as f64;
    let pde = ctx.pde_residual(pred).as_slice().iter().map(|v| v.norm()).sum::<f64>() / interior_count(nx, ny);
    let m = ctx.bc_misfit(pred);
    let n_bc = m.iter().count() as f64;
    let bc = m.iter().map(|v| v.norm()).sum::<f64>() / n_bc;
    LossTerms { data, pde, bc }
}

/// Loss terms and the gradient of `w_data L_data + w_pde L_pde + w_bc L_bc`.
pub fn loss_terms_with_grad(
    pred: &ComplexField2D,
    truth: &ComplexField2D,
    ctx: &PhysicsContext,
    weights: (f64, f64, f64),
) -> (LossTerms, ComplexField2D) {
    let (nx, ny) = pred.shape();
    let terms = loss_terms(pred, truth, ctx);
    let (w_data, w_pde, w_bc) = weights;
    let nd = (nx * ny) as f64;
    let mut grad = ComplexField2D::from_fn(nx, ny, |x, y| unit(pred.get(x, y) - truth.get(x, y)) * (w_data / nd));
    if w_pde != 0.0 {
        let r = ctx.pde_residual(pred);
        let s = w_pde / interior_count(nx, ny);
        let u = r.map(|v| unit(*v) * s);
        let back = ctx.stencil.adjoint_interior(&u);
        grad.as_mut_slice().iter_mut().zip(back.as_slice()).for_each(|(g, b)| *g += b);
    }
    if w_bc != 0.0 {
        let m = ctx.bc_misfit(pred);
        let s = w_bc / m.iter().count() as f64;
        for e in Edge::ALL {
            let line = e.perimeter_line(nx, ny);
            let extent = if e.is_vertical() { nx } else { ny };
            let inner = e.inward(line, extent).expect("block is at least 2x2");
            for (t, v) in m.edge(e).iter().enumerate() {
                let u = unit(*v) * s;
                let (x, y) = e.cell(line, t);
                let (xi, yi) = e.cell(inner, t);
                let k = *ctx.k_map.get(x, y);
                // Adjoint of `(i k - 1) H_b + H_in`.
                *grad.get_mut(x, y) += c64::new(-1.0, -k) * u;
                *grad.get_mut(xi, yi) += u;
            }
        }
    }
    (terms, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_arithmetic() {
        let t = LossTerms { data: 0.1, pde: 0.2, bc: 0.3 };
        let cfg = LossConfig { c: 1.0, alpha: 0.5, ..Default::default() };
        assert!((total_loss(&t, &cfg) - 0.35).abs() < 1e-15);
        assert_eq!(total_loss(&t, &LossConfig { alpha: 0.0, ..cfg }), 0.1);
        assert_eq!(total_loss(&LossTerms::default(), &cfg), 0.0);
    }

    #[test]
    fn alpha_update_rule() {
        let cfg = LossConfig::default();
        let next = update_alpha(&cfg, 1, 0.3, 1.0);
        assert!((next.alpha - 0.09).abs() < 1e-15);
        assert!((next.alpha * 1.0 / 0.3 - 0.3).abs() < 1e-12);
        assert_eq!(update_alpha(&next, 2, 0.3, 1.0).alpha, next.alpha);
        let warm = LossConfig { warmup_epochs: 3, alpha: 0.7, ..cfg };
        assert_eq!(update_alpha(&warm, 2, 0.3, 1.0).alpha, 0.0);
        assert!(update_alpha(&warm, 3, 0.3, 1.0).alpha > 0.0);
        let keep = LossConfig { alpha: 0.42, ..cfg };
        assert_eq!(update_alpha(&keep, 5, 0.3, 0.0).alpha, 0.42);
    }

    fn context(class: SubdomainClass, n: usize) -> (PhysicsContext, ComplexField2D) {
        let eps = RealField2D::from_fn(n, n, |x, y| 1.0 + ((x * 7 + y * 3) % 5) as f64);
        let src = ComplexField2D::from_fn(n, n, |x, y| c64::new((x as f64).sin(), (y as f64).cos()));
        let prof = RealField2D::from_fn(n, n, |x, _| 2.0 * x as f64);
        let mut g = BoundaryTraceSet::zeros(n, n);
        g.iter_mut().enumerate().for_each(|(i, v)| *v = c64::new((i as f64 * 0.7).sin(), 0.3));
        let sc = Scaling { data: 1.3, k0_delta: 0.0374 };
        let truth = ComplexField2D::from_fn(n, n, |x, y| c64::new((x + y) as f64 * 0.1, (x as f64 - y as f64) * 0.05));
        (PhysicsContext::new(class, &eps, &src, &prof, &g, &sc, WavevectorConvention::default()), truth)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let n = 7;
        let w = (1.0, 0.7, 0.4);
        let f = |p: &ComplexField2D, ctx: &PhysicsContext, t: &ComplexField2D| {
            let l = loss_terms(p, t, ctx);
            w.0 * l.data + w.1 * l.pde + w.2 * l.bc
        };
        for class in SubdomainClass::ALL {
            let (ctx, truth) = context(class, n);
            let pred = ComplexField2D::from_fn(n, n, |x, y| c64::new(((x * 13 + y * 5) % 7) as f64 - 3.1, ((x + 2 * y) % 3) as f64 + 0.2));
            let (_, grad) = loss_terms_with_grad(&pred, &truth, &ctx, w);
            let h = 1e-6;
            for i in 0..n * n {
                for (dir, part) in [(c64::new(h, 0.0), 0), (c64::new(0.0, h), 1)] {
                    let mut up = pred.clone();
                    up.as_mut_slice()[i] += dir;
                    let mut dn = pred.clone();
                    dn.as_mut_slice()[i] -= dir;
                    let fd = (f(&up, &ctx, &truth) - f(&dn, &ctx, &truth)) / (2.0 * h);
                    let a = if part == 0 { grad.as_slice()[i].re } else { grad.as_slice()[i].im };
                    assert!((a - fd).abs() < 1e-6, "{class} cell {i} part {part}: {a} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn exact_field_has_zero_boundary_loss() {
        let n = 6;
        let (ctx, truth) = context(SubdomainClass::Material, n);
        let k = ctx.k_map.clone();
        let g = extract_trace_set(&truth, &k).unwrap();
        let ctx = PhysicsContext { g, ..ctx };
        let t = loss_terms(&truth, &truth, &ctx);
        assert_eq!(t.data, 0.0);
        assert!(t.bc < 1e-15);
        let zero = ComplexField2D::zeros(n, n);
        let z = loss_terms(&zero, &truth, &ctx);
        let mean_truth = truth.as_slice().iter().map(|v| v.norm()).sum::<f64>() / (n * n) as f64;
        assert!((z.data - mean_truth).abs() < 1e-14);
        assert!((z.bc - ctx.g.mean_abs()).abs() < 1e-14);
    }
}
