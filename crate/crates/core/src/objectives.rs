//! Loss terms of the crafting objective and their combination.
//!
//! Every differentiable loss returns a [`DiffScalar`] whose gradient is taken
//! w.r.t. the loss' primary input (logits, adversarial embedding, composited
//! image or texture).

use crate::error::{Error, Result};
use crate::numerics::{DiffScalar, Grid};
use crate::recognizers::TargetPrototype;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_id: f64,
    pub lambda_vis: f64,
    pub lambda_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_id: 0.20,
            lambda_vis: 4e-3,
            lambda_tv: 2e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_id < 0.0 || self.lambda_vis < 0.0 || self.lambda_tv < 0.0 {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Margins {
    /// Decision margin of the logit hinge.
    pub kappa: f64,
    /// Cosine-distance margin of the untargeted identity hinge.
    pub m: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self { kappa: 0.0, m: 0.5 }
    }
}

impl Margins {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa >= 0.0) || !(self.m > 0.0) {
            return Err(Error::invalid("margins require kappa >= 0 and m > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttackMode {
    Untargeted,
    Targeted {
        target: usize,
        prototype: Option<TargetPrototype>,
    },
}

impl AttackMode {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMode::Untargeted => "untargeted",
            AttackMode::Targeted { .. } => "targeted",
        }
    }

    pub fn target(&self) -> Option<usize> {
        match self {
            AttackMode::Untargeted => None,
            AttackMode::Targeted { target, .. } => Some(*target),
        }
    }
}

/// Largest entry of `z` excluding index `skip`; first index wins ties.
fn max_excluding(z: &[f64], skip: usize) -> (usize, f64) {
    z.iter()
        .enumerate()
        .filter(|&(j, _)| j != skip)
        .fold((usize::MAX, f64::NEG_INFINITY), |best, (j, &v)| {
            if v > best.1 {
                (j, v)
            } else {
                best
            }
        })
}

/// Logit hinge. Untargeted: `max(z_y - max_{j!=y} z_j + kappa, 0)`;
/// targeted: `max(max_{j!=t} z_j - z_t + kappa, 0)`.
pub fn margin_loss(logits: &[f64], mode: &AttackMode, label: usize, kappa: f64) -> Result<DiffScalar> {
    if logits.len() < 2 {
        return Err(Error::invalid("margin loss needs at least two logits"));
    }
    let anchor = match mode {
        AttackMode::Untargeted => label,
        AttackMode::Targeted { target, .. } => *target,
    };
    if anchor >= logits.len() {
        return Err(Error::invalid(format!(
            "class index {anchor} out of range for {} logits",
            logits.len()
        )));
    }
    let (other, other_v) = max_excluding(logits, anchor);
    let sign = match mode {
        AttackMode::Untargeted => 1.0,
        AttackMode::Targeted { .. } => -1.0,
    };
    let pre = sign * (logits[anchor] - other_v) + kappa;
    let mut grad = vec![0.0; logits.len()];
    if pre > 0.0 {
        grad[anchor] = sign;
        grad[other] = -sign;
        Ok(DiffScalar { value: pre, grad })
    } else {
        Ok(DiffScalar { value: 0.0, grad })
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1 - <u, v> / (|u| |v|)`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    cosine_distance_with_grad(u, v).map(|(d, _)| d)
}

/// Cosine distance and its gradient w.r.t. `v`.
pub fn cosine_distance_with_grad(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>)> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} components", u.len()),
            got: format!("{}", v.len()),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid("cosine distance of a zero vector"));
    }
    let cos = dot(u, v) / (nu * nv);
    let grad = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| -(a / (nu * nv) - cos * b / (nv * nv)))
        .collect();
    Ok((1.0 - cos, grad))
}

/// Identity-feature loss; gradient w.r.t. `g_adv`.
/// Untargeted: `max(0, m - d(g_clean, g_adv))`; targeted: `d(g_t, g_adv)`.
pub fn identity_loss(mode: &AttackMode, g_clean: &[f64], g_adv: &[f64], m: f64) -> Result<DiffScalar> {
    match mode {
        AttackMode::Untargeted => {
            let (d, grad) = cosine_distance_with_grad(g_clean, g_adv)?;
            let pre = m - d;
            if pre > 0.0 {
                Ok(DiffScalar {
                    value: pre,
                    grad: grad.into_iter().map(|g| -g).collect(),
                })
            } else {
                Ok(DiffScalar::constant(0.0, g_adv.len()))
            }
        }
        AttackMode::Targeted { prototype, .. } => {
            let proto = prototype
                .as_ref()
                .ok_or_else(|| Error::invalid("targeted identity loss requires a target prototype"))?;
            let (d, grad) = cosine_distance_with_grad(&proto.g_t, g_adv)?;
            Ok(DiffScalar { value: d, grad })
        }
    }
}

#[inline]
fn sign_toward_zero(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Anisotropic L1 total variation over the full grid, or only over pairs of
/// texels that both lie inside `mask` when one is given.
pub fn tv_loss(p: &Grid, mask: Option<&Grid>) -> Result<DiffScalar> {
    if let Some(m) = mask {
        p.ensure_same_shape(m)?;
    }
    let (h, w) = p.shape();
    let inside = |r: usize, c: usize| mask.is_none_or(|m| m.get(r, c) == 1.0);
    let mut value = 0.0;
    let mut grad = vec![0.0; p.len()];
    for r in 0..h {
        for c in 0..w {
            let here = p.get(r, c);
            if r + 1 < h && inside(r, c) && inside(r + 1, c) {
                let d = p.get(r + 1, c) - here;
                value += d.abs();
                let s = sign_toward_zero(d);
                grad[(r + 1) * w + c] += s;
                grad[r * w + c] -= s;
            }
            if c + 1 < w && inside(r, c) && inside(r, c + 1) {
                let d = p.get(r, c + 1) - here;
                value += d.abs();
                let s = sign_toward_zero(d);
                grad[r * w + c + 1] += s;
                grad[r * w + c] -= s;
            }
        }
    }
    Ok(DiffScalar { value, grad })
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut k = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            k[i * SSIM_WINDOW + j] = g[i] * g[j];
        }
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Mean SSIM over all fully-contained 7x7 Gaussian windows, optionally with
/// its gradient w.r.t. `x`.
fn ssim_impl(x: &Grid, y: &Grid, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    x.ensure_same_shape(y)?;
    let (h, w) = x.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let k = ssim_kernel();
    let (nh, nw) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let n_win = (nh * nw) as f64;
    let (xv, yv) = (x.values(), y.values());
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; x.len()]);
    for i in 0..nh {
        for j in 0..nw {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for a in 0..SSIM_WINDOW {
                let row = (i + a) * w + j;
                for b in 0..SSIM_WINDOW {
                    let wk = k[a * SSIM_WINDOW + b];
                    let (xa, ya) = (xv[row + b], yv[row + b]);
                    mx += wk * xa;
                    my += wk * ya;
                    sxx += wk * xa * xa;
                    syy += wk * ya * ya;
                    sxy += wk * xa * ya;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            let a1 = 2.0 * mx * my + SSIM_C1;
            let a2 = 2.0 * cxy + SSIM_C2;
            let b1 = mx * mx + my * my + SSIM_C1;
            let b2 = vx + vy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if let Some(g) = grad.as_mut() {
                let d_mx = 2.0 * my * a2 / (b1 * b2) - s * 2.0 * mx / b1;
                let d_vx = -s / b2;
                let d_cxy = 2.0 * a1 / (b1 * b2);
                for a in 0..SSIM_WINDOW {
                    let row = (i + a) * w + j;
                    for b in 0..SSIM_WINDOW {
                        let wk = k[a * SSIM_WINDOW + b];
                        let idx = row + b;
                        g[idx] += wk
                            * (d_mx + 2.0 * (xv[idx] - mx) * d_vx + (yv[idx] - my) * d_cxy)
                            / n_win;
                    }
                }
            }
        }
    }
    Ok((total / n_win, grad))
}

pub fn ssim(x: &Grid, y: &Grid) -> Result<f64> {
    ssim_impl(x, y, false).map(|(s, _)| s)
}

/// `mean((x_hat - x)^2) + 1 - ssim(x_hat, x)`; gradient w.r.t. `x_hat`.
pub fn vis_loss(x_hat: &Grid, x: &Grid) -> Result<DiffScalar> {
    let (s, sgrad) = ssim_impl(x_hat, x, true)?;
    let n = x.len() as f64;
    let mut mse = 0.0;
    let mut grad = sgrad.expect("gradient requested");
    for ((g, a), b) in grad.iter_mut().zip(x_hat.values()).zip(x.values()) {
        let d = a - b;
        mse += d * d;
        *g = 2.0 * d / n - *g;
    }
    Ok(DiffScalar {
        value: mse / n + 1.0 - s,
        grad,
    })
}

/// `adv + lambda_id id + lambda_tv tv + lambda_vis vis`; the gradient is
/// w.r.t. `(adv, id, tv, vis)`.
pub fn total_loss(adv: f64, id: f64, tv: f64, vis: f64, weights: &LossWeights) -> Result<DiffScalar> {
    for (name, v) in [("adv", adv), ("id", id), ("tv", tv), ("vis", vis)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: format!("{name} loss component"),
            });
        }
    }
    Ok(DiffScalar {
        value: adv + weights.lambda_id * id + weights.lambda_tv * tv + weights.lambda_vis * vis,
        grad: vec![1.0, weights.lambda_id, weights.lambda_tv, weights.lambda_vis],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{fd_gradient, max_relative_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn proto(g_t: Vec<f64>) -> TargetPrototype {
        TargetPrototype { g_t, target: 0 }
    }

    #[test]
    fn margin_examples() {
        let un = AttackMode::Untargeted;
        assert_eq!(margin_loss(&[2.0, 5.0], &un, 0, 0.0).unwrap().value, 0.0);
        assert_eq!(margin_loss(&[5.0, 2.0], &un, 0, 0.0).unwrap().value, 3.0);
        let tar = AttackMode::Targeted { target: 0, prototype: None };
        assert_eq!(margin_loss(&[5.0, 2.0], &tar, 1, 0.0).unwrap().value, 0.0);
        assert_eq!(margin_loss(&[2.0, 5.0], &tar, 1, 0.5).unwrap().value, 3.5);
    }

    #[test]
    fn margin_rejects_bad_inputs() {
        assert!(margin_loss(&[1.0], &AttackMode::Untargeted, 0, 0.0).is_err());
        assert!(margin_loss(&[1.0, 2.0], &AttackMode::Untargeted, 2, 0.0).is_err());
        let tar = AttackMode::Targeted { target: 5, prototype: None };
        assert!(margin_loss(&[1.0, 2.0], &tar, 0, 0.0).is_err());
    }

    #[test]
    fn margin_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..20 {
            let z: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mode = if i % 2 == 0 {
                AttackMode::Untargeted
            } else {
                AttackMode::Targeted { target: 3, prototype: None }
            };
            let l = margin_loss(&z, &mode, 1, 0.3).unwrap();
            let fd = fd_gradient(|v| margin_loss(v, &mode, 1, 0.3).unwrap().value, &z, 1e-6).unwrap();
            assert!(max_relative_error(&l.grad, &fd) < 1e-4);
        }
    }

    proptest! {
        #[test]
        fn untargeted_zero_iff_misclassified_with_margin(
            z in proptest::collection::vec(-5.0f64..5.0, 2..8),
            y_raw in 0usize..8,
            kappa in 0.0f64..1.0,
        ) {
            let y = y_raw % z.len();
            let l = margin_loss(&z, &AttackMode::Untargeted, y, kappa).unwrap().value;
            let best_other = (0..z.len()).filter(|&j| j != y).map(|j| z[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, best_other - z[y] >= kappa);
        }

        #[test]
        fn targeted_zero_iff_target_dominates(
            z in proptest::collection::vec(-5.0f64..5.0, 2..8),
            t_raw in 0usize..8,
            kappa in 0.0f64..1.0,
        ) {
            let t = t_raw % z.len();
            let mode = AttackMode::Targeted { target: t, prototype: None };
            let l = margin_loss(&z, &mode, 0, kappa).unwrap().value;
            let best_other = (0..z.len()).filter(|&j| j != t).map(|j| z[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, z[t] - best_other >= kappa);
        }
    }

    #[test]
    fn cosine_examples() {
        let u = [1.0, 2.0, -0.5];
        assert!(cosine_distance(&u, &u).unwrap().abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        assert!((cosine_distance(&u, &neg).unwrap() - 2.0).abs() < 1e-15);
        assert!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn identity_examples() {
        let g = [0.6, 0.8];
        let un = AttackMode::Untargeted;
        assert!((identity_loss(&un, &g, &g, 0.5).unwrap().value - 0.5).abs() < 1e-15);
        assert_eq!(identity_loss(&un, &g, &[0.8, -0.6], 0.5).unwrap().value, 0.0);
        let tar = AttackMode::Targeted { target: 0, prototype: Some(proto(g.to_vec())) };
        assert!(identity_loss(&tar, &[1.0, 0.0], &g, 0.5).unwrap().value.abs() < 1e-15);
        let missing = AttackMode::Targeted { target: 0, prototype: None };
        assert!(identity_loss(&missing, &g, &g, 0.5).is_err());
    }

    #[test]
    fn identity_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..20 {
            let mut unit = |n: usize| {
                let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let s = norm(&v);
                v.into_iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let (a, b, t) = (unit(6), unit(6), unit(6));
            let mode = if i % 2 == 0 {
                AttackMode::Untargeted
            } else {
                AttackMode::Targeted { target: 0, prototype: Some(proto(t)) }
            };
            // m = 1.5 keeps the untargeted hinge active for most draws.
            let l = identity_loss(&mode, &a, &b, 1.5).unwrap();
            let fd = fd_gradient(|v| identity_loss(&mode, &a, v, 1.5).unwrap().value, &b, 1e-6).unwrap();
            assert!(max_relative_error(&l.grad, &fd) < 1e-4, "{:?} vs {:?}", l.grad, fd);
        }
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_loss(&Grid::filled(4, 5, 0.3), None).unwrap().value, 0.0);
        let g = Grid::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(tv_loss(&g, None).unwrap().value, 2.0);
        let ramp = Grid::from_fn(1, 9, |_, c| 0.1 * c as f64);
        assert!((tv_loss(&ramp, None).unwrap().value - 0.8).abs() < 1e-12);
    }

    #[test]
    fn tv_mask_restriction() {
        let g = Grid::new(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let m = Grid::new(1, 3, vec![1.0, 1.0, 0.0]).unwrap();
        assert_eq!(tv_loss(&g, Some(&m)).unwrap().value, 1.0);
        assert_eq!(tv_loss(&g, None).unwrap().value, 2.0);
    }

    #[test]
    fn tv_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let g = Grid::from_fn(4, 4, |_, _| rng.random_range(0.0..1.0));
            let l = tv_loss(&g, None).unwrap();
            let fd = fd_gradient(|v| tv_loss(&Grid::new(4, 4, v.to_vec()).unwrap(), None).unwrap().value, g.values(), 1e-5)
                .unwrap();
            assert!(max_relative_error(&l.grad, &fd) < 1e-4, "{:?} vs {:?}", l.grad, fd);
        }
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Grid::from_fn(12, 10, |_, _| rng.random_range(0.0..1.0));
        let y = Grid::from_fn(12, 10, |_, _| rng.random_range(0.0..1.0));
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(vis_loss(&x, &x).unwrap().value.abs() < 1e-12, true);
        assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
        assert!(ssim(&x, &Grid::zeros(12, 11)).is_err());
    }

    #[test]
    fn vis_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = Grid::from_fn(8, 8, |_, _| rng.random_range(0.0..1.0));
            let xh = Grid::from_fn(8, 8, |_, _| rng.random_range(0.0..1.0));
            let l = vis_loss(&xh, &x).unwrap();
            let fd = fd_gradient(|v| vis_loss(&Grid::new(8, 8, v.to_vec()).unwrap(), &x).unwrap().value, xh.values(), 1e-5)
                .unwrap();
            assert!(max_relative_error(&l.grad, &fd) < 1e-4);
        }
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &w).unwrap().value, 0.0);
        assert!((total_loss(1.0, 1.0, 1.0, 1.0, &w).unwrap().value - 1.20402).abs() < 1e-12);
        let zero = LossWeights { lambda_id: 0.0, lambda_vis: 0.0, lambda_tv: 0.0 };
        assert_eq!(total_loss(0.7, 3.0, 9.0, 2.0, &zero).unwrap().value, 0.7);
        match total_loss(1.0, f64::NAN, 0.0, 0.0, &w) {
            Err(Error::NonFinite { what }) => assert!(what.contains("id")),
            other => panic!("{other:?}"),
        }
    }
}
