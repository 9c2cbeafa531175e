//! Training objectives with hand-derived gradients.
//!
//! Every loss returns its value together with the gradient with respect to
//! its differentiable input, in the same planar layout as that input.

use crate::config::LossWeights;
use crate::error::{shape_err, Error, Result};
use crate::types::{Image, LabelMask, ProbMap};

/// Dice smoothing term, applied to numerator and denominator.
pub const DICE_EPS: f64 = 1e-5;
const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Per-iteration loss components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub l_a: f64,
    pub l_b: f64,
    pub l_rec: f64,
    pub l_g: f64,
    pub l_all: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window_size: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window_size: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    fn validate(&self) -> Result<()> {
        if self.window_size < 3 || self.window_size % 2 == 0 {
            return Err(Error::InvalidValue(format!(
                "ssim window {} must be odd and >= 3",
                self.window_size
            )));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.sigma > 0.0 && self.dynamic_range > 0.0) {
            return Err(Error::InvalidValue("ssim constants must be positive".into()));
        }
        Ok(())
    }

    fn window(&self) -> Vec<f64> {
        let r = (self.window_size / 2) as i64;
        let mut k: Vec<f64> = (-r..=r)
            .map(|i| (-(i * i) as f64 / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= s);
        k
    }
}

/// Separable "valid" correlation: output is `(h-k+1) x (w-k+1)`.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (i, kv) in k.iter().enumerate() {
            let src_row = &tmp[(y + i) * ow..(y + i + 1) * ow];
            let dst = &mut out[y * ow..(y + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += kv * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `oh x ow` map back to `h x w`.
fn filter_valid_adjoint(g: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..oh {
        for (i, kv) in k.iter().enumerate() {
            let src = &g[y * ow..(y + 1) * ow];
            let dst = &mut tmp[(y + i) * ow..(y + i + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                out[y * w + x + i] += kv * v;
            }
        }
    }
    out
}

struct SsimPlane {
    map: Vec<f64>,
    /// dS/dmu_x, dS/dE[x^2], dS/dE[xy] per window position.
    d_mu: Vec<f64>,
    d_xx: Vec<f64>,
    d_xy: Vec<f64>,
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, p: &SsimParams, k: &[f64]) -> SsimPlane {
    let c1 = (p.k1 * p.dynamic_range).powi(2);
    let c2 = (p.k2 * p.dynamic_range).powi(2);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(x, h, w, k);
    let mu_y = filter_valid(y, h, w, k);
    let e_xx = filter_valid(&xx, h, w, k);
    let e_yy = filter_valid(&yy, h, w, k);
    let e_xy = filter_valid(&xy, h, w, k);

    let m = mu_x.len();
    let mut out = SsimPlane {
        map: vec![0.0; m],
        d_mu: vec![0.0; m],
        d_xx: vec![0.0; m],
        d_xy: vec![0.0; m],
    };
    for i in 0..m {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let a1 = 2.0 * mx * my + c1;
        let a2 = 2.0 * (e_xy[i] - mx * my) + c2;
        let b1 = mx * mx + my * my + c1;
        let b2 = (e_xx[i] - mx * mx) + (e_yy[i] - my * my) + c2;
        let s = a1 * a2 / (b1 * b2);
        let ds_a1 = a2 / (b1 * b2);
        let ds_a2 = a1 / (b1 * b2);
        let ds_b1 = -s / b1;
        let ds_b2 = -s / b2;
        out.map[i] = s;
        out.d_mu[i] = ds_a1 * 2.0 * my - ds_a2 * 2.0 * my + ds_b1 * 2.0 * mx - ds_b2 * 2.0 * mx;
        out.d_xx[i] = ds_b2;
        out.d_xy[i] = 2.0 * ds_a2;
    }
    out
}

/// Gaussian-window SSIM map of one channel pair over valid window positions.
pub fn ssim_map(x: &[f64], y: &[f64], h: usize, w: usize, p: &SsimParams) -> Result<Vec<f64>> {
    p.validate()?;
    if h < p.window_size || w < p.window_size {
        return Err(shape_err(format!(
            "{h}x{w} plane is smaller than the {} px SSIM window",
            p.window_size
        )));
    }
    Ok(ssim_plane(x, y, h, w, p, &p.window()).map)
}

/// `1 - mean SSIM` over planar `channels x h x w` buffers; gradient is
/// with respect to `proxy` only.
pub fn ssim_loss_planar(
    proxy: &[f64],
    target: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    p: &SsimParams,
) -> Result<LossOutput> {
    p.validate()?;
    if proxy.len() != channels * h * w || target.len() != proxy.len() {
        return Err(shape_err("ssim inputs do not match the stated shape"));
    }
    if h < p.window_size || w < p.window_size {
        return Err(shape_err(format!(
            "{h}x{w} image is smaller than the {} px SSIM window",
            p.window_size
        )));
    }
    let k = p.window();
    let n = h * w;
    let positions = (h + 1 - k.len()) * (w + 1 - k.len());
    let scale = -1.0 / (channels * positions) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; proxy.len()];
    for c in 0..channels {
        let x = &proxy[c * n..(c + 1) * n];
        let y = &target[c * n..(c + 1) * n];
        let plane = ssim_plane(x, y, h, w, p, &k);
        total += plane.map.iter().sum::<f64>();
        let g_mu = filter_valid_adjoint(&plane.d_mu, h, w, &k);
        let g_xx = filter_valid_adjoint(&plane.d_xx, h, w, &k);
        let g_xy = filter_valid_adjoint(&plane.d_xy, h, w, &k);
        for i in 0..n {
            grad[c * n + i] = scale * (g_mu[i] + 2.0 * x[i] * g_xx[i] + y[i] * g_xy[i]);
        }
    }
    Ok(LossOutput {
        value: 1.0 - total / (channels * positions) as f64,
        grad,
    })
}

/// Reconstruction loss of a proxy image against its (constant) target.
pub fn ssim_loss(proxy: &Image, target: &Image, p: &SsimParams) -> Result<LossOutput> {
    if !proxy.same_shape(target) {
        return Err(shape_err("proxy and target differ in shape"));
    }
    ssim_loss_planar(
        proxy.data(),
        target.data(),
        proxy.channels(),
        proxy.height(),
        proxy.width(),
        p,
    )
}

fn check_target(pred: &ProbMap, target: &LabelMask) -> Result<()> {
    if pred.height() != target.height() || pred.width() != target.width() {
        return Err(shape_err("prediction and target differ in spatial shape"));
    }
    if target.max_class() as usize >= pred.classes() {
        return Err(Error::InvalidValue(format!(
            "target class {} out of range for {} channels",
            target.max_class(),
            pred.classes()
        )));
    }
    Ok(())
}

/// Mean pixel cross-entropy (natural log); gradient w.r.t. probabilities.
pub fn cross_entropy(pred: &ProbMap, target: &LabelMask) -> Result<LossOutput> {
    check_target(pred, target)?;
    let n = pred.height() * pred.width();
    let inv = 1.0 / n as f64;
    let mut grad = vec![0.0; pred.data().len()];
    let mut total = 0.0;
    for (i, &c) in target.data().iter().enumerate() {
        let idx = c as usize * n + i;
        let p = pred.data()[idx];
        if p > LOG_FLOOR {
            total -= p.ln();
            grad[idx] = -inv / p;
        } else {
            total -= LOG_FLOOR.ln();
        }
    }
    Ok(LossOutput {
        value: total * inv,
        grad,
    })
}

/// Soft Dice loss macro-averaged over all channels, background included,
/// with squared-sum denominator and [`DICE_EPS`] smoothing.
pub fn dice_loss(pred: &ProbMap, target: &LabelMask) -> Result<LossOutput> {
    check_target(pred, target)?;
    let k_tot = pred.classes();
    let n = pred.height() * pred.width();
    let mut grad = vec![0.0; pred.data().len()];
    let mut total = 0.0;
    for k in 0..k_tot {
        let probs = &pred.data()[k * n..(k + 1) * n];
        let mut inter = 0.0;
        let mut p_sq = 0.0;
        let mut g_sum = 0.0;
        for (p, &t) in probs.iter().zip(target.data()) {
            let g = if t as usize == k { 1.0 } else { 0.0 };
            inter += p * g;
            p_sq += p * p;
            g_sum += g;
        }
        let num = 2.0 * inter + DICE_EPS;
        let den = p_sq + g_sum + DICE_EPS;
        total += num / den;
        for (i, (p, &t)) in probs.iter().zip(target.data()).enumerate() {
            let g = if t as usize == k { 1.0 } else { 0.0 };
            let d = 2.0 * g / den - num * 2.0 * p / (den * den);
            grad[k * n + i] = -d / k_tot as f64;
        }
    }
    Ok(LossOutput {
        value: 1.0 - total / k_tot as f64,
        grad,
    })
}

/// Cross-entropy plus Dice on the same prediction.
pub fn seg_loss(pred: &ProbMap, target: &LabelMask) -> Result<LossOutput> {
    let ce = cross_entropy(pred, target)?;
    let dice = dice_loss(pred, target)?;
    let grad = ce.grad.iter().zip(&dice.grad).map(|(a, b)| a + b).collect();
    Ok(LossOutput {
        value: ce.value + dice.value,
        grad,
    })
}

/// Pulls a probability-space gradient back through the channel softmax.
pub fn softmax_backward(probs: &ProbMap, grad: &[f64]) -> Vec<f64> {
    let k_tot = probs.classes();
    let n = probs.height() * probs.width();
    let p = probs.data();
    let mut out = vec![0.0; p.len()];
    for i in 0..n {
        let dot: f64 = (0..k_tot).map(|k| p[k * n + i] * grad[k * n + i]).sum();
        for k in 0..k_tot {
            out[k * n + i] = p[k * n + i] * (grad[k * n + i] - dot);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceLoss {
    pub value: f64,
    pub grad_student: Vec<f64>,
    /// Always zero: the teacher target is detached.
    pub grad_teacher: Vec<f64>,
}

/// Mean squared difference between the student's less-confident region and
/// the detached teacher region.
pub fn guidance_loss(student_lc: &ProbMap, teacher_mc: &ProbMap) -> Result<GuidanceLoss> {
    if !student_lc.same_shape(teacher_mc) {
        return Err(shape_err("guidance inputs differ in shape"));
    }
    let n = student_lc.data().len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(student_lc.data().len());
    for (s, t) in student_lc.data().iter().zip(teacher_mc.data()) {
        let d = s - t;
        total += d * d;
        grad.push(2.0 * d / n);
    }
    Ok(GuidanceLoss {
        value: total / n,
        grad_student: grad,
        grad_teacher: vec![0.0; teacher_mc.data().len()],
    })
}

/// `(l_a + l_b) / 2 + alpha * l_rec + beta * l_g`, evaluated in that order.
pub fn total_loss(l_a: f64, l_b: f64, l_rec: f64, l_g: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("l_a", l_a), ("l_b", l_b), ("l_rec", l_rec), ("l_g", l_g)] {
        if !v.is_finite() {
            return Err(Error::InvalidValue(format!("{name} is not finite ({v})")));
        }
    }
    Ok((l_a + l_b) / 2.0 + w.alpha * l_rec + w.beta * l_g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image {
        Image::from_fn(h, w, c, |_, _, _| rng.random_range(0.05..0.95)).unwrap()
    }

    #[test]
    fn ssim_identity_is_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_image(&mut rng, 16, 16, 2);
        let l = ssim_loss(&x, &x, &SsimParams::default()).unwrap();
        assert!(l.value.abs() < 1e-6);
        assert!(l.grad.iter().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let zero = Image::filled(12, 12, 1, 0.0).unwrap();
        let one = Image::filled(12, 12, 1, 1.0).unwrap();
        let p = SsimParams::default();
        // mu_x = 0, mu_y = 1, no variance: SSIM = C1 / (1 + C1)
        let c1 = (p.k1 * p.dynamic_range).powi(2);
        let expected = 1.0 - c1 / (1.0 + c1);
        let l = ssim_loss(&zero, &one, &p).unwrap();
        assert!((l.value - expected).abs() < 1e-12, "{} vs {expected}", l.value);
    }

    #[test]
    fn ssim_bounded_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = SsimParams::default();
        for _ in 0..5 {
            let x = rand_image(&mut rng, 14, 13, 1);
            let y = rand_image(&mut rng, 14, 13, 1);
            let l = ssim_loss(&x, &y, &p).unwrap().value;
            assert!((0.0..=2.0).contains(&l));
            let a = ssim_map(x.data(), y.data(), 14, 13, &p).unwrap();
            let b = ssim_map(y.data(), x.data(), 14, 13, &p).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ssim_rejects_small_images() {
        let x = Image::filled(8, 20, 1, 0.5).unwrap();
        assert!(ssim_loss(&x, &x, &SsimParams::default()).is_err());
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = SsimParams {
            window_size: 5,
            ..Default::default()
        };
        let x = rand_image(&mut rng, 8, 9, 2);
        let y = rand_image(&mut rng, 8, 9, 2);
        let l = ssim_loss(&x, &y, &p).unwrap();
        let h = 1e-6;
        for i in (0..x.data().len()).step_by(7) {
            let mut up = x.data().to_vec();
            let mut dn = x.data().to_vec();
            up[i] += h;
            dn[i] -= h;
            let fu = ssim_loss_planar(&up, y.data(), 2, 8, 9, &p).unwrap().value;
            let fd = ssim_loss_planar(&dn, y.data(), 2, 8, 9, &p).unwrap().value;
            let num = (fu - fd) / (2.0 * h);
            assert!((num - l.grad[i]).abs() < 1e-7 + 1e-4 * num.abs(), "{i}: {num} vs {}", l.grad[i]);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let pred = ProbMap::from_raw(4, 3, 3, vec![0.25; 36]).unwrap();
        let target = LabelMask::from_fn(3, 3, |y, x| ((y + x) % 4) as u8);
        let ce = cross_entropy(&pred, &target).unwrap();
        assert!((ce.value - 4f64.ln()).abs() < 1e-12);
        assert!((ce.value - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn perfect_prediction_loss_is_near_zero() {
        let target = LabelMask::from_fn(4, 4, |y, _| (y % 3) as u8);
        let pred = ProbMap::one_hot(&target, 3).unwrap();
        let l = seg_loss(&pred, &target).unwrap();
        assert!(l.value.abs() < 1e-5, "{}", l.value);
    }

    #[test]
    fn disjoint_hard_prediction_dice_is_one_per_class() {
        // target: class 1 on the left half, prediction: class 1 on the right
        let target = LabelMask::from_fn(4, 4, |_, x| u8::from(x < 2));
        let predicted = LabelMask::from_fn(4, 4, |_, x| u8::from(x >= 2));
        let pred = ProbMap::one_hot(&predicted, 2).unwrap();
        let d = dice_loss(&pred, &target).unwrap();
        // both classes fully disjoint: per-class dice = eps / (8 + 8 + eps)
        let per_class = DICE_EPS / (16.0 + DICE_EPS);
        assert!((d.value - (1.0 - per_class)).abs() < 1e-12);
        assert!(d.value > 1.0 - 1e-6);
    }

    #[test]
    fn seg_loss_rejects_bad_class() {
        let pred = ProbMap::from_raw(2, 2, 2, vec![0.5; 8]).unwrap();
        let target = LabelMask::new(2, 2, vec![0, 1, 2, 0]).unwrap();
        assert!(seg_loss(&pred, &target).is_err());
    }

    fn fd_check_logits(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, h, w) = (3, 4, 4);
        let logits: Vec<f64> = (0..k * h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target = LabelMask::from_fn(h, w, |_, _| rng.random_range(0..k as u8));
        let eval = |z: &[f64]| -> f64 {
            let probs = softmax_f64(k, h, w, z);
            seg_loss(&probs, &target).unwrap().value
        };
        let probs = softmax_f64(k, h, w, &logits);
        let l = seg_loss(&probs, &target).unwrap();
        let g = softmax_backward(&probs, &l.grad);
        let step = 1e-5;
        for i in 0..logits.len() {
            let mut up = logits.clone();
            let mut dn = logits.clone();
            up[i] += step;
            dn[i] -= step;
            let num = (eval(&up) - eval(&dn)) / (2.0 * step);
            let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-8);
            assert!(rel < 1e-4 || (num - g[i]).abs() < 1e-9, "seed {seed} idx {i}: {num} vs {}", g[i]);
        }
    }

    pub(crate) fn softmax_f64(k: usize, h: usize, w: usize, z: &[f64]) -> ProbMap {
        let n = h * w;
        let mut out = vec![0.0; z.len()];
        for p in 0..n {
            let m = (0..k).map(|c| z[c * n + p]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..k).map(|c| (z[c * n + p] - m).exp()).sum();
            for c in 0..k {
                out[c * n + p] = (z[c * n + p] - m).exp() / s;
            }
        }
        ProbMap::from_raw(k, h, w, out).unwrap()
    }

    #[test]
    fn seg_loss_gradient_matches_finite_differences() {
        for seed in 0..5 {
            fd_check_logits(seed);
        }
    }

    #[test]
    fn guidance_loss_examples() {
        let a = ProbMap::from_raw(2, 2, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
        let l = guidance_loss(&a, &a).unwrap();
        assert_eq!(l.value, 0.0);

        let s = ProbMap::zeros(2, 2, 2);
        let mut t = ProbMap::zeros(2, 2, 2);
        t.data_mut()[5] = 1.0;
        let l = guidance_loss(&s, &t).unwrap();
        assert_eq!(l.value, 1.0 / 8.0);
        assert!(l.grad_teacher.iter().all(|&g| g == 0.0));
        assert_eq!(l.grad_student[5], -2.0 / 8.0);
        assert!(guidance_loss(&s, &ProbMap::zeros(3, 2, 2)).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights {
            alpha: 0.01,
            beta: 0.01,
        };
        let v = total_loss(1.0, 1.0, 0.5, 0.2, &w).unwrap();
        assert!((v - 1.007).abs() < 1e-15);
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
        };
        assert_eq!(total_loss(0.3, 0.7, 9.0, 9.0, &zero).unwrap(), 0.5);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        assert!(total_loss(f64::NAN, 0.0, 0.0, 0.0, &w).is_err());
        assert!(total_loss(0.0, 0.0, f64::INFINITY, 0.0, &w).is_err());
    }
}
