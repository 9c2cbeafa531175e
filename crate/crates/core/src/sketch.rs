//! Edge sketches that condition the reconstruction branch.
//!
//! The reconstruction input is the union of two binary maps: Canny edges of
//! the unlabeled image, and the dilated class boundary of its pseudo-label.

use std::collections::VecDeque;

use crate::config::TrainConfig;
use crate::error::{shape_err, Error, Result};
use crate::types::{BinaryMask, Image, LabelMask};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SketchParams {
    /// Hysteresis thresholds on the per-pixel gradient magnitude of the
    /// `[0, 1]` luminance.
    pub canny_low: f64,
    pub canny_high: f64,
    pub gaussian_sigma: f64,
    pub dilation_radius: usize,
}

impl Default for SketchParams {
    fn default() -> Self {
        Self {
            canny_low: 0.1,
            canny_high: 0.2,
            gaussian_sigma: 1.0,
            dilation_radius: 1,
        }
    }
}

impl SketchParams {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            canny_low: cfg.canny_low,
            canny_high: cfg.canny_high,
            gaussian_sigma: cfg.gaussian_sigma,
            dilation_radius: cfg.dilation_radius,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.canny_low >= 0.0 && self.canny_low < self.canny_high) {
            return Err(Error::InvalidValue(format!(
                "degenerate canny thresholds low={} high={}",
                self.canny_low, self.canny_high
            )));
        }
        if !(self.gaussian_sigma >= 0.0) {
            return Err(Error::InvalidValue("gaussian_sigma must be >= 0".into()));
        }
        if self.dilation_radius < 1 {
            return Err(Error::InvalidValue("dilation_radius must be >= 1".into()));
        }
        Ok(())
    }
}

/// Normalized, odd-length Gaussian kernel covering +/- 3 sigma.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

#[inline]
fn clamp_idx(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

/// Separable blur with replicated borders.
pub(crate) fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return src.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = clamp_idx(x as i64 + i as i64 - r, w);
                acc += kv * src[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = clamp_idx(y as i64 + i as i64 - r, h);
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Sobel derivatives scaled by 1/8, so a unit ramp has slope one.
fn sobel(src: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |y: i64, x: i64| src[clamp_idx(y, h) * w + clamp_idx(x, w)];
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let dx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let dy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            gx[y as usize * w + x as usize] = dx / 8.0;
            gy[y as usize * w + x as usize] = dy / 8.0;
        }
    }
    (gx, gy)
}

/// Canny edge detector: blur, Sobel gradient, non-maximum suppression along
/// the quantized gradient direction, then hysteresis with 8-connectivity.
pub fn canny_edges(img: &Image, p: &SketchParams) -> Result<BinaryMask> {
    p.validate()?;
    let (h, w) = (img.height(), img.width());
    let lum = img.luminance();
    let blurred = gaussian_blur(&lum, h, w, p.gaussian_sigma);
    let (gx, gy) = sobel(&blurred, h, w);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();

    let mag_at = |y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };

    let mut thin = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let m = mag[y * w + x];
            if m == 0.0 {
                continue;
            }
            let angle = gy[y * w + x].atan2(gx[y * w + x]).to_degrees();
            let angle = if angle < 0.0 { angle + 180.0 } else { angle };
            // neighbor offsets (dy, dx) along the gradient direction
            let (dy, dx) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let (yi, xi) = (y as i64, x as i64);
            if m >= mag_at(yi + dy, xi + dx) && m >= mag_at(yi - dy, xi - dx) {
                thin[y * w + x] = m;
            }
        }
    }

    let mut out = BinaryMask::zeros(h, w);
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if thin[y * w + x] >= p.canny_high {
                out.set(y, x, true);
                queue.push_back((y, x));
            }
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                if !out.get(ny, nx) && thin[ny * w + nx] >= p.canny_low {
                    out.set(ny, nx, true);
                    queue.push_back((ny, nx));
                }
            }
        }
    }
    Ok(out)
}

/// Foreground pixels with at least one 4-neighbor of a different class.
///
/// For a piecewise-constant label map this has the same support as running
/// an intensity edge detector on it, without any thresholds.
pub fn mask_boundary(mask: &LabelMask) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    BinaryMask::from_fn(h, w, |y, x| {
        let c = mask.get(y, x);
        if c == 0 {
            return false;
        }
        (y > 0 && mask.get(y - 1, x) != c)
            || (y + 1 < h && mask.get(y + 1, x) != c)
            || (x > 0 && mask.get(y, x - 1) != c)
            || (x + 1 < w && mask.get(y, x + 1) != c)
    })
}

/// Dilation with a `(2r+1) x (2r+1)` square element, clipped at the borders.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let mut rows = BinaryMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            rows.set(y, x, (lo..=hi).any(|xx| mask.get(y, xx)));
        }
    }
    BinaryMask::from_fn(h, w, |y, x| {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h - 1);
        (lo..=hi).any(|yy| rows.get(yy, x))
    })
}

/// Pixelwise OR.
pub fn merge_sketches(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask> {
    if !a.same_shape(b) {
        return Err(shape_err(format!(
            "sketch shapes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x || y).collect();
    BinaryMask::new(a.height(), a.width(), data)
}

/// Sketch image fed to the reconstruction branch: merged sketch replicated
/// across the image's channels. With `disable_aux_sketch` only the dilated
/// pseudo-label boundary is used.
pub fn build_reflection_input(
    img: &Image,
    pseudo_label: &LabelMask,
    p: &SketchParams,
    cfg: &TrainConfig,
) -> Result<Image> {
    if img.height() != pseudo_label.height() || img.width() != pseudo_label.width() {
        return Err(shape_err("image and pseudo-label are not aligned"));
    }
    p.validate()?;
    let label_sketch = dilate(&mask_boundary(pseudo_label), p.dilation_radius);
    let sketch = if cfg.disable_aux_sketch {
        label_sketch
    } else {
        merge_sketches(&canny_edges(img, p)?, &label_sketch)?
    };
    binary_to_image(&sketch, img.channels())
}

pub fn binary_to_image(mask: &BinaryMask, channels: usize) -> Result<Image> {
    let plane: Vec<f64> = mask.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mut data = Vec::with_capacity(plane.len() * channels);
    for _ in 0..channels {
        data.extend_from_slice(&plane);
    }
    Image::new(mask.height(), mask.width(), channels, data)
}
