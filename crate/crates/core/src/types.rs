//! Array types shared by every stage of the pipeline.
//!
//! All multi-channel arrays are stored channel-planar (`c`, then `y`, then
//! `x`), which is the layout the network consumes and the layout the
//! puzzle-mixing code permutes patch-by-patch.

use crate::error::{shape_err, Error, Result};

/// Real-valued image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height < 2 || width < 2 || channels < 1 {
            return Err(shape_err(format!(
                "image must be at least 2x2x1, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(shape_err(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidValue(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Channel mean, the luminance used for edge detection.
    pub fn luminance(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; n];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.plane(c)) {
                *o += v;
            }
        }
        let inv = 1.0 / self.channels as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// Integer class map; `0` is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err(format!(
                "mask buffer has {} values, expected {}",
                data.len(),
                height * width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Rejects masks containing a class above `k_fg`.
    pub fn check_classes(&self, k_fg: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v as usize > k_fg) {
            Some(v) => Err(Error::InvalidValue(format!(
                "mask class {v} exceeds foreground class count {k_fg}"
            ))),
            None => Ok(()),
        }
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }
}

/// Per-pixel class probabilities, `classes x height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ProbMap {
    /// Wraps raw values without checking the simplex invariant. Masked
    /// region slices (zeroed outside a mask) are stored in this type too.
    pub fn from_raw(classes: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != classes * height * width {
            return Err(shape_err(format!(
                "probability buffer has {} values, expected {}",
                data.len(),
                classes * height * width
            )));
        }
        Ok(Self {
            classes,
            height,
            width,
            data,
        })
    }

    pub fn zeros(classes: usize, height: usize, width: usize) -> Self {
        Self {
            classes,
            height,
            width,
            data: vec![0.0; classes * height * width],
        }
    }

    /// Channel softmax of `classes x height x width` logits.
    pub fn softmax(classes: usize, height: usize, width: usize, logits: &[f32]) -> Result<Self> {
        let n = height * width;
        if logits.len() != classes * n {
            return Err(shape_err("logit buffer does not match map shape"));
        }
        let mut data = vec![0.0f64; classes * n];
        for p in 0..n {
            let mut m = f64::NEG_INFINITY;
            for k in 0..classes {
                m = m.max(logits[k * n + p] as f64);
            }
            let mut s = 0.0;
            for k in 0..classes {
                let e = (logits[k * n + p] as f64 - m).exp();
                data[k * n + p] = e;
                s += e;
            }
            for k in 0..classes {
                data[k * n + p] /= s;
            }
        }
        Ok(Self {
            classes,
            height,
            width,
            data,
        })
    }

    pub fn one_hot(mask: &LabelMask, classes: usize) -> Result<Self> {
        mask.check_classes(classes.saturating_sub(1))?;
        let n = mask.height * mask.width;
        let mut data = vec![0.0; classes * n];
        for (p, &c) in mask.data.iter().enumerate() {
            data[c as usize * n + p] = 1.0;
        }
        Self::from_raw(classes, mask.height, mask.width, data)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, k: usize, y: usize, x: usize) -> f64 {
        self.data[(k * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &ProbMap) -> bool {
        self.classes == other.classes && self.height == other.height && self.width == other.width
    }

    /// Largest per-pixel deviation of the channel sum from one; also fails
    /// on entries outside `[0, 1]`.
    pub fn check_simplex(&self, tol: f64) -> Result<()> {
        let n = self.height * self.width;
        for p in 0..n {
            let mut s = 0.0;
            for k in 0..self.classes {
                let v = self.data[k * n + p];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidValue(format!("probability {v} outside [0, 1]")));
                }
                s += v;
            }
            if (s - 1.0).abs() > tol {
                return Err(Error::InvalidValue(format!("pixel {p} sums to {s}")));
            }
        }
        Ok(())
    }

    /// Per-pixel maximum over channels.
    pub fn max_confidence(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![f64::NEG_INFINITY; n];
        for k in 0..self.classes {
            for (o, v) in out.iter_mut().zip(&self.data[k * n..(k + 1) * n]) {
                *o = o.max(*v);
            }
        }
        out
    }
}

/// `{0,1}` pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err(format!(
                "binary mask buffer has {} values, expected {}",
                data.len(),
                height * width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.same_shape(other) && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}
