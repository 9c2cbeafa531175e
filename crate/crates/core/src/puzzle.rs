//! Multi-scale puzzle mixing of a labeled/unlabeled pair.
//!
//! Both images are cut into the same `n x n` grid. Mixed image `a` takes the
//! labeled patch wherever the layout assignment is set and the unlabeled
//! patch elsewhere; mixed image `b` is the exact complement. Patches never
//! move, so the unlabeled prediction can be reassembled from the two mixed
//! predictions without interpolation.

use std::fmt;

use rand::seq::index;
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::types::{Image, LabelMask, ProbMap};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixLayout {
    n: usize,
    row_bounds: Vec<usize>,
    col_bounds: Vec<usize>,
    /// Row-major over grid positions; `true` = labeled patch goes to `a`.
    assignment: Vec<bool>,
}

fn bounds(len: usize, n: usize) -> Vec<usize> {
    (0..=n).map(|k| k * len / n).collect()
}

impl MixLayout {
    /// Layout with an explicit assignment. Used for exhaustive tests and to
    /// replay logged layouts.
    pub fn with_assignment(h: usize, w: usize, n: usize, assignment: Vec<bool>) -> Result<Self> {
        if n == 0 || n > h.min(w) {
            return Err(Error::InvalidValue(format!(
                "grid size {n} must lie in 1..={}",
                h.min(w)
            )));
        }
        if assignment.len() != n * n {
            return Err(shape_err(format!(
                "assignment has {} entries, expected {}",
                assignment.len(),
                n * n
            )));
        }
        Ok(Self {
            n,
            row_bounds: bounds(h, n),
            col_bounds: bounds(w, n),
            assignment,
        })
    }

    /// Single patch, labeled image in `a`: mixing becomes the identity.
    pub fn identity(h: usize, w: usize) -> Self {
        Self::with_assignment(h, w, 1, vec![true]).expect("1x1 grid always fits")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn height(&self) -> usize {
        *self.row_bounds.last().unwrap()
    }

    pub fn width(&self) -> usize {
        *self.col_bounds.last().unwrap()
    }

    pub fn row_bounds(&self) -> &[usize] {
        &self.row_bounds
    }

    pub fn col_bounds(&self) -> &[usize] {
        &self.col_bounds
    }

    pub fn assignment(&self) -> &[bool] {
        &self.assignment
    }

    /// Number of positions whose labeled patch lands in `a`.
    pub fn labeled_in_a(&self) -> usize {
        self.assignment.iter().filter(|&&v| v).count()
    }

    /// Per-pixel flag: `true` where `a` holds labeled content.
    pub fn pixel_assignment(&self) -> Vec<bool> {
        let (h, w) = (self.height(), self.width());
        let rows = cell_index(&self.row_bounds, h);
        let cols = cell_index(&self.col_bounds, w);
        let mut out = Vec::with_capacity(h * w);
        for &r in &rows {
            for &c in &cols {
                out.push(self.assignment[r * self.n + c]);
            }
        }
        out
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.height() != h || self.width() != w {
            return Err(shape_err(format!(
                "layout is {}x{} but data is {h}x{w}",
                self.height(),
                self.width()
            )));
        }
        Ok(())
    }
}

/// Compact form `n:bits`, e.g. `2:1001`.
impl fmt::Display for MixLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.n)?;
        for &a in &self.assignment {
            f.write_str(if a { "1" } else { "0" })?;
        }
        Ok(())
    }
}

fn cell_index(bounds: &[usize], len: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    for k in 0..bounds.len() - 1 {
        out.extend(std::iter::repeat_n(k, bounds[k + 1] - bounds[k]));
    }
    out
}

/// Random layout with exactly `ceil(n^2 / 2)` labeled positions in `a`.
pub fn make_layout<R: Rng + ?Sized>(h: usize, w: usize, n: usize, rng: &mut R) -> Result<MixLayout> {
    if n == 0 || n > h.min(w) {
        return Err(Error::InvalidValue(format!(
            "grid size {n} exceeds image size {h}x{w}"
        )));
    }
    let cells = n * n;
    let mut assignment = vec![false; cells];
    for i in index::sample(rng, cells, cells.div_ceil(2)) {
        assignment[i] = true;
    }
    MixLayout::with_assignment(h, w, n, assignment)
}

/// Uniform draw from the configured grid sizes.
pub fn sample_grid_size<R: Rng + ?Sized>(choices: &[usize], rng: &mut R) -> usize {
    choices[rng.random_range(0..choices.len())]
}

fn mix_planar<T: Copy>(
    first: &[T],
    second: &[T],
    planes: usize,
    layout: &MixLayout,
) -> (Vec<T>, Vec<T>) {
    let sel = layout.pixel_assignment();
    let n = sel.len();
    debug_assert_eq!(first.len(), planes * n);
    let mut a = Vec::with_capacity(first.len());
    let mut b = Vec::with_capacity(first.len());
    for p in 0..planes {
        for (i, &take_first) in sel.iter().enumerate() {
            let (x, y) = (first[p * n + i], second[p * n + i]);
            if take_first {
                a.push(x);
                b.push(y);
            } else {
                a.push(y);
                b.push(x);
            }
        }
    }
    (a, b)
}

/// Mixes a labeled and an unlabeled image into two complementary images.
pub fn mix(xl: &Image, xu: &Image, layout: &MixLayout) -> Result<(Image, Image)> {
    if !xl.same_shape(xu) {
        return Err(shape_err("labeled and unlabeled images differ in shape"));
    }
    layout.check(xl.height(), xl.width())?;
    let (a, b) = mix_planar(xl.data(), xu.data(), xl.channels(), layout);
    Ok((
        Image::new(xl.height(), xl.width(), xl.channels(), a)?,
        Image::new(xl.height(), xl.width(), xl.channels(), b)?,
    ))
}

/// Mixes ground truth and pseudo-label with the layout used for the images.
pub fn mix_labels(yl: &LabelMask, yu: &LabelMask, layout: &MixLayout) -> Result<(LabelMask, LabelMask)> {
    if yl.height() != yu.height() || yl.width() != yu.width() {
        return Err(shape_err("label masks differ in shape"));
    }
    layout.check(yl.height(), yl.width())?;
    let (a, b) = mix_planar(yl.data(), yu.data(), 1, layout);
    Ok((
        LabelMask::new(yl.height(), yl.width(), a)?,
        LabelMask::new(yl.height(), yl.width(), b)?,
    ))
}

/// Reassembles the unlabeled image's prediction: patches come from `pb`
/// where the labeled patch went to `a`, and from `pa` elsewhere.
pub fn inverse_mix(pa: &ProbMap, pb: &ProbMap, layout: &MixLayout) -> Result<ProbMap> {
    if !pa.same_shape(pb) {
        return Err(shape_err("mixed predictions differ in shape"));
    }
    layout.check(pa.height(), pa.width())?;
    // mixing (pb, pa) puts pb wherever the assignment is set
    let (unlabeled, _) = mix_planar(pb.data(), pa.data(), pa.classes(), layout);
    ProbMap::from_raw(pa.classes(), pa.height(), pa.width(), unlabeled)
}

/// Image counterpart of [`inverse_mix`]: recovers `(xl, xu)` from `(a, b)`.
pub fn unmix_images(a: &Image, b: &Image, layout: &MixLayout) -> Result<(Image, Image)> {
    if !a.same_shape(b) {
        return Err(shape_err("mixed images differ in shape"));
    }
    layout.check(a.height(), a.width())?;
    let (xl, xu) = mix_planar(a.data(), b.data(), a.channels(), layout);
    Ok((
        Image::new(a.height(), a.width(), a.channels(), xl)?,
        Image::new(a.height(), a.width(), a.channels(), xu)?,
    ))
}

/// Adjoint of [`inverse_mix`]: routes a gradient on the reassembled map back
/// to the two mixed predictions (zero where a map did not contribute).
pub fn inverse_mix_backward(grad: &[f64], planes: usize, layout: &MixLayout) -> (Vec<f64>, Vec<f64>) {
    let sel = layout.pixel_assignment();
    let n = sel.len();
    let mut ga = vec![0.0; grad.len()];
    let mut gb = vec![0.0; grad.len()];
    for p in 0..planes {
        for (i, &labeled_in_a) in sel.iter().enumerate() {
            let g = grad[p * n + i];
            if labeled_in_a {
                gb[p * n + i] = g;
            } else {
                ga[p * n + i] = g;
            }
        }
    }
    (ga, gb)
}
