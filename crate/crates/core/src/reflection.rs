//! Guidance correction: locate unreliable pixels from the reconstruction
//! error and decide where the teacher is trusted over the student.

use crate::error::{shape_err, Error, Result};
use crate::types::{BinaryMask, Image, ProbMap};

/// Non-negative per-pixel reconstruction error.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ErrorMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err("error map buffer does not match its shape"));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidValue(format!("error map value {v}")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
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

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(0.0, f64::max)
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.height, self.width, self.data.iter().map(|v| v * c).collect())
    }
}

/// Min-max normalization of one channel; a constant channel maps to zeros.
fn min_max(plane: &[f64]) -> Vec<f64> {
    let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range <= 0.0 {
        return vec![0.0; plane.len()];
    }
    plane.iter().map(|v| (v - lo) / range).collect()
}

/// `|norm(proxy) - norm(original)|`, averaged over channels.
pub fn error_map(proxy: &Image, original: &Image) -> Result<ErrorMap> {
    if !proxy.same_shape(original) {
        return Err(shape_err("proxy and original image differ in shape"));
    }
    let n = proxy.height() * proxy.width();
    let mut acc = vec![0.0; n];
    for c in 0..proxy.channels() {
        let p = min_max(proxy.plane(c));
        let o = min_max(original.plane(c));
        for ((a, x), y) in acc.iter_mut().zip(&p).zip(&o) {
            *a += (x - y).abs();
        }
    }
    let inv = 1.0 / proxy.channels() as f64;
    acc.iter_mut().for_each(|v| *v *= inv);
    ErrorMap::new(proxy.height(), proxy.width(), acc)
}

/// Pixels whose error strictly exceeds half the map maximum.
pub fn unreliable_mask(em: &ErrorMap) -> BinaryMask {
    let threshold = em.max() / 2.0;
    let data = em.data.iter().map(|&v| v > threshold).collect();
    BinaryMask::new(em.height, em.width, data).expect("shape preserved")
}

/// Substitute unreliable-region map when reconstruction is removed:
/// pixels where the teacher's top probability falls below `threshold`.
pub fn softmax_unreliable_mask(teacher: &ProbMap, threshold: f64) -> BinaryMask {
    let data = teacher.max_confidence().into_iter().map(|c| c < threshold).collect();
    BinaryMask::new(teacher.height(), teacher.width(), data).expect("shape preserved")
}

fn check_mask(p: &ProbMap, m: &BinaryMask) -> Result<()> {
    if p.height() != m.height() || p.width() != m.width() {
        return Err(shape_err(format!(
            "mask {}x{} does not match map {}x{}",
            m.height(),
            m.width(),
            p.height(),
            p.width()
        )));
    }
    Ok(())
}

/// Zeroes every channel of `p` outside `m`.
pub fn apply_mask(p: &ProbMap, m: &BinaryMask) -> Result<ProbMap> {
    check_mask(p, m)?;
    let n = p.height() * p.width();
    let mut out = p.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if !m.data()[i % n] {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Restricts student and teacher predictions to the unreliable region.
pub fn decouple(ps: &ProbMap, pt: &ProbMap, ur: &BinaryMask) -> Result<(ProbMap, ProbMap)> {
    if !ps.same_shape(pt) {
        return Err(shape_err("student and teacher maps differ in shape"));
    }
    Ok((apply_mask(ps, ur)?, apply_mask(pt, ur)?))
}

/// Pixels where the teacher's top-class confidence strictly exceeds the
/// student's. Pixels zeroed on both sides compare equal and stay unset.
pub fn guidance_mask(ps_ur: &ProbMap, pt_ur: &ProbMap) -> Result<BinaryMask> {
    if !ps_ur.same_shape(pt_ur) {
        return Err(shape_err("student and teacher maps differ in shape"));
    }
    let s = ps_ur.max_confidence();
    let t = pt_ur.max_confidence();
    let data = t.iter().zip(&s).map(|(t, s)| t > s).collect();
    BinaryMask::new(ps_ur.height(), ps_ur.width(), data)
}

/// Returns `(teacher more-confident region, student less-confident region)`.
pub fn guided_regions(
    ps_ur: &ProbMap,
    pt_ur: &ProbMap,
    g: &BinaryMask,
) -> Result<(ProbMap, ProbMap)> {
    if !ps_ur.same_shape(pt_ur) {
        return Err(shape_err("student and teacher maps differ in shape"));
    }
    Ok((apply_mask(pt_ur, g)?, apply_mask(ps_ur, g)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img2(d: [f64; 4]) -> Image {
        Image::new(2, 2, 1, d.to_vec()).unwrap()
    }

    #[test]
    fn error_map_examples() {
        let x = img2([0.1, 0.5, 0.9, 0.3]);
        assert!(error_map(&x, &x).unwrap().data().iter().all(|&v| v == 0.0));

        let a = Image::filled(3, 3, 1, 0.2).unwrap();
        let b = Image::filled(3, 3, 1, 0.8).unwrap();
        assert!(error_map(&a, &b).unwrap().data().iter().all(|&v| v == 0.0));

        let em = error_map(&img2([0.0, 1.0, 1.0, 0.0]), &img2([0.0, 1.0, 0.0, 1.0])).unwrap();
        assert_eq!(em.data(), &[0.0, 0.0, 1.0, 1.0]);

        assert!(error_map(&x, &Image::filled(2, 3, 1, 0.0).unwrap()).is_err());
    }

    #[test]
    fn error_map_averages_channels() {
        let p = Image::new(2, 2, 2, vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let o = Image::new(2, 2, 2, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(error_map(&p, &o).unwrap().data(), &[0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn unreliable_mask_examples() {
        let zero = ErrorMap::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(unreliable_mask(&zero).is_empty());

        let em = ErrorMap::new(2, 2, vec![0.2, 0.9, 0.4, 0.5]).unwrap();
        let m = unreliable_mask(&em);
        assert_eq!(m.data(), &[false, true, false, true]);
        for c in [1e-6, 0.3, 7.0, 1e6] {
            assert_eq!(unreliable_mask(&em.scaled(c).unwrap()), m);
        }
    }

    #[test]
    fn decouple_examples() {
        let ps = ProbMap::from_raw(2, 2, 2, vec![0.3, 0.6, 0.5, 0.1, 0.7, 0.4, 0.5, 0.9]).unwrap();
        let pt = ProbMap::from_raw(2, 2, 2, vec![0.8, 0.2, 0.5, 0.5, 0.2, 0.8, 0.5, 0.5]).unwrap();
        let (s, t) = decouple(&ps, &pt, &BinaryMask::ones(2, 2)).unwrap();
        assert_eq!((s, t), (ps.clone(), pt.clone()));
        let (s, t) = decouple(&ps, &pt, &BinaryMask::zeros(2, 2)).unwrap();
        assert!(s.data().iter().chain(t.data()).all(|&v| v == 0.0));

        let mut single = BinaryMask::zeros(2, 2);
        single.set(1, 0, true);
        let (s, _) = decouple(&ps, &pt, &single).unwrap();
        for k in 0..2 {
            for p in 0..4 {
                let v = s.data()[k * 4 + p];
                assert_eq!(v, if p == 2 { ps.data()[k * 4 + p] } else { 0.0 });
            }
        }
        assert!(decouple(&ps, &pt, &BinaryMask::zeros(3, 2)).is_err());
    }

    #[test]
    fn guidance_mask_examples() {
        // pixel 0: teacher 0.9 vs student 0.6; pixel 1 zeroed; pixel 2 tie
        let s = ProbMap::from_raw(2, 1, 3, vec![0.6, 0.0, 0.7, 0.4, 0.0, 0.3]).unwrap();
        let t = ProbMap::from_raw(2, 1, 3, vec![0.1, 0.0, 0.3, 0.9, 0.0, 0.7]).unwrap();
        assert_eq!(guidance_mask(&s, &t).unwrap().data(), &[true, false, false]);
    }

    #[test]
    fn guided_regions_examples() {
        let s = ProbMap::from_raw(2, 1, 2, vec![0.6, 0.2, 0.4, 0.8]).unwrap();
        let t = ProbMap::from_raw(2, 1, 2, vec![0.9, 0.5, 0.1, 0.5]).unwrap();
        let (tm, sl) = guided_regions(&s, &t, &BinaryMask::zeros(1, 2)).unwrap();
        assert!(tm.data().iter().chain(sl.data()).all(|&v| v == 0.0));
        let (tm, sl) = guided_regions(&s, &t, &BinaryMask::ones(1, 2)).unwrap();
        assert_eq!((tm, sl), (t.clone(), s.clone()));
        let g = BinaryMask::new(1, 2, vec![false, true]).unwrap();
        let (tm, sl) = guided_regions(&s, &t, &g).unwrap();
        assert_eq!(tm.data(), &[0.0, 0.5, 0.0, 0.5]);
        assert_eq!(sl.data(), &[0.0, 0.2, 0.0, 0.8]);
    }

    #[test]
    fn softmax_substitute_thresholds_teacher_confidence() {
        let t = ProbMap::from_raw(2, 1, 3, vec![0.9, 0.5, 0.21, 0.1, 0.5, 0.79]).unwrap();
        assert_eq!(softmax_unreliable_mask(&t, 0.8).data(), &[false, true, true]);
    }
}
