//! Segmentation quality metrics: Dice (%), Jaccard (%), 95% Hausdorff
//! distance and average surface distance, both in pixels.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::types::LabelMask;

/// Overlap scores in percent. Both masks empty counts as a perfect match,
/// exactly one empty as a complete miss.
pub fn dice_jaccard(pred: &LabelMask, gt: &LabelMask, cls: u8) -> Result<(f64, f64)> {
    check_shapes(pred, gt)?;
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (ip, ig) = (p == cls, g == cls);
        a += ip as usize;
        b += ig as usize;
        inter += (ip && ig) as usize;
    }
    if a == 0 && b == 0 {
        return Ok((100.0, 100.0));
    }
    let union = a + b - inter;
    Ok((
        200.0 * inter as f64 / (a + b) as f64,
        100.0 * inter as f64 / union as f64,
    ))
}

fn check_shapes(pred: &LabelMask, gt: &LabelMask) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(shape_err(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

/// Pixels of class `cls` with a 4-neighbor outside the class; pixels on the
/// image border count as boundary.
pub fn class_boundary(mask: &LabelMask, cls: u8) -> Vec<bool> {
    let (h, w) = (mask.height(), mask.width());
    let inside = |y: i64, x: i64| {
        y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && mask.get(y as usize, x as usize) == cls
    };
    let mut out = vec![false; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if inside(y, x)
                && !(inside(y - 1, x) && inside(y + 1, x) && inside(y, x - 1) && inside(y, x + 1))
            {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

/// Exact 1-D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => {
            out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest set pixel.
fn squared_edt(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = sites
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut col_out);
        for y in 0..h {
            grid[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row_out);
        grid[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    grid
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Distances from each boundary pixel of `from` to the nearest boundary
/// pixel of `to`.
fn directed(from: &[bool], to_dist_sq: &[f64]) -> Vec<f64> {
    from.iter()
        .zip(to_dist_sq)
        .filter(|(&b, _)| b)
        .map(|(_, d)| d.sqrt())
        .collect()
}

/// `(hd95, asd)` in pixels, or `None` when `cls` is absent from either mask.
pub fn surface_distances(pred: &LabelMask, gt: &LabelMask, cls: u8) -> Result<Option<(f64, f64)>> {
    check_shapes(pred, gt)?;
    if pred.count(cls) == 0 || gt.count(cls) == 0 {
        return Ok(None);
    }
    let (h, w) = (pred.height(), pred.width());
    let bp = class_boundary(pred, cls);
    let bg = class_boundary(gt, cls);
    let mut d_pg = directed(&bp, &squared_edt(&bg, h, w));
    let mut d_gp = directed(&bg, &squared_edt(&bp, h, w));
    d_pg.sort_by(f64::total_cmp);
    d_gp.sort_by(f64::total_cmp);
    let hd95 = percentile(&d_pg, 0.95).max(percentile(&d_gp, 0.95));
    let total: f64 = d_pg.iter().chain(&d_gp).sum();
    let asd = total / (d_pg.len() + d_gp.len()) as f64;
    Ok(Some((hd95, asd)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseMetrics {
    pub case: String,
    pub class: u8,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSummary {
    pub dice: f64,
    pub jaccard: f64,
    /// Mean over cases where the surface metrics were defined.
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    /// Cases skipped for surface metrics because a mask lacked the class.
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class: BTreeMap<u8, ClassSummary>,
    /// Average over foreground classes.
    pub mean: ClassSummary,
    pub cases: Vec<CaseMetrics>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl MetricsReport {
    pub fn mean_dice(&self) -> f64 {
        self.mean.dice
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["class", "dice", "jaccard", "hd95", "asd"])?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (cls, s) in &self.per_class {
            w.write_record([
                cls.to_string(),
                s.dice.to_string(),
                s.jaccard.to_string(),
                fmt(s.hd95),
                fmt(s.asd),
            ])?;
        }
        w.write_record([
            "mean".to_string(),
            self.mean.dice.to_string(),
            self.mean.jaccard.to_string(),
            fmt(self.mean.hd95),
            fmt(self.mean.asd),
        ])?;
        w.flush()?;
        Ok(())
    }

    /// One row per (case, class) followed by per-class and mean aggregate
    /// rows under the case name `all`.
    pub fn write_cases_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["case", "class", "dice", "jaccard", "hd95", "asd"])?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.cases {
            w.write_record([
                c.case.clone(),
                c.class.to_string(),
                c.dice.to_string(),
                c.jaccard.to_string(),
                fmt(c.hd95),
                fmt(c.asd),
            ])?;
        }
        for (cls, s) in &self.per_class {
            w.write_record([
                "all".to_string(),
                cls.to_string(),
                s.dice.to_string(),
                s.jaccard.to_string(),
                fmt(s.hd95),
                fmt(s.asd),
            ])?;
        }
        w.write_record([
            "all".to_string(),
            "mean".to_string(),
            self.mean.dice.to_string(),
            self.mean.jaccard.to_string(),
            fmt(self.mean.hd95),
            fmt(self.mean.asd),
        ])?;
        w.flush()?;
        Ok(())
    }

    /// Human-readable table.
    pub fn render(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:8.3}")).unwrap_or_else(|| "       -".into());
        let mut s = String::from("class     dice  jaccard     hd95      asd\n");
        for (cls, c) in &self.per_class {
            s.push_str(&format!(
                "{cls:>5} {:8.3} {:8.3} {} {}\n",
                c.dice,
                c.jaccard,
                fmt(c.hd95),
                fmt(c.asd)
            ));
        }
        s.push_str(&format!(
            " mean {:8.3} {:8.3} {} {}\n",
            self.mean.dice,
            self.mean.jaccard,
            fmt(self.mean.hd95),
            fmt(self.mean.asd)
        ));
        s
    }
}

/// Evaluates named `(prediction, ground truth)` pairs over classes `1..=k_fg`.
pub fn evaluate(cases: &[(String, LabelMask, LabelMask)], k_fg: usize) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(crate::error::Error::Dataset("no cases to evaluate".into()));
    }
    let per_case: Vec<Vec<CaseMetrics>> = cases
        .par_iter()
        .map(|(name, pred, gt)| {
            (1..=k_fg as u8)
                .map(|cls| {
                    let (dice, jaccard) = dice_jaccard(pred, gt, cls)?;
                    let sd = surface_distances(pred, gt, cls)?;
                    Ok(CaseMetrics {
                        case: name.clone(),
                        class: cls,
                        dice,
                        jaccard,
                        hd95: sd.map(|v| v.0),
                        asd: sd.map(|v| v.1),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<CaseMetrics> = per_case.into_iter().flatten().collect();

    let mut per_class = BTreeMap::new();
    for cls in 1..=k_fg as u8 {
        let of_class: Vec<&CaseMetrics> = rows.iter().filter(|r| r.class == cls).collect();
        per_class.insert(
            cls,
            ClassSummary {
                dice: mean_of(of_class.iter().map(|r| r.dice)).unwrap_or(0.0),
                jaccard: mean_of(of_class.iter().map(|r| r.jaccard)).unwrap_or(0.0),
                hd95: mean_of(of_class.iter().filter_map(|r| r.hd95)),
                asd: mean_of(of_class.iter().filter_map(|r| r.asd)),
                excluded: of_class.iter().filter(|r| r.hd95.is_none()).count(),
            },
        );
    }
    let mean = ClassSummary {
        dice: mean_of(per_class.values().map(|c| c.dice)).unwrap_or(0.0),
        jaccard: mean_of(per_class.values().map(|c| c.jaccard)).unwrap_or(0.0),
        hd95: mean_of(per_class.values().filter_map(|c| c.hd95)),
        asd: mean_of(per_class.values().filter_map(|c| c.asd)),
        excluded: per_class.values().map(|c| c.excluded).sum(),
    };
    Ok(MetricsReport {
        per_class,
        mean,
        cases: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> LabelMask {
        LabelMask::from_fn(h, w, |y, x| {
            u8::from((y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x))
        })
    }

    #[test]
    fn overlap_examples() {
        let a = square(8, 8, 1, 1, 3);
        assert_eq!(dice_jaccard(&a, &a, 1).unwrap(), (100.0, 100.0));
        assert_eq!(dice_jaccard(&a, &square(8, 8, 5, 5, 3), 1).unwrap(), (0.0, 0.0));
        let z = LabelMask::zeros(8, 8);
        assert_eq!(dice_jaccard(&z, &z, 1).unwrap(), (100.0, 100.0));
        assert_eq!(dice_jaccard(&a, &z, 1).unwrap(), (0.0, 0.0));

        // |A| = |B| = 4, |A n B| = 2
        let p = LabelMask::from_fn(4, 4, |y, _| u8::from(y == 0));
        let g = LabelMask::from_fn(4, 4, |y, x| u8::from((y == 0 && x < 2) || (y == 1 && x < 2)));
        let (d, j) = dice_jaccard(&p, &g, 1).unwrap();
        assert_eq!(d, 50.0);
        assert!((j - 100.0 * 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn surface_examples() {
        let a = square(12, 12, 4, 4, 3);
        assert_eq!(surface_distances(&a, &a, 1).unwrap(), Some((0.0, 0.0)));
        let b = square(12, 12, 4, 5, 3);
        let (hd, _) = surface_distances(&a, &b, 1).unwrap().unwrap();
        assert_eq!(hd, 1.0);
        assert_eq!(surface_distances(&a, &LabelMask::zeros(12, 12), 1).unwrap(), None);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[0.0, 10.0], 0.95), 9.5);
        assert_eq!(percentile(&[3.0], 0.95), 3.0);
    }

    #[test]
    fn evaluate_perfect_and_exclusions() {
        let gt = LabelMask::from_fn(10, 10, |y, x| if y < 5 { 1 } else if x < 5 { 2 } else { 0 });
        let report = evaluate(&[("c0".into(), gt.clone(), gt.clone())], 3).unwrap();
        assert_eq!(report.per_class[&1].dice, 100.0);
        assert_eq!(report.per_class[&3].hd95, None);
        assert_eq!(report.per_class[&3].excluded, 1);
        assert_eq!(report.mean.dice, 100.0);
        assert_eq!(report.mean.hd95, Some(0.0));
        assert!(evaluate(&[], 3).is_err());
    }
}
