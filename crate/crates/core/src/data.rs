//! Dataset indexing, raster I/O and the synthetic echo phantom.
//!
//! A dataset root holds `images/<patient>_<frame>.png` and, for annotated
//! frames, `masks/<patient>_<frame>.png` with integer class indices.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ColorType, DynamicImage, GrayImage, ImageBuffer, Luma, Rgb};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{data_err, Error, Result};
use crate::sketch::gaussian_blur;
use crate::trainer::{Sample, TrainData};
use crate::types::{BinaryMask, Image, LabelMask};

pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    /// Relative to the dataset root.
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patient {
    pub id: String,
    pub frames: Vec<Frame>,
}

/// Patient-level labeled/unlabeled split of a dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub labeled_ratio: f64,
    pub seed: u64,
    pub labeled: Vec<Patient>,
    pub unlabeled: Vec<Patient>,
}

/// Labeled patients for a ratio: nearest whole patient, at least one.
pub fn labeled_patient_count(patients: usize, ratio: f64) -> usize {
    ((patients as f64 * ratio).round() as usize).clamp(1, patients.max(1))
}

/// Patient id of a file stem: everything before the last underscore.
pub fn patient_id(stem: &str) -> &str {
    stem.rsplit_once('_').map_or(stem, |(p, _)| p)
}

fn is_png(p: &Path) -> bool {
    p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

pub fn index_dataset(root: &Path, labeled_ratio: f64, seed: u64) -> Result<DatasetIndex> {
    if !(labeled_ratio > 0.0 && labeled_ratio <= 1.0) {
        return Err(Error::InvalidValue(format!("labeled ratio {labeled_ratio} outside (0, 1]")));
    }
    let images_dir = root.join(IMAGES_DIR);
    let entries = std::fs::read_dir(&images_dir).map_err(|e| data_err(&images_dir, e.to_string()))?;
    let mut files: Vec<PathBuf> = entries
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file() && is_png(p))
        .collect();
    files.sort();

    let mut groups: BTreeMap<String, Vec<Frame>> = BTreeMap::new();
    for path in files {
        image::image_dimensions(&path).map_err(|e| data_err(&path, e.to_string()))?;
        let name = path.file_name().expect("file").to_owned();
        let stem = path.file_stem().and_then(|s| s.to_str()).ok_or_else(|| data_err(&path, "file name is not UTF-8"))?;
        let mask = Path::new(MASKS_DIR).join(&name);
        groups.entry(patient_id(stem).to_owned()).or_default().push(Frame {
            image: Path::new(IMAGES_DIR).join(&name),
            mask: root.join(&mask).is_file().then_some(mask),
        });
    }
    if groups.is_empty() {
        return Err(Error::Dataset(format!("no patients under {}", images_dir.display())));
    }

    let mut patients: Vec<Patient> = groups.into_iter().map(|(id, frames)| Patient { id, frames }).collect();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_labeled = labeled_patient_count(patients.len(), labeled_ratio);
    let unlabeled = patients.split_off(n_labeled);
    let mut labeled = patients;
    labeled.sort_by(|a, b| a.id.cmp(&b.id));
    let mut unlabeled = unlabeled;
    unlabeled.sort_by(|a, b| a.id.cmp(&b.id));
    for p in &labeled {
        if let Some(f) = p.frames.iter().find(|f| f.mask.is_none()) {
            return Err(data_err(root.join(&f.image), "labeled image has no mask"));
        }
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        labeled_ratio,
        seed,
        labeled,
        unlabeled,
    })
}

impl DatasetIndex {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Dataset(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| data_err(path, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| data_err(path, e.to_string()))
    }

    pub fn labeled_frames(&self) -> usize {
        self.labeled.iter().map(|p| p.frames.len()).sum()
    }

    pub fn unlabeled_frames(&self) -> usize {
        self.unlabeled.iter().map(|p| p.frames.len()).sum()
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| data_err(path, e.to_string()))?
        .with_guessed_format()
        .map_err(|e| data_err(path, e.to_string()))?
        .decode()
        .map_err(|e| data_err(path, e.to_string()))
}

/// Reads an 8- or 16-bit raster as an image in [0, 1], resized bilinearly
/// to `size` x `size`. RGB input is reduced to luminance for one channel.
pub fn load_image(path: &Path, size: usize, channels: usize) -> Result<Image> {
    let img = decode(path)?;
    if matches!(img.color(), ColorType::Rgb32F | ColorType::Rgba32F) {
        return Err(data_err(path, "floating-point rasters are not supported"));
    }
    let s = size as u32;
    let data: Vec<f32> = match channels {
        1 => {
            let mut buf = img.to_luma32f();
            if buf.dimensions() != (s, s) {
                buf = image::imageops::resize(&buf, s, s, FilterType::Triangle);
            }
            buf.into_raw()
        }
        3 => {
            let mut buf = img.to_rgb32f();
            if buf.dimensions() != (s, s) {
                buf = image::imageops::resize(&buf, s, s, FilterType::Triangle);
            }
            // interleaved to planar
            let raw = buf.into_raw();
            let n = size * size;
            let mut planar = vec![0.0; raw.len()];
            for (i, px) in raw.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    planar[c * n + i] = px[c];
                }
            }
            planar
        }
        c => return Err(data_err(path, format!("unsupported channel count {c}"))),
    };
    Image::new(size, size, channels, data.into_iter().map(|v| (v as f64).clamp(0.0, 1.0)).collect())
}

/// Reads a single-channel class-index raster, resized with nearest neighbor.
pub fn load_mask(path: &Path, size: usize, k_fg: usize) -> Result<LabelMask> {
    let img = decode(path)?;
    let values: ImageBuffer<Luma<u16>, Vec<u16>> = match img.color() {
        ColorType::L8 | ColorType::L16 => img.to_luma16(),
        other => return Err(data_err(path, format!("mask must be single-channel class indices, found {other:?}"))),
    };
    let scale = if img.color() == ColorType::L8 { 257 } else { 1 };
    let (w, h) = values.dimensions();
    let mut classes = GrayImage::new(w, h);
    for (dst, src) in classes.pixels_mut().zip(values.pixels()) {
        let v = src.0[0] / scale;
        if v as usize > k_fg {
            return Err(data_err(path, format!("mask class {v} exceeds the {k_fg} foreground classes")));
        }
        dst.0[0] = v as u8;
    }
    let s = size as u32;
    if classes.dimensions() != (s, s) {
        classes = image::imageops::resize(&classes, s, s, FilterType::Nearest);
    }
    LabelMask::new(size, size, classes.into_raw())
}

/// Writes an image as 8-bit grayscale (one channel) or RGB (three).
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let q = |v: f64| (v * 255.0).round() as u8;
    match img.channels() {
        1 => GrayImage::from_raw(w as u32, h as u32, img.data().iter().map(|&v| q(v)).collect())
            .expect("sized")
            .save(path)?,
        3 => {
            let n = h * w;
            let raw: Vec<u8> = (0..n).flat_map(|i| (0..3).map(move |c| (c, i))).map(|(c, i)| q(img.data()[c * n + i])).collect();
            ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, raw)
                .expect("sized")
                .save(path)?
        }
        c => return Err(Error::InvalidValue(format!("cannot save a {c}-channel image"))),
    }
    Ok(())
}

/// Writes class indices as an 8-bit single-channel raster.
pub fn save_mask(mask: &LabelMask, path: &Path) -> Result<()> {
    GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.data().to_vec())
        .expect("sized")
        .save(path)?;
    Ok(())
}

/// Fixed palette for class overlays; class 0 keeps the image.
pub const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [255, 255, 0],
    [255, 0, 255],
    [0, 255, 255],
    [255, 128, 0],
];

/// Grayscale image with every foreground pixel painted its class color.
pub fn save_overlay(img: &Image, mask: &LabelMask, path: &Path) -> Result<()> {
    let lum = img.luminance();
    let mut out = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(mask.width() as u32, mask.height() as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        let cls = mask.data()[i] as usize;
        px.0 = if cls == 0 {
            let g = (lum[i] * 255.0).round() as u8;
            [g, g, g]
        } else {
            PALETTE[cls % PALETTE.len()]
        };
    }
    out.save(path)?;
    Ok(())
}

/// Loads every indexed frame. Labeled patients train the segmenter;
/// unlabeled frames feed the unlabeled stream, and those with masks form
/// the validation set.
pub fn load_train_data(index: &DatasetIndex, cfg: &TrainConfig) -> Result<TrainData> {
    let load = |frames: Vec<&Frame>, with_mask: bool| -> Result<Vec<Sample>> {
        frames
            .par_iter()
            .map(|f| {
                let image = load_image(&index.root.join(&f.image), cfg.image_size, cfg.in_channels)?;
                let mask = match (&f.mask, with_mask) {
                    (Some(m), true) => Some(load_mask(&index.root.join(m), cfg.image_size, cfg.k_fg)?),
                    _ => None,
                };
                let id = f.image.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned();
                Ok(Sample { id, image, mask })
            })
            .collect()
    };
    let labeled = load(index.labeled.iter().flat_map(|p| &p.frames).collect(), true)?;
    let unlabeled = load(index.unlabeled.iter().flat_map(|p| &p.frames).collect(), false)?;
    let val = load(
        index
            .unlabeled
            .iter()
            .flat_map(|p| &p.frames)
            .filter(|f| f.mask.is_some())
            .collect(),
        true,
    )?;
    Ok(TrainData { labeled, unlabeled, val })
}

/// Parameters of one synthetic echo frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub size: usize,
    /// 1 to 4 chambers.
    pub chambers: usize,
    /// Chamber intensity minus tissue intensity.
    pub contrast: f64,
    pub speckle_strength: f64,
    pub blur_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 64,
            chambers: 4,
            contrast: 0.25,
            speckle_strength: 0.3,
            blur_sigma: 1.5,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.chambers) {
            return Err(Error::InvalidValue(format!("chambers {} outside 1..=4", self.chambers)));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::InvalidValue(format!("contrast {} outside (0, 1]", self.contrast)));
        }
        if !(self.speckle_strength >= 0.0 && self.blur_sigma >= 0.0) {
            return Err(Error::InvalidValue("speckle and blur must be non-negative".into()));
        }
        if self.size < 16 {
            return Err(Error::InvalidValue(format!("phantom size {} below 16", self.size)));
        }
        Ok(())
    }

    /// Tissue level; chambers sit `contrast` above it.
    pub fn tissue_level(&self) -> f64 {
        0.4 * (1.0 - self.contrast)
    }
}

const SECTOR_HALF_ANGLE: f64 = 0.75;
const SECTOR_RADIUS: f64 = 0.97;
/// Chamber slots as (row, column) fractions: two ventricles above two atria.
const SLOTS: [(f64, f64); 4] = [(0.40, 0.38), (0.40, 0.62), (0.72, 0.32), (0.72, 0.68)];
const MAX_PLACEMENT_TRIES: usize = 200;

/// Imaging sector: apex at the top center, opening downwards.
pub fn sector_mask(size: usize) -> BinaryMask {
    let s = size as f64;
    BinaryMask::from_fn(size, size, |y, x| {
        let dy = y as f64 + 0.5;
        let dx = x as f64 + 0.5 - s / 2.0;
        let r = (dx * dx + dy * dy).sqrt();
        r <= SECTOR_RADIUS * s && dx.atan2(dy).abs() <= SECTOR_HALF_ANGLE
    })
}

/// Renders one phantom frame and its mask. The mask is the noise-free
/// ellipse rasterization; the image gets blur and multiplicative speckle.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Image, LabelMask)> {
    spec.validate()?;
    let n = spec.size;
    let s = n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sector = sector_mask(n);

    let mut placed = None;
    for _ in 0..MAX_PLACEMENT_TRIES {
        let mut mask = LabelMask::zeros(n, n);
        let mut ok = true;
        for (c, &(fy, fx)) in SLOTS.iter().take(spec.chambers).enumerate() {
            let cy = (fy + rng.random_range(-0.03..0.03)) * s;
            let cx = (fx + rng.random_range(-0.03..0.03)) * s;
            let ry = rng.random_range(0.10..0.14) * s;
            let rx = rng.random_range(0.07..0.10) * s;
            let theta: f64 = rng.random_range(-0.3..0.3);
            let (sin, cos) = theta.sin_cos();
            let mut pixels = 0;
            for y in 0..n {
                for x in 0..n {
                    let (py, px) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    let u = (cos * py + sin * px) / ry;
                    let v = (-sin * py + cos * px) / rx;
                    if u * u + v * v > 1.0 {
                        continue;
                    }
                    // keep one pixel of tissue between chambers and inside the sector
                    let clash = (-1i64..=1).any(|oy| {
                        (-1i64..=1).any(|ox| {
                            let (yy, xx) = (y as i64 + oy, x as i64 + ox);
                            if yy < 0 || xx < 0 || yy >= n as i64 || xx >= n as i64 {
                                return true;
                            }
                            let other = mask.get(yy as usize, xx as usize);
                            (other != 0 && other != c as u8 + 1) || !sector.get(yy as usize, xx as usize)
                        })
                    });
                    if clash {
                        ok = false;
                    }
                    mask.set(y, x, c as u8 + 1);
                    pixels += 1;
                }
            }
            if pixels == 0 {
                ok = false;
            }
        }
        if ok {
            placed = Some(mask);
            break;
        }
    }
    let mask = placed.ok_or_else(|| {
        Error::InvalidValue(format!(
            "could not place {} chambers in a {n}x{n} phantom after {MAX_PLACEMENT_TRIES} tries",
            spec.chambers
        ))
    })?;

    let tissue = spec.tissue_level();
    let clean: Vec<f64> = (0..n * n)
        .map(|i| {
            if mask.data()[i] != 0 {
                tissue + spec.contrast
            } else if sector.data()[i] {
                tissue
            } else {
                0.0
            }
        })
        .collect();
    let blurred = gaussian_blur(&clean, n, n, spec.blur_sigma);
    let data = blurred
        .into_iter()
        .map(|v| {
            let noise: f64 = rng.sample(StandardNormal);
            (v * (1.0 + spec.speckle_strength * noise)).clamp(0.0, 1.0)
        })
        .collect();
    Ok((Image::new(n, n, 1, data)?, mask))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub patient: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub count: usize,
    pub frames_per_patient: usize,
    pub spec: PhantomSpec,
    pub entries: Vec<SynthEntry>,
}

/// Writes `count` phantom pairs in the dataset layout plus a manifest. Each
/// frame's seed is drawn from a stream seeded by `seed`.
pub fn synth_dataset(
    out: &Path,
    count: usize,
    seed: u64,
    frames_per_patient: usize,
    base: &PhantomSpec,
) -> Result<SynthManifest> {
    if frames_per_patient == 0 {
        return Err(Error::InvalidValue("frames per patient must be positive".into()));
    }
    base.validate()?;
    std::fs::create_dir_all(out.join(IMAGES_DIR))?;
    std::fs::create_dir_all(out.join(MASKS_DIR))?;
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let entries: Vec<SynthEntry> = (0..count)
        .map(|i| {
            let patient = format!("p{:04}", i / frames_per_patient);
            let name = format!("{patient}_{:02}.png", i % frames_per_patient);
            SynthEntry {
                image: Path::new(IMAGES_DIR).join(&name),
                mask: Path::new(MASKS_DIR).join(&name),
                patient,
                seed: seeds.next_u64(),
            }
        })
        .collect();
    entries.par_iter().try_for_each(|e| -> Result<()> {
        let (img, mask) = generate_phantom(&PhantomSpec { seed: e.seed, ..base.clone() })?;
        save_image(&img, &out.join(&e.image))?;
        save_mask(&mask, &out.join(&e.mask))
    })?;
    let manifest = SynthManifest {
        seed,
        count,
        frames_per_patient,
        spec: base.clone(),
        entries,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Dataset(e.to_string()))?;
    std::fs::write(out.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labeled_counts() {
        assert_eq!(labeled_patient_count(500, 0.01), 5);
        assert_eq!(labeled_patient_count(676, 0.01), 7);
        assert_eq!(labeled_patient_count(10, 0.01), 1);
        assert_eq!(labeled_patient_count(10, 1.0), 10);
        assert_eq!(patient_id("p0001_03"), "p0001");
        assert_eq!(patient_id("a_b_c"), "a_b");
        assert_eq!(patient_id("solo"), "solo");
    }

    #[test]
    fn noise_free_phantom_thresholds_to_mask() {
        for seed in 0..5 {
            let spec = PhantomSpec {
                contrast: 1.0,
                speckle_strength: 0.0,
                blur_sigma: 0.0,
                seed,
                ..PhantomSpec::default()
            };
            let (img, mask) = generate_phantom(&spec).unwrap();
            for (v, &m) in img.data().iter().zip(mask.data()) {
                assert_eq!(*v > 0.5, m != 0);
            }
        }
    }

    #[test]
    fn phantom_classes_and_determinism() {
        for chambers in 1..=4 {
            let spec = PhantomSpec { chambers, seed: 11, ..PhantomSpec::default() };
            let (img, mask) = generate_phantom(&spec).unwrap();
            let present: Vec<u8> = (0..=4u8).filter(|&c| mask.count(c) > 0).collect();
            assert_eq!(present, (0..=chambers as u8).collect::<Vec<_>>());
            assert_eq!(generate_phantom(&spec).unwrap(), (img, mask));
        }
        assert!(generate_phantom(&PhantomSpec { chambers: 5, ..PhantomSpec::default() }).is_err());
        assert!(generate_phantom(&PhantomSpec { contrast: 0.0, ..PhantomSpec::default() }).is_err());
    }

    #[test]
    fn image_and_mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (img, mask) = generate_phantom(&PhantomSpec::default()).unwrap();
        save_image(&img, &dir.path().join("i.png")).unwrap();
        save_mask(&mask, &dir.path().join("m.png")).unwrap();
        let back = load_image(&dir.path().join("i.png"), 64, 1).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert_eq!(load_mask(&dir.path().join("m.png"), 64, 4).unwrap(), mask);
        assert!(load_mask(&dir.path().join("m.png"), 64, 3).is_err());
    }
}
