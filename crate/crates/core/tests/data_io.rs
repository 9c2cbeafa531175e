use echoreflect_core::data::{
    generate_phantom, index_dataset, load_image, load_mask, sector_mask, synth_dataset, PhantomSpec, IMAGES_DIR,
    MASKS_DIR,
};
use echoreflect_core::metrics::dice_jaccard;
use image::{GrayImage, ImageBuffer, Luma};
use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

fn write_gray(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    GrayImage::from_fn(w, h, |x, y| Luma([f(x, y)])).save(path).unwrap();
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for dir in ["", IMAGES_DIR, MASKS_DIR] {
        let mut entries: Vec<_> = std::fs::read_dir(root.join(dir)).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries.into_iter().filter(|p| p.is_file()) {
            out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn split_is_disjoint_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(dir.path(), 40, 3, 2, &PhantomSpec { size: 32, ..Default::default() }).unwrap();
    let a = index_dataset(dir.path(), 0.25, 7).unwrap();
    let b = index_dataset(dir.path(), 0.25, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.labeled.len(), 5);
    assert_eq!(a.unlabeled.len(), 15);
    let la: BTreeSet<_> = a.labeled.iter().map(|p| &p.id).collect();
    assert!(a.unlabeled.iter().all(|p| !la.contains(&p.id)));
    let c = index_dataset(dir.path(), 0.25, 8).unwrap();
    assert_ne!(a.labeled, c.labeled);
}

#[test]
fn labeled_patient_without_mask_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    write_gray(&dir.path().join(IMAGES_DIR).join("a_00.png"), 8, 8, |x, _| x as u8);
    assert!(index_dataset(dir.path(), 1.0, 0).is_err());
}

#[test]
fn empty_dataset_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join(IMAGES_DIR)).unwrap();
    assert!(index_dataset(dir.path(), 0.5, 0).is_err());
    assert!(index_dataset(&dir.path().join("missing"), 0.5, 0).is_err());
}

#[test]
fn sixteen_bit_images_scale_to_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("deep.png");
    ImageBuffer::<Luma<u16>, _>::from_fn(4, 4, |x, _| Luma([if x < 2 { 0 } else { u16::MAX }]))
        .save(&path)
        .unwrap();
    let img = load_image(&path, 4, 1).unwrap();
    assert_eq!(img.get(0, 0, 0), 0.0);
    assert_eq!(img.get(0, 0, 3), 1.0);
}

#[test]
fn non_square_input_is_resized() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wide.png");
    write_gray(&path, 300, 200, |x, _| (x % 256) as u8);
    let img = load_image(&path, 256, 1).unwrap();
    assert_eq!((img.height(), img.width(), img.channels()), (256, 256, 1));
    assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn mask_resize_keeps_label_set() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.png");
    write_gray(&path, 40, 40, |x, y| ((x / 10 + y / 20 * 2) % 5) as u8);
    let mask = load_mask(&path, 16, 4).unwrap();
    let labels: BTreeSet<u8> = mask.data().iter().copied().collect();
    assert_eq!(labels, (0..5).collect());
    assert!(load_mask(&path, 16, 3).is_err());
}

#[test]
fn phantom_contrast_matches_spec() {
    let spec = PhantomSpec { size: 64, speckle_strength: 0.0, blur_sigma: 0.0, ..Default::default() };
    let sector = sector_mask(64);
    let mut gaps = Vec::new();
    for seed in 0..100 {
        let spec = PhantomSpec { seed, speckle_strength: 0.3, blur_sigma: 1.5, ..spec.clone() };
        let (img, mask) = generate_phantom(&spec).unwrap();
        let (mut fg, mut bg) = ((0.0, 0), (0.0, 0));
        for y in 0..64 {
            for x in 0..64 {
                if !sector.get(y, x) {
                    continue;
                }
                let v = img.get(0, y, x);
                if mask.get(y, x) > 0 {
                    fg = (fg.0 + v, fg.1 + 1);
                } else {
                    bg = (bg.0 + v, bg.1 + 1);
                }
            }
        }
        gaps.push(fg.0 / fg.1 as f64 - bg.0 / bg.1 as f64);
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!((mean - spec.contrast).abs() <= 0.2 * spec.contrast, "mean gap {mean}");
}

#[test]
fn phantom_classes_are_present() {
    let (_, mask) = generate_phantom(&PhantomSpec { size: 64, seed: 1, ..Default::default() }).unwrap();
    for cls in 1..=4 {
        assert!(mask.data().contains(&cls));
    }
    assert_eq!(dice_jaccard(&mask, &mask, 1).unwrap(), (100.0, 100.0));
}

#[test]
fn synth_is_reproducible_and_fast() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = PhantomSpec::default();
    let start = Instant::now();
    let manifest = synth_dataset(a.path(), 100, 5, 2, &spec).unwrap();
    assert!(start.elapsed().as_secs_f64() < 30.0);
    synth_dataset(b.path(), 100, 5, 2, &spec).unwrap();
    assert_eq!(manifest.entries.len(), 100);
    assert_eq!(tree(a.path()), tree(b.path()));
    let index = index_dataset(a.path(), 0.1, 0).unwrap();
    assert_eq!(index.labeled.len() + index.unlabeled.len(), 50);
}
