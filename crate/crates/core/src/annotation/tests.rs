use super::*;
use crate::reference::{random_blob_mask, scan_bbox};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn keypoint_center_expansion() {
    let b = keypoint_to_bbox(120.0, 90.0, 20.0, 14.0, 384, 286).unwrap().unwrap();
    assert_eq!(b.to_array(), [110.0, 83.0, 20.0, 14.0]);
}

#[test]
fn keypoint_at_corner_is_clipped() {
    let b = keypoint_to_bbox(0.0, 0.0, 10.0, 10.0, 100, 100).unwrap().unwrap();
    assert_eq!(b.to_array(), [0.0, 0.0, 5.0, 5.0]);
}

#[test]
fn keypoint_outside_is_skipped() {
    assert_eq!(keypoint_to_bbox(-1.0, 5.0, 10.0, 10.0, 100, 100).unwrap(), None);
    assert!(keypoint_to_bbox(5.0, 5.0, 0.0, 10.0, 100, 100).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn unclipped_boxes_keep_their_center(
        x in 20.0f64..360.0, y in 20.0f64..260.0, bw in 1.0f64..40.0, bh in 1.0f64..40.0
    ) {
        let b = keypoint_to_bbox(x, y, bw, bh, 384, 286).unwrap().unwrap();
        prop_assert!((b.x + b.w / 2.0 - x).abs() < 1e-9);
        prop_assert!((b.y + b.h / 2.0 - y).abs() < 1e-9);
        prop_assert!((b.w - bw).abs() < 1e-9 && (b.h - bh).abs() < 1e-9);
    }

    #[test]
    fn clipped_boxes_stay_inside(x in 0.0f64..=50.0, y in 0.0f64..=30.0, bw in 1.0f64..80.0, bh in 1.0f64..80.0) {
        if let Some(b) = keypoint_to_bbox(x, y, bw, bh, 50, 30).unwrap() {
            prop_assert!(b.x >= 0.0 && b.y >= 0.0 && b.x + b.w <= 50.0 && b.y + b.h <= 30.0);
        }
    }
}

fn rect_mask() -> GrayImage {
    let (w, h) = (16, 14);
    let mut data = vec![0u8; w * h];
    for y in 3..=10 {
        for x in 5..=8 {
            data[y * w + x] = 255;
        }
    }
    GrayImage { width: w, height: h, data }
}

#[test]
fn rectangle_mask_box() {
    for mode in [BoxMode::Global, BoxMode::Component] {
        let boxes = mask_to_bboxes(&rect_mask(), mode);
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0].to_array(), [5.0, 3.0, 4.0, 8.0]);
    }
}

#[test]
fn empty_mask_has_no_boxes() {
    let m = GrayImage { width: 4, height: 4, data: vec![0; 16] };
    assert!(mask_to_bboxes(&m, BoxMode::Global).is_empty());
    assert!(mask_to_bboxes(&m, BoxMode::Component).is_empty());
}

#[test]
fn diagonal_pixels_are_connected() {
    let mut m = GrayImage { width: 3, height: 3, data: vec![0; 9] };
    m.data[0] = 1;
    m.data[4] = 1;
    m.data[8] = 1;
    assert_eq!(mask_to_bboxes(&m, BoxMode::Component).len(), 1);
}

fn sorted(mut v: Vec<crate::geometry::BoxXyWh>) -> Vec<[f64; 4]> {
    let mut a: Vec<[f64; 4]> = v.drain(..).map(|b| b.to_array()).collect();
    a.sort_by(|p, q| p.partial_cmp(q).unwrap());
    a
}

#[test]
fn random_blobs_match_scan_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for _ in 0..50 {
        let (mask, expected) = random_blob_mask(&mut rng, 40, 30);
        let comps = mask_to_bboxes(&mask, BoxMode::Component);
        assert_eq!(sorted(comps.clone()), sorted(expected));
        let global = mask_to_bboxes(&mask, BoxMode::Global);
        assert_eq!(global.first().copied(), scan_bbox(&mask));
        for c in &comps {
            assert!(global[0].contains(c));
        }
    }
}

#[test]
fn glottis_directory() {
    let dir = tempfile::tempdir().unwrap();
    write_pgm(&dir.path().join("a.pgm"), &rect_mask()).unwrap();
    write_pgm(&dir.path().join("b.pgm"), &GrayImage { width: 4, height: 4, data: vec![0; 16] }).unwrap();
    fs::write(dir.path().join("notes.txt"), "not an image").unwrap();
    let ds = annotate_glottis(dir.path(), BoxMode::Global).unwrap();
    assert_eq!(ds.images.len(), 2);
    assert_eq!(ds.annotations.len(), 1);
    assert_eq!(ds.annotations[0].bbox, [5.0, 3.0, 4.0, 8.0]);
}

#[test]
fn nostril_directory() {
    let dir = tempfile::tempdir().unwrap();
    let img = GrayImage { width: 384, height: 286, data: vec![0; 384 * 286] };
    write_pgm(&dir.path().join("face.pgm"), &img).unwrap();
    let mut pts = String::from("version: 1\nn_points: 20\n{\n");
    for i in 0..20 {
        let (x, y) = if i == 15 { (120.0, 90.0) } else if i == 16 { (383.0, 285.0) } else { (10.0, 10.0) };
        pts.push_str(&format!("{x} {y}\n"));
    }
    pts.push_str("}\n");
    fs::write(dir.path().join("face.pts"), pts).unwrap();
    fs::write(dir.path().join("orphan.pts"), "{\n1 1\n}\n").unwrap();
    let ds = annotate_nostril(dir.path(), dir.path(), 20.0, 14.0, &DEFAULT_NOSTRIL_POINTS).unwrap();
    assert_eq!(ds.images.len(), 1);
    assert_eq!(ds.annotations.len(), 2);
    assert_eq!(ds.annotations[0].bbox, [110.0, 83.0, 20.0, 14.0]);
    assert_eq!(ds.annotations[1].bbox, [373.0, 278.0, 11.0, 8.0]);
}

#[test]
fn synthetic_is_deterministic() {
    let cfg = SynthConfig { count: 5, ..Default::default() };
    let (a, da) = generate_synthetic(&cfg).unwrap();
    let (b, db) = generate_synthetic(&cfg).unwrap();
    assert_eq!(da.to_json().unwrap(), db.to_json().unwrap());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.image, y.image);
    }
}

#[test]
fn synthetic_cardinality() {
    let cfg = SynthConfig { count: 100, classes: 2, ..Default::default() };
    let (_, ds) = generate_synthetic(&cfg).unwrap();
    assert_eq!(ds.images.len(), 100);
    assert!((100..=300).contains(&ds.annotations.len()));
    assert_eq!(ds.categories.len(), 2);
    for img in &ds.images {
        let n = ds.annotations_for(img.id).count();
        assert!((1..=3).contains(&n));
    }
}

#[test]
fn synthetic_boxes_are_tight() {
    let cfg = SynthConfig { count: 30, seed: 3, ..Default::default() };
    let (images, ds) = generate_synthetic(&cfg).unwrap();
    for (img, meta) in images.iter().zip(&ds.images) {
        let w = img.image.width;
        let bright = |x: usize, y: usize| img.image.data[3 * (y * w + x)..3 * (y * w + x) + 3].iter().all(|&v| v >= 170);
        let anns: Vec<_> = ds.annotations_for(meta.id).collect();
        // every bright pixel belongs to exactly one box
        for y in 0..img.image.height {
            for x in 0..w {
                let owners = anns
                    .iter()
                    .filter(|a| {
                        let [bx, by, bw, bh] = a.bbox;
                        (x as f64) >= bx && (x as f64) < bx + bw && (y as f64) >= by && (y as f64) < by + bh
                    })
                    .count();
                if bright(x, y) {
                    assert_eq!(owners, 1);
                }
            }
        }
        // each box edge touches a bright pixel
        for a in anns {
            let [bx, by, bw, bh] = a.bbox.map(|v| v as usize);
            let col = |x: usize| (by..by + bh).any(|y| bright(x, y));
            let row = |y: usize| (bx..bx + bw).any(|x| bright(x, y));
            assert!(col(bx) && col(bx + bw - 1) && row(by) && row(by + bh - 1));
        }
    }
}

#[test]
fn synthetic_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { count: 3, ..Default::default() };
    let ds = write_synthetic(&cfg, dir.path()).unwrap();
    assert_eq!(read_coco(&dir.path().join("annotations.json")).unwrap(), ds);
    let (images, _) = generate_synthetic(&cfg).unwrap();
    let back = read_image(&dir.path().join(&images[0].file_name)).unwrap();
    assert_eq!(back, Image::Rgb(images[0].image.clone()));
}
