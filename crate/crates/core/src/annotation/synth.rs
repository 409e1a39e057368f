//! Deterministic synthetic detection data: bright rectangles and ellipses
//! on uniform noise.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::coco::{write_coco, CocoAnnotation, CocoCategory, CocoDataset, CocoImage};
use super::pnm::{write_ppm, RgbImage};
use crate::error::{Error, Result};
use crate::geometry::BoxXyWh;

/// Category names; category id `i + 1` is shape `i`.
pub const SHAPE_NAMES: [&str; 2] = ["rectangle", "ellipse"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub width: usize,
    pub height: usize,
    /// 1 (rectangles only) or 2 (rectangles and ellipses).
    pub classes: usize,
    /// Shape extent range in pixels, inclusive.
    pub min_size: usize,
    pub max_size: usize,
    /// First image id; lets disjoint splits share one id space.
    pub first_id: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 100,
            width: 64,
            height: 64,
            classes: 2,
            min_size: 16,
            max_size: 28,
            first_id: 1,
        }
    }
}

pub struct SyntheticImage {
    pub file_name: String,
    pub image: RgbImage,
}

const MAX_OBJECTS: usize = 3;
const PLACEMENT_ATTEMPTS: usize = 200;
const NOISE_MAX: u8 = 100;
const SHAPE_MIN: u8 = 170;

/// Pixels covered by a `w x h` shape whose placement rectangle starts at
/// `(x0, y0)`. Ellipses include pixels whose centers fall inside.
fn shape_pixels(kind: usize, x0: usize, y0: usize, w: usize, h: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let (rx, ry) = (w as f64 / 2.0, h as f64 / 2.0);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let inside = kind == 0 || {
                let dx = (x as f64 + 0.5 - x0 as f64 - rx) / rx;
                let dy = (y as f64 + 0.5 - y0 as f64 - ry) / ry;
                dx * dx + dy * dy <= 1.0
            };
            if inside {
                out.push((x, y));
            }
        }
    }
    out
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(Vec<SyntheticImage>, CocoDataset)> {
    if cfg.count == 0 {
        return Err(Error::contract("synthetic dataset needs at least one image"));
    }
    if !(1..=SHAPE_NAMES.len()).contains(&cfg.classes) {
        return Err(Error::contract(format!("synthetic classes must be 1 or 2, got {}", cfg.classes)));
    }
    if cfg.min_size == 0 || cfg.min_size > cfg.max_size || cfg.max_size > cfg.width.min(cfg.height) {
        return Err(Error::contract(format!(
            "shape sizes {}..={} do not fit a {}x{} image",
            cfg.min_size, cfg.max_size, cfg.width, cfg.height
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut images = Vec::with_capacity(cfg.count);
    let mut ds = CocoDataset {
        categories: SHAPE_NAMES[..cfg.classes]
            .iter()
            .enumerate()
            .map(|(i, n)| CocoCategory {
                id: i as u64 + 1,
                name: n.to_string(),
            })
            .collect(),
        ..Default::default()
    };
    let (w, h) = (cfg.width, cfg.height);
    for i in 0..cfg.count {
        let image_id = cfg.first_id + i as u64;
        let mut data: Vec<u8> = (0..w * h * 3).map(|_| rng.random_range(0..=NOISE_MAX)).collect();
        let wanted = rng.random_range(1..=MAX_OBJECTS);
        // placement rectangles (x0, y0, x1, y1), exclusive ends
        let mut placed: Vec<(usize, usize, usize, usize)> = Vec::new();
        for _ in 0..PLACEMENT_ATTEMPTS {
            if placed.len() == wanted {
                break;
            }
            let sw = rng.random_range(cfg.min_size..=cfg.max_size);
            let sh = rng.random_range(cfg.min_size..=cfg.max_size);
            let x0 = rng.random_range(0..=w - sw);
            let y0 = rng.random_range(0..=h - sh);
            let kind = rng.random_range(0..cfg.classes);
            let color: [u8; 3] = std::array::from_fn(|_| rng.random_range(SHAPE_MIN..=255));
            // one pixel of clearance so shapes never touch
            let clear = placed
                .iter()
                .all(|&(a0, b0, a1, b1)| x0 > a1 || x0 + sw + 1 < a0 || y0 > b1 || y0 + sh + 1 < b0);
            if !clear {
                continue;
            }
            placed.push((x0, y0, x0 + sw, y0 + sh));
            let pixels = shape_pixels(kind, x0, y0, sw, sh);
            let (mut xmin, mut ymin, mut xmax, mut ymax) = (usize::MAX, usize::MAX, 0, 0);
            for &(x, y) in &pixels {
                data[3 * (y * w + x)..3 * (y * w + x) + 3].copy_from_slice(&color);
                xmin = xmin.min(x);
                ymin = ymin.min(y);
                xmax = xmax.max(x);
                ymax = ymax.max(y);
            }
            let id = ds.annotations.len() as u64 + 1;
            ds.annotations.push(CocoAnnotation::from_box(
                id,
                image_id,
                kind as u64 + 1,
                BoxXyWh::from_inclusive_span(xmin, ymin, xmax, ymax),
            ));
        }
        let file_name = format!("synth_{image_id:05}.ppm");
        ds.images.push(CocoImage {
            id: image_id,
            file_name: file_name.clone(),
            width: w as u32,
            height: h as u32,
        });
        images.push(SyntheticImage {
            file_name,
            image: RgbImage { width: w, height: h, data },
        });
    }
    ds.validate()?;
    Ok((images, ds))
}

/// Generate into `dir`: one `.ppm` per image plus `annotations.json`.
pub fn write_synthetic(cfg: &SynthConfig, dir: &Path) -> Result<CocoDataset> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (images, ds) = generate_synthetic(cfg)?;
    for img in &images {
        write_ppm(&dir.join(&img.file_name), &img.image)?;
    }
    write_coco(&ds, &dir.join("annotations.json"))?;
    Ok(ds)
}
