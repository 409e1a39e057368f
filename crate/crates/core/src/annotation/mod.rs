//! Building box annotations from keypoints and segmentation masks, COCO
//! IO, and a synthetic dataset generator.

mod coco;
mod pnm;
mod pts;
mod synth;

pub use coco::{read_coco, write_coco, CocoAnnotation, CocoCategory, CocoDataset, CocoImage};
pub use pnm::{decode, read_dimensions, read_image, read_pgm, write_pgm, write_ppm, GrayImage, Image, RgbImage};
pub use pts::{parse_pts, read_pts};
pub use synth::{generate_synthetic, write_synthetic, SynthConfig, SyntheticImage, SHAPE_NAMES};

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxXyWh;

/// Default nostril box size in pixels.
pub const DEFAULT_BOX_W: f64 = 20.0;
pub const DEFAULT_BOX_H: f64 = 14.0;

/// Nostril indices in the 20-point face markup (right, left).
pub const DEFAULT_NOSTRIL_POINTS: [usize; 2] = [15, 16];

/// Box of size `box_w x box_h` centered on a keypoint, clipped to the image.
/// `None` when the keypoint lies outside the image or nothing survives
/// clipping.
pub fn keypoint_to_bbox(
    x: f64,
    y: f64,
    box_w: f64,
    box_h: f64,
    img_w: usize,
    img_h: usize,
) -> Result<Option<BoxXyWh>> {
    if !(box_w > 0.0 && box_h > 0.0 && box_w.is_finite() && box_h.is_finite()) {
        return Err(Error::contract(format!("box size {box_w}x{box_h} must be positive")));
    }
    let (iw, ih) = (img_w as f64, img_h as f64);
    if !(x >= 0.0 && x <= iw && y >= 0.0 && y <= ih) {
        return Ok(None);
    }
    let x1 = (x - box_w / 2.0).max(0.0);
    let y1 = (y - box_h / 2.0).max(0.0);
    let x2 = (x + box_w / 2.0).min(iw);
    let y2 = (y + box_h / 2.0).min(ih);
    if x2 <= x1 || y2 <= y1 {
        return Ok(None);
    }
    Ok(Some(BoxXyWh::new(x1, y1, x2 - x1, y2 - y1)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoxMode {
    /// One box per 8-connected foreground component.
    Component,
    /// One box around all foreground.
    #[default]
    Global,
}

impl std::str::FromStr for BoxMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "component" => Ok(BoxMode::Component),
            "global" => Ok(BoxMode::Global),
            other => Err(Error::contract(format!("unknown box mode {other:?} (use global or component)"))),
        }
    }
}

/// Boxes around the nonzero pixels of a mask, using inclusive pixel spans.
/// Components are reported in raster order of their first pixel.
pub fn mask_to_bboxes(mask: &GrayImage, mode: BoxMode) -> Vec<BoxXyWh> {
    let (w, h) = (mask.width, mask.height);
    let fg = |x: usize, y: usize| mask.data[y * w + x] > 0;
    match mode {
        BoxMode::Global => {
            let mut span: Option<(usize, usize, usize, usize)> = None;
            for y in 0..h {
                for x in 0..w {
                    if fg(x, y) {
                        span = Some(match span {
                            None => (x, y, x, y),
                            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                        });
                    }
                }
            }
            span.map(|(x0, y0, x1, y1)| BoxXyWh::from_inclusive_span(x0, y0, x1, y1))
                .into_iter()
                .collect()
        }
        BoxMode::Component => {
            let mut seen = vec![false; w * h];
            let mut boxes = Vec::new();
            let mut queue = VecDeque::new();
            for y in 0..h {
                for x in 0..w {
                    if !fg(x, y) || seen[y * w + x] {
                        continue;
                    }
                    seen[y * w + x] = true;
                    queue.push_back((x, y));
                    let (mut x0, mut y0, mut x1, mut y1) = (x, y, x, y);
                    while let Some((cx, cy)) = queue.pop_front() {
                        x0 = x0.min(cx);
                        y0 = y0.min(cy);
                        x1 = x1.max(cx);
                        y1 = y1.max(cy);
                        for ny in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                            for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                                if fg(nx, ny) && !seen[ny * w + nx] {
                                    seen[ny * w + nx] = true;
                                    queue.push_back((nx, ny));
                                }
                            }
                        }
                    }
                    boxes.push(BoxXyWh::from_inclusive_span(x0, y0, x1, y1));
                }
            }
            boxes
        }
    }
}

/// Regular files in `dir`, sorted by name.
fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Nostril dataset from `*.pts` keypoint files and same-stem `.pgm`/`.ppm`
/// images. Files without a readable image or keypoints are skipped with a
/// warning.
pub fn annotate_nostril(
    keypoints_dir: &Path,
    images_dir: &Path,
    box_w: f64,
    box_h: f64,
    point_indices: &[usize],
) -> Result<CocoDataset> {
    if !(box_w > 0.0 && box_h > 0.0) {
        return Err(Error::contract(format!("box size {box_w}x{box_h} must be positive")));
    }
    let mut ds = CocoDataset {
        categories: vec![CocoCategory { id: 1, name: "nostril".into() }],
        ..Default::default()
    };
    let pts_files: Vec<PathBuf> = sorted_files(keypoints_dir)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "pts"))
        .collect();
    if pts_files.is_empty() {
        warn!("no .pts files in {}", keypoints_dir.display());
    }
    for pts_path in pts_files {
        let stem = pts_path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let Some(image_path) = ["pgm", "ppm"]
            .iter()
            .map(|ext| images_dir.join(format!("{stem}.{ext}")))
            .find(|p| p.is_file())
        else {
            warn!("{}: no matching image in {}, skipped", pts_path.display(), images_dir.display());
            continue;
        };
        let (w, h) = match read_dimensions(&image_path) {
            Ok(d) => d,
            Err(e) => {
                warn!("{e}, skipped");
                continue;
            }
        };
        let points = match read_pts(&pts_path) {
            Ok(p) => p,
            Err(e) => {
                warn!("{e}, skipped");
                continue;
            }
        };
        let image_id = ds.images.len() as u64 + 1;
        ds.images.push(CocoImage {
            id: image_id,
            file_name: file_name(&image_path),
            width: w as u32,
            height: h as u32,
        });
        for &idx in point_indices {
            let Some(&(x, y)) = points.get(idx) else {
                warn!("{}: has no point {idx}", pts_path.display());
                continue;
            };
            match keypoint_to_bbox(x, y, box_w, box_h, w, h)? {
                Some(b) => {
                    let id = ds.annotations.len() as u64 + 1;
                    ds.annotations.push(CocoAnnotation::from_box(id, image_id, 1, b));
                }
                None => warn!("{}: point {idx} ({x}, {y}) lies outside the image", pts_path.display()),
            }
        }
    }
    ds.validate()?;
    Ok(ds)
}

/// Glottis dataset from binary P5 masks (nonzero = foreground). Files that
/// are not P5 images are skipped with a warning.
pub fn annotate_glottis(masks_dir: &Path, mode: BoxMode) -> Result<CocoDataset> {
    let mut ds = CocoDataset {
        categories: vec![CocoCategory { id: 1, name: "glottis".into() }],
        ..Default::default()
    };
    let files = sorted_files(masks_dir)?;
    if files.is_empty() {
        warn!("no files in {}", masks_dir.display());
    }
    for path in files {
        let mask = match read_pgm(&path) {
            Ok(m) => m,
            Err(e) => {
                warn!("{e}, skipped");
                continue;
            }
        };
        let image_id = ds.images.len() as u64 + 1;
        ds.images.push(CocoImage {
            id: image_id,
            file_name: file_name(&path),
            width: mask.width as u32,
            height: mask.height as u32,
        });
        for b in mask_to_bboxes(&mask, mode) {
            let id = ds.annotations.len() as u64 + 1;
            ds.annotations.push(CocoAnnotation::from_box(id, image_id, 1, b));
        }
    }
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests;
