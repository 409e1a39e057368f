//! COCO detection JSON: `images`, `annotations`, `categories`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxXyWh;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]` in pixels.
    pub bbox: [f64; 4],
    pub area: f64,
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// Slack allowed when checking that boxes stay inside their image.
const BOUNDS_TOLERANCE: f64 = 1e-9;

impl CocoAnnotation {
    pub fn from_box(id: u64, image_id: u64, category_id: u64, b: BoxXyWh) -> Self {
        Self {
            id,
            image_id,
            category_id,
            bbox: b.to_array(),
            area: b.area(),
            iscrowd: 0,
        }
    }

    pub fn bbox(&self) -> BoxXyWh {
        let [x, y, w, h] = self.bbox;
        BoxXyWh { x, y, w, h }
    }
}

impl CocoDataset {
    /// Check id uniqueness, referential integrity and box extents.
    pub fn validate(&self) -> Result<()> {
        let fail = |index: usize, message: String| Err(Error::Validation { index, message });
        let mut image_ids = HashSet::new();
        for (i, img) in self.images.iter().enumerate() {
            if !image_ids.insert(img.id) {
                return fail(i, format!("images: duplicate image id {}", img.id));
            }
            if img.width == 0 || img.height == 0 {
                return fail(i, format!("images: image {} has zero extent", img.id));
            }
        }
        let mut category_ids = HashSet::new();
        for (i, c) in self.categories.iter().enumerate() {
            if !category_ids.insert(c.id) {
                return fail(i, format!("categories: duplicate category id {}", c.id));
            }
        }
        let mut ann_ids = HashSet::new();
        for (i, a) in self.annotations.iter().enumerate() {
            if !ann_ids.insert(a.id) {
                return fail(i, format!("annotations: duplicate annotation id {}", a.id));
            }
            let Some(img) = self.images.iter().find(|img| img.id == a.image_id) else {
                return fail(i, format!("annotations: image_id {} does not exist", a.image_id));
            };
            if !category_ids.contains(&a.category_id) {
                return fail(i, format!("annotations: category_id {} does not exist", a.category_id));
            }
            let [x, y, w, h] = a.bbox;
            if a.bbox.iter().any(|v| !v.is_finite()) {
                return fail(i, format!("annotations: bbox {:?} is not finite", a.bbox));
            }
            if w <= 0.0 || h <= 0.0 {
                return fail(i, format!("annotations: bbox {:?} has non-positive extent", a.bbox));
            }
            if x < -BOUNDS_TOLERANCE
                || y < -BOUNDS_TOLERANCE
                || x + w > img.width as f64 + BOUNDS_TOLERANCE
                || y + h > img.height as f64 + BOUNDS_TOLERANCE
            {
                return fail(
                    i,
                    format!(
                        "annotations: bbox {:?} leaves image {} ({}x{})",
                        a.bbox, img.id, img.width, img.height
                    ),
                );
            }
        }
        Ok(())
    }

    pub fn image(&self, id: u64) -> Option<&CocoImage> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn annotations_for(&self, image_id: u64) -> impl Iterator<Item = &CocoAnnotation> {
        self.annotations.iter().filter(move |a| a.image_id == image_id)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let ds: CocoDataset = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        ds.validate()?;
        Ok(ds)
    }
}

/// Validate and write `dataset` as JSON.
pub fn write_coco(dataset: &CocoDataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let mut text = dataset.to_json()?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read and validate a COCO detection file. Unknown keys are ignored.
pub fn read_coco(path: &Path) -> Result<CocoDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CocoDataset::from_json(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CocoDataset {
        CocoDataset {
            images: vec![
                CocoImage { id: 1, file_name: "a.ppm".into(), width: 100, height: 80 },
                CocoImage { id: 2, file_name: "b.ppm".into(), width: 64, height: 64 },
            ],
            annotations: vec![
                CocoAnnotation { id: 1, image_id: 1, category_id: 1, bbox: [10.0, 20.0, 30.5, 4.0], area: 122.0, iscrowd: 0 },
                CocoAnnotation { id: 2, image_id: 2, category_id: 2, bbox: [0.0, 0.0, 64.0, 64.0], area: 4096.0, iscrowd: 0 },
            ],
            categories: vec![
                CocoCategory { id: 1, name: "rectangle".into() },
                CocoCategory { id: 2, name: "ellipse".into() },
            ],
        }
    }

    #[test]
    fn write_read_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        write_coco(&sample(), &p1).unwrap();
        let back = read_coco(&p1).unwrap();
        assert_eq!(back, sample());
        write_coco(&back, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn golden_fixture() {
        let text = r#"{
          "info": {"description": "fixture"},
          "images": [
            {"id": 7, "file_name": "x.pgm", "width": 384, "height": 286},
            {"id": 9, "file_name": "y.pgm", "width": 384, "height": 286}
          ],
          "annotations": [
            {"id": 1, "image_id": 9, "category_id": 3, "bbox": [110, 83, 20, 14], "area": 280, "iscrowd": 0}
          ],
          "categories": [{"id": 3, "name": "nostril"}]
        }"#;
        let ds = CocoDataset::from_json(text, Path::new("fixture.json")).unwrap();
        assert_eq!(ds.images.len(), 2);
        assert_eq!(ds.images[1].file_name, "y.pgm");
        assert_eq!(ds.annotations[0].bbox, [110.0, 83.0, 20.0, 14.0]);
        assert_eq!(ds.annotations[0].area, 280.0);
        assert_eq!(ds.categories[0].name, "nostril");
    }

    #[test]
    fn dangling_image_id_is_named() {
        let mut ds = sample();
        ds.annotations[1].image_id = 42;
        let err = ds.validate().unwrap_err();
        assert!(matches!(err, Error::Validation { index: 1, .. }));
        assert!(err.to_string().contains("image_id 42"));
    }

    #[test]
    fn negative_extent_rejected() {
        let mut ds = sample();
        ds.annotations[0].bbox[2] = -1.0;
        assert!(ds.validate().is_err());
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        assert!(matches!(
            CocoDataset::from_json("{\"images\": [", Path::new("bad.json")),
            Err(Error::Parse { .. })
        ));
    }
}
