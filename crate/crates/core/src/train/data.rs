use std::path::Path;

use crate::annotation::{read_coco, read_image, CocoDataset, SyntheticImage};
use crate::error::{Error, Result};
use crate::geometry::BoxCxCyWh;
use crate::matching::Targets;
use crate::model::DetectorConfig;
use crate::tensor::Tensor;

/// One decoded training or evaluation image.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image_id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// Normalized boxes; labels index `coco.categories`.
    pub targets: Targets,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub coco: CocoDataset,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Pair already-decoded images with their annotations. `images` must
    /// follow the order of `coco.images`.
    pub fn from_parts(coco: CocoDataset, images: Vec<Tensor>) -> Result<Self> {
        coco.validate()?;
        if images.len() != coco.images.len() {
            return Err(Error::contract(format!(
                "{} images for {} dataset entries",
                images.len(),
                coco.images.len()
            )));
        }
        let mut samples = Vec::with_capacity(images.len());
        for (meta, image) in coco.images.iter().zip(images) {
            let (w, h) = (meta.width as usize, meta.height as usize);
            if image.shape() != [3, h, w] {
                return Err(Error::shape("dataset image", image.shape(), &[3, h, w]));
            }
            let mut targets = Targets::default();
            for a in coco.annotations_for(meta.id) {
                let label = coco
                    .categories
                    .iter()
                    .position(|c| c.id == a.category_id)
                    .expect("validated category");
                targets.labels.push(label);
                targets.boxes.push(BoxCxCyWh::from_pixel_xywh(&a.bbox(), w as f64, h as f64));
            }
            samples.push(Sample {
                image_id: meta.id,
                file_name: meta.file_name.clone(),
                width: w,
                height: h,
                image,
                targets,
            });
        }
        Ok(Self { coco, samples })
    }

    pub fn from_synthetic(images: &[SyntheticImage], coco: CocoDataset) -> Result<Self> {
        let tensors = images
            .iter()
            .map(|s| crate::annotation::Image::Rgb(s.image.clone()).to_tensor())
            .collect();
        Self::from_parts(coco, tensors)
    }

    /// Check that images and categories fit the detector.
    pub fn check_compatible(&self, model: &DetectorConfig) -> Result<()> {
        if self.coco.categories.len() != model.num_classes {
            return Err(Error::contract(format!(
                "dataset has {} categories, detector is configured for {}",
                self.coco.categories.len(),
                model.num_classes
            )));
        }
        for (index, s) in self.samples.iter().enumerate() {
            if (s.width, s.height) != (model.image_width, model.image_height) {
                return Err(Error::Validation {
                    index,
                    message: format!(
                        "image {} is {}x{}, detector expects {}x{}",
                        s.file_name, s.width, s.height, model.image_width, model.image_height
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Read a COCO file and decode its images from `images_dir`.
pub fn load_dataset(annotations: &Path, images_dir: &Path, model: &DetectorConfig) -> Result<Dataset> {
    let coco = read_coco(annotations)?;
    let mut images = Vec::with_capacity(coco.images.len());
    for meta in &coco.images {
        let path = images_dir.join(&meta.file_name);
        let img = read_image(&path)?;
        if (img.width(), img.height()) != (meta.width as usize, meta.height as usize) {
            return Err(Error::Parse {
                path,
                message: format!(
                    "image is {}x{}, annotations say {}x{}",
                    img.width(),
                    img.height(),
                    meta.width,
                    meta.height
                ),
            });
        }
        images.push(img.to_tensor());
    }
    let ds = Dataset::from_parts(coco, images)?;
    ds.check_compatible(model)?;
    Ok(ds)
}
