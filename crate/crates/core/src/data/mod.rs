//! Datasets and every on-disk format: synthetic sign generation, Netpbm
//! images and masks, model checkpoints, evaluation reports.

mod checkpoint;
mod netpbm;
mod report;
mod synthetic;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_checkpoint_entries, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use netpbm::{
    decode_pnm, encode_pgm, encode_ppm, image_to_ppm, load_image_dir, load_mask_pgm, mask_from_pgm, write_image_dir,
    Pnm, PnmKind,
};
pub use report::{read_report_csv, write_report_csv, EvaluationReport, ReportMeta, ReportRow, REPORT_HEADER};
pub use synthetic::{gen_synthetic_signs, SplitDataset, SyntheticParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Labelled image batch. Images are `[N, C, H, W]` with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    class_names: Vec<String>,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_names: Vec<String>, split: Split) -> Result<Self> {
        let n = match images.dims() {
            [n, _, _, _] => *n,
            other => {
                return Err(Error::shape(format!(
                    "dataset images must be [N, C, H, W], got {other:?}"
                )))
            }
        };
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for {n} images", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            images,
            labels,
            class_names,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// `[C, H, W]` of each image.
    pub fn image_dims(&self) -> [usize; 3] {
        let d = self.images.dims();
        [d[1], d[2], d[3]]
    }

    /// Image `i` as a `[1, C, H, W]` batch.
    pub fn image(&self, i: usize) -> Result<Tensor> {
        self.images.slice_outer(i)
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per: usize = self.image_dims().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index(format!("image {i} of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.image_dims();
        Ok((Tensor::new(vec![indices.len(), c, h, w], data)?, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (images, labels) = self.batch(indices)?;
        Ok(Dataset {
            images,
            labels,
            class_names: self.class_names.clone(),
            split: self.split,
        })
    }

    /// Examples whose label differs from `class`, in original order.
    pub fn without_class(&self, class: usize) -> Result<Dataset> {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] != class).collect();
        self.subset(&keep)
    }

    /// Same labels with replaced images (for attacked copies).
    pub fn with_images(&self, images: Tensor) -> Result<Dataset> {
        if images.dims() != self.images.dims() {
            return Err(Error::shape(format!(
                "replacement images {:?} do not match {:?}",
                images.dims(),
                self.images.dims()
            )));
        }
        Dataset::new(images, self.labels.clone(), self.class_names.clone(), self.split)
    }
}

/// `class_00`, `class_01`, ...
pub fn default_class_names(classes: usize) -> Vec<String> {
    (0..classes).map(|c| format!("class_{c:02}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_datasets() {
        let img = Tensor::zeros(&[2, 1, 2, 2]);
        let names = default_class_names(2);
        assert!(Dataset::new(img.clone(), vec![0, 1], names.clone(), Split::Train).is_ok());
        assert!(Dataset::new(img.clone(), vec![0], names.clone(), Split::Train).is_err());
        assert!(Dataset::new(img.clone(), vec![0, 2], names.clone(), Split::Train).is_err());
        let bright = Tensor::full(&[2, 1, 2, 2], 1.5);
        assert!(Dataset::new(bright, vec![0, 1], names, Split::Train).is_err());
    }
}
