use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Images in `[0, 1]` laid out `[N, C, H, W]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape(
                "LabeledDataset",
                format!("images must be [N,C,H,W], got {:?}", images.shape()),
            ));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "LabeledDataset",
                format!("{} images but {} labels", images.shape()[0], labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        images.check_unit_range()?;
        Ok(LabeledDataset {
            images,
            labels,
            num_classes,
        })
    }

    /// Empty set with the given per-image shape `[C, H, W]`.
    pub fn empty(image_shape: [usize; 3], num_classes: usize) -> Self {
        let [c, h, w] = image_shape;
        LabeledDataset {
            images: Tensor::zeros(vec![0, c, h, w]),
            labels: Vec::new(),
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        LabeledDataset {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        LabeledDataset {
            images: self.images.slice_rows(start, end),
            labels: self.labels[start..end].to_vec(),
            num_classes: self.num_classes,
        }
    }

    pub fn concat(&self, other: &LabeledDataset<T>) -> Result<Self> {
        if self.num_classes != other.num_classes {
            return Err(Error::InvalidArgument(format!(
                "class counts differ: {} vs {}",
                self.num_classes, other.num_classes
            )));
        }
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(LabeledDataset {
            images: Tensor::concat_rows(&[&self.images, &other.images])?,
            labels,
            num_classes: self.num_classes,
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Images flattened to `[N, C·H·W]`.
    pub fn flat_images(&self) -> Tensor<T> {
        let n = self.len();
        self.images
            .reshape(vec![n, self.images.row_len()])
            .expect("row-major reshape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_labels_and_pixels() {
        let img = Tensor::<f64>::full(vec![2, 1, 2, 2], 0.5);
        assert!(LabeledDataset::new(img.clone(), vec![0, 2], 2).is_err());
        let bad = Tensor::<f64>::full(vec![1, 1, 1, 1], 1.5);
        assert!(matches!(
            LabeledDataset::new(bad, vec![0], 2),
            Err(Error::PixelRange { .. })
        ));
        let ds = LabeledDataset::new(img, vec![0, 1], 2).unwrap();
        assert_eq!(ds.class_counts(), vec![1, 1]);
        assert_eq!(ds.flat_images().shape(), &[2, 4]);
    }
}
