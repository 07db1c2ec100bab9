use crate::diffgraph::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Images `[N, C, H, W]` in `[0, 1]` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages<T: Scalar = f32> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> LabeledImages<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 || images.batch() != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        Ok(LabeledImages { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        LabeledImages {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Indices of examples labeled `class`.
    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }
}

/// A train/test split with its class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar = f32> {
    pub train: LabeledImages<T>,
    pub test: LabeledImages<T>,
    pub classes: usize,
    /// Where the data came from, e.g. `synthetic-shapes(seed=3)`.
    pub provenance: String,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        train: LabeledImages<T>,
        test: LabeledImages<T>,
        classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        for (name, part) in [("train", &train), ("test", &test)] {
            if let Some(&bad) = part.labels.iter().find(|&&l| l >= classes) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    classes,
                });
            }
            if part.images.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
                return Err(Error::Range(format!("{name} pixels outside [0, 1]")));
            }
        }
        if train.image_shape() != test.image_shape() {
            return Err(Error::Shape("train and test image shapes differ".into()));
        }
        Ok(Dataset {
            train,
            test,
            classes,
            provenance: provenance.into(),
        })
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.train.image_shape()
    }
}
