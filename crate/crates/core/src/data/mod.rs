//! Datasets, minibatch sampling and stochastic augmentation.

mod augment;
mod image;
mod sampler;
mod synthetic;

pub use augment::{augment, AugmentSpec};
pub use image::{encode_image_binary, parse_image_binary, read_image_binary, write_image_binary, IMAGE_MAGIC};
pub use sampler::{sample_batch, steps_per_epoch, Batch, EpochSampler};
pub use synthetic::{make_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    /// `[N, D]` feature vectors.
    Vector,
    /// `[N, C, H, W]` images in `[0, 1]`.
    Image,
}

/// Labelled samples of one split of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor<f32>,
    labels: Vec<usize>,
    class_count: usize,
    split: Split,
    task_id: u64,
}

impl Dataset {
    pub fn new(inputs: Tensor<f32>, labels: Vec<usize>, class_count: usize, split: Split, task_id: u64) -> Result<Self> {
        if !matches!(inputs.shape().len(), 2 | 4) {
            return Err(Error::Data(format!("inputs must be [N, D] or [N, C, H, W], got {:?}", inputs.shape())));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} samples but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!("label {bad} out of range for {class_count} classes")));
        }
        Ok(Self {
            inputs,
            labels,
            class_count,
            split,
            task_id,
        })
    }

    pub fn inputs(&self) -> &Tensor<f32> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn task_id(&self) -> u64 {
        self.task_id
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn modality(&self) -> Modality {
        if self.inputs.shape().len() == 4 {
            Modality::Image
        } else {
            Modality::Vector
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        }
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            inputs: self.inputs.slice_rows(0, n),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    /// Concatenation of datasets with identical sample shapes; the task id of
    /// the first is kept.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::Data("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut class_count = 0;
        for p in parts {
            if p.sample_shape() != first.sample_shape() {
                return Err(Error::Data("cannot concatenate different sample shapes".into()));
            }
            data.extend_from_slice(p.inputs.data());
            labels.extend_from_slice(&p.labels);
            class_count = class_count.max(p.class_count);
        }
        let mut shape = first.inputs.shape().to_vec();
        shape[0] = labels.len();
        Dataset::new(Tensor::new(shape, data)?, labels, class_count, first.split, first.task_id)
    }
}

/// Train and test splits of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub test: Dataset,
}
