//! Datasets, the synthetic generator, the CIFAR-10 reader and label-skewed
//! partitioning.

mod cifar;
mod partition;
mod synth;

pub use cifar::{load_cifar10, read_cifar_batch, parse_cifar_records, CIFAR_MEAN, CIFAR_STD};
pub use partition::{
    class_histogram, dirichlet_partition, mean_chi_square, ClientSplit, Partition, PartitionSpec, MAX_RETRIES,
};
pub use synth::{synth_dataset, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images stored as `n x C x H x W` single-precision values (already
/// standardized) with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    images: Vec<f32>,
    shape: [usize; 3],
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Vec<f32>, shape: [usize; 3], labels: Vec<usize>, classes: usize) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if labels.is_empty() || per == 0 || images.len() != labels.len() * per {
            return Err(Error::Structural(format!(
                "{} image values for {} labels of shape {shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Structural(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self {
            images,
            shape,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.sample_len();
        &self.images[i * per..][..per]
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Stacks the listed samples into a `batch x C x H x W` tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| v as f64));
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.shape;
        let t = Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape");
        (t, labels)
    }

    /// Concatenates datasets with identical image shape and class count.
    pub fn concat(parts: &[&LabeledDataset]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Structural("nothing to concatenate".into()))?;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.shape != first.shape || p.classes != first.classes {
                return Err(Error::Structural("datasets differ in shape or classes".into()));
            }
            images.extend_from_slice(&p.images);
            labels.extend_from_slice(&p.labels);
        }
        Self::new(images, first.shape, labels, first.classes)
    }
}
