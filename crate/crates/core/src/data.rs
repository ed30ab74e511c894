//! In-memory labeled image datasets and mini-batch iteration.

use crate::error::{Result, SnnError};
use crate::rng::{stream, StreamKind};
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;

/// Images in [0, 1] with integer class labels.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    /// Shape [n, channels, height, width].
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(SnnError::Input(format!(
                "dataset images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(SnnError::Input(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        Ok(Dataset {
            images,
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

    /// Input geometry (channels, height, width).
    pub fn input_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Copy out the samples at `indices` as one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let per: usize = self.images.shape()[1..].iter().product();
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::from_vec(&shape, data).expect("batch shape"),
            labels,
        )
    }

    /// First `n` samples, unshuffled.
    pub fn take(&self, n: usize) -> Dataset<T> {
        let n = n.min(self.len());
        Dataset {
            images: self.images.slice_rows(0, n),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }

    /// Deterministic epoch shuffle.
    pub fn shuffled_indices(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = stream(seed, StreamKind::Shuffle, &[epoch as u64]);
        idx.shuffle(&mut rng);
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_copies_requested_rows() {
        let images = Tensor::from_vec(&[3, 1, 1, 2], vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let ds = Dataset::new(images, vec![0, 1, 2], 3).unwrap();
        let (b, labels) = ds.batch(&[2, 0]);
        assert_eq!(b.data(), &[0.4, 0.5, 0.0, 0.1]);
        assert_eq!(labels, vec![2, 0]);
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let images = Tensor::<f32>::zeros(&[2, 1, 1, 1]);
        assert!(Dataset::new(images, vec![0, 5], 3).is_err());
    }

    #[test]
    fn shuffle_is_deterministic_per_epoch() {
        let images = Tensor::<f32>::zeros(&[10, 1, 1, 1]);
        let ds = Dataset::new(images, vec![0; 10], 2).unwrap();
        assert_eq!(ds.shuffled_indices(1, 0), ds.shuffled_indices(1, 0));
        assert_ne!(ds.shuffled_indices(1, 0), ds.shuffled_indices(1, 1));
    }
}
