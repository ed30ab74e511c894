//! Poisson rate coding: real-valued images in [0, 1] become binary spike
//! trains whose per-pixel firing rate matches the pixel intensity.

use crate::error::{Result, SnnError};
use crate::rng::{stream, StreamKind};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;

/// Binary spike frames, one per time step, each shaped like the image batch.
#[derive(Debug, Clone)]
pub struct SpikeTrain<T> {
    pub frames: Vec<Tensor<T>>,
}

impl<T: Scalar> SpikeTrain<T> {
    pub fn timesteps(&self) -> usize {
        self.frames.len()
    }

    pub fn frame(&self, t: usize) -> &Tensor<T> {
        &self.frames[t]
    }
}

/// Encode a batch of images into spike trains: at every step each pixel
/// draws an independent uniform number in [0, 1) and fires when the draw is
/// strictly below the pixel value. A pixel of exactly 1.0 therefore always
/// fires and 0.0 never does.
///
/// The stream for sample `b` depends only on (seed, b), never on batch
/// composition, so identical seeds reproduce identical trains sample by
/// sample.
pub fn poisson_encode<T: Scalar>(
    images: &Tensor<T>,
    timesteps: usize,
    seed: u64,
) -> Result<SpikeTrain<T>> {
    poisson_encode_offset(images, timesteps, seed, 0)
}

/// Like [`poisson_encode`] but with sample streams keyed by
/// `first_index + b` instead of the position `b` within this tensor.
/// Encoding a sub-range of a batch with the matching offset reproduces the
/// corresponding slice of the full batch's train bit for bit.
pub fn poisson_encode_offset<T: Scalar>(
    images: &Tensor<T>,
    timesteps: usize,
    seed: u64,
    first_index: usize,
) -> Result<SpikeTrain<T>> {
    if timesteps == 0 {
        return Err(SnnError::Config("spike train needs at least 1 time step".into()));
    }
    if images.shape().is_empty() {
        return Err(SnnError::Input("poisson_encode needs a batched image tensor".into()));
    }
    for &p in images.data() {
        let v = p.to_f64();
        if !(0.0..=1.0).contains(&v) {
            return Err(SnnError::Input(format!(
                "pixel value {v} outside [0, 1]; normalize images before encoding"
            )));
        }
    }
    let batch = images.shape()[0];
    let per_sample: usize = images.shape()[1..].iter().product();
    let mut frames = vec![Tensor::zeros(images.shape()); timesteps];
    for b in 0..batch {
        let mut rng = stream(seed, StreamKind::PoissonEncode, &[(first_index + b) as u64]);
        let pixels = &images.data()[b * per_sample..(b + 1) * per_sample];
        for frame in frames.iter_mut() {
            let out = &mut frame.data_mut()[b * per_sample..(b + 1) * per_sample];
            for (o, &p) in out.iter_mut().zip(pixels.iter()) {
                let draw: f64 = rng.gen();
                if draw < p.to_f64() {
                    *o = T::one();
                }
            }
        }
    }
    Ok(SpikeTrain { frames })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_pixel_never_fires_one_always() {
        let img = Tensor::from_vec(&[1, 2], vec![0.0f64, 1.0]).unwrap();
        let train = poisson_encode(&img, 64, 9).unwrap();
        for f in &train.frames {
            assert_eq!(f.data()[0], 0.0);
            assert_eq!(f.data()[1], 1.0);
        }
    }

    #[test]
    fn half_pixel_rate_within_binomial_bounds() {
        let img = Tensor::from_vec(&[1, 1], vec![0.5f64]).unwrap();
        let t = 1000;
        let train = poisson_encode(&img, t, 4).unwrap();
        let count: f64 = train.frames.iter().map(|f| f.data()[0]).sum();
        let rate = count / t as f64;
        let sigma3 = 3.0 * (0.5 * 0.5 / t as f64).sqrt();
        assert!((rate - 0.5).abs() < sigma3, "rate {rate} outside 3-sigma band");
    }

    #[test]
    fn same_seed_identical_different_seed_diverges() {
        let img = Tensor::from_vec(&[2, 3], vec![0.2, 0.5, 0.8, 0.3, 0.6, 0.9]).unwrap();
        let a = poisson_encode(&img, 20, 11).unwrap();
        let b = poisson_encode(&img, 20, 11).unwrap();
        let c = poisson_encode(&img, 20, 12).unwrap();
        for t in 0..20 {
            assert_eq!(a.frames[t].data(), b.frames[t].data());
        }
        let differs = (0..20).any(|t| a.frames[t].data() != c.frames[t].data());
        assert!(differs);
    }

    #[test]
    fn sample_stream_independent_of_batch_composition() {
        // sample 0 encoded alone equals sample 0 encoded inside a batch
        let solo = Tensor::from_vec(&[1, 2], vec![0.4f64, 0.7]).unwrap();
        let pair = Tensor::from_vec(&[2, 2], vec![0.4f64, 0.7, 0.9, 0.1]).unwrap();
        let a = poisson_encode(&solo, 16, 3).unwrap();
        let b = poisson_encode(&pair, 16, 3).unwrap();
        for t in 0..16 {
            assert_eq!(a.frames[t].data()[..2], b.frames[t].data()[..2]);
        }
    }

    #[test]
    fn out_of_range_pixel_rejected() {
        let img = Tensor::from_vec(&[1, 1], vec![1.5f64]).unwrap();
        assert!(matches!(
            poisson_encode(&img, 4, 0),
            Err(SnnError::Input(_))
        ));
    }
}
