//! Accuracy measurement for both execution modes, sharded over worker
//! threads. Shards are fixed-size index ranges and every random stream is
//! keyed by the global sample index, so results do not depend on the
//! thread count.

use crate::data::Dataset;
use crate::encoding::poisson_encode_offset;
use crate::error::Result;
use crate::network::{
    ann_forward, init_neuron_state, snn_forward_counting, ArchitectureSpec, NetworkParams,
    SpikeCounter,
};
use crate::tensor::{Scalar, Tensor};
use rayon::prelude::*;

/// Index of the row maximum per sample.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let n = logits.shape()[1];
    logits
        .data()
        .chunks(n)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect()
}

/// Analog-mode test accuracy (dropout disabled).
pub fn ann_accuracy<T: Scalar>(
    params: &NetworkParams<T>,
    arch: &ArchitectureSpec,
    ds: &Dataset<T>,
) -> Result<f64> {
    let n = ds.len();
    if n == 0 {
        return Ok(0.0);
    }
    let chunk = 256usize;
    let correct: usize = (0..n)
        .step_by(chunk)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|lo| -> Result<usize> {
            let hi = (lo + chunk).min(n);
            let idx: Vec<usize> = (lo..hi).collect();
            let (images, labels) = ds.batch(&idx);
            let masks = init_neuron_state::<T>(hi - lo, arch, None)?;
            let logits = ann_forward(params, arch, &images, &masks, None)?;
            Ok(argmax_rows(&logits)
                .iter()
                .zip(labels.iter())
                .filter(|(p, t)| p == t)
                .count())
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(correct as f64 / n as f64)
}

/// Spiking-mode evaluation settings.
#[derive(Debug, Clone, Copy)]
pub struct SnnEvalConfig<T> {
    pub timesteps: usize,
    pub leak: T,
    /// Seed for the Poisson input encoding; sample streams are keyed by
    /// global index so the batch split does not matter.
    pub seed: u64,
    pub batch: usize,
}

/// Spiking-mode test accuracy plus aggregated spike counts per weight slot.
pub fn snn_accuracy<T: Scalar>(
    params: &NetworkParams<T>,
    arch: &ArchitectureSpec,
    ds: &Dataset<T>,
    cfg: &SnnEvalConfig<T>,
) -> Result<(f64, SpikeCounter)> {
    let n = ds.len();
    let slot_count = arch.slots()?.len();
    if n == 0 {
        return Ok((0.0, SpikeCounter::new(slot_count)));
    }
    let results: Vec<(usize, SpikeCounter)> = (0..n)
        .step_by(cfg.batch.max(1))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|lo| -> Result<(usize, SpikeCounter)> {
            let hi = (lo + cfg.batch).min(n);
            let idx: Vec<usize> = (lo..hi).collect();
            let (images, labels) = ds.batch(&idx);
            let train = poisson_encode_offset(&images, cfg.timesteps, cfg.seed, lo)?;
            let mut state = init_neuron_state::<T>(hi - lo, arch, None)?;
            let mut counter = SpikeCounter::new(slot_count);
            snn_forward_counting(
                params,
                arch,
                &mut state,
                &train,
                0..cfg.timesteps,
                cfg.leak,
                None,
                Some(&mut counter),
            )?;
            let correct = argmax_rows(state.output_potential())
                .iter()
                .zip(labels.iter())
                .filter(|(p, t)| p == t)
                .count();
            Ok((correct, counter))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut counter = SpikeCounter::new(slot_count);
    let mut correct = 0usize;
    for (c, cnt) in &results {
        correct += c;
        counter.merge(cnt);
    }
    Ok((correct as f64 / n as f64, counter))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_picks_largest() {
        let t = Tensor::from_vec(&[2, 3], vec![0.1, 0.9, 0.2, 3.0, -1.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0]);
    }
}
