//! Training drivers: constrained analog pre-training and spike-timing
//! fine-tuning of a converted network. Mini-batches are split into
//! contiguous shards processed in parallel; shard gradients are reduced in
//! shard order, so runs are reproducible for a fixed configuration.

pub mod backward;
pub mod eval;
pub mod metrics;
pub mod optimizer;

pub use backward::{stdb_backward, truncated_bptt_step, BackwardConfig, GradientAccumulator};
pub use eval::{ann_accuracy, argmax_rows, snn_accuracy, SnnEvalConfig};
pub use metrics::MetricsSink;
pub use optimizer::{Optimizer, OptimizerKind};

use crate::data::Dataset;
use crate::encoding::poisson_encode_offset;
use crate::error::{Result, SnnError};
use crate::network::{
    ann_backward, ann_forward, init_neuron_state, AnnCache, ArchitectureSpec, NetworkParams,
};
use crate::neuron::{SurrogateConfig, SurrogateFamily};
use crate::rng::{derive_seed, StreamKind};
use crate::tensor::ops::softmax_cross_entropy;
use crate::tensor::{Scalar, Tensor};
use rayon::prelude::*;

/// Hyperparameters shared by both training phases.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Simulation length T for the spiking phase.
    pub timesteps: usize,
    /// Truncation interval t'; equal to `timesteps` for full unrolling.
    pub truncate: usize,
    pub surrogate: SurrogateFamily,
    pub alpha: f64,
    pub beta: f64,
    /// Back the spike-time surrogate with its precomputed table.
    pub use_lut: bool,
    /// Hidden-layer membrane leak during the spiking phase.
    pub leak: f64,
    pub seed: u64,
    /// Optional global gradient-norm bound.
    pub grad_clip: Option<f64>,
    /// Train on only the first n samples when set (desk-scale runs).
    pub train_subset: Option<usize>,
    /// Evaluate on only the first n test samples when set.
    pub eval_subset: Option<usize>,
    /// Stop as soon as test accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 20,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            timesteps: 20,
            truncate: 20,
            surrogate: SurrogateFamily::SpikeTime,
            alpha: 0.3,
            beta: 0.01,
            use_lut: true,
            leak: 1.0,
            seed: 42,
            grad_clip: None,
            train_subset: None,
            eval_subset: None,
            stop_at_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 {
            return Err(SnnError::Config("learning rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(SnnError::Config("batch size must be >= 1".into()));
        }
        if self.timesteps == 0 {
            return Err(SnnError::Config("timesteps must be >= 1".into()));
        }
        if self.truncate == 0
            || self.truncate > self.timesteps
            || self.timesteps % self.truncate != 0
        {
            return Err(SnnError::Config(format!(
                "truncation interval {} must divide timesteps {}",
                self.truncate, self.timesteps
            )));
        }
        if !(0.0 < self.leak && self.leak <= 1.0) {
            return Err(SnnError::Config(format!(
                "leak {} outside (0, 1]",
                self.leak
            )));
        }
        if self.alpha <= 0.0 || self.beta < 0.0 {
            return Err(SnnError::Config(
                "surrogate constants must satisfy alpha > 0, beta >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn surrogate_config<T: Scalar>(&self) -> SurrogateConfig<T> {
        let cfg = SurrogateConfig::new(
            self.surrogate,
            T::from_f64(self.alpha),
            T::from_f64(self.beta),
        );
        if self.use_lut && self.surrogate == SurrogateFamily::SpikeTime {
            cfg.with_lut(self.timesteps)
        } else {
            cfg
        }
    }
}

/// Contiguous shard bounds covering 0..n.
fn shard_ranges(n: usize, parts: usize) -> Vec<(usize, usize)> {
    let parts = parts.clamp(1, n.max(1));
    let base = n / parts;
    let extra = n % parts;
    let mut out = Vec::with_capacity(parts);
    let mut lo = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        if len == 0 {
            break;
        }
        out.push((lo, lo + len));
        lo += len;
    }
    out
}

/// Train the constrained analog network (no bias terms anywhere, average
/// pooling, per-batch dropout masks) from random initialization.
pub fn train_ann<T: Scalar>(
    arch: &ArchitectureSpec,
    train_ds: &Dataset<T>,
    test_ds: Option<&Dataset<T>>,
    cfg: &TrainConfig,
    metrics: &mut MetricsSink,
) -> Result<NetworkParams<T>> {
    cfg.validate()?;
    arch.validate()?;
    let effective = match cfg.train_subset {
        Some(n) => train_ds.take(n),
        None => train_ds.clone(),
    };
    let eval_ds = test_ds.map(|ds| match cfg.eval_subset {
        Some(n) => ds.take(n),
        None => ds.clone(),
    });
    let mut params = NetworkParams::random_init(arch, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, T::from_f64(cfg.lr), &params);
    let clip = cfg.grad_clip.map(T::from_f64);

    for epoch in 1..=cfg.epochs {
        let order = effective.shuffled_indices(cfg.seed, epoch);
        let mut seen = 0usize;
        let mut correct = 0usize;
        let mut loss_sum = 0.0f64;
        for (batch_i, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (images, labels) = effective.batch(chunk);
            let b_total = chunk.len();
            let shards = shard_ranges(b_total, rayon::current_num_threads());
            let results: Vec<(f64, usize, Vec<Tensor<T>>)> = shards
                .par_iter()
                .enumerate()
                .map(|(si, &(lo, hi))| -> Result<(f64, usize, Vec<Tensor<T>>)> {
                    let imgs = images.slice_rows(lo, hi);
                    let tgts = &labels[lo..hi];
                    let mask_seed = derive_seed(
                        cfg.seed,
                        StreamKind::DropoutMask,
                        &[epoch as u64, batch_i as u64, si as u64],
                    );
                    let masks = init_neuron_state::<T>(hi - lo, arch, Some(mask_seed))?;
                    let mut cache = AnnCache::default();
                    let logits = ann_forward(&params, arch, &imgs, &masks, Some(&mut cache))?;
                    let (loss, g) = softmax_cross_entropy(&logits, tgts)?;
                    let grads = ann_backward(&params, arch, &cache, &masks, &g)?;
                    let c = argmax_rows(&logits)
                        .iter()
                        .zip(tgts.iter())
                        .filter(|(p, t)| p == t)
                        .count();
                    Ok((loss.to_f64(), c, grads))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| {
                    SnnError::Config(format!("epoch {epoch} batch {batch_i}: {e}"))
                })?;

            // weighted reduction in shard order: mean over the full batch
            let mut grads = params.zeros_like();
            let mut loss = 0.0f64;
            for ((lo, hi), (l, c, g)) in shards.iter().zip(results.into_iter()) {
                let w = (hi - lo) as f64 / b_total as f64;
                loss += w * l;
                correct += c;
                for (acc, gs) in grads.iter_mut().zip(g.iter()) {
                    acc.axpy(T::from_f64(w), gs)?;
                }
            }
            if !loss.is_finite() {
                return Err(SnnError::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {batch_i} (lr {}, batch {})",
                    cfg.lr, cfg.batch_size
                )));
            }
            loss_sum += loss * b_total as f64;
            seen += b_total;
            opt.step(&mut params, &grads, clip)?;
        }
        metrics.record(
            epoch,
            "train",
            correct as f64 / seen.max(1) as f64,
            loss_sum / seen.max(1) as f64,
            None,
        )?;
        if let Some(eval) = eval_ds.as_ref() {
            let acc = ann_accuracy(&params, arch, eval)?;
            metrics.record(epoch, "test", acc, f64::NAN, None)?;
            if cfg.stop_at_accuracy.is_some_and(|target| acc >= target) {
                break;
            }
        }
    }
    Ok(params)
}

/// Fine-tune a converted spiking network with surrogate-gradient
/// backpropagation through time. Thresholds are never altered; only
/// weights move. Returns the tuned parameters (0 epochs returns the
/// initialization unchanged).
pub fn train_stdb<T: Scalar>(
    mut params: NetworkParams<T>,
    arch: &ArchitectureSpec,
    train_ds: &Dataset<T>,
    test_ds: Option<&Dataset<T>>,
    cfg: &TrainConfig,
    metrics: &mut MetricsSink,
) -> Result<NetworkParams<T>> {
    cfg.validate()?;
    params.matches(arch)?;
    let effective = match cfg.train_subset {
        Some(n) => train_ds.take(n),
        None => train_ds.clone(),
    };
    let eval_ds = test_ds.map(|ds| match cfg.eval_subset {
        Some(n) => ds.take(n),
        None => ds.clone(),
    });
    let thresholds_before = params.thresholds.clone();
    let mut opt = Optimizer::new(cfg.optimizer, T::from_f64(cfg.lr), &params);
    let clip = cfg.grad_clip.map(T::from_f64);
    let bcfg = BackwardConfig {
        surrogate: cfg.surrogate_config::<T>(),
        leak: T::from_f64(cfg.leak),
    };
    let eval_cfg = SnnEvalConfig {
        timesteps: cfg.timesteps,
        leak: T::from_f64(cfg.leak),
        seed: derive_seed(cfg.seed, StreamKind::PoissonEncode, &[u64::MAX]),
        batch: 64,
    };
    let slots = arch.slots()?;
    let neuron_counts: Vec<f64> = spiking_neuron_counts(arch)?;

    for epoch in 1..=cfg.epochs {
        let order = effective.shuffled_indices(cfg.seed, epoch);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for (batch_i, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (images, labels) = effective.batch(chunk);
            let b_total = chunk.len();
            let enc_seed = derive_seed(
                cfg.seed,
                StreamKind::PoissonEncode,
                &[epoch as u64, batch_i as u64],
            );
            let shards = shard_ranges(b_total, rayon::current_num_threads());
            let results: Vec<(f64, GradientAccumulator<T>)> = shards
                .par_iter()
                .enumerate()
                .map(|(si, &(lo, hi))| -> Result<(f64, GradientAccumulator<T>)> {
                    let imgs = images.slice_rows(lo, hi);
                    let tgts = &labels[lo..hi];
                    let train = poisson_encode_offset(&imgs, cfg.timesteps, enc_seed, lo)?;
                    let mask_seed = derive_seed(
                        cfg.seed,
                        StreamKind::DropoutMask,
                        &[epoch as u64, batch_i as u64, si as u64],
                    );
                    let mut state = init_neuron_state::<T>(hi - lo, arch, Some(mask_seed))?;
                    let mut acc = GradientAccumulator::zeros(&params);
                    let (loss, _) = truncated_bptt_step(
                        &params,
                        arch,
                        &mut state,
                        &train,
                        tgts,
                        cfg.truncate,
                        &bcfg,
                        &mut acc,
                    )?;
                    Ok((loss.to_f64(), acc))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| {
                    SnnError::Config(format!("epoch {epoch} batch {batch_i}: {e}"))
                })?;

            let mut grads = GradientAccumulator::zeros(&params);
            let mut loss = 0.0f64;
            for ((lo, hi), (l, acc)) in shards.iter().zip(results.into_iter()) {
                let w = (hi - lo) as f64 / b_total as f64;
                loss += w * l;
                grads.add_scaled(&acc, T::from_f64(w))?;
            }
            if !loss.is_finite() {
                return Err(SnnError::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {batch_i}"
                )));
            }
            loss_sum += loss * b_total as f64;
            seen += b_total;
            opt.step(&mut params, &grads.grads, clip)?;
        }
        debug_assert_eq!(params.thresholds, thresholds_before);

        if let Some(eval) = eval_ds.as_ref() {
            let (acc, counter) = snn_accuracy(&params, arch, eval, &eval_cfg)?;
            let avg: Vec<f64> = slots
                .iter()
                .enumerate()
                .filter(|(_, s)| s.spiking)
                .map(|(i, _)| counter.per_slot[i] / (neuron_counts[i] * counter.samples as f64))
                .collect();
            metrics.record(epoch, "test", acc, loss_sum / seen.max(1) as f64, Some(&avg))?;
            if cfg.stop_at_accuracy.is_some_and(|target| acc >= target) {
                break;
            }
        } else {
            metrics.record(epoch, "train", f64::NAN, loss_sum / seen.max(1) as f64, None)?;
        }
    }
    if params.thresholds != thresholds_before {
        return Err(SnnError::Config(
            "internal error: thresholds changed during fine-tuning".into(),
        ));
    }
    Ok(params)
}

/// Per-slot neuron counts for one sample (spiking slots only; the output
/// slot reports its width but never spikes).
pub fn spiking_neuron_counts(arch: &ArchitectureSpec) -> Result<Vec<f64>> {
    let shapes = arch.state_shapes(1)?;
    let slots = arch.slots()?;
    Ok(slots
        .iter()
        .map(|s| {
            let dims = match &shapes[s.layer_idx] {
                crate::network::LayerStateShape::Lif(d)
                | crate::network::LayerStateShape::Block(d)
                | crate::network::LayerStateShape::Output(d) => d.clone(),
                _ => unreachable!("weight slots live on stateful layers"),
            };
            dims[1..].iter().product::<usize>() as f64
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Layer;

    /// Linearly separable blobs, fully learnable by the analog trainer.
    fn blobs(n: usize, seed: u64) -> Dataset<f32> {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, StreamKind::Data, &[0]);
        let mut data = Vec::with_capacity(n * 2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            let (cx, cy) = if class == 0 { (0.25, 0.25) } else { (0.75, 0.75) };
            data.push((cx + rng.gen_range(-0.2..0.2) as f64).clamp(0.0, 1.0) as f32);
            data.push((cy + rng.gen_range(-0.2..0.2) as f64).clamp(0.0, 1.0) as f32);
            labels.push(class);
        }
        Dataset::new(
            Tensor::from_vec(&[n, 1, 1, 2], data).unwrap(),
            labels,
            2,
        )
        .unwrap()
    }

    fn mlp() -> ArchitectureSpec {
        ArchitectureSpec::new(
            (1, 1, 2),
            2,
            vec![Layer::Linear { out: 8 }, Layer::Linear { out: 2 }],
        )
        .unwrap()
    }

    #[test]
    fn ann_learns_linearly_separable_blobs() {
        let ds = blobs(200, 1);
        let cfg = TrainConfig {
            lr: 0.01,
            epochs: 50,
            batch_size: 32,
            stop_at_accuracy: Some(1.0),
            ..TrainConfig::default()
        };
        let arch = mlp();
        let mut sink = MetricsSink::silent();
        let params = train_ann::<f32>(&arch, &ds, Some(&ds), &cfg, &mut sink).unwrap();
        let acc = ann_accuracy(&params, &arch, &ds).unwrap();
        assert_eq!(acc, 1.0, "blobs should be fully separable, got {acc}");
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let ds = blobs(64, 2);
        let arch = mlp();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            optimizer: OptimizerKind::Sgd,
            ..TrainConfig::default()
        };
        let mut sink = MetricsSink::silent();
        let trained = train_ann::<f32>(&arch, &ds, None, &cfg, &mut sink).unwrap();
        let init = NetworkParams::<f32>::random_init(&arch, cfg.seed).unwrap();
        assert_eq!(trained.weights, init.weights);
    }

    #[test]
    fn stdb_zero_epochs_returns_initialization() {
        let ds = blobs(16, 3);
        let arch = mlp();
        let params = NetworkParams::<f32>::random_init(&arch, 9).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let mut sink = MetricsSink::silent();
        let out = train_stdb(params.clone(), &arch, &ds, None, &cfg, &mut sink).unwrap();
        assert_eq!(out.weights, params.weights);
        assert_eq!(out.thresholds, params.thresholds);
    }

    #[test]
    fn stdb_is_deterministic_for_a_fixed_seed() {
        let ds = blobs(32, 4);
        let arch = mlp();
        let mut params = NetworkParams::<f32>::random_init(&arch, 5).unwrap();
        params.thresholds[0] = Some(0.8);
        let cfg = TrainConfig {
            epochs: 2,
            timesteps: 6,
            truncate: 6,
            batch_size: 8,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let mut sink = MetricsSink::silent();
        let a = train_stdb(params.clone(), &arch, &ds, None, &cfg, &mut sink).unwrap();
        let b = train_stdb(params, &arch, &ds, None, &cfg, &mut sink).unwrap();
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn stdb_thresholds_invariant_over_training() {
        let ds = blobs(32, 6);
        let arch = mlp();
        let mut params = NetworkParams::<f32>::random_init(&arch, 5).unwrap();
        params.thresholds[0] = Some(1.37);
        let cfg = TrainConfig {
            epochs: 2,
            timesteps: 4,
            truncate: 2,
            batch_size: 16,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let mut sink = MetricsSink::silent();
        let out = train_stdb(params, &arch, &ds, Some(&ds), &cfg, &mut sink).unwrap();
        assert_eq!(out.thresholds[0], Some(1.37));
    }

    #[test]
    fn validates_truncation_divisibility() {
        let cfg = TrainConfig {
            timesteps: 10,
            truncate: 3,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
