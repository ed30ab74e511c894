//! Analog-to-spiking initialization: copy the trained weights, then assign
//! each hidden layer's firing threshold to the maximum weighted input that
//! layer receives while the network (with all earlier thresholds already
//! fixed) processes a Poisson-encoded calibration batch for T steps.
//!
//! Assignment is strictly sequential front to back: a layer's spiking
//! behaviour depends on its own threshold, so later layers can only be
//! calibrated once earlier ones are final. Convolutions inside residual
//! basic blocks are skipped and pinned to a threshold of exactly 1; only
//! the pre-processing stack and any plain hidden layers are balanced.

use crate::encoding::{poisson_encode, poisson_encode_offset};
use crate::error::{Result, SnnError};
use crate::network::{
    init_neuron_state, snn_step_prefix, weighted_input, ArchitectureSpec, NetworkParams,
};
use crate::tensor::{Scalar, Tensor};
use rayon::prelude::*;

/// Ordered per-slot thresholds produced by balancing (None for the output
/// integrator, which never fires).
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSet<T> {
    pub values: Vec<Option<T>>,
}

/// Knobs for [`balance_thresholds`].
#[derive(Debug, Clone, Copy)]
pub struct BalanceConfig<T> {
    pub timesteps: usize,
    pub seed: u64,
    /// Leak applied during the calibration runs.
    pub leak: T,
    /// Scale factor applied to every balanced threshold; 1.0 reproduces the
    /// plain maximum rule. Extension knob for outlier-sensitive maxima.
    pub scale: T,
    /// Optional lower bound rescuing layers whose calibration inputs never
    /// produce a positive pre-activation. `None` makes that case an error.
    pub floor: Option<T>,
}

impl<T: Scalar> BalanceConfig<T> {
    pub fn new(timesteps: usize, seed: u64) -> Self {
        BalanceConfig {
            timesteps,
            seed,
            leak: T::one(),
            scale: T::one(),
            floor: None,
        }
    }
}

/// Copy weights from a trained source network into a structurally identical
/// target. Deep copy: later changes to either side leave the other intact.
pub fn copy_weights<T: Scalar>(
    source: &NetworkParams<T>,
    target: &mut NetworkParams<T>,
    arch: &ArchitectureSpec,
) -> Result<()> {
    source.matches(arch)?;
    target.matches(arch)?;
    for (dst, src) in target.weights.iter_mut().zip(source.weights.iter()) {
        *dst = src.clone();
    }
    Ok(())
}

/// Balance thresholds on a calibration batch, writing them into `params`
/// and returning the full set. Dropout is disabled during calibration
/// (inference-mode conversion).
pub fn balance_thresholds<T: Scalar>(
    params: &mut NetworkParams<T>,
    arch: &ArchitectureSpec,
    calibration: &Tensor<T>,
    cfg: &BalanceConfig<T>,
) -> Result<ThresholdSet<T>> {
    params.matches(arch)?;
    let slots = arch.slots()?;
    if cfg.timesteps == 0 {
        return Err(SnnError::Config("balancing needs at least 1 time step".into()));
    }

    // Block thresholds are fixed at exactly 1 before anything spikes.
    for (i, slot) in slots.iter().enumerate() {
        if slot.in_block {
            params.thresholds[i] = Some(T::one());
        }
    }

    let batch = calibration.shape()[0];
    let shard = batch.div_ceil(rayon::current_num_threads().max(1));

    for target in 0..slots.len() {
        let slot = &slots[target];
        if !slot.spiking || slot.in_block {
            continue;
        }
        // Re-run the network up to this layer on the same encoded batch.
        // The maximum is order-independent, so calibration samples can be
        // processed in parallel shards.
        let maxima: Vec<f64> = (0..batch)
            .step_by(shard.max(1))
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|lo| -> Result<f64> {
                let hi = (lo + shard).min(batch);
                let part = calibration.slice_rows(lo, hi);
                let mut local_max = f64::NEG_INFINITY;
                let train = poisson_encode_offset(&part, cfg.timesteps, cfg.seed, lo)?;
                let mut state = init_neuron_state::<T>(hi - lo, arch, None)?;
                for idx in 0..cfg.timesteps {
                    let x = snn_step_prefix(
                        params,
                        arch,
                        &slots,
                        &mut state,
                        train.frame(idx),
                        idx + 1,
                        cfg.leak,
                        slot.layer_idx,
                    )?;
                    let pre = weighted_input(params, slot, target, &x)?;
                    let m = pre.max_value().to_f64();
                    if m > local_max {
                        local_max = m;
                    }
                }
                Ok(local_max)
            })
            .collect::<Result<Vec<f64>>>()?;
        let max_pre = maxima.iter().copied().fold(f64::NEG_INFINITY, f64::max);

        let v = T::from_f64(max_pre) * cfg.scale;
        let v = if v > T::zero() {
            v
        } else {
            match cfg.floor {
                Some(floor) => floor,
                None => {
                    return Err(SnnError::DegenerateThreshold {
                        slot: target,
                        value: max_pre,
                    })
                }
            }
        };
        params.thresholds[target] = Some(v);
    }

    Ok(ThresholdSet {
        values: params.thresholds.clone(),
    })
}

/// Replay the calibration run and confirm no pre-activation exceeds the
/// recorded threshold (up to the scale factor). Diagnostic used by tests.
pub fn verify_thresholds<T: Scalar>(
    params: &NetworkParams<T>,
    arch: &ArchitectureSpec,
    calibration: &Tensor<T>,
    cfg: &BalanceConfig<T>,
) -> Result<bool> {
    let slots = arch.slots()?;
    let batch = calibration.shape()[0];
    for target in 0..slots.len() {
        let slot = &slots[target];
        if !slot.spiking || slot.in_block {
            continue;
        }
        let train = poisson_encode(calibration, cfg.timesteps, cfg.seed)?;
        let mut state = init_neuron_state::<T>(batch, arch, None)?;
        let v = params.thresholds[target]
            .ok_or_else(|| SnnError::Config(format!("slot {target} missing threshold")))?;
        for idx in 0..cfg.timesteps {
            let x = snn_step_prefix(
                params,
                arch,
                &slots,
                &mut state,
                train.frame(idx),
                idx + 1,
                cfg.leak,
                slot.layer_idx,
            )?;
            let pre = weighted_input(params, slot, target, &x)?;
            if pre.max_value() * cfg.scale > v {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
