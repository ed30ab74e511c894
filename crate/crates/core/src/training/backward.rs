//! Backpropagation through time for the spiking network.
//!
//! The forward recurrence of a hidden layer,
//!
//! ```text
//! u_t = leak * u_{t-1} + W o_in,t - v * o_{t-1}
//! o_t = H(u_t - v)
//! ```
//!
//! is unrolled in reverse. The threshold step function H has no usable
//! derivative, so `do/du` is replaced by the configured surrogate evaluated
//! at each step's recorded state. Writing `carry` for dL/du at step t+1,
//! the adjoint at step t is
//!
//! ```text
//! g_o  = (spatial gradient from the next layer) - v * carry   // reset path
//! du_t = g_o * surrogate_t + leak * carry
//! ```
//!
//! and du_t drives the weight and input cotangents through the layer's
//! exact adjoint. The output integrator never spikes, so its adjoint is the
//! plain cross-entropy gradient, constant across the steps of a segment.
//!
//! Truncated mode splits the T steps into segments of length t'. At each
//! segment boundary the loss is recomputed on the potentials accumulated so
//! far, backpropagated within the segment only, and the history is dropped;
//! segment gradients sum into one accumulator that the optimizer applies
//! once at T. A single segment (t' = T) is exactly full backpropagation.

use crate::encoding::SpikeTrain;
use crate::error::{Result, SnnError};
use crate::network::{
    ArchitectureSpec, ForwardRecord, Layer, LayerState, LayerTrace, NetworkParams, NetworkState,
    SlotInfo, SlotKind, StepTrace,
};
use crate::neuron::{spike_grad, SurrogateConfig};
use crate::tensor::ops::{avgpool_vjp, conv2d_vjp, linear_vjp, softmax_cross_entropy};
use crate::tensor::{Scalar, Tensor};

/// Per-slot gradients summed across time steps and segments; zeroed before
/// every optimizer step.
#[derive(Debug, Clone)]
pub struct GradientAccumulator<T> {
    pub grads: Vec<Tensor<T>>,
}

impl<T: Scalar> GradientAccumulator<T> {
    pub fn zeros(params: &NetworkParams<T>) -> Self {
        GradientAccumulator {
            grads: params.zeros_like(),
        }
    }

    pub fn add_slot(&mut self, slot: usize, g: &Tensor<T>) -> Result<()> {
        self.grads[slot].add_assign(g)
    }

    /// self += c * other, slot by slot.
    pub fn add_scaled(&mut self, other: &GradientAccumulator<T>, c: T) -> Result<()> {
        for (a, b) in self.grads.iter_mut().zip(other.grads.iter()) {
            a.axpy(c, b)?;
        }
        Ok(())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for (i, g) in self.grads.iter().enumerate() {
            g.ensure_finite(&format!("gradient of slot {i}"))?;
        }
        Ok(())
    }
}

/// Settings the backward pass needs beyond the record itself.
#[derive(Debug, Clone)]
pub struct BackwardConfig<T> {
    pub surrogate: SurrogateConfig<T>,
    pub leak: T,
}

/// Temporal adjoint carried between steps for each spiking site.
enum Carry<T> {
    None,
    Lif(Tensor<T>),
    Block { a: Tensor<T>, b: Tensor<T> },
}

fn layer_input<'a, T: Scalar>(
    step: &'a StepTrace<T>,
    train: &'a SpikeTrain<T>,
    frame_idx: usize,
    layer_idx: usize,
) -> &'a Tensor<T> {
    if layer_idx == 0 {
        train.frame(frame_idx)
    } else {
        match &step.layers[layer_idx - 1] {
            LayerTrace::Spiking { out, .. } => out,
            LayerTrace::Plain { out } => out,
            LayerTrace::Block { out, .. } => out,
            LayerTrace::OutputLayer => unreachable!("output layer is last"),
        }
    }
}

/// Gradient through a weighted slot: accumulates the weight cotangent and
/// returns the input cotangent, handling the flatten before linear layers.
fn weighted_vjp<T: Scalar>(
    params: &NetworkParams<T>,
    slot: &SlotInfo,
    slot_idx: usize,
    input: &Tensor<T>,
    delta: &Tensor<T>,
    acc: &mut GradientAccumulator<T>,
) -> Result<Tensor<T>> {
    match &slot.kind {
        SlotKind::Conv(spec) => {
            let (g_x, g_w) = conv2d_vjp(input, spec, &params.weights[slot_idx], delta)?;
            acc.add_slot(slot_idx, &g_w)?;
            Ok(g_x)
        }
        SlotKind::Linear { fan_in, .. } => {
            let flat = input.reshape(&[input.shape()[0], *fan_in])?;
            let (g_flat, g_w) = linear_vjp(&flat, &params.weights[slot_idx], delta)?;
            acc.add_slot(slot_idx, &g_w)?;
            g_flat.reshape(input.shape())
        }
    }
}

/// Backpropagate one recorded segment, accumulating weight gradients.
/// The loss is the mean cross-entropy on the output potentials at the
/// segment's final step (`record.final_output_potential`); its value is
/// returned. `state` supplies the per-batch dropout masks.
pub fn stdb_backward<T: Scalar>(
    record: &ForwardRecord<T>,
    train: &SpikeTrain<T>,
    params: &NetworkParams<T>,
    arch: &ArchitectureSpec,
    state: &NetworkState<T>,
    targets: &[usize],
    cfg: &BackwardConfig<T>,
    acc: &mut GradientAccumulator<T>,
) -> Result<T> {
    if record.is_empty() {
        return Err(SnnError::Config("cannot backpropagate an empty record".into()));
    }
    let slots = arch.slots()?;
    let (loss, delta_out) = softmax_cross_entropy(&record.final_output_potential, targets)?;

    // adjoints from the temporally next step; none at the segment's end
    let mut carries: Vec<Carry<T>> = (0..arch.layers.len()).map(|_| Carry::None).collect();

    let last_layer = arch.layers.len() - 1;
    let output_slot = slots
        .iter()
        .position(|s| !s.spiking)
        .expect("output slot exists");

    for step_idx in (0..record.len()).rev() {
        let t = record.first_step + step_idx;
        let frame_idx = t - 1;
        let step = &record.steps[step_idx];

        // Output layer: adjoint equals the boundary loss gradient at every
        // step of the segment (integration carries it unchanged).
        let out_input = layer_input(step, train, frame_idx, last_layer);
        let mut g = weighted_vjp(
            params,
            &slots[output_slot],
            output_slot,
            out_input,
            &delta_out,
            acc,
        )?;

        // Hidden layers in reverse.
        for layer_idx in (0..last_layer).rev() {
            match (&arch.layers[layer_idx], &step.layers[layer_idx]) {
                (Layer::AvgPool { k }, LayerTrace::Plain { .. }) => {
                    g = avgpool_vjp(&g, *k)?;
                }
                (Layer::Dropout { .. }, LayerTrace::Plain { .. }) => {
                    let LayerState::Mask(mask) = &state.layers[layer_idx] else {
                        unreachable!("mask state mirrors dropout layers")
                    };
                    g = g.mul_elementwise(mask)?;
                }
                (
                    Layer::Conv(_) | Layer::Linear { .. },
                    LayerTrace::Spiking {
                        potential,
                        last_spike,
                        ..
                    },
                ) => {
                    let si = slots
                        .iter()
                        .position(|s| s.layer_idx == layer_idx && s.sub == 0)
                        .expect("slot");
                    let v = params.thresholds[si].expect("hidden layers have thresholds");
                    let carry = match &carries[layer_idx] {
                        Carry::Lif(c) => Some(c),
                        _ => None,
                    };
                    // reset path: next step subtracts v * o_t from u_{t+1}
                    let mut g_o = g;
                    if let Some(c) = carry {
                        g_o.axpy(-v, c)?;
                    }
                    let sigma = spike_grad(&cfg.surrogate, t, last_spike, potential, v);
                    let mut delta_u = g_o.mul_elementwise(&sigma)?;
                    if let Some(c) = carry {
                        delta_u.axpy(cfg.leak, c)?;
                    }
                    let input = layer_input(step, train, frame_idx, layer_idx);
                    g = weighted_vjp(params, &slots[si], si, input, &delta_u, acc)?;
                    carries[layer_idx] = Carry::Lif(delta_u);
                }
                (
                    Layer::ResidualBlock { .. },
                    LayerTrace::Block {
                        mid,
                        potential_a,
                        last_spike_a,
                        potential_b,
                        last_spike_b,
                        ..
                    },
                ) => {
                    let sa = slots
                        .iter()
                        .position(|s| s.layer_idx == layer_idx && s.sub == 0)
                        .expect("slot a");
                    let sb = sa + 1;
                    let va = params.thresholds[sa].expect("block threshold a");
                    let vb = params.thresholds[sb].expect("block threshold b");
                    let (carry_a, carry_b) = match &carries[layer_idx] {
                        Carry::Block { a, b } => (Some(a), Some(b)),
                        _ => (None, None),
                    };

                    // second threshold: spatial gradient + its reset path
                    let mut g_ob = g;
                    if let Some(c) = carry_b {
                        g_ob.axpy(-vb, c)?;
                    }
                    let sigma_b = spike_grad(&cfg.surrogate, t, last_spike_b, potential_b, vb);
                    let mut delta_b = g_ob.mul_elementwise(&sigma_b)?;
                    if let Some(c) = carry_b {
                        delta_b.axpy(cfg.leak, c)?;
                    }
                    // pre_b = conv_b(mid) + input (identity shortcut)
                    let g_mid = weighted_vjp(params, &slots[sb], sb, mid, &delta_b, acc)?;

                    // first threshold
                    let mut g_oa = g_mid;
                    if let Some(c) = carry_a {
                        g_oa.axpy(-va, c)?;
                    }
                    let sigma_a = spike_grad(&cfg.surrogate, t, last_spike_a, potential_a, va);
                    let mut delta_a = g_oa.mul_elementwise(&sigma_a)?;
                    if let Some(c) = carry_a {
                        delta_a.axpy(cfg.leak, c)?;
                    }
                    let input = layer_input(step, train, frame_idx, layer_idx);
                    let mut g_in = weighted_vjp(params, &slots[sa], sa, input, &delta_a, acc)?;
                    // shortcut current contributes delta_b directly
                    g_in.add_assign(&delta_b)?;
                    g = g_in;
                    carries[layer_idx] = Carry::Block {
                        a: delta_a,
                        b: delta_b,
                    };
                }
                _ => unreachable!("trace layout mirrors the architecture"),
            }
        }
    }

    acc.ensure_finite()?;
    Ok(loss)
}

/// Forward a spike train segment by segment under truncation interval `t'`,
/// backpropagating at every segment boundary on the cumulative output
/// potentials and summing gradients into `acc`. Returns the loss at the
/// final boundary and the peak retained record length.
#[allow(clippy::too_many_arguments)]
pub fn truncated_bptt_step<T: Scalar>(
    params: &NetworkParams<T>,
    arch: &ArchitectureSpec,
    state: &mut NetworkState<T>,
    train: &SpikeTrain<T>,
    targets: &[usize],
    truncate: usize,
    cfg: &BackwardConfig<T>,
    acc: &mut GradientAccumulator<T>,
) -> Result<(T, usize)> {
    let timesteps = train.timesteps();
    if truncate == 0 || timesteps % truncate != 0 {
        return Err(SnnError::Config(format!(
            "truncation interval {truncate} must divide the {timesteps} time steps exactly"
        )));
    }
    let mut last_loss = T::zero();
    let mut peak = 0usize;
    for seg in 0..timesteps / truncate {
        let lo = seg * truncate;
        let hi = lo + truncate;
        let mut record = ForwardRecord::new(lo + 1);
        crate::network::snn_forward(
            params,
            arch,
            state,
            train,
            lo..hi,
            cfg.leak,
            Some(&mut record),
        )?;
        peak = peak.max(record.len());
        last_loss = stdb_backward(&record, train, params, arch, state, targets, cfg, acc)?;
        // record dropped here: history is cleared between segments
    }
    Ok((last_loss, peak))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::poisson_encode;
    use crate::network::{init_neuron_state, snn_forward, ArchitectureSpec, Layer};
    use crate::neuron::SurrogateFamily;
    use crate::tensor::max_abs_diff;

    fn toy() -> (ArchitectureSpec, NetworkParams<f64>) {
        let arch = ArchitectureSpec::new(
            (1, 1, 2),
            2,
            vec![Layer::Linear { out: 2 }, Layer::Linear { out: 2 }],
        )
        .unwrap();
        let params = NetworkParams::random_init(&arch, 3).unwrap();
        (arch, params)
    }

    fn cfg() -> BackwardConfig<f64> {
        BackwardConfig {
            surrogate: SurrogateConfig::new(SurrogateFamily::SpikeTime, 0.3, 0.01),
            leak: 1.0,
        }
    }

    #[test]
    fn matched_prediction_gives_zero_gradients() {
        // two samples with opposite targets and symmetric potentials give
        // p == one-hot only in the limit; instead freeze a case where the
        // softmax gradient vanishes by construction: identical potentials,
        // targets covering each class once -> gradients cancel in the sum
        // only for symmetric weights. Use the direct statement instead:
        // zero spike activity everywhere means every weight gradient that
        // does not touch the output layer is zero, and the output layer
        // gradient is delta times zero inputs.
        let (arch, params) = toy();
        let images = crate::tensor::Tensor::zeros(&[2, 1, 1, 2]);
        let train = poisson_encode(&images, 4, 0).unwrap();
        let mut state = init_neuron_state(2, &arch, None).unwrap();
        let mut record = ForwardRecord::new(1);
        snn_forward(&params, &arch, &mut state, &train, 0..4, 1.0, Some(&mut record)).unwrap();
        let mut acc = GradientAccumulator::zeros(&params);
        stdb_backward(&record, &train, &params, &arch, &state, &[0, 1], &cfg(), &mut acc).unwrap();
        // no input spikes: output weight gradient is exactly zero
        assert!(acc.grads[1].data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_segment_equals_full_bptt_bitwise() {
        let (arch, params) = toy();
        let images =
            crate::tensor::Tensor::from_vec(&[2, 1, 1, 2], vec![0.9, 0.4, 0.2, 0.8]).unwrap();
        let train = poisson_encode(&images, 6, 5).unwrap();
        let targets = [1usize, 0];

        // full path
        let mut state_a = init_neuron_state(2, &arch, None).unwrap();
        let mut record = ForwardRecord::new(1);
        snn_forward(&params, &arch, &mut state_a, &train, 0..6, 1.0, Some(&mut record)).unwrap();
        let mut acc_a = GradientAccumulator::zeros(&params);
        stdb_backward(&record, &train, &params, &arch, &state_a, &targets, &cfg(), &mut acc_a)
            .unwrap();

        // truncation with a single segment
        let mut state_b = init_neuron_state(2, &arch, None).unwrap();
        let mut acc_b = GradientAccumulator::zeros(&params);
        truncated_bptt_step(
            &params, &arch, &mut state_b, &train, &targets, 6, &cfg(), &mut acc_b,
        )
        .unwrap();

        for (a, b) in acc_a.grads.iter().zip(acc_b.grads.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn truncation_must_divide_timesteps() {
        let (arch, params) = toy();
        let images = crate::tensor::Tensor::zeros(&[1, 1, 1, 2]);
        let train = poisson_encode(&images, 6, 0).unwrap();
        let mut state = init_neuron_state(1, &arch, None).unwrap();
        let mut acc = GradientAccumulator::zeros(&params);
        let r = truncated_bptt_step(
            &params, &arch, &mut state, &train, &[0], 4, &cfg(), &mut acc,
        );
        assert!(matches!(r, Err(SnnError::Config(_))));
    }

    #[test]
    fn shorter_segments_use_less_record_memory_and_stay_finite() {
        let (arch, params) = toy();
        let images =
            crate::tensor::Tensor::from_vec(&[2, 1, 1, 2], vec![0.9, 0.6, 0.3, 0.8]).unwrap();
        let train = poisson_encode(&images, 10, 2).unwrap();
        let targets = [0usize, 1];
        let mut peaks = Vec::new();
        for truncate in [10, 5, 2] {
            let mut state = init_neuron_state(2, &arch, None).unwrap();
            let mut acc = GradientAccumulator::zeros(&params);
            let (_, peak) = truncated_bptt_step(
                &params, &arch, &mut state, &train, &targets, truncate, &cfg(), &mut acc,
            )
            .unwrap();
            acc.ensure_finite().unwrap();
            let total: f64 = acc.grads.iter().map(|g| g.data().iter().map(|x| x.abs()).sum::<f64>()).sum();
            assert!(total > 0.0, "gradients vanished at truncate={truncate}");
            peaks.push(peak);
        }
        assert_eq!(peaks, vec![10, 5, 2]);
    }

    #[test]
    fn leak_scales_the_temporal_carry() {
        // with leak 0 the temporal carry dies: gradients differ from leak 1
        let (arch, params) = toy();
        let images =
            crate::tensor::Tensor::from_vec(&[1, 1, 1, 2], vec![0.9, 0.8]).unwrap();
        let train = poisson_encode(&images, 5, 1).unwrap();
        let run = |leak: f64| {
            let mut state = init_neuron_state(1, &arch, None).unwrap();
            let mut record = ForwardRecord::new(1);
            snn_forward(&params, &arch, &mut state, &train, 0..5, leak, Some(&mut record))
                .unwrap();
            let mut acc = GradientAccumulator::zeros(&params);
            let c = BackwardConfig {
                surrogate: SurrogateConfig::new(SurrogateFamily::SpikeTime, 0.3, 0.01),
                leak,
            };
            stdb_backward(&record, &train, &params, &arch, &state, &[1], &c, &mut acc).unwrap();
            acc
        };
        let a = run(1.0);
        let b = run(0.5);
        assert!(max_abs_diff(&a.grads[0], &b.grads[0]) > 1e-9);
    }
}
