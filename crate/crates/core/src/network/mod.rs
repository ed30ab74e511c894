//! Declarative layer graphs, per-mini-batch neuron state, and the two
//! forward passes: the T-step spiking pass and the single analog pass used
//! for constrained pre-training.

pub mod presets;

use crate::encoding::SpikeTrain;
use crate::error::{Result, SnnError};
use crate::neuron::{lif_step, output_accumulate, LifState, NeuronConfig};
use crate::rng::{stream, StreamKind};
use crate::tensor::ops::{
    avgpool_fwd, conv2d_fwd, linear_fwd, relu_fwd, ConvSpec,
};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// One layer of the graph. Convolution and linear layers spike (the final
/// linear layer integrates instead); pooling and dropout reshape or gate
/// the signal between them.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvSpec),
    Linear { out: usize },
    AvgPool { k: usize },
    Dropout { rate: f64 },
    /// Two 3x3 stride-1 convolutions with an identity shortcut; the
    /// shortcut joins as input current ahead of the second threshold.
    ResidualBlock { channels: usize },
}

/// Ordered layer list plus input geometry and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    /// Input (channels, height, width).
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub layers: Vec<Layer>,
}

/// What a weight slot computes. Residual blocks contribute two slots.
#[derive(Debug, Clone)]
pub enum SlotKind {
    Conv(ConvSpec),
    Linear { fan_in: usize, out: usize },
}

/// One learnable weight tensor and its place in the graph.
#[derive(Debug, Clone)]
pub struct SlotInfo {
    pub layer_idx: usize,
    /// 0 for plain layers and the first block convolution, 1 for the second.
    pub sub: usize,
    pub kind: SlotKind,
    /// False only for the output integrator (no firing threshold).
    pub spiking: bool,
    /// True for the convolutions inside residual basic blocks, whose
    /// thresholds stay fixed at 1 instead of being balanced.
    pub in_block: bool,
    pub label: String,
}

impl SlotInfo {
    pub fn weight_shape(&self) -> Vec<usize> {
        match &self.kind {
            SlotKind::Conv(spec) => spec.weight_shape().to_vec(),
            SlotKind::Linear { fan_in, out } => vec![*out, *fan_in],
        }
    }

    pub fn fan_in(&self) -> usize {
        match &self.kind {
            SlotKind::Conv(spec) => spec.in_channels * spec.kernel * spec.kernel,
            SlotKind::Linear { fan_in, .. } => *fan_in,
        }
    }
}

/// Shape bookkeeping while walking the layer list.
#[derive(Debug, Clone, PartialEq)]
enum Extent {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Extent {
    fn features(&self) -> usize {
        match self {
            Extent::Spatial { c, h, w } => c * h * w,
            Extent::Flat(n) => *n,
        }
    }

    fn dims(&self, batch: usize) -> Vec<usize> {
        match self {
            Extent::Spatial { c, h, w } => vec![batch, *c, *h, *w],
            Extent::Flat(n) => vec![batch, *n],
        }
    }
}

/// Per-layer state template produced by shape tracking.
#[derive(Debug, Clone)]
pub enum LayerStateShape {
    Lif(Vec<usize>),
    Block(Vec<usize>),
    Mask(Vec<usize>),
    Stateless,
    Output(Vec<usize>),
}

impl ArchitectureSpec {
    pub fn new(input: (usize, usize, usize), classes: usize, layers: Vec<Layer>) -> Result<Self> {
        let arch = ArchitectureSpec {
            input,
            classes,
            layers,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Check layer compatibility, the output contract, and the residual
    /// pre-processing pattern. Returns per-layer state shapes for a batch
    /// of the given size as a side product.
    fn trace_shapes(&self, batch: usize) -> Result<Vec<LayerStateShape>> {
        if self.layers.is_empty() {
            return Err(SnnError::Config("architecture has no layers".into()));
        }
        match self.layers.last() {
            Some(Layer::Linear { out }) if *out == self.classes => {}
            _ => {
                return Err(SnnError::Config(format!(
                    "last layer must be linear with out = {} (the class count)",
                    self.classes
                )))
            }
        }
        if self
            .layers
            .iter()
            .any(|l| matches!(l, Layer::ResidualBlock { .. }))
        {
            self.check_residual_preamble()?;
        }
        let (c0, h0, w0) = self.input;
        if c0 == 0 || h0 == 0 || w0 == 0 || self.classes < 2 {
            return Err(SnnError::Config(
                "input extents must be positive and classes >= 2".into(),
            ));
        }
        let mut cur = Extent::Spatial {
            c: c0,
            h: h0,
            w: w0,
        };
        let mut shapes = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(spec) => {
                    let Extent::Spatial { c, h, w } = cur else {
                        return Err(SnnError::Config(format!(
                            "layer {i}: convolution after flattening"
                        )));
                    };
                    if c != spec.in_channels {
                        return Err(SnnError::Config(format!(
                            "layer {i}: convolution expects {} input channels, gets {c}",
                            spec.in_channels
                        )));
                    }
                    let oh = spec.out_extent(h).map_err(|e| layer_err(i, e))?;
                    let ow = spec.out_extent(w).map_err(|e| layer_err(i, e))?;
                    cur = Extent::Spatial {
                        c: spec.out_channels,
                        h: oh,
                        w: ow,
                    };
                    shapes.push(LayerStateShape::Lif(cur.dims(batch)));
                }
                Layer::Linear { out } => {
                    cur = Extent::Flat(*out);
                    if i == last {
                        shapes.push(LayerStateShape::Output(cur.dims(batch)));
                    } else {
                        shapes.push(LayerStateShape::Lif(cur.dims(batch)));
                    }
                }
                Layer::AvgPool { k } => {
                    let Extent::Spatial { c, h, w } = cur else {
                        return Err(SnnError::Config(format!(
                            "layer {i}: pooling after flattening"
                        )));
                    };
                    if *k == 0 || h % k != 0 || w % k != 0 {
                        return Err(SnnError::Config(format!(
                            "layer {i}: pool kernel {k} must divide {h}x{w}"
                        )));
                    }
                    cur = Extent::Spatial {
                        c,
                        h: h / k,
                        w: w / k,
                    };
                    shapes.push(LayerStateShape::Stateless);
                }
                Layer::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(SnnError::Config(format!(
                            "layer {i}: dropout rate {rate} outside [0, 1)"
                        )));
                    }
                    shapes.push(LayerStateShape::Mask(cur.dims(batch)));
                }
                Layer::ResidualBlock { channels } => {
                    let Extent::Spatial { c, h, w } = cur else {
                        return Err(SnnError::Config(format!(
                            "layer {i}: residual block after flattening"
                        )));
                    };
                    if c != *channels {
                        return Err(SnnError::Config(format!(
                            "layer {i}: residual block expects {channels} channels, gets {c}"
                        )));
                    }
                    let _ = (h, w);
                    shapes.push(LayerStateShape::Block(cur.dims(batch)));
                }
            }
        }
        Ok(shapes)
    }

    /// Residual networks start with three 3x3 stride-1 convolutions with
    /// dropout between them.
    fn check_residual_preamble(&self) -> Result<()> {
        let ok = matches!(
            self.layers.as_slice(),
            [Layer::Conv(a), Layer::Dropout { .. }, Layer::Conv(b), Layer::Dropout { .. }, Layer::Conv(c), ..]
                if [a, b, c].iter().all(|s| s.kernel == 3 && s.stride == 1)
        );
        if ok {
            Ok(())
        } else {
            Err(SnnError::Config(
                "residual architectures must begin with three 3x3 stride-1 convolutions \
                 with dropout between them"
                    .into(),
            ))
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.trace_shapes(1).map(|_| ())
    }

    pub fn state_shapes(&self, batch: usize) -> Result<Vec<LayerStateShape>> {
        self.trace_shapes(batch)
    }

    /// Weight slots in graph order.
    pub fn slots(&self) -> Result<Vec<SlotInfo>> {
        let shapes = self.trace_shapes(1)?;
        let mut slots = Vec::new();
        let mut cur = Extent::Spatial {
            c: self.input.0,
            h: self.input.1,
            w: self.input.2,
        };
        let last = self.layers.len() - 1;
        let mut conv_n = 0usize;
        let mut fc_n = 0usize;
        let mut block_n = 0usize;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(spec) => {
                    conv_n += 1;
                    slots.push(SlotInfo {
                        layer_idx: i,
                        sub: 0,
                        kind: SlotKind::Conv(*spec),
                        spiking: true,
                        in_block: false,
                        label: format!("conv{conv_n}"),
                    });
                }
                Layer::Linear { out } => {
                    fc_n += 1;
                    let spiking = i != last;
                    slots.push(SlotInfo {
                        layer_idx: i,
                        sub: 0,
                        kind: SlotKind::Linear {
                            fan_in: cur.features(),
                            out: *out,
                        },
                        spiking,
                        in_block: false,
                        label: if spiking {
                            format!("fc{fc_n}")
                        } else {
                            format!("fc{fc_n}(out)")
                        },
                    });
                }
                Layer::ResidualBlock { channels } => {
                    block_n += 1;
                    let spec = ConvSpec::new(*channels, *channels, 3, 1, 1);
                    for sub in 0..2 {
                        slots.push(SlotInfo {
                            layer_idx: i,
                            sub,
                            kind: SlotKind::Conv(spec),
                            spiking: true,
                            in_block: true,
                            label: format!("block{block_n}{}", if sub == 0 { 'a' } else { 'b' }),
                        });
                    }
                }
                _ => {}
            }
            cur = match &shapes[i] {
                LayerStateShape::Lif(d) | LayerStateShape::Block(d) | LayerStateShape::Output(d) => {
                    if d.len() == 4 {
                        Extent::Spatial {
                            c: d[1],
                            h: d[2],
                            w: d[3],
                        }
                    } else {
                        Extent::Flat(d[1])
                    }
                }
                LayerStateShape::Mask(_) | LayerStateShape::Stateless => match layer {
                    Layer::AvgPool { k } => match cur {
                        Extent::Spatial { c, h, w } => Extent::Spatial {
                            c,
                            h: h / k,
                            w: w / k,
                        },
                        flat => flat,
                    },
                    _ => cur,
                },
            };
        }
        Ok(slots)
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self
            .slots()?
            .iter()
            .map(|s| s.weight_shape().iter().product::<usize>())
            .sum())
    }
}

fn layer_err(i: usize, e: SnnError) -> SnnError {
    SnnError::Config(format!("layer {i}: {e}"))
}

/// Learned weights plus per-slot firing thresholds. Thresholds are `None`
/// only for the output slot.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub weights: Vec<Tensor<T>>,
    pub thresholds: Vec<Option<T>>,
}

impl<T: Scalar> NetworkParams<T> {
    /// Fan-in-scaled normal initialization; thresholds start at 1.
    pub fn random_init(arch: &ArchitectureSpec, seed: u64) -> Result<Self> {
        let slots = arch.slots()?;
        let mut weights = Vec::with_capacity(slots.len());
        let mut thresholds = Vec::with_capacity(slots.len());
        for (i, slot) in slots.iter().enumerate() {
            let shape = slot.weight_shape();
            let n: usize = shape.iter().product();
            let std = (2.0 / slot.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let mut rng = stream(seed, StreamKind::WeightInit, &[i as u64]);
            let data = (0..n)
                .map(|_| T::from_f64(normal.sample(&mut rng)))
                .collect();
            weights.push(Tensor::from_vec(&shape, data)?);
            thresholds.push(slot.spiking.then(|| T::one()));
        }
        Ok(NetworkParams {
            weights,
            thresholds,
        })
    }

    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.weights.iter().map(|w| Tensor::zeros(w.shape())).collect()
    }

    pub fn matches(&self, arch: &ArchitectureSpec) -> Result<()> {
        let slots = arch.slots()?;
        if slots.len() != self.weights.len() || slots.len() != self.thresholds.len() {
            return Err(SnnError::Config(format!(
                "parameter set has {} weight slots, architecture needs {}",
                self.weights.len(),
                slots.len()
            )));
        }
        for (slot, w) in slots.iter().zip(self.weights.iter()) {
            if w.shape() != slot.weight_shape().as_slice() {
                return Err(SnnError::ShapeMismatch {
                    op: "params/arch",
                    lhs: w.shape().to_vec(),
                    rhs: slot.weight_shape(),
                });
            }
        }
        Ok(())
    }
}

/// Simulation state of one layer for a mini-batch.
#[derive(Debug, Clone)]
pub enum LayerState<T> {
    Lif(LifState<T>),
    Block { a: LifState<T>, b: LifState<T> },
    /// Fixed inverted-scale dropout mask, identical at every time step.
    Mask(Tensor<T>),
    Stateless,
    Output(LifState<T>),
}

/// All layer states for one mini-batch; owned by a single worker.
#[derive(Debug, Clone)]
pub struct NetworkState<T> {
    pub layers: Vec<LayerState<T>>,
}

impl<T: Scalar> NetworkState<T> {
    pub fn output_potential(&self) -> &Tensor<T> {
        match self.layers.last() {
            Some(LayerState::Output(st)) => &st.potential,
            _ => unreachable!("validated architectures end with the output integrator"),
        }
    }
}

/// Draw one inverted-scale dropout mask: kept units carry 1/(1-rate).
fn draw_mask<T: Scalar>(shape: &[usize], rate: f64, rng: &mut impl Rng) -> Tensor<T> {
    if rate == 0.0 {
        return Tensor::filled(shape, T::one());
    }
    let scale = T::from_f64(1.0 / (1.0 - rate));
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                scale
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("mask shape")
}

/// Initialize per-layer neuron state for a mini-batch: potentials at zero,
/// last-spike markers in the distant past, and fresh dropout masks that
/// stay fixed for every time step of the batch. `dropout_seed = None`
/// disables dropout (identity masks), the inference mode.
pub fn init_neuron_state<T: Scalar>(
    batch: usize,
    arch: &ArchitectureSpec,
    dropout_seed: Option<u64>,
) -> Result<NetworkState<T>> {
    let shapes = arch.state_shapes(batch)?;
    let mut layers = Vec::with_capacity(shapes.len());
    for (i, s) in shapes.iter().enumerate() {
        layers.push(match s {
            LayerStateShape::Lif(d) => LayerState::Lif(LifState::new(d)),
            LayerStateShape::Block(d) => LayerState::Block {
                a: LifState::new(d),
                b: LifState::new(d),
            },
            LayerStateShape::Output(d) => LayerState::Output(LifState::new(d)),
            LayerStateShape::Stateless => LayerState::Stateless,
            LayerStateShape::Mask(d) => {
                let rate = match &arch.layers[i] {
                    Layer::Dropout { rate } => *rate,
                    _ => unreachable!(),
                };
                match dropout_seed {
                    Some(seed) => {
                        let mut rng = stream(seed, StreamKind::DropoutMask, &[i as u64]);
                        LayerState::Mask(draw_mask(d, rate, &mut rng))
                    }
                    None => LayerState::Mask(Tensor::filled(d, T::one())),
                }
            }
        });
    }
    Ok(NetworkState { layers })
}

/// Everything the backward pass needs about one layer at one time step.
#[derive(Debug, Clone)]
pub enum LayerTrace<T> {
    Spiking {
        out: Tensor<T>,
        potential: Tensor<T>,
        last_spike: Tensor<T>,
    },
    Plain {
        out: Tensor<T>,
    },
    Block {
        mid: Tensor<T>,
        potential_a: Tensor<T>,
        last_spike_a: Tensor<T>,
        out: Tensor<T>,
        potential_b: Tensor<T>,
        last_spike_b: Tensor<T>,
    },
    OutputLayer,
}

/// Snapshot of one time step across all layers.
#[derive(Debug, Clone)]
pub struct StepTrace<T> {
    pub layers: Vec<LayerTrace<T>>,
}

/// Retained forward history for backpropagation through time. In truncated
/// mode a record covers one segment; `first_step` is the 1-based time of
/// `steps[0]`.
#[derive(Debug, Clone)]
pub struct ForwardRecord<T> {
    pub steps: Vec<StepTrace<T>>,
    pub first_step: usize,
    /// Output-integrator potentials after the last recorded step.
    pub final_output_potential: Tensor<T>,
}

impl<T: Scalar> ForwardRecord<T> {
    pub fn new(first_step: usize) -> Self {
        ForwardRecord {
            steps: Vec::new(),
            first_step,
            final_output_potential: Tensor::zeros(&[0]),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn slot_index(slots: &[SlotInfo], layer_idx: usize, sub: usize) -> usize {
    slots
        .iter()
        .position(|s| s.layer_idx == layer_idx && s.sub == sub)
        .expect("slot exists for weighted layer")
}

/// Running spike totals per weight slot, accumulated during forward passes
/// without retaining any per-step history.
#[derive(Debug, Clone)]
pub struct SpikeCounter {
    /// Total spikes emitted by each spiking slot (output slot stays 0).
    pub per_slot: Vec<f64>,
    pub steps: usize,
    pub samples: usize,
}

impl SpikeCounter {
    pub fn new(slot_count: usize) -> Self {
        SpikeCounter {
            per_slot: vec![0.0; slot_count],
            steps: 0,
            samples: 0,
        }
    }

    pub fn merge(&mut self, other: &SpikeCounter) {
        for (a, b) in self.per_slot.iter_mut().zip(other.per_slot.iter()) {
            *a += b;
        }
        self.steps = self.steps.max(other.steps);
        self.samples += other.samples;
    }
}

/// Weighted input (pre-nonlinearity) of a slot for a given input tensor,
/// flattening for linear layers as needed.
pub fn weighted_input<T: Scalar>(
    params: &NetworkParams<T>,
    slot: &SlotInfo,
    slot_idx: usize,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    match &slot.kind {
        SlotKind::Conv(spec) => conv2d_fwd(x, spec, &params.weights[slot_idx]),
        SlotKind::Linear { fan_in, .. } => {
            let flat = x.reshape(&[x.shape()[0], *fan_in])?;
            linear_fwd(&flat, &params.weights[slot_idx])
        }
    }
}

fn threshold_of<T: Scalar>(params: &NetworkParams<T>, slot_idx: usize) -> Result<T> {
    params.thresholds[slot_idx].ok_or_else(|| {
        SnnError::Config(format!("weight slot {slot_idx} is missing its firing threshold"))
    })
}

/// Advance a single layer by one step. Returns the layer output and, when
/// recording, pushes the layer trace.
#[allow(clippy::too_many_arguments)]
fn step_layer<T: Scalar>(
    params: &NetworkParams<T>,
    arch: &ArchitectureSpec,
    slots: &[SlotInfo],
    layer_idx: usize,
    state: &mut LayerState<T>,
    x: &Tensor<T>,
    t: usize,
    leak: T,
    traces: Option<&mut Vec<LayerTrace<T>>>,
    counter: Option<&mut SpikeCounter>,
) -> Result<Tensor<T>> {
    let last = layer_idx == arch.layers.len() - 1;
    match (&arch.layers[layer_idx], state) {
        (Layer::Conv(_) | Layer::Linear { .. }, LayerState::Lif(st)) => {
            let si = slot_index(slots, layer_idx, 0);
            let pre = weighted_input(params, &slots[si], si, x)?;
            let v = threshold_of(params, si)?;
            let spikes = lif_step(st, &pre, NeuronConfig { leak, threshold: v }, t)?;
            if let Some(c) = counter {
                c.per_slot[si] += spikes.sum().to_f64();
            }
            if let Some(tr) = traces {
                tr.push(LayerTrace::Spiking {
                    out: spikes.clone(),
                    potential: st.potential.clone(),
                    last_spike: st.last_spike.clone(),
                });
            }
            Ok(spikes)
        }
        (Layer::Linear { .. }, LayerState::Output(st)) => {
            debug_assert!(last);
            let si = slot_index(slots, layer_idx, 0);
            let pre = weighted_input(params, &slots[si], si, x)?;
            output_accumulate(st, &pre)?;
            if let Some(tr) = traces {
                tr.push(LayerTrace::OutputLayer);
            }
            Ok(st.potential.clone())
        }
        (Layer::AvgPool { k }, LayerState::Stateless) => {
            let out = avgpool_fwd(x, *k)?;
            if let Some(tr) = traces {
                tr.push(LayerTrace::Plain { out: out.clone() });
            }
            Ok(out)
        }
        (Layer::Dropout { .. }, LayerState::Mask(mask)) => {
            let out = x.mul_elementwise(mask)?;
            if let Some(tr) = traces {
                tr.push(LayerTrace::Plain { out: out.clone() });
            }
            Ok(out)
        }
        (Layer::ResidualBlock { .. }, LayerState::Block { a, b }) => {
            let sa = slot_index(slots, layer_idx, 0);
            let sb = slot_index(slots, layer_idx, 1);
            let (SlotKind::Conv(spec_a), SlotKind::Conv(spec_b)) =
                (&slots[sa].kind, &slots[sb].kind)
            else {
                unreachable!("block slots are convolutions")
            };
            let pre_a = conv2d_fwd(x, spec_a, &params.weights[sa])?;
            let va = threshold_of(params, sa)?;
            let mid = lif_step(a, &pre_a, NeuronConfig { leak, threshold: va }, t)?;
            // identity shortcut joins as current ahead of the second threshold
            let mut pre_b = conv2d_fwd(&mid, spec_b, &params.weights[sb])?;
            pre_b.add_assign(x)?;
            let vb = threshold_of(params, sb)?;
            let out = lif_step(b, &pre_b, NeuronConfig { leak, threshold: vb }, t)?;
            if let Some(c) = counter {
                c.per_slot[sa] += mid.sum().to_f64();
                c.per_slot[sb] += out.sum().to_f64();
            }
            if let Some(tr) = traces {
                tr.push(LayerTrace::Block {
                    mid: mid.clone(),
                    potential_a: a.potential.clone(),
                    last_spike_a: a.last_spike.clone(),
                    out: out.clone(),
                    potential_b: b.potential.clone(),
                    last_spike_b: b.last_spike.clone(),
                });
            }
            Ok(out)
        }
        _ => unreachable!("state layout mirrors the architecture"),
    }
}

/// Run time steps `step_range` (0-based frame indices; time t = index + 1)
/// through the whole network, mutating `state` and appending to `record`
/// when given.
pub fn snn_forward<T: Scalar>(
    params: &NetworkParams<T>,
    arch: &ArchitectureSpec,
    state: &mut NetworkState<T>,
    train: &SpikeTrain<T>,
    step_range: std::ops::Range<usize>,
    leak: T,
    mut record: Option<&mut ForwardRecord<T>>,
) -> Result<()> {
    snn_forward_counting(params, arch, state, train, step_range, leak, record.as_deref_mut(), None)
}

/// [`snn_forward`] with an optional running spike counter.
#[allow(clippy::too_many_arguments)]
pub fn snn_forward_counting<T: Scalar>(
    params: &NetworkParams<T>,
    arch: &ArchitectureSpec,
    state: &mut NetworkState<T>,
    train: &SpikeTrain<T>,
    step_range: std::ops::Range<usize>,
    leak: T,
    mut record: Option<&mut ForwardRecord<T>>,
    mut counter: Option<&mut SpikeCounter>,
) -> Result<()> {
    let slots = arch.slots()?;
    let mut steps_done = 0;
    for idx in step_range {
        let t = idx + 1;
        let mut x = train.frame(idx).clone();
        let mut traces = record.as_ref().map(|_| Vec::with_capacity(arch.layers.len()));
        for (i, layer_state) in state.layers.iter_mut().enumerate() {
            x = step_layer(
                params,
                arch,
                &slots,
                i,
                layer_state,
                &x,
                t,
                leak,
                traces.as_mut(),
                counter.as_deref_mut(),
            )
            .map_err(|e| {
                SnnError::Config(format!("forward failed at layer {i}, step {t}: {e}"))
            })?;
        }
        steps_done += 1;
        if let Some(rec) = record.as_deref_mut() {
            rec.steps.push(StepTrace {
                layers: traces.expect("traces collected when recording"),
            });
        }
    }
    if let Some(rec) = record {
        rec.final_output_potential = state.output_potential().clone();
    }
    if let Some(c) = counter {
        c.steps += steps_done;
        c.samples += train.frame(0).shape()[0];
    }
    Ok(())
}

/// Run layers `0..upto_layer` for one time step and return the tensor that
/// layer `upto_layer` would receive as input. Used by threshold balancing,
/// which needs the pre-nonlinearity input of one layer while earlier layers
/// spike normally.
pub fn snn_step_prefix<T: Scalar>(
    params: &NetworkParams<T>,
    arch: &ArchitectureSpec,
    slots: &[SlotInfo],
    state: &mut NetworkState<T>,
    frame: &Tensor<T>,
    t: usize,
    leak: T,
    upto_layer: usize,
) -> Result<Tensor<T>> {
    let mut x = frame.clone();
    for i in 0..upto_layer {
        x = step_layer(params, arch, slots, i, &mut state.layers[i], &x, t, leak, None, None)
            .map_err(|e| SnnError::Config(format!("forward failed at layer {i}, step {t}: {e}")))?;
    }
    Ok(x)
}

/// Complete forward pass over a spike train with fresh state; convenience
/// wrapper returning the final output potentials and (optionally) the full
/// record.
pub fn snn_run<T: Scalar>(
    params: &NetworkParams<T>,
    arch: &ArchitectureSpec,
    train: &SpikeTrain<T>,
    leak: T,
    dropout_seed: Option<u64>,
    want_record: bool,
) -> Result<(Tensor<T>, Option<ForwardRecord<T>>)> {
    let batch = train.frame(0).shape()[0];
    let mut state = init_neuron_state(batch, arch, dropout_seed)?;
    let mut record = want_record.then(|| ForwardRecord::new(1));
    snn_forward(
        params,
        arch,
        &mut state,
        train,
        0..train.timesteps(),
        leak,
        record.as_mut(),
    )?;
    Ok((state.output_potential().clone(), record))
}

/// Cached intermediate values of one analog forward pass, consumed by the
/// analog backward pass during constrained pre-training.
#[derive(Debug)]
pub enum AnnLayerTrace<T> {
    Weighted { input: Tensor<T>, pre: Tensor<T> },
    Pool { input: Tensor<T> },
    Dropout { input: Tensor<T> },
    Block {
        input: Tensor<T>,
        pre_a: Tensor<T>,
        mid: Tensor<T>,
        pre_b: Tensor<T>,
    },
    OutputLinear { input: Tensor<T> },
}

#[derive(Debug, Default)]
pub struct AnnCache<T> {
    pub traces: Vec<AnnLayerTrace<T>>,
}

/// Single analog pass with ReLU activations: the constrained network used
/// for pre-training (no bias anywhere, average pooling, dropout masks fixed
/// per batch). `masks` comes from [`init_neuron_state`]; pass an
/// inference-mode state to disable dropout.
pub fn ann_forward<T: Scalar>(
    params: &NetworkParams<T>,
    arch: &ArchitectureSpec,
    images: &Tensor<T>,
    masks: &NetworkState<T>,
    mut cache: Option<&mut AnnCache<T>>,
) -> Result<Tensor<T>> {
    let slots = arch.slots()?;
    let last = arch.layers.len() - 1;
    let mut x = images.clone();
    for (i, layer) in arch.layers.iter().enumerate() {
        x = match layer {
            Layer::Conv(_) | Layer::Linear { .. } => {
                let si = slot_index(&slots, i, 0);
                let pre = weighted_input(params, &slots[si], si, &x)?;
                pre.ensure_finite(&format!("analog layer {i} pre-activation"))?;
                if i == last {
                    if let Some(c) = cache.as_deref_mut() {
                        c.traces.push(AnnLayerTrace::OutputLinear { input: x });
                    }
                    pre
                } else {
                    let out = relu_fwd(&pre);
                    if let Some(c) = cache.as_deref_mut() {
                        c.traces.push(AnnLayerTrace::Weighted { input: x, pre });
                    }
                    out
                }
            }
            Layer::AvgPool { k } => {
                let out = avgpool_fwd(&x, *k)?;
                if let Some(c) = cache.as_deref_mut() {
                    c.traces.push(AnnLayerTrace::Pool { input: x });
                }
                out
            }
            Layer::Dropout { .. } => {
                let LayerState::Mask(mask) = &masks.layers[i] else {
                    unreachable!("mask state mirrors dropout layers")
                };
                let out = x.mul_elementwise(mask)?;
                if let Some(c) = cache.as_deref_mut() {
                    c.traces.push(AnnLayerTrace::Dropout { input: x });
                }
                out
            }
            Layer::ResidualBlock { .. } => {
                let sa = slot_index(&slots, i, 0);
                let sb = slot_index(&slots, i, 1);
                let (SlotKind::Conv(spec_a), SlotKind::Conv(spec_b)) =
                    (&slots[sa].kind, &slots[sb].kind)
                else {
                    unreachable!()
                };
                let pre_a = conv2d_fwd(&x, spec_a, &params.weights[sa])?;
                let mid = relu_fwd(&pre_a);
                let mut pre_b = conv2d_fwd(&mid, spec_b, &params.weights[sb])?;
                pre_b.add_assign(&x)?;
                pre_b.ensure_finite(&format!("analog layer {i} pre-activation"))?;
                let out = relu_fwd(&pre_b);
                if let Some(c) = cache.as_deref_mut() {
                    c.traces.push(AnnLayerTrace::Block {
                        input: x,
                        pre_a,
                        mid,
                        pre_b,
                    });
                }
                out
            }
        };
    }
    Ok(x)
}

/// Analog backward pass: chain rule through the cached forward, ReLU gates
/// at every hidden pre-activation. Returns per-slot weight gradients.
pub fn ann_backward<T: Scalar>(
    params: &NetworkParams<T>,
    arch: &ArchitectureSpec,
    cache: &AnnCache<T>,
    masks: &NetworkState<T>,
    g_logits: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    use crate::tensor::ops::{avgpool_vjp, conv2d_vjp, linear_vjp, relu_vjp};
    let slots = arch.slots()?;
    let mut grads = params.zeros_like();
    let mut g = g_logits.clone();
    for (i, layer) in arch.layers.iter().enumerate().rev() {
        g = match (layer, &cache.traces[i]) {
            (Layer::Linear { .. }, AnnLayerTrace::OutputLinear { input }) => {
                let si = slot_index(&slots, i, 0);
                let SlotKind::Linear { fan_in, .. } = &slots[si].kind else {
                    unreachable!()
                };
                let flat = input.reshape(&[input.shape()[0], *fan_in])?;
                let (g_x, g_w) = linear_vjp(&flat, &params.weights[si], &g)?;
                grads[si].add_assign(&g_w)?;
                g_x.reshape(input.shape())?
            }
            (Layer::Conv(spec), AnnLayerTrace::Weighted { input, pre }) => {
                let si = slot_index(&slots, i, 0);
                let g_pre = relu_vjp(pre, &g)?;
                let (g_x, g_w) = conv2d_vjp(input, spec, &params.weights[si], &g_pre)?;
                grads[si].add_assign(&g_w)?;
                g_x
            }
            (Layer::Linear { .. }, AnnLayerTrace::Weighted { input, pre }) => {
                let si = slot_index(&slots, i, 0);
                let SlotKind::Linear { fan_in, .. } = &slots[si].kind else {
                    unreachable!()
                };
                let g_pre = relu_vjp(pre, &g)?;
                let flat = input.reshape(&[input.shape()[0], *fan_in])?;
                let (g_x, g_w) = linear_vjp(&flat, &params.weights[si], &g_pre)?;
                grads[si].add_assign(&g_w)?;
                g_x.reshape(input.shape())?
            }
            (Layer::AvgPool { k }, AnnLayerTrace::Pool { .. }) => avgpool_vjp(&g, *k)?,
            (Layer::Dropout { .. }, AnnLayerTrace::Dropout { .. }) => {
                let LayerState::Mask(mask) = &masks.layers[i] else {
                    unreachable!()
                };
                g.mul_elementwise(mask)?
            }
            (
                Layer::ResidualBlock { .. },
                AnnLayerTrace::Block {
                    input,
                    pre_a,
                    mid,
                    pre_b,
                },
            ) => {
                let sa = slot_index(&slots, i, 0);
                let sb = slot_index(&slots, i, 1);
                let (SlotKind::Conv(spec_a), SlotKind::Conv(spec_b)) =
                    (&slots[sa].kind, &slots[sb].kind)
                else {
                    unreachable!()
                };
                let g_pre_b = relu_vjp(pre_b, &g)?;
                let (g_mid, g_wb) = conv2d_vjp(mid, spec_b, &params.weights[sb], &g_pre_b)?;
                grads[sb].add_assign(&g_wb)?;
                let g_pre_a = relu_vjp(pre_a, &g_mid)?;
                let (mut g_x, g_wa) = conv2d_vjp(input, spec_a, &params.weights[sa], &g_pre_a)?;
                grads[sa].add_assign(&g_wa)?;
                // identity shortcut
                g_x.add_assign(&g_pre_b)?;
                g_x
            }
            _ => unreachable!("cache layout mirrors the architecture"),
        };
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::poisson_encode;

    fn toy_arch() -> ArchitectureSpec {
        ArchitectureSpec::new(
            (1, 8, 8),
            10,
            vec![
                Layer::Conv(ConvSpec::new(2, 1, 3, 1, 1)),
                Layer::AvgPool { k: 2 },
                Layer::Dropout { rate: 0.5 },
                Layer::Linear { out: 10 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_final_layer() {
        let r = ArchitectureSpec::new(
            (1, 4, 4),
            10,
            vec![Layer::Linear { out: 7 }],
        );
        assert!(r.is_err());
    }

    #[test]
    fn pool_shape_tracking_uses_integer_division() {
        let arch = ArchitectureSpec::new(
            (3, 32, 32),
            10,
            vec![
                Layer::Conv(ConvSpec::new(4, 3, 3, 1, 1)),
                Layer::AvgPool { k: 2 },
                Layer::AvgPool { k: 2 },
                Layer::Linear { out: 10 },
            ],
        )
        .unwrap();
        let shapes = arch.state_shapes(2).unwrap();
        // after two 2x2 pools the conv map is 8x8
        match &shapes[0] {
            LayerStateShape::Lif(d) => assert_eq!(d, &vec![2, 4, 32, 32]),
            _ => panic!(),
        }
        let slots = arch.slots().unwrap();
        match &slots[1].kind {
            SlotKind::Linear { fan_in, .. } => assert_eq!(*fan_in, 4 * 8 * 8),
            _ => panic!(),
        }
    }

    #[test]
    fn init_state_is_zeroed_with_past_spike_markers() {
        let arch = toy_arch();
        let st = init_neuron_state::<f32>(3, &arch, None).unwrap();
        match &st.layers[0] {
            LayerState::Lif(l) => {
                assert!(l.potential.data().iter().all(|&u| u == 0.0));
                assert!(l.last_spike.data().iter().all(|&s| s == -1000.0));
            }
            _ => panic!(),
        }
        match &st.layers[2] {
            LayerState::Mask(m) => assert!(m.data().iter().all(|&v| v == 1.0)),
            _ => panic!(),
        }
    }

    #[test]
    fn dropout_mask_keep_fraction_within_binomial_bounds() {
        let arch = ArchitectureSpec::new(
            (1, 1, 1000),
            2,
            vec![Layer::Dropout { rate: 0.5 }, Layer::Linear { out: 2 }],
        )
        .unwrap();
        let st = init_neuron_state::<f64>(1, &arch, Some(33)).unwrap();
        let LayerState::Mask(m) = &st.layers[0] else { panic!() };
        let kept = m.data().iter().filter(|&&v| v != 0.0).count();
        assert!((kept as f64 / 1000.0 - 0.5).abs() < 0.05);
        assert!(m
            .data()
            .iter()
            .all(|&v| v == 0.0 || (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn zero_train_produces_zero_everything() {
        let arch = toy_arch();
        let params = NetworkParams::<f32>::random_init(&arch, 1).unwrap();
        let images = Tensor::zeros(&[2, 1, 8, 8]);
        let train = poisson_encode(&images, 6, 0).unwrap();
        let (out, rec) = snn_run(&params, &arch, &train, 1.0, None, true).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let rec = rec.unwrap();
        for step in &rec.steps {
            for tr in &step.layers {
                if let LayerTrace::Spiking { out, .. } = tr {
                    assert!(out.data().iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn zero_weights_never_spike() {
        let arch = ArchitectureSpec::new(
            (1, 1, 4),
            2,
            vec![Layer::Linear { out: 3 }, Layer::Linear { out: 2 }],
        )
        .unwrap();
        let mut params = NetworkParams::<f32>::random_init(&arch, 1).unwrap();
        params.weights[0].fill(0.0);
        let images = Tensor::filled(&[1, 1, 1, 4], 1.0);
        let train = poisson_encode(&images, 5, 0).unwrap();
        let (_, rec) = snn_run(&params, &arch, &train, 1.0, None, true).unwrap();
        for step in &rec.unwrap().steps {
            if let LayerTrace::Spiking { out, .. } = &step.layers[0] {
                assert!(out.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    /// Two-layer net unrolled by hand: potentials must match step by step.
    #[test]
    fn matches_hand_unrolled_dynamics() {
        let arch = ArchitectureSpec::new(
            (1, 1, 2),
            2,
            vec![Layer::Linear { out: 2 }, Layer::Linear { out: 2 }],
        )
        .unwrap();
        let mut params = NetworkParams::<f64>::random_init(&arch, 0).unwrap();
        params.weights[0] =
            Tensor::from_vec(&[2, 2], vec![0.8, 0.3, -0.2, 0.9]).unwrap();
        params.weights[1] =
            Tensor::from_vec(&[2, 2], vec![0.5, -0.4, 0.1, 0.7]).unwrap();
        params.thresholds[0] = Some(0.6);
        let leak = 0.9;

        // constant all-ones input frames
        let frames: Vec<Tensor<f64>> =
            (0..5).map(|_| Tensor::filled(&[1, 1, 1, 2], 1.0)).collect();
        let train = SpikeTrain { frames };

        // independent scalar unroll
        let w1 = [[0.8, 0.3], [-0.2, 0.9]];
        let w2 = [[0.5, -0.4], [0.1, 0.7]];
        let v = 0.6;
        let mut u1 = [0.0f64; 2];
        let mut o_prev = [0.0f64; 2];
        let mut u2 = [0.0f64; 2];
        for _t in 1..=5 {
            let mut o_now = [0.0f64; 2];
            for i in 0..2 {
                let input: f64 = w1[i][0] + w1[i][1];
                u1[i] = leak * u1[i] + input - v * o_prev[i];
                if u1[i] > v {
                    o_now[i] = 1.0;
                }
            }
            for i in 0..2 {
                let input: f64 = w2[i][0] * o_now[0] + w2[i][1] * o_now[1];
                u2[i] += input;
            }
            o_prev = o_now;
        }

        let (out, _) = snn_run(&params, &arch, &train, leak, None, false).unwrap();
        assert!((out.data()[0] - u2[0]).abs() < 1e-12);
        assert!((out.data()[1] - u2[1]).abs() < 1e-12);
    }

    #[test]
    fn ann_zero_weights_zero_logits() {
        let arch = toy_arch();
        let mut params = NetworkParams::<f32>::random_init(&arch, 3).unwrap();
        for w in params.weights.iter_mut() {
            w.fill(0.0);
        }
        let images = Tensor::filled(&[2, 1, 8, 8], 0.5);
        let masks = init_neuron_state(2, &arch, None).unwrap();
        let logits = ann_forward(&params, &arch, &images, &masks, None).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_preamble_enforced() {
        let bad = ArchitectureSpec::new(
            (4, 8, 8),
            2,
            vec![
                Layer::ResidualBlock { channels: 4 },
                Layer::Linear { out: 2 },
            ],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn residual_block_spikes_are_binary_and_shapes_hold() {
        let arch = presets::preset("resnet8-lite", (1, 8, 8), 3).unwrap();
        let params = NetworkParams::<f32>::random_init(&arch, 5).unwrap();
        let images = Tensor::filled(&[2, 1, 8, 8], 0.8);
        let train = poisson_encode(&images, 4, 1).unwrap();
        let (out, rec) = snn_run(&params, &arch, &train, 1.0, None, true).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        for step in &rec.unwrap().steps {
            for tr in &step.layers {
                if let LayerTrace::Block { mid, out, .. } = tr {
                    assert!(mid.data().iter().all(|&v| v == 0.0 || v == 1.0));
                    assert!(out.data().iter().all(|&v| v == 0.0 || v == 1.0));
                }
            }
        }
    }
}
