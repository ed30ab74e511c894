//! Independent reference implementations used to check the engine: a
//! scalar, loop-level unrolled backpropagation oracle for toy spiking
//! networks, central finite differences for the genuinely differentiable
//! paths, and charge-conservation replays. Everything here recomputes from
//! first principles and shares no code with the paths it checks.

use crate::encoding::{poisson_encode, SpikeTrain};
use crate::error::Result;
use crate::network::{
    init_neuron_state, snn_forward, ArchitectureSpec, ForwardRecord, Layer, LayerState,
    LayerTrace, NetworkParams, NetworkState,
};
use crate::neuron::{SurrogateFamily, NEVER_SPIKED};
use crate::tensor::ops::{linear_fwd, softmax_cross_entropy};
use crate::tensor::Tensor;
use crate::training::{stdb_backward, BackwardConfig, GradientAccumulator};
use rand::Rng;

/// Outcome of one named verification.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            pass,
            detail,
        }
    }
}

// ---------------------------------------------------------------------------
// Scalar unrolled oracle
// ---------------------------------------------------------------------------

/// A toy spiking network in plain nested vectors: hidden linear layers with
/// optional dropout masks after each, then a linear output integrator.
pub struct OracleNet {
    /// `[slot][out][in]`; the last slot is the output layer.
    pub weights: Vec<Vec<Vec<f64>>>,
    /// Per hidden slot.
    pub thresholds: Vec<f64>,
    /// Mask applied to hidden slot l's spikes, `[b][unit]`, value 0 or the
    /// inverted keep scale.
    pub masks: Vec<Option<Vec<Vec<f64>>>>,
    pub leak: f64,
    pub family: SurrogateFamily,
    pub alpha: f64,
    pub beta: f64,
}

impl OracleNet {
    fn surrogate(&self, t: usize, s: f64, u: f64, v: f64) -> f64 {
        match self.family {
            SurrogateFamily::SpikeTime => self.alpha * (-self.beta * (t as f64 - s)).exp(),
            SurrogateFamily::Linear => {
                let d = 1.0 - (u - v).abs();
                if d > 0.0 {
                    self.alpha * d
                } else {
                    0.0
                }
            }
            SurrogateFamily::Exponential => self.alpha * (-self.beta * (u - v).abs()).exp(),
        }
    }

    /// Full-unroll forward and backward by explicit loops over time, layers
    /// and units. `input` is `[t][b][pixel]`; returns (loss, per-slot
    /// gradients in the same nesting as `weights`).
    pub fn unrolled_gradients(
        &self,
        input: &[Vec<Vec<f64>>],
        targets: &[usize],
    ) -> (f64, Vec<Vec<Vec<f64>>>) {
        let timesteps = input.len();
        let batch = input[0].len();
        let hidden = self.weights.len() - 1;
        let widths: Vec<usize> = self.weights.iter().map(|w| w.len()).collect();
        let classes = widths[hidden];

        // forward, storing everything
        // o[l][t][b][i], u[l][t][b][i], s[l][t][b][i], x_in[l][t][b][j]
        let mut o = vec![vec![vec![Vec::new(); batch]; timesteps]; hidden];
        let mut u_rec = vec![vec![vec![Vec::new(); batch]; timesteps]; hidden];
        let mut s_rec = vec![vec![vec![Vec::new(); batch]; timesteps]; hidden];
        let mut x_in = vec![vec![vec![Vec::new(); batch]; timesteps]; hidden + 1];
        let mut u_out = vec![vec![0.0; classes]; batch];

        for b in 0..batch {
            let mut u: Vec<Vec<f64>> = widths[..hidden].iter().map(|&w| vec![0.0; w]).collect();
            let mut s: Vec<Vec<f64>> =
                widths[..hidden].iter().map(|&w| vec![NEVER_SPIKED; w]).collect();
            let mut o_prev: Vec<Vec<f64>> = widths[..hidden].iter().map(|&w| vec![0.0; w]).collect();
            for t in 1..=timesteps {
                let mut x = input[t - 1][b].clone();
                for l in 0..hidden {
                    x_in[l][t - 1][b] = x.clone();
                    let v = self.thresholds[l];
                    let mut spikes = vec![0.0; widths[l]];
                    for i in 0..widths[l] {
                        let mut pre = 0.0;
                        for (j, &xj) in x.iter().enumerate() {
                            pre += self.weights[l][i][j] * xj;
                        }
                        u[l][i] = self.leak * u[l][i] + pre - v * o_prev[l][i];
                        if u[l][i] > v {
                            spikes[i] = 1.0;
                            s[l][i] = t as f64;
                        }
                    }
                    o_prev[l] = spikes.clone();
                    o[l][t - 1][b] = spikes.clone();
                    u_rec[l][t - 1][b] = u[l].clone();
                    s_rec[l][t - 1][b] = s[l].clone();
                    x = spikes;
                    if let Some(mask) = &self.masks[l] {
                        for (xi, &m) in x.iter_mut().zip(mask[b].iter()) {
                            *xi *= m;
                        }
                    }
                }
                x_in[hidden][t - 1][b] = x.clone();
                for i in 0..classes {
                    let mut pre = 0.0;
                    for (j, &xj) in x.iter().enumerate() {
                        pre += self.weights[hidden][i][j] * xj;
                    }
                    u_out[b][i] += pre;
                }
            }
        }

        // loss and its gradient on the integrated output
        let mut loss = 0.0;
        let mut delta_out = vec![vec![0.0; classes]; batch];
        for b in 0..batch {
            let m = u_out[b].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = u_out[b].iter().map(|&x| (x - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for i in 0..classes {
                let p = exps[i] / z;
                delta_out[b][i] = (p - if i == targets[b] { 1.0 } else { 0.0 }) / batch as f64;
            }
            loss -= (exps[targets[b]] / z).ln() / batch as f64;
        }

        // reverse unroll
        let mut grads: Vec<Vec<Vec<f64>>> = self
            .weights
            .iter()
            .map(|w| w.iter().map(|row| vec![0.0; row.len()]).collect())
            .collect();
        for b in 0..batch {
            let mut carry: Vec<Vec<f64>> = widths[..hidden].iter().map(|&w| vec![0.0; w]).collect();
            for t in (1..=timesteps).rev() {
                // output layer weight gradient at this step
                for i in 0..classes {
                    for (j, &xj) in x_in[hidden][t - 1][b].iter().enumerate() {
                        grads[hidden][i][j] += delta_out[b][i] * xj;
                    }
                }
                // delta on the spikes feeding the output layer
                let mut upstream: Vec<f64> = (0..widths[hidden - 1].max(0))
                    .map(|_| 0.0)
                    .collect();
                let _ = &mut upstream;
                let mut delta_next: Vec<f64> = delta_out[b].clone();
                for l in (0..hidden).rev() {
                    // spatial gradient through the following weight layer
                    let w_next = &self.weights[l + 1];
                    let mut g_spike = vec![0.0; widths[l]];
                    for (k, d) in delta_next.iter().enumerate() {
                        for i in 0..widths[l] {
                            g_spike[i] += w_next[k][i] * d;
                        }
                    }
                    if let Some(mask) = &self.masks[l] {
                        for (gi, &m) in g_spike.iter_mut().zip(mask[b].iter()) {
                            *gi *= m;
                        }
                    }
                    let v = self.thresholds[l];
                    let mut delta_u = vec![0.0; widths[l]];
                    for i in 0..widths[l] {
                        let g_o = g_spike[i] - v * carry[l][i];
                        let sigma =
                            self.surrogate(t, s_rec[l][t - 1][b][i], u_rec[l][t - 1][b][i], v);
                        delta_u[i] = g_o * sigma + self.leak * carry[l][i];
                    }
                    for i in 0..widths[l] {
                        for (j, &xj) in x_in[l][t - 1][b].iter().enumerate() {
                            grads[l][i][j] += delta_u[i] * xj;
                        }
                    }
                    carry[l] = delta_u.clone();
                    delta_next = delta_u;
                }
            }
        }
        (loss, grads)
    }
}

/// Randomized toy setup mirrored into both the engine and the oracle.
pub struct ToyCase {
    pub arch: ArchitectureSpec,
    pub params: NetworkParams<f64>,
    pub train: SpikeTrain<f64>,
    pub targets: Vec<usize>,
    pub state: NetworkState<f64>,
    pub leak: f64,
}

/// Build a random toy spiking net (1-2 hidden linear layers, optional
/// dropout, <= 50 parameters) plus its Poisson input.
pub fn random_toy_case(seed: u64) -> ToyCase {
    let mut rng = crate::rng::stream(seed, crate::rng::StreamKind::Data, &[0xF00D]);
    let inputs = rng.gen_range(2..=4usize);
    let h1 = rng.gen_range(2..=4usize);
    let two_hidden = rng.gen_bool(0.5);
    let h2 = rng.gen_range(2..=3usize);
    let classes = rng.gen_range(2..=3usize);
    let with_dropout = rng.gen_bool(0.4);
    let timesteps = rng.gen_range(3..=10usize);
    let batch = rng.gen_range(1..=3usize);
    let leak = [1.0, 0.95, 0.8][rng.gen_range(0..3)];

    let mut layers = vec![Layer::Linear { out: h1 }];
    if with_dropout {
        layers.push(Layer::Dropout { rate: 0.3 });
    }
    if two_hidden {
        layers.push(Layer::Linear { out: h2 });
    }
    layers.push(Layer::Linear { out: classes });
    let arch = ArchitectureSpec::new((1, 1, inputs), classes, layers).expect("toy arch");

    let mut params = NetworkParams::<f64>::random_init(&arch, seed ^ 0xABCD).expect("init");
    for w in params.weights.iter_mut() {
        for x in w.data_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
    }
    for v in params.thresholds.iter_mut().flatten() {
        *v = rng.gen_range(0.3..1.2);
    }

    let pixels: Vec<f64> = (0..batch * inputs).map(|_| rng.gen_range(0.2..1.0)).collect();
    let images = Tensor::from_vec(&[batch, 1, 1, inputs], pixels).expect("images");
    let train = poisson_encode(&images, timesteps, seed ^ 0x5EED).expect("encode");
    let targets: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
    let state = init_neuron_state(batch, &arch, Some(seed ^ 0x77)).expect("state");

    ToyCase {
        arch,
        params,
        train,
        targets,
        state,
        leak,
    }
}

/// Mirror a [`ToyCase`] into the scalar oracle representation.
pub fn mirror_to_oracle(case: &ToyCase, family: SurrogateFamily, alpha: f64, beta: f64) -> OracleNet {
    let slots = case.arch.slots().expect("slots");
    let weights: Vec<Vec<Vec<f64>>> = case
        .params
        .weights
        .iter()
        .map(|w| {
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            (0..rows)
                .map(|r| w.data()[r * cols..(r + 1) * cols].to_vec())
                .collect()
        })
        .collect();
    let thresholds: Vec<f64> = case
        .params
        .thresholds
        .iter()
        .flatten()
        .copied()
        .collect();
    // masks follow each hidden slot when the next graph layer is dropout
    let hidden = slots.len() - 1;
    let mut masks: Vec<Option<Vec<Vec<f64>>>> = vec![None; hidden];
    for (si, slot) in slots.iter().take(hidden).enumerate() {
        let next = slot.layer_idx + 1;
        if matches!(case.arch.layers.get(next), Some(Layer::Dropout { .. })) {
            if let LayerState::Mask(m) = &case.state.layers[next] {
                let batch = m.shape()[0];
                let per = m.len() / batch;
                masks[si] = Some(
                    (0..batch)
                        .map(|b| m.data()[b * per..(b + 1) * per].to_vec())
                        .collect(),
                );
            }
        }
    }
    OracleNet {
        weights,
        thresholds,
        masks,
        leak: case.leak,
        family,
        alpha,
        beta,
    }
}

/// Input frames as nested vectors for the oracle.
pub fn frames_as_vecs(train: &SpikeTrain<f64>) -> Vec<Vec<Vec<f64>>> {
    train
        .frames
        .iter()
        .map(|f| {
            let batch = f.shape()[0];
            let per = f.len() / batch;
            (0..batch)
                .map(|b| f.data()[b * per..(b + 1) * per].to_vec())
                .collect()
        })
        .collect()
}

/// Engine gradients vs oracle gradients for one toy case and surrogate
/// family: returns (max abs difference, total gradient mass).
pub fn oracle_equivalence(case: &ToyCase, family: SurrogateFamily, alpha: f64, beta: f64) -> Result<(f64, f64)> {
    let mut state = case.state.clone();
    let mut record = ForwardRecord::new(1);
    snn_forward(
        &case.params,
        &case.arch,
        &mut state,
        &case.train,
        0..case.train.timesteps(),
        case.leak,
        Some(&mut record),
    )?;
    let mut acc = GradientAccumulator::zeros(&case.params);
    let cfg = BackwardConfig {
        surrogate: crate::neuron::SurrogateConfig::new(family, alpha, beta),
        leak: case.leak,
    };
    stdb_backward(
        &record,
        &case.train,
        &case.params,
        &case.arch,
        &state,
        &case.targets,
        &cfg,
        &mut acc,
    )?;

    let oracle = mirror_to_oracle(case, family, alpha, beta);
    let frames = frames_as_vecs(&case.train);
    let (_, oracle_grads) = oracle.unrolled_gradients(&frames, &case.targets);

    let mut max_diff = 0.0f64;
    let mut mass = 0.0f64;
    for (slot, og) in oracle_grads.iter().enumerate() {
        let eg = &acc.grads[slot];
        let cols = eg.shape()[1];
        for (i, row) in og.iter().enumerate() {
            for (j, &g) in row.iter().enumerate() {
                let d = (eg.data()[i * cols + j] - g).abs();
                max_diff = max_diff.max(d);
                mass += g.abs();
            }
        }
    }
    Ok((max_diff, mass))
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central finite differences of a scalar function over a flat parameter
/// vector.
pub fn central_differences(f: &dyn Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; at.len()];
    let mut work = at.to_vec();
    for i in 0..at.len() {
        work[i] = at[i] + h;
        let fp = f(&work);
        work[i] = at[i] - h;
        let fm = f(&work);
        work[i] = at[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// With hidden spike trains frozen, the loss as a function of the output
/// layer's weights is genuinely differentiable; central differences of that
/// loss must match the engine's output-slot gradient. Returns the maximum
/// relative error over the output weights.
pub fn frozen_train_output_fd(case: &ToyCase) -> Result<f64> {
    let mut state = case.state.clone();
    let mut record = ForwardRecord::new(1);
    snn_forward(
        &case.params,
        &case.arch,
        &mut state,
        &case.train,
        0..case.train.timesteps(),
        case.leak,
        Some(&mut record),
    )?;
    let mut acc = GradientAccumulator::zeros(&case.params);
    let cfg = BackwardConfig {
        surrogate: crate::neuron::SurrogateConfig::new(SurrogateFamily::SpikeTime, 0.3, 0.01),
        leak: case.leak,
    };
    stdb_backward(
        &record,
        &case.train,
        &case.params,
        &case.arch,
        &state,
        &case.targets,
        &cfg,
        &mut acc,
    )?;
    let out_slot = case.params.weights.len() - 1;

    // frozen inputs to the output layer, per step
    let last_layer = case.arch.layers.len() - 1;
    let frozen: Vec<Tensor<f64>> = record
        .steps
        .iter()
        .enumerate()
        .map(|(idx, step)| {
            if last_layer == 0 {
                case.train.frame(idx).clone()
            } else {
                match &step.layers[last_layer - 1] {
                    LayerTrace::Spiking { out, .. } => out.clone(),
                    LayerTrace::Plain { out } => out.clone(),
                    LayerTrace::Block { out, .. } => out.clone(),
                    LayerTrace::OutputLayer => unreachable!(),
                }
            }
        })
        .collect();

    let w_shape = case.params.weights[out_slot].shape().to_vec();
    let targets = case.targets.clone();
    let batch = case.train.frame(0).shape()[0];
    let loss_of = |flat: &[f64]| -> f64 {
        let w = Tensor::from_vec(&w_shape, flat.to_vec()).expect("shape");
        let mut u = Tensor::<f64>::zeros(&[batch, w_shape[0]]);
        for frame in &frozen {
            let x = frame.reshape(&[batch, w_shape[1]]).expect("flatten");
            let pre = linear_fwd(&x, &w).expect("fwd");
            u.add_assign(&pre).expect("shape");
        }
        let (loss, _) = softmax_cross_entropy(&u, &targets).expect("loss");
        loss
    };
    let at = case.params.weights[out_slot].data().to_vec();
    let fd = central_differences(&loss_of, &at, 1e-5);
    let analytic = acc.grads[out_slot].data();
    let mut worst = 0.0f64;
    for (a, b) in fd.iter().zip(analytic.iter()) {
        if a.abs().max(b.abs()) > 1e-10 {
            worst = worst.max(relative_error(*a, *b));
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Conservation
// ---------------------------------------------------------------------------

/// For every hidden spiking layer run with unit leak, total weighted input
/// must equal the settled potential plus threshold times the spike count,
/// element by element. Returns the worst absolute mismatch.
pub fn conservation_mismatch(
    params: &NetworkParams<f64>,
    arch: &ArchitectureSpec,
    train: &SpikeTrain<f64>,
) -> Result<f64> {
    let slots = arch.slots()?;
    let batch = train.frame(0).shape()[0];
    let mut state = init_neuron_state::<f64>(batch, arch, None)?;
    let mut record = ForwardRecord::new(1);
    snn_forward(
        params,
        arch,
        &mut state,
        train,
        0..train.timesteps(),
        1.0,
        Some(&mut record),
    )?;

    let mut worst = 0.0f64;
    for (si, slot) in slots.iter().enumerate() {
        if !slot.spiking || slot.in_block {
            continue;
        }
        let layer_idx = slot.layer_idx;
        let v = params.thresholds[si].expect("threshold");
        // total weighted input, recomputed from the recorded layer inputs
        let mut input_sum: Option<Tensor<f64>> = None;
        let mut spike_sum: Option<Tensor<f64>> = None;
        for (idx, step) in record.steps.iter().enumerate() {
            let x = if layer_idx == 0 {
                train.frame(idx).clone()
            } else {
                match &step.layers[layer_idx - 1] {
                    LayerTrace::Spiking { out, .. } => out.clone(),
                    LayerTrace::Plain { out } => out.clone(),
                    LayerTrace::Block { out, .. } => out.clone(),
                    LayerTrace::OutputLayer => unreachable!(),
                }
            };
            let pre = crate::network::weighted_input(params, slot, si, &x)?;
            match input_sum.as_mut() {
                Some(s) => s.add_assign(&pre)?,
                None => input_sum = Some(pre),
            }
            let LayerTrace::Spiking { out, .. } = &step.layers[layer_idx] else {
                unreachable!()
            };
            match spike_sum.as_mut() {
                Some(s) => s.add_assign(out)?,
                None => spike_sum = Some(out.clone()),
            }
        }
        let input_sum = input_sum.expect("at least one step");
        let spike_sum = spike_sum.expect("at least one step");
        let LayerState::Lif(end) = &state.layers[layer_idx] else {
            unreachable!()
        };
        for i in 0..input_sum.len() {
            // settle the pending reset of a final-step spike
            let settled = end.potential.data()[i] - v * end.prev_spikes.data()[i];
            let lhs = input_sum.data()[i];
            let rhs = settled + v * spike_sum.data()[i];
            worst = worst.max((lhs - rhs).abs());
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Suite
// ---------------------------------------------------------------------------

/// Run the full verification suite; one result line per check.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();

    // unrolled-oracle equivalence across families
    let mut worst = 0.0f64;
    let mut mass = 0.0f64;
    let mut failed = None;
    for k in 0..20u64 {
        let case = random_toy_case(seed.wrapping_add(k));
        for (family, beta) in [
            (SurrogateFamily::SpikeTime, 0.01),
            (SurrogateFamily::Linear, 0.01),
            (SurrogateFamily::Exponential, 1.0),
        ] {
            match oracle_equivalence(&case, family, 0.3, beta) {
                Ok((d, m)) => {
                    worst = worst.max(d);
                    mass += m;
                }
                Err(e) => failed = Some(e.to_string()),
            }
        }
    }
    out.push(CheckResult::new(
        "unrolled-oracle equivalence (20 nets x 3 surrogates)",
        failed.is_none() && worst < 1e-6 && mass > 0.0,
        failed.unwrap_or(format!("max |diff| {worst:.2e}, oracle mass {mass:.2e}")),
    ));

    // frozen-train finite differences on the output layer
    let mut worst = 0.0f64;
    for k in 0..5u64 {
        let case = random_toy_case(seed.wrapping_add(100 + k));
        match frozen_train_output_fd(&case) {
            Ok(e) => worst = worst.max(e),
            Err(e) => {
                worst = f64::INFINITY;
                out.push(CheckResult::new("frozen-train FD setup", false, e.to_string()));
            }
        }
    }
    out.push(CheckResult::new(
        "output-layer finite differences (frozen spike trains)",
        worst < 1e-4,
        format!("max rel err {worst:.2e}"),
    ));

    // conservation with unit leak
    let mut worst = 0.0f64;
    for k in 0..5u64 {
        let case = random_toy_case(seed.wrapping_add(200 + k));
        match conservation_mismatch(&case.params, &case.arch, &case.train) {
            Ok(d) => worst = worst.max(d),
            Err(e) => out.push(CheckResult::new("conservation setup", false, e.to_string())),
        }
    }
    out.push(CheckResult::new(
        "soft-reset charge conservation (leak 1)",
        worst < 1e-4,
        format!("max mismatch {worst:.2e}"),
    ));

    // lookup table bitwise identity
    let direct = crate::neuron::SurrogateConfig::<f32>::new(SurrogateFamily::SpikeTime, 0.3, 0.01);
    let lut = direct.clone().with_lut(100);
    let mut bitwise = true;
    for t in 1..=100usize {
        let s = Tensor::from_vec(
            &[3],
            vec![t as f32, (t as f32 / 2.0).floor(), NEVER_SPIKED as f32],
        )
        .unwrap();
        let a = crate::neuron::stdb_surrogate(t, &s, &direct);
        let b = crate::neuron::stdb_surrogate(t, &s, &lut);
        if a.data() != b.data() {
            bitwise = false;
        }
    }
    out.push(CheckResult::new(
        "surrogate lookup table bitwise identity",
        bitwise,
        String::from(if bitwise { "identical" } else { "mismatch" }),
    ));

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let results = run_all(7);
        for r in &results {
            assert!(r.pass, "{}: {}", r.name, r.detail);
        }
    }
}
