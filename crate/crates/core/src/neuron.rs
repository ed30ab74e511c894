//! Discrete-time leaky integrate-and-fire dynamics with soft reset, the
//! non-firing output integrator, and the surrogate gradients used to
//! backpropagate through the spike threshold.
//!
//! Per time step t a hidden neuron updates
//!
//! ```text
//! u_t = leak * u_{t-1} + input_t - threshold * spike_{t-1}
//! spike_t = 1 if u_t > threshold else 0
//! ```
//!
//! The spike decision reads the freshly updated potential while the soft
//! reset subtracts the threshold scaled by the *previous* step's spikes;
//! that one-step reset delay is part of the contract. A neuron that fires
//! keeps its above-threshold excess, which the next step's reset removes.

use crate::error::{Result, SnnError};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Per-layer membrane constants.
#[derive(Debug, Clone, Copy)]
pub struct NeuronConfig<T> {
    /// Multiplicative leak in (0, 1]; 1 disables the leak.
    pub leak: T,
    /// Firing threshold, strictly positive for spiking layers.
    pub threshold: T,
}

/// Initial last-spike marker: far enough in the past that the spike-time
/// surrogate of a never-fired neuron is effectively (but not exactly) zero.
pub const NEVER_SPIKED: f64 = -1000.0;

/// Per-layer, per-neuron simulation state.
#[derive(Debug, Clone)]
pub struct LifState<T> {
    /// Membrane potentials, same shape as the layer output.
    pub potential: Tensor<T>,
    /// Time step of each neuron's most recent spike (integer-valued).
    pub last_spike: Tensor<T>,
    /// Binary spike output of the previous step.
    pub prev_spikes: Tensor<T>,
}

impl<T: Scalar> LifState<T> {
    pub fn new(shape: &[usize]) -> Self {
        LifState {
            potential: Tensor::zeros(shape),
            last_spike: Tensor::filled(shape, T::from_f64(NEVER_SPIKED)),
            prev_spikes: Tensor::zeros(shape),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.potential.shape()
    }
}

/// Surrogate family selector for the spike-threshold derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateFamily {
    /// alpha * exp(-beta * (t - last_spike)); spike-timing based.
    SpikeTime,
    /// alpha * max(0, 1 - |u - threshold|); membrane-potential based.
    Linear,
    /// alpha * exp(-beta * |u - threshold|); membrane-potential based.
    Exponential,
}

/// Surrogate gradient configuration, optionally backed by a lookup table
/// for the spike-time family (the time difference is a bounded integer, so
/// every possible value can be precomputed).
#[derive(Debug, Clone)]
pub struct SurrogateConfig<T> {
    pub family: SurrogateFamily,
    pub alpha: T,
    pub beta: T,
    lut: Option<Vec<T>>,
}

impl<T: Scalar> SurrogateConfig<T> {
    pub fn new(family: SurrogateFamily, alpha: T, beta: T) -> Self {
        SurrogateConfig {
            family,
            alpha,
            beta,
            lut: None,
        }
    }

    /// Defaults used throughout: spike-time family, alpha 0.3, beta 0.01.
    pub fn spike_time_default() -> Self {
        Self::new(SurrogateFamily::SpikeTime, T::from_f64(0.3), T::from_f64(0.01))
    }

    /// Precompute alpha * exp(-beta * dt) for every reachable dt. With the
    /// never-spiked marker at -1000, dt ranges over 0 ..= timesteps + 1000.
    pub fn with_lut(mut self, timesteps: usize) -> Self {
        let n = timesteps + (-NEVER_SPIKED) as usize + 1;
        let mut lut = Vec::with_capacity(n);
        for dt in 0..n {
            lut.push(spike_time_eval(self.alpha, self.beta, T::from_usize(dt)));
        }
        self.lut = Some(lut);
        self
    }

    pub fn has_lut(&self) -> bool {
        self.lut.is_some()
    }
}

#[inline]
fn spike_time_eval<T: Scalar>(alpha: T, beta: T, dt: T) -> T {
    alpha * (-beta * dt).exp()
}

/// Advance one hidden spiking layer by a single time step, mutating its
/// state; returns the fresh binary spike tensor.
pub fn lif_step<T: Scalar>(
    state: &mut LifState<T>,
    input_current: &Tensor<T>,
    cfg: NeuronConfig<T>,
    t: usize,
) -> Result<Tensor<T>> {
    if input_current.shape() != state.shape() {
        return Err(SnnError::ShapeMismatch {
            op: "lif_step",
            lhs: input_current.shape().to_vec(),
            rhs: state.shape().to_vec(),
        });
    }
    let t_val = T::from_usize(t);
    let u = state.potential.data_mut();
    let s = state.last_spike.data_mut();
    let prev = state.prev_spikes.data_mut();
    let inp = input_current.data();
    let mut spikes = Tensor::zeros(input_current.shape());
    let out = spikes.data_mut();
    for i in 0..u.len() {
        let next = cfg.leak * u[i] + inp[i] - cfg.threshold * prev[i];
        u[i] = next;
        if next > cfg.threshold {
            out[i] = T::one();
            s[i] = t_val;
        }
        prev[i] = out[i];
    }
    state
        .potential
        .ensure_finite(&format!("membrane potential at step {t}"))?;
    Ok(spikes)
}

/// Output-layer integrator: accumulate input without leak, threshold, or
/// reset. Last-spike markers are untouched.
pub fn output_accumulate<T: Scalar>(
    state: &mut LifState<T>,
    input_current: &Tensor<T>,
) -> Result<()> {
    if input_current.shape() != state.shape() {
        return Err(SnnError::ShapeMismatch {
            op: "output_accumulate",
            lhs: input_current.shape().to_vec(),
            rhs: state.shape().to_vec(),
        });
    }
    state.potential.add_assign(input_current)?;
    state.potential.ensure_finite("output integrator")?;
    Ok(())
}

/// Spike-time surrogate alpha * exp(-beta * (t - last_spike)), elementwise
/// over a last-spike tensor. Reads the lookup table when present; the table
/// holds exactly the values direct evaluation produces.
pub fn stdb_surrogate<T: Scalar>(
    t: usize,
    last_spike: &Tensor<T>,
    cfg: &SurrogateConfig<T>,
) -> Tensor<T> {
    let t_val = T::from_usize(t);
    match &cfg.lut {
        Some(lut) => last_spike.map(|s| {
            let dt = (t_val - s).to_f64() as usize;
            lut[dt]
        }),
        None => last_spike.map(|s| spike_time_eval(cfg.alpha, cfg.beta, t_val - s)),
    }
}

/// Piecewise-linear membrane surrogate alpha * max(0, 1 - |u - threshold|).
pub fn linear_surrogate<T: Scalar>(potential: &Tensor<T>, threshold: T, alpha: T) -> Tensor<T> {
    potential.map(|u| {
        let d = T::one() - (u - threshold).abs();
        if d > T::zero() {
            alpha * d
        } else {
            T::zero()
        }
    })
}

/// Exponential membrane surrogate alpha * exp(-beta * |u - threshold|).
pub fn exp_surrogate<T: Scalar>(
    potential: &Tensor<T>,
    threshold: T,
    alpha: T,
    beta: T,
) -> Tensor<T> {
    potential.map(|u| alpha * (-beta * (u - threshold).abs()).exp())
}

/// Dispatch the configured family at step t, given the per-step last-spike
/// and membrane snapshots.
pub fn spike_grad<T: Scalar>(
    cfg: &SurrogateConfig<T>,
    t: usize,
    last_spike: &Tensor<T>,
    potential: &Tensor<T>,
    threshold: T,
) -> Tensor<T> {
    match cfg.family {
        SurrogateFamily::SpikeTime => stdb_surrogate(t, last_spike, cfg),
        SurrogateFamily::Linear => linear_surrogate(potential, threshold, cfg.alpha),
        SurrogateFamily::Exponential => exp_surrogate(potential, threshold, cfg.alpha, cfg.beta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(leak: f64, threshold: f64) -> NeuronConfig<f64> {
        NeuronConfig { leak, threshold }
    }

    #[test]
    fn lif_fires_on_crossing_and_soft_resets_next_step() {
        let mut st = LifState::<f64>::new(&[1]);
        st.potential.data_mut()[0] = 0.5;
        let input = Tensor::from_vec(&[1], vec![0.6]).unwrap();
        let spikes = lif_step(&mut st, &input, cfg(1.0, 1.0), 3).unwrap();
        assert_eq!(spikes.data()[0], 1.0);
        assert!((st.potential.data()[0] - 1.1).abs() < 1e-12);
        assert_eq!(st.last_spike.data()[0], 3.0);

        // next step: reset subtracts the threshold, potential keeps the excess
        let zero = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let spikes = lif_step(&mut st, &zero, cfg(1.0, 1.0), 4).unwrap();
        assert_eq!(spikes.data()[0], 0.0);
        assert!((st.potential.data()[0] - 0.1).abs() < 1e-12);
        assert_eq!(st.last_spike.data()[0], 3.0);
    }

    #[test]
    fn exact_threshold_does_not_fire() {
        let mut st = LifState::<f64>::new(&[1]);
        let input = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let spikes = lif_step(&mut st, &input, cfg(1.0, 1.0), 1).unwrap();
        assert_eq!(spikes.data()[0], 0.0);
        assert_eq!(st.last_spike.data()[0], NEVER_SPIKED);
    }

    #[test]
    fn leak_decays_geometrically_without_input() {
        let mut st = LifState::<f64>::new(&[1]);
        st.potential.data_mut()[0] = 0.8;
        let zero = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        for t in 1..=5 {
            lif_step(&mut st, &zero, cfg(0.9, 10.0), t).unwrap();
        }
        assert!((st.potential.data()[0] - 0.8 * 0.9f64.powi(5)).abs() < 1e-12);
    }

    #[test]
    fn soft_reset_conserves_charge_with_unity_leak() {
        // sum of inputs == settled potential + threshold * spike count
        let mut st = LifState::<f32>::new(&[1]);
        let v = 1.0f32;
        let mut rng = crate::rng::stream(5, crate::rng::StreamKind::Data, &[1]);
        use rand::Rng;
        let mut total_in = 0.0f32;
        let mut total_spikes = 0.0f32;
        for t in 1..=200 {
            let i: f32 = rng.gen_range(0.0..0.6);
            total_in += i;
            let input = Tensor::from_vec(&[1], vec![i]).unwrap();
            let s = lif_step(&mut st, &input, NeuronConfig { leak: 1.0, threshold: v }, t).unwrap();
            total_spikes += s.data()[0];
        }
        // settle the pending reset of the final step's spike
        let settled = st.potential.data()[0] - v * st.prev_spikes.data()[0];
        assert!(
            (total_in - (settled + v * total_spikes)).abs() < 1e-5,
            "charge not conserved: in={total_in} settled={settled} spikes={total_spikes}"
        );
    }

    #[test]
    fn output_accumulate_is_plain_summation() {
        let mut st = LifState::<f64>::new(&[2]);
        let c = Tensor::from_vec(&[2], vec![0.25, -0.5]).unwrap();
        for _ in 0..8 {
            output_accumulate(&mut st, &c).unwrap();
        }
        assert!((st.potential.data()[0] - 2.0).abs() < 1e-12);
        assert!((st.potential.data()[1] + 4.0).abs() < 1e-12);

        // random spike-train input equals a plain summation oracle exactly
        let mut rng = crate::rng::stream(9, crate::rng::StreamKind::Data, &[2]);
        use rand::Rng;
        let mut st = LifState::<f64>::new(&[3]);
        let mut sums = [0.0f64; 3];
        for _ in 0..50 {
            let vals: Vec<f64> = (0..3).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
            for (a, &v) in sums.iter_mut().zip(vals.iter()) {
                *a += v;
            }
            let input = Tensor::from_vec(&[3], vals).unwrap();
            output_accumulate(&mut st, &input).unwrap();
        }
        for (i, &s) in sums.iter().enumerate() {
            assert_eq!(st.potential.data()[i], s);
        }
    }

    #[test]
    fn stdb_surrogate_values() {
        let cfg = SurrogateConfig::<f64>::new(SurrogateFamily::SpikeTime, 0.3, 0.01);
        let s = Tensor::from_vec(&[3], vec![12.0, 12.0, NEVER_SPIKED]).unwrap();
        let g = stdb_surrogate(12, &s, &cfg);
        assert!((g.data()[0] - 0.3).abs() < 1e-12); // dt = 0
        let g = stdb_surrogate(112, &s, &cfg);
        let expect = 0.3 * (-1.0f64).exp();
        assert!((g.data()[0] - expect).abs() < 1e-9); // dt = 100
        let g = stdb_surrogate(5, &s, &cfg);
        let expect_never = 0.3 * (-0.01f64 * 1005.0).exp();
        assert!((g.data()[2] - expect_never).abs() < 1e-12);
        assert!(g.data()[2] > 0.0 && g.data()[2] < 2e-5);
    }

    #[test]
    fn stdb_lut_is_bitwise_identical_to_direct() {
        let direct = SurrogateConfig::<f32>::new(SurrogateFamily::SpikeTime, 0.3, 0.01);
        let lut = direct.clone().with_lut(25);
        let s = Tensor::from_vec(&[4], vec![25.0, 13.0, 1.0, NEVER_SPIKED as f32]).unwrap();
        for t in 1..=25 {
            let mask: Vec<f32> = s
                .data()
                .iter()
                .map(|&v| if v <= t as f32 { v } else { NEVER_SPIKED as f32 })
                .collect();
            let s_t = Tensor::from_vec(&[4], mask).unwrap();
            let a = stdb_surrogate(t, &s_t, &direct);
            let b = stdb_surrogate(t, &s_t, &lut);
            assert_eq!(a.data(), b.data(), "lut mismatch at t={t}");
        }
    }

    #[test]
    fn linear_surrogate_values() {
        let u = Tensor::<f64>::from_vec(&[3], vec![1.0, 2.5, 1.4]).unwrap();
        let g = linear_surrogate(&u, 1.0, 0.3);
        assert!((g.data()[0] - 0.3).abs() < 1e-12);
        assert_eq!(g.data()[1], 0.0);
        assert!((g.data()[2] - 0.18).abs() < 1e-12);
    }

    #[test]
    fn exp_surrogate_values() {
        let u = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let g = exp_surrogate(&u, 1.0, 0.3, 1.0);
        assert!((g.data()[0] - 0.3).abs() < 1e-12);
        assert!((g.data()[1] - 0.3 / std::f64::consts::E).abs() < 1e-9);
        let g0 = exp_surrogate(&u, 1.0, 0.3, 0.0);
        assert!(g0.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn lif_step_rejects_shape_mismatch() {
        let mut st = LifState::<f64>::new(&[2]);
        let input = Tensor::from_vec(&[3], vec![0.0; 3]).unwrap();
        assert!(lif_step(&mut st, &input, cfg(1.0, 1.0), 1).is_err());
    }

    #[test]
    fn non_finite_potential_is_an_error() {
        let mut st = LifState::<f64>::new(&[1]);
        let input = Tensor::from_vec(&[1], vec![f64::INFINITY]).unwrap();
        let err = lif_step(&mut st, &input, cfg(1.0, 1.0), 7).unwrap_err();
        assert!(err.to_string().contains("step 7"));
    }
}
