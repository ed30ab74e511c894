//! Spike-activity statistics and the first-order energy-delay proxy.
//!
//! Every spike is treated as costing one unit of energy and total latency
//! equals the simulation length, so the proxy is simply
//! `total spikes per sample x time steps` — a unitless figure for ordering
//! runs, not a joule estimate.

use crate::error::{Result, SnnError};
use crate::network::{ArchitectureSpec, ForwardRecord, LayerTrace, SpikeCounter};
use crate::tensor::Scalar;
use crate::training::spiking_neuron_counts;
use std::io::Write;
use std::path::Path;

/// Activity of one spiking site (plain layers, or either convolution of a
/// residual block).
#[derive(Debug, Clone)]
pub struct LayerSpikeStats {
    pub slot: usize,
    pub label: String,
    pub threshold: Option<f64>,
    /// Neurons in this site per sample.
    pub neurons: usize,
    /// Average spikes per neuron over the full simulation window.
    pub avg_spikes_per_neuron: f64,
    /// Average total spikes per sample.
    pub spikes_per_sample: f64,
}

/// Per-layer and aggregate spike activity over an evaluation run.
#[derive(Debug, Clone)]
pub struct SpikeReport {
    pub layers: Vec<LayerSpikeStats>,
    pub timesteps: usize,
    pub samples: usize,
    /// Average total spikes per sample across all sites.
    pub total_spikes_per_sample: f64,
    /// total spikes per sample x timesteps.
    pub energy_delay_proxy: f64,
}

fn report_from_totals(
    arch: &ArchitectureSpec,
    thresholds: &[Option<f64>],
    per_slot: &[f64],
    timesteps: usize,
    samples: usize,
) -> Result<SpikeReport> {
    if samples == 0 || timesteps == 0 {
        return Err(SnnError::Input(
            "spike report needs at least one recorded sample and step".into(),
        ));
    }
    let slots = arch.slots()?;
    let neurons = spiking_neuron_counts(arch)?;
    let mut layers = Vec::new();
    let mut total = 0.0;
    for (i, slot) in slots.iter().enumerate() {
        if !slot.spiking {
            continue;
        }
        let spikes_per_sample = per_slot[i] / samples as f64;
        total += spikes_per_sample;
        layers.push(LayerSpikeStats {
            slot: i,
            label: slot.label.clone(),
            threshold: thresholds[i],
            neurons: neurons[i] as usize,
            avg_spikes_per_neuron: spikes_per_sample / neurons[i],
            spikes_per_sample,
        });
    }
    Ok(SpikeReport {
        layers,
        timesteps,
        samples,
        total_spikes_per_sample: total,
        energy_delay_proxy: total * timesteps as f64,
    })
}

/// Build a report from retained forward records (each covering the full
/// simulation window of one batch).
pub fn average_spikes_per_layer<T: Scalar>(
    records: &[ForwardRecord<T>],
    arch: &ArchitectureSpec,
    thresholds: &[Option<f64>],
) -> Result<SpikeReport> {
    if records.is_empty() || records.iter().any(|r| r.is_empty()) {
        return Err(SnnError::Input("spike report needs non-empty records".into()));
    }
    let slots = arch.slots()?;
    let timesteps = records[0].len();
    let mut per_slot = vec![0.0f64; slots.len()];
    let mut samples = 0usize;
    for rec in records {
        if rec.len() != timesteps {
            return Err(SnnError::Input(
                "all records in one report must cover the same window".into(),
            ));
        }
        samples += rec.final_output_potential.shape()[0];
        for step in &rec.steps {
            for (layer_idx, tr) in step.layers.iter().enumerate() {
                match tr {
                    LayerTrace::Spiking { out, .. } => {
                        let si = slots
                            .iter()
                            .position(|s| s.layer_idx == layer_idx && s.sub == 0)
                            .expect("slot");
                        per_slot[si] += out.sum().to_f64();
                    }
                    LayerTrace::Block { mid, out, .. } => {
                        let sa = slots
                            .iter()
                            .position(|s| s.layer_idx == layer_idx && s.sub == 0)
                            .expect("slot");
                        per_slot[sa] += mid.sum().to_f64();
                        per_slot[sa + 1] += out.sum().to_f64();
                    }
                    _ => {}
                }
            }
        }
    }
    report_from_totals(arch, thresholds, &per_slot, timesteps, samples)
}

/// Build a report from a streaming counter (memory-light path for large
/// evaluation sets).
pub fn report_from_counter(
    counter: &SpikeCounter,
    arch: &ArchitectureSpec,
    thresholds: &[Option<f64>],
) -> Result<SpikeReport> {
    report_from_totals(
        arch,
        thresholds,
        &counter.per_slot,
        counter.steps,
        counter.samples,
    )
}

/// Relative spike cost of run `a` against run `b` under iso conditions.
/// A ratio above 1 means `a` spends more spikes than `b`.
#[derive(Debug, Clone)]
pub struct EnergyComparison {
    pub per_layer_ratio: Vec<(String, f64)>,
    pub aggregate_ratio: f64,
    pub proxy_ratio: f64,
}

/// Compare two reports produced under identical conditions (same window
/// length and architecture).
pub fn compare_energy(a: &SpikeReport, b: &SpikeReport) -> Result<EnergyComparison> {
    if a.timesteps != b.timesteps {
        return Err(SnnError::Input(format!(
            "cannot compare runs with different windows: {} vs {} steps",
            a.timesteps, b.timesteps
        )));
    }
    if a.layers.len() != b.layers.len()
        || a.layers
            .iter()
            .zip(b.layers.iter())
            .any(|(x, y)| x.label != y.label || x.neurons != y.neurons)
    {
        return Err(SnnError::Input(
            "cannot compare runs over different architectures".into(),
        ));
    }
    let per_layer_ratio = a
        .layers
        .iter()
        .zip(b.layers.iter())
        .map(|(x, y)| {
            let r = if y.spikes_per_sample > 0.0 {
                x.spikes_per_sample / y.spikes_per_sample
            } else {
                f64::INFINITY
            };
            (x.label.clone(), r)
        })
        .collect();
    let aggregate_ratio = if b.total_spikes_per_sample > 0.0 {
        a.total_spikes_per_sample / b.total_spikes_per_sample
    } else {
        f64::INFINITY
    };
    Ok(EnergyComparison {
        per_layer_ratio,
        aggregate_ratio,
        proxy_ratio: if b.energy_delay_proxy > 0.0 {
            a.energy_delay_proxy / b.energy_delay_proxy
        } else {
            f64::INFINITY
        },
    })
}

/// Write the per-layer report as CSV: layer index, label, threshold,
/// average spikes per neuron.
pub fn write_report_csv(report: &SpikeReport, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)
        .map_err(|e| SnnError::io(format!("creating {}", path.display()), e))?;
    writeln!(f, "layer,label,threshold,avg_spikes").map_err(|e| SnnError::io("report csv", e))?;
    for l in &report.layers {
        writeln!(
            f,
            "{},{},{},{:.6}",
            l.slot,
            l.label,
            l.threshold.map_or(String::new(), |v| format!("{v:.6}")),
            l.avg_spikes_per_neuron
        )
        .map_err(|e| SnnError::io("report csv", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::poisson_encode;
    use crate::network::{snn_run, ArchitectureSpec, Layer, NetworkParams};
    use crate::tensor::Tensor;

    fn arch() -> ArchitectureSpec {
        ArchitectureSpec::new(
            (1, 1, 2),
            2,
            vec![Layer::Linear { out: 2 }, Layer::Linear { out: 2 }],
        )
        .unwrap()
    }

    fn thresholds_f64(p: &NetworkParams<f64>) -> Vec<Option<f64>> {
        p.thresholds.iter().map(|t| t.map(|v| v)).collect()
    }

    #[test]
    fn averages_match_hand_count() {
        // deterministic: always-on inputs, strong weights, threshold 0.5
        let arch = arch();
        let mut params = NetworkParams::<f64>::random_init(&arch, 0).unwrap();
        params.weights[0] = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        params.thresholds[0] = Some(0.5);
        let images = Tensor::filled(&[1, 1, 1, 2], 1.0);
        let train = poisson_encode(&images, 10, 0).unwrap();
        let (_, rec) = snn_run(&params, &arch, &train, 1.0, None, true).unwrap();
        let rec = rec.unwrap();

        // manual recount from the record
        let mut manual = 0.0;
        for step in &rec.steps {
            if let crate::network::LayerTrace::Spiking { out, .. } = &step.layers[0] {
                manual += out.sum();
            }
        }
        let report =
            average_spikes_per_layer(&[rec], &arch, &thresholds_f64(&params)).unwrap();
        assert_eq!(report.layers.len(), 1);
        assert!((report.layers[0].spikes_per_sample - manual).abs() < 1e-12);
        assert!(
            (report.layers[0].avg_spikes_per_neuron - manual / 2.0).abs() < 1e-12
        );
        assert!((report.energy_delay_proxy - manual * 10.0).abs() < 1e-9);
    }

    #[test]
    fn zero_activity_reports_zero() {
        let arch = arch();
        let mut params = NetworkParams::<f64>::random_init(&arch, 0).unwrap();
        params.weights[0].fill(0.0);
        params.thresholds[0] = Some(1.0);
        let images = Tensor::zeros(&[2, 1, 1, 2]);
        let train = poisson_encode(&images, 5, 0).unwrap();
        let (_, rec) = snn_run(&params, &arch, &train, 1.0, None, true).unwrap();
        let report =
            average_spikes_per_layer(&[rec.unwrap()], &arch, &thresholds_f64(&params)).unwrap();
        assert_eq!(report.layers[0].avg_spikes_per_neuron, 0.0);
    }

    #[test]
    fn identical_reports_compare_at_unity_and_half_spikes_at_two() {
        let mk = |spikes: f64| SpikeReport {
            layers: vec![LayerSpikeStats {
                slot: 0,
                label: "fc1".into(),
                threshold: Some(1.0),
                neurons: 4,
                avg_spikes_per_neuron: spikes / 4.0,
                spikes_per_sample: spikes,
            }],
            timesteps: 10,
            samples: 3,
            total_spikes_per_sample: spikes,
            energy_delay_proxy: spikes * 10.0,
        };
        let a = mk(8.0);
        let same = compare_energy(&a, &mk(8.0)).unwrap();
        assert_eq!(same.aggregate_ratio, 1.0);
        assert_eq!(same.per_layer_ratio[0].1, 1.0);
        let double = compare_energy(&a, &mk(4.0)).unwrap();
        assert_eq!(double.aggregate_ratio, 2.0);
    }

    #[test]
    fn mismatched_windows_refuse_comparison() {
        let mk = |t: usize| SpikeReport {
            layers: vec![],
            timesteps: t,
            samples: 1,
            total_spikes_per_sample: 0.0,
            energy_delay_proxy: 0.0,
        };
        assert!(compare_energy(&mk(10), &mk(20)).is_err());
    }

    #[test]
    fn counter_and_record_paths_agree() {
        let arch = arch();
        let mut params = NetworkParams::<f64>::random_init(&arch, 1).unwrap();
        params.thresholds[0] = Some(0.7);
        let images = Tensor::from_vec(&[2, 1, 1, 2], vec![0.9, 0.8, 0.7, 0.6]).unwrap();
        let train = poisson_encode(&images, 8, 2).unwrap();

        let (_, rec) = snn_run(&params, &arch, &train, 1.0, None, true).unwrap();
        let from_record =
            average_spikes_per_layer(&[rec.unwrap()], &arch, &thresholds_f64(&params)).unwrap();

        let mut state = crate::network::init_neuron_state(2, &arch, None).unwrap();
        let mut counter = SpikeCounter::new(2);
        crate::network::snn_forward_counting(
            &params, &arch, &mut state, &train, 0..8, 1.0, None, Some(&mut counter),
        )
        .unwrap();
        let from_counter =
            report_from_counter(&counter, &arch, &thresholds_f64(&params)).unwrap();

        assert_eq!(
            from_record.layers[0].spikes_per_sample,
            from_counter.layers[0].spikes_per_sample
        );
        assert_eq!(from_record.samples, from_counter.samples);
    }
}
