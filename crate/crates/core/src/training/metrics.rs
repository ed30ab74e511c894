//! Line-oriented training metrics: one record per (epoch, split) with
//! accuracy, loss, and average spikes per neuron for each spiking layer,
//! echoed to stdout and optionally appended to a CSV file.

use crate::error::{Result, SnnError};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

pub struct MetricsSink {
    csv: Option<BufWriter<File>>,
    echo: bool,
    spike_labels: Vec<String>,
    header_written: bool,
}

impl MetricsSink {
    pub fn stdout_only(spike_labels: Vec<String>) -> Self {
        MetricsSink {
            csv: None,
            echo: true,
            spike_labels,
            header_written: false,
        }
    }

    pub fn with_csv(path: &Path, spike_labels: Vec<String>) -> Result<Self> {
        let file = File::create(path)
            .map_err(|e| SnnError::io(format!("creating metrics file {}", path.display()), e))?;
        Ok(MetricsSink {
            csv: Some(BufWriter::new(file)),
            echo: true,
            spike_labels,
            header_written: false,
        })
    }

    pub fn silent() -> Self {
        MetricsSink {
            csv: None,
            echo: false,
            spike_labels: Vec::new(),
            header_written: false,
        }
    }

    /// Record one measurement. `avg_spikes` carries average spikes per
    /// neuron for each spiking slot, in slot order, when available.
    pub fn record(
        &mut self,
        epoch: usize,
        split: &str,
        accuracy: f64,
        loss: f64,
        avg_spikes: Option<&[f64]>,
    ) -> Result<()> {
        if self.echo {
            let mut line = format!(
                "epoch {epoch:>3}  {split:<5}  accuracy {:.4}  loss {:.5}",
                accuracy, loss
            );
            if let Some(sp) = avg_spikes {
                let joined: Vec<String> = self
                    .spike_labels
                    .iter()
                    .zip(sp.iter())
                    .map(|(l, v)| format!("{l}={v:.2}"))
                    .collect();
                line.push_str(&format!("  spikes/neuron [{}]", joined.join(" ")));
            }
            println!("{line}");
        }
        if let Some(csv) = self.csv.as_mut() {
            if !self.header_written {
                let mut header = String::from("epoch,split,accuracy,loss");
                for l in &self.spike_labels {
                    header.push_str(&format!(",spikes_{l}"));
                }
                writeln!(csv, "{header}").map_err(|e| SnnError::io("metrics header", e))?;
                self.header_written = true;
            }
            let mut row = format!("{epoch},{split},{accuracy:.6},{loss:.6}");
            match avg_spikes {
                Some(sp) => {
                    for v in sp {
                        row.push_str(&format!(",{v:.6}"));
                    }
                }
                None => {
                    for _ in &self.spike_labels {
                        row.push(',');
                    }
                }
            }
            writeln!(csv, "{row}").map_err(|e| SnnError::io("metrics row", e))?;
            csv.flush().map_err(|e| SnnError::io("metrics flush", e))?;
        }
        Ok(())
    }
}
