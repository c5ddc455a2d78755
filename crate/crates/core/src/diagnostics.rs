//! Per-layer latent diagnostics, streaming aggregates and collapse status.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Diagnostics, LatentStats};
use crate::varneuron::{BandStats, ControlState};

/// Streaming mean and population standard deviation (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn extend(&mut self, xs: &[f64]) {
        xs.iter().for_each(|&x| self.push(x));
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0).sqrt()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiag {
    pub step: usize,
    pub layer: usize,
    /// Mean KL per unit, nats.
    pub kl: f64,
    pub mu2: f64,
    pub mu2_std: f64,
    pub weight: f64,
    pub band: BandStats,
    pub control_gain: f64,
    pub active_fraction: f64,
}

impl LayerDiag {
    pub fn from_stats(
        step: usize,
        layer: usize,
        stats: &LatentStats,
        weight: f64,
        control: &ControlState,
    ) -> Self {
        let mut rs = RunningStats::default();
        rs.extend(&stats.mu2);
        LayerDiag {
            step,
            layer,
            kl: stats.mean_kl(),
            mu2: rs.mean(),
            mu2_std: rs.std(),
            weight,
            band: BandStats::from_values(&stats.mu2, control.mu2_target, control.band_halfwidth),
            control_gain: control.control_gain,
            active_fraction: stats.active_dim_fraction(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerStatus {
    Active,
    Weak,
    Dead,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseThresholds {
    pub dead: f64,
    pub weak: f64,
}

impl Default for CollapseThresholds {
    fn default() -> Self {
        CollapseThresholds {
            dead: 1e-4,
            weak: 1e-2,
        }
    }
}

pub fn layer_status(kl: f64, th: &CollapseThresholds) -> LayerStatus {
    if kl < th.dead {
        LayerStatus::Dead
    } else if kl < th.weak {
        LayerStatus::Weak
    } else {
        LayerStatus::Active
    }
}

/// Status per layer from the mean KL of each layer's records.
pub fn collapse_monitor(records: &[LayerDiag], th: &CollapseThresholds) -> Vec<LayerStatus> {
    let n_layers = records.iter().map(|r| r.layer + 1).max().unwrap_or(0);
    (0..n_layers)
        .map(|l| {
            let kls: Vec<f64> = records
                .iter()
                .filter(|r| r.layer == l)
                .map(|r| r.kl)
                .collect();
            let mean = if kls.is_empty() {
                0.0
            } else {
                kls.iter().sum::<f64>() / kls.len() as f64
            };
            layer_status(mean, th)
        })
        .collect()
}

/// Running aggregates of one layer over an evaluation stream.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerAggregate {
    pub mu2: RunningStats,
    pub mu2_values: Vec<f64>,
    pub kl_weighted: f64,
    pub dim_kl_weighted: Vec<f64>,
    pub unit_kl_weighted: Vec<f64>,
    pub sigma_sum: f64,
    pub sigma_count: usize,
    pub weight_total: f64,
}

/// Accumulates layer records and eval-stream aggregates.
#[derive(Debug, Clone, Default)]
pub struct DiagRecorder {
    pub records: Vec<LayerDiag>,
    pub layers: Vec<LayerAggregate>,
    pub layer_weights: Vec<f64>,
}

impl DiagRecorder {
    /// Appends one record per layer and folds the batch into the aggregates.
    /// `tokens` weights the batch's mean KL values.
    pub fn record(
        &mut self,
        step: usize,
        diag: &Diagnostics,
        controls: &[ControlState],
        tokens: usize,
    ) -> &[LayerDiag] {
        let start = self.records.len();
        if self.layers.len() < diag.layers.len() {
            self.layers
                .resize_with(diag.layers.len(), LayerAggregate::default);
        }
        let w = tokens as f64;
        for (l, stats) in diag.layers.iter().enumerate() {
            let weight = diag.layer_weights.get(l).copied().unwrap_or(0.0);
            self.records
                .push(LayerDiag::from_stats(step, l, stats, weight, &controls[l]));
            let agg = &mut self.layers[l];
            agg.mu2.extend(&stats.mu2);
            agg.mu2_values.extend_from_slice(&stats.mu2);
            agg.kl_weighted += w * stats.mean_kl();
            if agg.dim_kl_weighted.len() < stats.dim_kl.len() {
                agg.dim_kl_weighted.resize(stats.dim_kl.len(), 0.0);
            }
            for (a, v) in agg.dim_kl_weighted.iter_mut().zip(&stats.dim_kl) {
                *a += w * v;
            }
            if agg.unit_kl_weighted.len() < stats.unit_kl.len() {
                agg.unit_kl_weighted.resize(stats.unit_kl.len(), 0.0);
            }
            for (a, v) in agg.unit_kl_weighted.iter_mut().zip(&stats.unit_kl) {
                *a += w * v;
            }
            agg.sigma_sum += stats.sigma_sum;
            agg.sigma_count += stats.sigma_count;
            agg.weight_total += w;
        }
        self.layer_weights = diag.layer_weights.clone();
        &self.records[start..]
    }
}

/// Appends serializable records as JSON lines.
pub struct JsonlWriter {
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonlWriter {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(JsonlWriter {
            out: BufWriter::new(f),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Reads every line of a JSONL file.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
