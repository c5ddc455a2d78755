//! Monte Carlo predictive evaluation and the extended metric suite.
//!
//! Every metric is a function of per-token quantities computed from the `M`
//! sampled probability vectors and their mean `p̄`.

use serde::{Deserialize, Serialize};

use crate::data::TokenWindow;
use crate::diagnostics::{layer_status, CollapseThresholds, DiagRecorder, LayerStatus};
use crate::error::{Error, Result};
use crate::model::{forward, softmax_vec, Model};
use crate::objective::{build_loss, ObjectiveWeights};
use crate::rng::Rng;
use crate::tensorcore::{Graph, Tensor};
use crate::varneuron::{BandStats, Noise, ACTIVE_KL_THRESHOLD};

/// `M` probability vectors per token plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct McPrediction {
    pub m: usize,
    pub vocab: usize,
    /// Layout `[token][sample][class]`.
    pub samples: Vec<f64>,
    /// Layout `[token][class]`.
    pub mean: Vec<f64>,
    pub targets: Vec<usize>,
}

impl McPrediction {
    /// From per-sample probability matrices, each `[tokens, vocab]`.
    pub fn from_samples(samples: &[Tensor], targets: Vec<usize>) -> Result<Self> {
        let m = samples.len();
        if m == 0 {
            return Err(Error::Usage("need at least one sample".into()));
        }
        let (n, v) = (samples[0].rows(), samples[0].cols());
        if samples.iter().any(|s| s.shape() != [n, v]) || targets.len() != n {
            return Err(Error::dim("sample matrices and targets disagree"));
        }
        let mut flat = Vec::with_capacity(n * m * v);
        let mut mean = Vec::with_capacity(n * v);
        for t in 0..n {
            for s in samples {
                flat.extend_from_slice(s.row(t));
            }
            let first = samples[0].row(t);
            if samples.iter().all(|s| s.row(t) == first) {
                mean.extend_from_slice(first);
            } else {
                for c in 0..v {
                    mean.push(sorted_sum(samples.iter().map(|s| s.at(t, c))) / m as f64);
                }
            }
        }
        Ok(McPrediction {
            m,
            vocab: v,
            samples: flat,
            mean,
            targets,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.targets.len()
    }

    pub fn sample(&self, token: usize, s: usize) -> &[f64] {
        let off = (token * self.m + s) * self.vocab;
        &self.samples[off..off + self.vocab]
    }

    pub fn mean_probs(&self, token: usize) -> &[f64] {
        &self.mean[token * self.vocab..(token + 1) * self.vocab]
    }

    pub fn token_stats(&self) -> Vec<TokenStats> {
        (0..self.n_tokens())
            .map(|t| {
                let samples: Vec<&[f64]> = (0..self.m).map(|s| self.sample(t, s)).collect();
                TokenStats::compute(&samples, self.mean_probs(t), self.targets[t])
            })
            .collect()
    }
}

/// Sum in ascending order, so the result does not depend on input order.
pub fn sorted_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = xs.collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Lowest-index argmax.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Everything the metrics need from one token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub nll: f64,
    pub confidence: f64,
    pub correct: bool,
    pub predictive_entropy: f64,
    pub expected_entropy: f64,
    pub conditional_variance: f64,
    /// Across-sample variance of the probability of `p̄`'s top class.
    pub top1_variance: f64,
    pub flipped: bool,
}

impl TokenStats {
    pub fn compute(samples: &[&[f64]], mean: &[f64], target: usize) -> Self {
        let m = samples.len() as f64;
        let top = argmax(mean);
        let mut cv = 0.0;
        for (v, &mu) in mean.iter().enumerate() {
            cv += sorted_sum(samples.iter().map(|s| (s[v] - mu).powi(2))) / m;
        }
        let top1_variance = sorted_sum(samples.iter().map(|s| (s[top] - mean[top]).powi(2))) / m;
        let first = argmax(samples[0]);
        TokenStats {
            nll: -mean[target].ln(),
            confidence: mean[top],
            correct: top == target,
            predictive_entropy: entropy(mean),
            expected_entropy: if samples.iter().all(|s| *s == samples[0]) {
                entropy(samples[0])
            } else {
                sorted_sum(samples.iter().map(|s| entropy(s))) / m
            },
            conditional_variance: cv / mean.len() as f64,
            top1_variance,
            flipped: samples.iter().any(|s| argmax(s) != first),
        }
    }

    pub fn mutual_information(&self) -> f64 {
        (self.predictive_entropy - self.expected_entropy).max(0.0)
    }
}

fn mean_of(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn nll_mc(stats: &[TokenStats]) -> f64 {
    mean_of(stats.iter().map(|s| s.nll))
}

pub fn accuracy(stats: &[TokenStats]) -> f64 {
    mean_of(stats.iter().map(|s| if s.correct { 1.0 } else { 0.0 }))
}

/// Equal-width-bin ECE over top-label confidence.
pub fn ece(stats: &[TokenStats], n_bins: usize) -> f64 {
    let n_bins = n_bins.max(1);
    let mut count = vec![0usize; n_bins];
    let mut conf = vec![0.0; n_bins];
    let mut acc = vec![0.0; n_bins];
    for s in stats {
        let b = ((s.confidence * n_bins as f64).floor() as usize).min(n_bins - 1);
        count[b] += 1;
        conf[b] += s.confidence;
        acc[b] += if s.correct { 1.0 } else { 0.0 };
    }
    let n = stats.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    (0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * (acc[b] / c - conf[b] / c).abs()
        })
        .sum()
}

pub fn mutual_information(stats: &[TokenStats]) -> f64 {
    mean_of(stats.iter().map(|s| s.mutual_information()))
}

pub fn conditional_variance_mc(stats: &[TokenStats]) -> f64 {
    mean_of(stats.iter().map(|s| s.conditional_variance))
}

pub fn conditional_variance_top1(stats: &[TokenStats]) -> f64 {
    mean_of(stats.iter().map(|s| s.top1_variance))
}

pub fn top1_flip_rate(stats: &[TokenStats]) -> f64 {
    mean_of(stats.iter().map(|s| if s.flipped { 1.0 } else { 0.0 }))
}

/// Mean of the worst `ceil(alpha * N)` per-token NLLs.
pub fn cvar_nll(stats: &[TokenStats], alpha: f64) -> f64 {
    if stats.is_empty() {
        return 0.0;
    }
    let mut nll: Vec<f64> = stats.iter().map(|s| s.nll).collect();
    nll.sort_by(|a, b| b.total_cmp(a));
    let k = ((alpha * nll.len() as f64).ceil() as usize).clamp(1, nll.len());
    if k == nll.len() {
        return nll_mc(stats);
    }
    nll[..k].iter().sum::<f64>() / k as f64
}

/// `100 * mean MI / mean H(p̄)`, or 0 when the predictive entropy is 0.
pub fn epistemic_ratio(stats: &[TokenStats]) -> f64 {
    let h = mean_of(stats.iter().map(|s| s.predictive_entropy));
    if h <= 0.0 {
        0.0
    } else {
        100.0 * mutual_information(stats) / h
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LatentUsage {
    pub sigma_mean: f64,
    pub active_unit_fraction: f64,
    pub effective_active_dims: usize,
    pub layer_active_fraction: Vec<f64>,
}

/// Active counts from per-layer mean unit and dimension KL values.
pub fn latent_usage(unit_kl: &[Vec<f64>], dim_kl: &[Vec<f64>], sigma_mean: f64) -> LatentUsage {
    let units: Vec<f64> = unit_kl.iter().flatten().copied().collect();
    let active_units = units.iter().filter(|&&k| k > ACTIVE_KL_THRESHOLD).count();
    let layer_active_fraction = dim_kl
        .iter()
        .map(|d| {
            if d.is_empty() {
                0.0
            } else {
                d.iter().filter(|&&k| k > ACTIVE_KL_THRESHOLD).count() as f64 / d.len() as f64
            }
        })
        .collect();
    LatentUsage {
        sigma_mean,
        active_unit_fraction: if units.is_empty() {
            0.0
        } else {
            active_units as f64 / units.len() as f64
        },
        effective_active_dims: dim_kl
            .iter()
            .flatten()
            .filter(|&&k| k > ACTIVE_KL_THRESHOLD)
            .count(),
        layer_active_fraction,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub mc_samples: usize,
    pub cvar_alpha: f64,
    pub ece_bins: usize,
    /// Also report the across-sample variance of the top-1 probability.
    pub top1_variance: bool,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mc_samples: 8,
            cvar_alpha: 0.05,
            ece_bins: 15,
            top1_variance: false,
            batch_size: 16,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 || self.ece_bins == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "mc_samples, ece_bins and batch_size must be >= 1".into(),
            ));
        }
        if !(self.cvar_alpha > 0.0 && self.cvar_alpha <= 1.0) {
            return Err(Error::Config("cvar_alpha must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FinalValidation {
    pub loss: f64,
    pub ce: f64,
    pub ppl: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExtendedValidation {
    pub mc_samples: usize,
    pub nll: f64,
    pub ece: f64,
    pub mutual_information: f64,
    pub conditional_variance_mc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditional_variance_top1_mc: Option<f64>,
    pub top1_flip_rate_mc: f64,
    pub cvar_nll: f64,
    pub epistemic_ratio: f64,
    pub sigma_mean: f64,
    pub active_unit_fraction: f64,
    pub effective_active_dims: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub kl: f64,
    pub mu2: f64,
    pub mu2_std: f64,
    pub weight: f64,
    pub band: BandStats,
    pub control_gain: f64,
    pub active_fraction: f64,
    pub status: LayerStatus,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMeta {
    pub finite_ok: bool,
    pub skipped_batches: usize,
    pub selected_epoch: usize,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub final_validation: FinalValidation,
    pub extended: ExtendedValidation,
    /// Empty for deterministic models.
    pub internal: Vec<LayerReport>,
    pub layer_weights: Vec<f64>,
    pub run: RunMeta,
}

impl MetricsReport {
    pub fn extended_finite(&self) -> bool {
        let e = &self.extended;
        [
            e.nll,
            e.ece,
            e.mutual_information,
            e.conditional_variance_mc,
            e.top1_flip_rate_mc,
            e.cvar_nll,
            e.epistemic_ratio,
            e.sigma_mean,
            e.active_unit_fraction,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Flat `metric,value` rows for plotting.
    pub fn to_csv(&self) -> String {
        let f = &self.final_validation;
        let e = &self.extended;
        let mut rows: Vec<(String, String)> = vec![
            ("loss".into(), f.loss.to_string()),
            ("ce".into(), f.ce.to_string()),
            ("ppl".into(), f.ppl.to_string()),
            ("acc".into(), f.acc.to_string()),
            ("nll".into(), e.nll.to_string()),
            ("ece".into(), e.ece.to_string()),
            (
                "mutual_information".into(),
                e.mutual_information.to_string(),
            ),
            (
                "conditional_variance_mc".into(),
                e.conditional_variance_mc.to_string(),
            ),
            ("top1_flip_rate_mc".into(), e.top1_flip_rate_mc.to_string()),
            ("cvar_nll".into(), e.cvar_nll.to_string()),
            ("epistemic_ratio".into(), e.epistemic_ratio.to_string()),
            ("sigma_mean".into(), e.sigma_mean.to_string()),
            (
                "active_unit_fraction".into(),
                e.active_unit_fraction.to_string(),
            ),
            (
                "effective_active_dims".into(),
                e.effective_active_dims.to_string(),
            ),
        ];
        if let Some(v) = e.conditional_variance_top1_mc {
            rows.push(("conditional_variance_top1_mc".into(), v.to_string()));
        }
        for l in &self.internal {
            rows.push((format!("layer{}_kl", l.layer), l.kl.to_string()));
            rows.push((format!("layer{}_mu2", l.layer), l.mu2.to_string()));
            rows.push((format!("layer{}_weight", l.layer), l.weight.to_string()));
            rows.push((
                format!("layer{}_inside_band", l.layer),
                l.band.inside_band_fraction.to_string(),
            ));
        }
        rows.push(("finite_ok".into(), self.run.finite_ok.to_string()));
        rows.push((
            "skipped_batches".into(),
            self.run.skipped_batches.to_string(),
        ));
        rows.push(("selected_epoch".into(), self.run.selected_epoch.to_string()));
        let mut out = String::from("metric,value\n");
        for (k, v) in rows {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }
}

/// `M` stochastic forwards of one batch with fresh noise each; rows are the
/// concatenated window positions.
pub fn mc_forward(
    model: &Model,
    windows: &[&TokenWindow],
    m: usize,
    rng: &mut Rng,
) -> Result<McPrediction> {
    if m == 0 {
        return Err(Error::Usage("M must be at least 1".into()));
    }
    let inputs: Vec<&[usize]> = windows.iter().map(|w| w.input.as_slice()).collect();
    let targets: Vec<usize> = windows
        .iter()
        .flat_map(|w| w.target.iter().copied())
        .collect();
    let mut samples = Vec::with_capacity(m);
    for _ in 0..m {
        let mut g = Graph::new();
        let out = forward(&mut g, model, &inputs, &mut Noise::Sample(rng))?;
        samples.push(probabilities(g.value(out.logits)));
    }
    McPrediction::from_samples(&samples, targets)
}

fn probabilities(logits: &Tensor) -> Tensor {
    let (n, v) = (logits.rows(), logits.cols());
    let mut data = Vec::with_capacity(n * v);
    for r in 0..n {
        data.extend(softmax_vec(logits.row(r)));
    }
    Tensor::matrix(n, v, data).expect("shape")
}

/// Final-validation metrics from the mean forward, extended metrics from `M`
/// sampled forwards, internal diagnostics from the mean forward.
pub fn evaluate(
    model: &Model,
    windows: &[TokenWindow],
    weights: &ObjectiveWeights,
    cfg: &EvalConfig,
    rng: &mut Rng,
) -> Result<MetricsReport> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::Input("empty validation set".into()));
    }
    let mut stats = Vec::new();
    let (mut ce_sum, mut loss_sum, mut tok_sum) = (0.0, 0.0, 0usize);
    let mut recorder = DiagRecorder::default();
    for chunk in windows.chunks(cfg.batch_size) {
        let batch: Vec<&TokenWindow> = chunk.iter().collect();
        let n_tok: usize = chunk
            .iter()
            .map(|w| w.loss_mask.iter().filter(|&&b| b).count())
            .sum();
        if n_tok == 0 {
            continue;
        }
        let mut g = Graph::new();
        let (terms, diag) = build_loss(
            &mut g,
            model,
            &batch,
            &mut Noise::Mean,
            weights.beta,
            weights.alpha_ar,
        )?;
        ce_sum += g.value(terms.lm).item() * n_tok as f64;
        loss_sum += g.value(terms.total).item() * n_tok as f64;
        tok_sum += n_tok;
        recorder.record(0, &diag, &model.controls, n_tok);

        let pred = mc_forward(model, &batch, cfg.mc_samples, rng)?;
        let mask: Vec<bool> = chunk
            .iter()
            .flat_map(|w| w.loss_mask.iter().copied())
            .collect();
        stats.extend(
            pred.token_stats()
                .into_iter()
                .zip(mask)
                .filter(|(_, keep)| *keep)
                .map(|(s, _)| s),
        );
    }
    if tok_sum == 0 {
        return Err(Error::Input(
            "validation set has no scored positions".into(),
        ));
    }
    let ce = ce_sum / tok_sum as f64;
    let final_validation = FinalValidation {
        loss: loss_sum / tok_sum as f64,
        ce,
        ppl: ce.exp(),
        acc: accuracy(&stats),
    };

    let th = CollapseThresholds::default();
    let mut internal = Vec::new();
    let (mut unit_kl, mut dim_kl) = (Vec::new(), Vec::new());
    let (mut sig_sum, mut sig_n) = (0.0, 0usize);
    for (l, agg) in recorder.layers.iter().enumerate() {
        let w = agg.weight_total;
        let kl = agg.kl_weighted / w;
        let dims: Vec<f64> = agg.dim_kl_weighted.iter().map(|v| v / w).collect();
        let active = if dims.is_empty() {
            0.0
        } else {
            dims.iter().filter(|&&k| k > ACTIVE_KL_THRESHOLD).count() as f64 / dims.len() as f64
        };
        let ctrl = &model.controls[l];
        internal.push(LayerReport {
            layer: l,
            kl,
            mu2: agg.mu2.mean(),
            mu2_std: agg.mu2.std(),
            weight: recorder.layer_weights.get(l).copied().unwrap_or(0.0),
            band: BandStats::from_values(&agg.mu2_values, ctrl.mu2_target, ctrl.band_halfwidth),
            control_gain: ctrl.control_gain,
            active_fraction: active,
            status: layer_status(kl, &th),
        });
        unit_kl.push(agg.unit_kl_weighted.iter().map(|v| v / w).collect());
        dim_kl.push(dims);
        sig_sum += agg.sigma_sum;
        sig_n += agg.sigma_count;
    }
    let usage = latent_usage(
        &unit_kl,
        &dim_kl,
        if sig_n == 0 {
            0.0
        } else {
            sig_sum / sig_n as f64
        },
    );
    let extended = ExtendedValidation {
        mc_samples: cfg.mc_samples,
        nll: nll_mc(&stats),
        ece: ece(&stats, cfg.ece_bins),
        mutual_information: mutual_information(&stats),
        conditional_variance_mc: conditional_variance_mc(&stats),
        conditional_variance_top1_mc: cfg.top1_variance.then(|| conditional_variance_top1(&stats)),
        top1_flip_rate_mc: top1_flip_rate(&stats),
        cvar_nll: cvar_nll(&stats, cfg.cvar_alpha),
        epistemic_ratio: epistemic_ratio(&stats),
        sigma_mean: usage.sigma_mean,
        active_unit_fraction: usage.active_unit_fraction,
        effective_active_dims: usage.effective_active_dims,
    };
    let mut report = MetricsReport {
        final_validation,
        extended,
        internal,
        layer_weights: model.layer_weights(),
        run: RunMeta {
            finite_ok: true,
            skipped_batches: 0,
            selected_epoch: 0,
            tokens: tok_sum,
        },
    };
    report.run.finite_ok = report.extended_finite()
        && [report.final_validation.ce, report.final_validation.loss]
            .iter()
            .all(|v| v.is_finite());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(rows: &[&[&[f64]]], targets: Vec<usize>) -> McPrediction {
        let m = rows[0].len();
        let samples: Vec<Tensor> = (0..m)
            .map(|s| {
                let r: Vec<&[f64]> = rows.iter().map(|t| t[s]).collect();
                Tensor::from_rows(&r)
            })
            .collect();
        McPrediction::from_samples(&samples, targets).unwrap()
    }

    #[test]
    fn opposite_one_hots() {
        let p = pred(&[&[&[1.0, 0.0], &[0.0, 1.0]]], vec![0]);
        let s = p.token_stats();
        assert!((mutual_information(&s) - 2f64.ln()).abs() < 1e-12);
        assert!((conditional_variance_mc(&s) - 0.25).abs() < 1e-12);
        assert_eq!(top1_flip_rate(&s), 1.0);
    }

    #[test]
    fn cvar_fixture() {
        let s: Vec<TokenStats> = [1.0, 2.0, 3.0, 4.0]
            .iter()
            .map(|&nll| TokenStats {
                nll,
                confidence: 0.5,
                correct: false,
                predictive_entropy: 0.0,
                expected_entropy: 0.0,
                conditional_variance: 0.0,
                top1_variance: 0.0,
                flipped: false,
            })
            .collect();
        assert_eq!(cvar_nll(&s, 0.5), 3.5);
        assert_eq!(cvar_nll(&s, 1.0), nll_mc(&s));
    }
}
