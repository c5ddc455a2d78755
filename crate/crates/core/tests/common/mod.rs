//! Brute-force metric oracle shared by the metric tests and the acceptance suite.
#![allow(dead_code)]

use eve_lm::mceval::*;
use eve_lm::rng::Rng;
use eve_lm::tensorcore::Tensor;

pub struct Fixture {
    /// `[token][sample][class]`
    pub probs: Vec<Vec<Vec<f64>>>,
    pub targets: Vec<usize>,
}

pub fn random_fixture(rng: &mut Rng) -> Fixture {
    let n = 1 + rng.below(60);
    let m = 1 + rng.below(10);
    let v = 2 + rng.below(11);
    let temp = 0.2 + 3.0 * rng.uniform();
    let mut probs = Vec::with_capacity(n);
    for _ in 0..n {
        let base: Vec<f64> = rng.normals(v);
        let same = rng.uniform() < 0.2;
        let samples: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let e: Vec<f64> = base
                    .iter()
                    .map(|b| {
                        let jitter = if same { 0.0 } else { 0.7 * rng.normal() };
                        ((b + jitter) * temp).exp()
                    })
                    .collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|x| x / z).collect()
            })
            .collect();
        probs.push(samples);
    }
    let targets = (0..n).map(|_| rng.below(v)).collect();
    Fixture { probs, targets }
}

pub fn prediction(f: &Fixture) -> McPrediction {
    let m = f.probs[0].len();
    let samples: Vec<Tensor> = (0..m)
        .map(|s| {
            let rows: Vec<&[f64]> = f.probs.iter().map(|t| t[s].as_slice()).collect();
            Tensor::from_rows(&rows)
        })
        .collect();
    McPrediction::from_samples(&samples, f.targets.clone()).unwrap()
}

fn mean_probs(samples: &[Vec<f64>]) -> Vec<f64> {
    let m = samples.len() as f64;
    (0..samples[0].len())
        .map(|c| samples.iter().map(|s| s[c]).sum::<f64>() / m)
        .collect()
}

fn h(p: &[f64]) -> f64 {
    p.iter()
        .map(|&x| if x > 0.0 { -x * x.ln() } else { 0.0 })
        .sum()
}

fn top(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

pub struct Brute {
    pub nll: f64,
    pub ece: f64,
    pub mi: f64,
    pub condvar: f64,
    pub flip: f64,
    pub cvar: f64,
    pub ratio: f64,
}

pub fn brute(f: &Fixture, alpha: f64, bins: usize) -> Brute {
    let n = f.probs.len() as f64;
    let mut nlls = Vec::new();
    let (mut mi, mut cv, mut flips, mut hp) = (0.0, 0.0, 0.0, 0.0);
    let mut bin_items: Vec<Vec<(f64, bool)>> = vec![Vec::new(); bins];
    for (samples, &y) in f.probs.iter().zip(&f.targets) {
        let pbar = mean_probs(samples);
        let m = samples.len() as f64;
        nlls.push(-pbar[y].ln());
        let exp_h = samples.iter().map(|s| h(s)).sum::<f64>() / m;
        mi += h(&pbar) - exp_h;
        hp += h(&pbar);
        let v = pbar.len() as f64;
        cv += (0..pbar.len())
            .map(|c| {
                samples
                    .iter()
                    .map(|s| (s[c] - pbar[c]).powi(2))
                    .sum::<f64>()
                    / m
            })
            .sum::<f64>()
            / v;
        let a0 = top(&samples[0]);
        if samples.iter().any(|s| top(s) != a0) {
            flips += 1.0;
        }
        let k = top(&pbar);
        let conf = pbar[k];
        // bin b holds confidences in [b/B, (b+1)/B), the last bin is closed
        let mut b = 0;
        while b + 1 < bins && conf >= (b + 1) as f64 / bins as f64 {
            b += 1;
        }
        bin_items[b].push((conf, k == y));
    }
    let mut ece = 0.0;
    for items in &bin_items {
        if items.is_empty() {
            continue;
        }
        let c = items.len() as f64;
        let acc = items.iter().filter(|i| i.1).count() as f64 / c;
        let conf = items.iter().map(|i| i.0).sum::<f64>() / c;
        ece += c / n * (acc - conf).abs();
    }
    let mut sorted = nlls.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = ((alpha * n).ceil() as usize).max(1);
    Brute {
        nll: nlls.iter().sum::<f64>() / n,
        ece,
        mi: mi / n,
        condvar: cv / n,
        flip: flips / n,
        cvar: sorted[..k].iter().sum::<f64>() / k as f64,
        ratio: if hp > 0.0 { 100.0 * mi / hp } else { 0.0 },
    }
}

/// Every metric next to its oracle value, for `alpha` and `bins`.
pub fn metric_pairs(f: &Fixture, alpha: f64, bins: usize) -> Vec<(&'static str, f64, f64)> {
    let stats = prediction(f).token_stats();
    let want = brute(f, alpha, bins);
    vec![
        ("nll", nll_mc(&stats), want.nll),
        ("ece", ece(&stats, bins), want.ece),
        ("mi", mutual_information(&stats), want.mi),
        ("condvar", conditional_variance_mc(&stats), want.condvar),
        ("flip", top1_flip_rate(&stats), want.flip),
        ("cvar", cvar_nll(&stats, alpha), want.cvar),
        ("ratio", epistemic_ratio(&stats), want.ratio),
    ]
}
