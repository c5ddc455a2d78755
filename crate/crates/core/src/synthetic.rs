//! Single-unit regression task whose fit requires large latent energy.
//!
//! The unit reads `x ~ N(0, 1)` and must reproduce `2x` through a frozen
//! identity decoder, so the task alone pulls the posterior mean toward `2x`
//! (mean latent energy near 4). The band penalty and homeostat push back.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::objective::{Adam, AdamConfig};
use crate::rng::{streams, Rng};
use crate::tensorcore::{Graph, ParamStore, Tensor};
use crate::varneuron::{
    control_penalty, homeostat_update, kl_diag_gauss, run_unit, Activation, ControlConfig,
    ControlState, EnergyWindow, Noise, UnitLayout, VariationalUnitParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyTaskConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta: f64,
    pub homeostat_window: usize,
    pub control: ControlConfig,
    pub seed: u64,
}

impl Default for EnergyTaskConfig {
    fn default() -> Self {
        EnergyTaskConfig {
            steps: 1000,
            batch: 64,
            lr: 0.02,
            beta: 1e-3,
            homeostat_window: 10,
            control: ControlConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyTrace {
    /// Batch mean latent energy after each step's forward.
    pub mu2: Vec<f64>,
    pub gain: Vec<f64>,
}

impl EnergyTrace {
    /// Mean of the last `frac` of the trajectory.
    pub fn tail_mean(&self, frac: f64) -> f64 {
        let n = self.mu2.len();
        let k = ((frac * n as f64).ceil() as usize).clamp(1, n.max(1));
        self.mu2[n - k..].iter().sum::<f64>() / k as f64
    }
}

pub fn run_energy_task(cfg: &EnergyTaskConfig) -> Result<EnergyTrace> {
    let mut layout = UnitLayout::new(1, 1, 1);
    layout.activation = Activation::Identity;
    let mut store = ParamStore::new();
    let mut init = Rng::new(cfg.seed).split(streams::INIT);
    let p = VariationalUnitParams::init(&mut store, "unit", &layout, 0.02, &mut init);
    *store.value_mut(p.dec_w) = Tensor::matrix(1, 1, vec![1.0])?;
    store.set_trainable(p.dec_w, false);
    store.set_trainable(p.dec_b, false);

    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &store,
    );
    let mut state = ControlState::new(&cfg.control);
    let mut window = EnergyWindow::default();
    let mut data = Rng::new(cfg.seed).split(streams::SHUFFLE);
    let mut noise = Rng::new(cfg.seed).split(streams::TRAIN_NOISE);
    let mut trace = EnergyTrace {
        mu2: Vec::with_capacity(cfg.steps),
        gain: Vec::with_capacity(cfg.steps),
    };
    for step in 1..=cfg.steps {
        let xs = data.normals(cfg.batch);
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(cfg.batch, 1, xs)?)?;
        let y = g.constant(Tensor::matrix(cfg.batch, 1, ys)?)?;
        let out = run_unit(&mut g, &store, &p, x, &mut Noise::Sample(&mut noise))?;
        let diff = g.sub(out.y, y)?;
        let sq = g.square(diff)?;
        let mut loss = g.mean(sq)?;
        if cfg.beta > 0.0 {
            let kl = kl_diag_gauss(&mut g, &out.dist)?;
            let kl = g.scale(kl, cfg.beta)?;
            loss = g.add(loss, kl)?;
        }
        let (pen, stats) = control_penalty(&mut g, out.mu2, &state)?;
        if let Some(pen) = pen {
            loss = g.add(loss, pen)?;
        }
        trace.mu2.push(stats.mean_mu2);
        trace.gain.push(state.control_gain);
        window.push(g.value(out.mu2).data());

        let mut grads = g.backward(loss)?.dense(&store);
        adam.clip(&mut grads);
        adam.step(&mut store, &grads)?;
        if step % cfg.homeostat_window.max(1) == 0 {
            let stats = window.close(&state);
            state = if state.enabled {
                homeostat_update(&state, &stats)
            } else {
                ControlState { stats, ..state }
            };
        }
    }
    Ok(trace)
}
