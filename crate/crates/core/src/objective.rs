//! Global loss composition, Adam, KL warmup and the per-step training update.

use serde::{Deserialize, Serialize};

use crate::data::TokenWindow;
use crate::error::{Error, Result};
use crate::model::{forward, sum_vars, Diagnostics, Model};
use crate::rng::Rng;
use crate::tensorcore::{Graph, ParamId, Tensor, Var};
use crate::varneuron::{control_penalty, homeostat_update, EnergyWindow, Noise};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveWeights {
    pub beta: f64,
    pub alpha_ar: f64,
    /// Fraction of total steps over which `beta` ramps up linearly.
    pub kl_warmup_frac: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            beta: 1e-2,
            alpha_ar: 0.1,
            kl_warmup_frac: 0.1,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.beta) || !ok(self.alpha_ar) || !ok(self.kl_warmup_frac) {
            return Err(Error::Config(
                "objective weights must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lm: f64,
    pub kl: f64,
    pub control: f64,
    pub ar: f64,
    pub total: f64,
    pub skipped: bool,
}

/// `lm + beta * kl + control + alpha_ar * ar`, or a skipped breakdown when any
/// input is non-finite.
pub fn compose_loss(
    lm: f64,
    kl: f64,
    control: f64,
    ar: f64,
    beta: f64,
    alpha_ar: f64,
) -> LossBreakdown {
    let total = lm + beta * kl + control + alpha_ar * ar;
    let skipped = ![lm, kl, control, ar, total].iter().all(|v| v.is_finite());
    LossBreakdown {
        lm,
        kl,
        control,
        ar,
        total,
        skipped,
    }
}

/// `beta * min(1, step / warmup_steps)`; no warmup when `warmup_steps == 0`.
pub fn kl_warmup(step: usize, warmup_steps: usize, beta: f64) -> f64 {
    if warmup_steps == 0 {
        beta
    } else {
        beta * (step as f64 / warmup_steps as f64).min(1.0)
    }
}

/// Loss terms of one forward, on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub lm: Var,
    pub kl: Option<Var>,
    pub control: Option<Var>,
    pub ar: Option<Var>,
    pub total: Var,
}

impl LossTerms {
    pub fn breakdown(&self, g: &Graph, beta: f64, alpha_ar: f64) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item());
        let mut b = compose_loss(
            g.value(self.lm).item(),
            v(self.kl),
            v(self.control),
            v(self.ar),
            beta,
            alpha_ar,
        );
        b.total = g.value(self.total).item();
        b
    }
}

/// Builds the composed loss for `windows` on `g`.
///
/// KL and AR terms are summed over blocks (each a mean over units); the
/// deepest block's control and KL terms carry the layer-aux multipliers.
pub fn build_loss(
    g: &mut Graph,
    model: &Model,
    windows: &[&TokenWindow],
    noise: &mut Noise<'_>,
    beta: f64,
    alpha_ar: f64,
) -> Result<(LossTerms, Diagnostics)> {
    let inputs: Vec<&[usize]> = windows.iter().map(|w| w.input.as_slice()).collect();
    let out = forward(g, model, &inputs, noise)?;
    let targets: Vec<usize> = windows
        .iter()
        .flat_map(|w| w.target.iter().copied())
        .collect();
    let mask: Vec<bool> = windows
        .iter()
        .flat_map(|w| w.loss_mask.iter().copied())
        .collect();
    let lm = g.cross_entropy(out.logits, &targets, Some(&mask))?;

    let mut kls = Vec::new();
    let mut controls = Vec::new();
    let mut ars = Vec::new();
    for (l, terms) in out.layers.iter().enumerate() {
        let (c_mult, kl_mult) = model.aux_multipliers(l);
        kls.push(if kl_mult == 1.0 {
            terms.kl
        } else {
            g.scale(terms.kl, kl_mult)?
        });
        let (pen, _) = control_penalty(g, terms.mu2, &model.controls[l])?;
        if let Some(p) = pen {
            controls.push(if c_mult == 1.0 {
                p
            } else {
                g.scale(p, c_mult)?
            });
        }
        if let Some(a) = terms.ar {
            ars.push(a);
        }
    }
    let kl = if kls.is_empty() {
        None
    } else {
        Some(sum_vars(g, &kls)?)
    };
    let control = if controls.is_empty() {
        None
    } else {
        Some(sum_vars(g, &controls)?)
    };
    let ar = if ars.is_empty() {
        None
    } else {
        Some(sum_vars(g, &ars)?)
    };

    let mut parts = vec![lm];
    if let (Some(k), true) = (kl, beta != 0.0) {
        parts.push(g.scale(k, beta)?);
    }
    if let Some(c) = control {
        parts.push(c);
    }
    if let (Some(a), true) = (ar, alpha_ar != 0.0) {
        parts.push(g.scale(a, alpha_ar)?);
    }
    let total = sum_vars(g, &parts)?;
    Ok((
        LossTerms {
            lm,
            kl,
            control,
            ar,
            total,
        },
        out.diagnostics,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.norm_sq()).sum::<f64>().sqrt()
}

impl Adam {
    pub fn new(config: AdamConfig, store: &crate::tensorcore::ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Adam {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Clips `grads` in place to the configured global norm and returns the
    /// pre-clip norm.
    pub fn clip(&self, grads: &mut [Tensor]) -> f64 {
        let norm = global_norm(grads);
        if self.config.clip > 0.0 && norm > self.config.clip {
            let s = self.config.clip / norm;
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
        norm
    }

    /// One Adam update of every trainable parameter from dense `grads`
    /// (indexed by parameter id). Gradients must already be clipped.
    pub fn step(
        &mut self,
        store: &mut crate::tensorcore::ParamStore,
        grads: &[Tensor],
    ) -> Result<()> {
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NumericGuard("non-finite gradient"));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if !store.get(id).trainable {
                continue;
            }
            let i = id.index();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.value_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub lr: f64,
    pub beta_eff: f64,
    pub grad_norm: f64,
}

/// Optimizer, homeostat windows and counters for one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub weights: ObjectiveWeights,
    pub adam: Adam,
    pub total_steps: usize,
    pub homeostat_window: usize,
    pub step: usize,
    pub skipped_batches: usize,
    windows: Vec<EnergyWindow>,
}

pub struct StepOutcome {
    pub record: StepRecord,
    pub diagnostics: Option<Diagnostics>,
}

impl Trainer {
    pub fn new(
        model: &Model,
        weights: ObjectiveWeights,
        adam: AdamConfig,
        total_steps: usize,
        homeostat_window: usize,
    ) -> Self {
        Trainer {
            weights,
            adam: Adam::new(adam, &model.store),
            total_steps,
            homeostat_window: homeostat_window.max(1),
            step: 0,
            skipped_batches: 0,
            windows: vec![EnergyWindow::default(); model.config.n_layers],
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.weights.kl_warmup_frac * self.total_steps as f64).round() as usize
    }

    pub fn beta_eff(&self) -> f64 {
        kl_warmup(self.step, self.warmup_steps(), self.weights.beta)
    }

    /// Forward, backward, clip and update on one batch. A batch whose loss or
    /// gradient is non-finite leaves the parameters untouched and is counted
    /// as skipped.
    pub fn train_step(
        &mut self,
        model: &mut Model,
        batch: &[&TokenWindow],
        rng: &mut Rng,
    ) -> Result<StepOutcome> {
        let beta = self.beta_eff();
        let alpha = self.weights.alpha_ar;
        let mut g = Graph::new();
        let built = build_loss(&mut g, model, batch, &mut Noise::Sample(rng), beta, alpha);
        let result = match built {
            Ok((terms, diag)) => {
                let breakdown = terms.breakdown(&g, beta, alpha);
                match g.backward(terms.total) {
                    Ok(grads) => {
                        let mut dense = grads.dense(&model.store);
                        let norm = self.adam.clip(&mut dense);
                        if norm.is_finite() {
                            self.adam.step(&mut model.store, &dense)?;
                            Some((breakdown, norm, diag))
                        } else {
                            None
                        }
                    }
                    Err(Error::NumericGuard(_)) => None,
                    Err(e) => return Err(e),
                }
            }
            Err(Error::NumericGuard(_)) => None,
            Err(e) => return Err(e),
        };
        self.step += 1;
        let Some((loss, grad_norm, diag)) = result else {
            self.skipped_batches += 1;
            let record = StepRecord {
                step: self.step,
                loss: LossBreakdown {
                    skipped: true,
                    lm: f64::NAN,
                    kl: f64::NAN,
                    control: f64::NAN,
                    ar: f64::NAN,
                    total: f64::NAN,
                },
                lr: self.adam.config.lr,
                beta_eff: beta,
                grad_norm: f64::NAN,
            };
            return Ok(StepOutcome {
                record,
                diagnostics: None,
            });
        };

        for (l, stats) in diag.layers.iter().enumerate() {
            self.windows[l].push(&stats.mu2);
        }
        if model.is_variational() && self.step % self.homeostat_window == 0 {
            for (l, w) in self.windows.iter_mut().enumerate() {
                if w.is_empty() {
                    continue;
                }
                let state = model.controls[l];
                let stats = w.close(&state);
                if state.enabled {
                    model.controls[l] = homeostat_update(&state, &stats);
                } else {
                    model.controls[l].stats = stats;
                }
            }
        }
        Ok(StepOutcome {
            record: StepRecord {
                step: self.step,
                loss,
                lr: self.adam.config.lr,
                beta_eff: beta,
                grad_norm,
            },
            diagnostics: Some(diag),
        })
    }
}
