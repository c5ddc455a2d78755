//! Compact pre-LN Transformer with a variational or deterministic FFN path
//! and a layer-weighted language-model head.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data;
use crate::error::{Error, Result};
use crate::rng::{streams, Rng};
use crate::tensorcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::varneuron::{
    self, kl_per_dim, run_unit, Activation, ControlConfig, ControlState, Noise, UnitLayout,
    VariationalUnitParams, ACTIVE_KL_THRESHOLD,
};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnMode {
    Variational,
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    #[default]
    Learned,
    FrozenFromFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Latent width per unit.
    pub d_z: usize,
    /// Units per block.
    pub n_units: usize,
    /// Total decoded FFN width, split evenly across units.
    pub d_ff: usize,
    pub window_length: usize,
    pub ffn_mode: FfnMode,
    /// Hidden width of the deterministic MLP; derived for parameter parity when absent.
    pub det_hidden: Option<usize>,
    pub layer_aux_enabled: bool,
    pub layer_aux_control_mult: f64,
    pub layer_aux_kl_mult: f64,
    pub embedding_mode: EmbeddingMode,
    pub embedding_path: Option<PathBuf>,
    /// Autoregressive prior mean; the AR state also feeds the posterior.
    pub autoregressive_prior: bool,
    /// Prior scale read from the AR state instead of a learned constant.
    pub ar_sigma: bool,
    pub activation: Activation,
    pub sigma_min: f64,
    pub init_std: f64,
    pub control: ControlConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: data::VOCAB_SIZE,
            d_model: 32,
            n_layers: 3,
            n_heads: 4,
            d_z: 4,
            n_units: 8,
            d_ff: 64,
            window_length: 128,
            ffn_mode: FfnMode::Variational,
            det_hidden: None,
            layer_aux_enabled: false,
            layer_aux_control_mult: 4.0,
            layer_aux_kl_mult: 2.0,
            embedding_mode: EmbeddingMode::Learned,
            embedding_path: None,
            autoregressive_prior: false,
            ar_sigma: false,
            activation: Activation::Gelu,
            sigma_min: varneuron::SIGMA_MIN,
            init_std: 0.02,
            control: ControlConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_z", self.d_z),
            ("n_units", self.n_units),
            ("d_ff", self.d_ff),
            ("window_length", self.window_length),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff % self.n_units != 0 {
            return Err(Error::Config(format!(
                "d_ff {} is not divisible by n_units {}",
                self.d_ff, self.n_units
            )));
        }
        if !(self.sigma_min > 0.0) || !(self.init_std >= 0.0) {
            return Err(Error::Config(
                "sigma_min must be > 0 and init_std >= 0".into(),
            ));
        }
        if self.layer_aux_control_mult < 0.0 || self.layer_aux_kl_mult < 0.0 {
            return Err(Error::Config("layer_aux multipliers must be >= 0".into()));
        }
        if self.embedding_mode == EmbeddingMode::FrozenFromFile && self.embedding_path.is_none() {
            return Err(Error::Config(
                "frozen_from_file embeddings need embedding_path".into(),
            ));
        }
        Ok(())
    }

    pub fn unit_layout(&self) -> UnitLayout {
        let mut l = UnitLayout::new(self.d_model, self.d_z, self.d_ff / self.n_units);
        l.posterior_memory = self.autoregressive_prior;
        l.autoregressive = self.autoregressive_prior;
        l.prior_sigma_memory = self.autoregressive_prior && self.ar_sigma;
        l.activation = self.activation;
        l.sigma_min = self.sigma_min;
        l
    }

    /// Parameters of one variational FFN path (unit bank and output projection).
    pub fn variational_ffn_params(&self) -> usize {
        self.n_units * self.unit_layout().param_count() + self.d_ff * self.d_model + self.d_model
    }

    pub fn deterministic_ffn_params(&self, hidden: usize) -> usize {
        2 * self.d_model * hidden + hidden + self.d_model
    }

    /// Hidden width whose MLP parameter count is closest to the variational path.
    pub fn matched_det_hidden(&self) -> usize {
        let target = self.variational_ffn_params() as f64;
        let d = self.d_model as f64;
        (((target - d) / (2.0 * d + 1.0)).round() as usize).max(1)
    }

    pub fn det_hidden(&self) -> usize {
        self.det_hidden.unwrap_or_else(|| self.matched_det_hidden())
    }

    /// Everything except the FFN path: the part a matched pair must share.
    pub fn backbone(&self) -> Backbone {
        Backbone {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            window_length: self.window_length,
            embedding_mode: self.embedding_mode,
            embedding_path: self.embedding_path.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub window_length: usize,
    pub embedding_mode: EmbeddingMode,
    pub embedding_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FfnParams {
    Variational {
        units: Vec<VariationalUnitParams>,
        w_out: ParamId,
        b_out: ParamId,
    },
    Deterministic {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockState {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub attn: AttentionParams,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadState {
    pub layer_logits: ParamId,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
    pub w_unembed: ParamId,
    pub b_unembed: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<BlockState>,
    pub head: HeadState,
    /// One homeostatic controller per block (unused in deterministic mode).
    pub controls: Vec<ControlState>,
}

fn normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal() * std).collect())
        .expect("shape product matches")
}

impl Model {
    /// Builds a model with weights drawn from `Rng::new(seed)`'s init stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let emb = match config.embedding_mode {
            EmbeddingMode::FrozenFromFile => {
                let path = config.embedding_path.as_ref().expect("validated");
                Some(data::read_embedding_file(path)?)
            }
            EmbeddingMode::Learned => None,
        };
        Self::with_embedding(config, seed, emb)
    }

    /// Like [`new`](Self::new) but with a frozen embedding table supplied directly.
    pub fn with_embedding(config: ModelConfig, seed: u64, frozen: Option<Tensor>) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed).split(streams::INIT);
        let mut store = ParamStore::new();
        let (d, v, std) = (config.d_model, config.vocab_size, config.init_std);

        let tok_emb = match frozen {
            Some(t) => {
                if t.shape() != [v, d] {
                    return Err(Error::Config(format!(
                        "embedding table is {:?}, model expects [{v}, {d}]",
                        t.shape()
                    )));
                }
                store.add("tok_emb", t, false)
            }
            None => store.add("tok_emb", normal(&mut rng, &[v, d], std), true),
        };
        let pos_emb = store.add(
            "pos_emb",
            normal(&mut rng, &[config.window_length, d], std),
            true,
        );

        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("block{l}");
            let ones = |s: &mut ParamStore, n: &str| {
                s.add(format!("{p}.{n}"), Tensor::filled(&[d], 1.0), true)
            };
            let zeros = |s: &mut ParamStore, n: &str, k: usize| {
                s.add(format!("{p}.{n}"), Tensor::zeros(&[k]), true)
            };
            let ln1_g = ones(&mut store, "ln1_g");
            let ln1_b = zeros(&mut store, "ln1_b", d);
            let mut w = |s: &mut ParamStore, n: &str, shape: &[usize]| {
                s.add(format!("{p}.{n}"), normal(&mut rng, shape, std), true)
            };
            let wq = w(&mut store, "wq", &[d, d]);
            let wk = w(&mut store, "wk", &[d, d]);
            let wv = w(&mut store, "wv", &[d, d]);
            let wo = w(&mut store, "wo", &[d, d]);
            let attn = AttentionParams {
                wq,
                bq: zeros(&mut store, "bq", d),
                wk,
                bk: zeros(&mut store, "bk", d),
                wv,
                bv: zeros(&mut store, "bv", d),
                wo,
                bo: zeros(&mut store, "bo", d),
            };
            let ln2_g = ones(&mut store, "ln2_g");
            let ln2_b = zeros(&mut store, "ln2_b", d);
            let ffn = match config.ffn_mode {
                FfnMode::Variational => {
                    let layout = config.unit_layout();
                    let units = (0..config.n_units)
                        .map(|i| {
                            VariationalUnitParams::init(
                                &mut store,
                                &format!("{p}.unit{i}"),
                                &layout,
                                std,
                                &mut rng,
                            )
                        })
                        .collect();
                    let w_out = store.add(
                        format!("{p}.ffn_out_w"),
                        normal(&mut rng, &[config.d_ff, d], std),
                        true,
                    );
                    let b_out = zeros(&mut store, "ffn_out_b", d);
                    FfnParams::Variational {
                        units,
                        w_out,
                        b_out,
                    }
                }
                FfnMode::Deterministic => {
                    let h = config.det_hidden();
                    let w1 = store.add(format!("{p}.mlp_w1"), normal(&mut rng, &[d, h], std), true);
                    let b1 = zeros(&mut store, "mlp_b1", h);
                    let w2 = store.add(format!("{p}.mlp_w2"), normal(&mut rng, &[h, d], std), true);
                    let b2 = zeros(&mut store, "mlp_b2", d);
                    FfnParams::Deterministic { w1, b1, w2, b2 }
                }
            };
            blocks.push(BlockState {
                ln1_g,
                ln1_b,
                attn,
                ln2_g,
                ln2_b,
                ffn,
            });
        }

        let head = HeadState {
            layer_logits: store.add("head.layer_logits", Tensor::zeros(&[config.n_layers]), true),
            lnf_g: store.add("head.lnf_g", Tensor::filled(&[d], 1.0), true),
            lnf_b: store.add("head.lnf_b", Tensor::zeros(&[d]), true),
            w_unembed: store.add("head.w_unembed", normal(&mut rng, &[d, v], std), true),
            b_unembed: store.add("head.b_unembed", Tensor::zeros(&[v]), true),
        };
        let controls = vec![ControlState::new(&config.control); config.n_layers];
        Ok(Model {
            config,
            store,
            tok_emb,
            pos_emb,
            blocks,
            head,
            controls,
        })
    }

    pub fn is_variational(&self) -> bool {
        self.config.ffn_mode == FfnMode::Variational
    }

    /// Parameters of the FFN path of one block.
    pub fn ffn_param_count(&self, block: usize) -> usize {
        let ids: Vec<ParamId> = match &self.blocks[block].ffn {
            FfnParams::Variational {
                units,
                w_out,
                b_out,
            } => units
                .iter()
                .flat_map(|u| u.all_ids())
                .chain([*w_out, *b_out])
                .collect(),
            FfnParams::Deterministic { w1, b1, w2, b2 } => vec![*w1, *b1, *w2, *b2],
        };
        ids.iter().map(|&id| self.store.value(id).numel()).sum()
    }

    /// Current softmax layer weights.
    pub fn layer_weights(&self) -> Vec<f64> {
        softmax_vec(self.store.value(self.head.layer_logits).data())
    }

    /// Multiplier applied to block `l`'s control and KL terms.
    pub fn aux_multipliers(&self, l: usize) -> (f64, f64) {
        if self.config.layer_aux_enabled && l + 1 == self.config.n_layers {
            (
                self.config.layer_aux_control_mult,
                self.config.layer_aux_kl_mult,
            )
        } else {
            (1.0, 1.0)
        }
    }
}

pub fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Value-level latent statistics of one block for one forward.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    /// KL per unit (summed over dims, mean over positions).
    pub unit_kl: Vec<f64>,
    /// KL per latent dimension, unit-major.
    pub dim_kl: Vec<f64>,
    /// Latent energy of every (unit, position), unit-major.
    pub mu2: Vec<f64>,
    pub sigma_sum: f64,
    pub sigma_count: usize,
}

impl LatentStats {
    pub fn mean_kl(&self) -> f64 {
        mean(&self.unit_kl)
    }

    pub fn mean_mu2(&self) -> f64 {
        mean(&self.mu2)
    }

    pub fn sigma_mean(&self) -> f64 {
        if self.sigma_count == 0 {
            0.0
        } else {
            self.sigma_sum / self.sigma_count as f64
        }
    }

    pub fn active_dim_fraction(&self) -> f64 {
        if self.dim_kl.is_empty() {
            return 0.0;
        }
        let active = self
            .dim_kl
            .iter()
            .filter(|&&k| k > ACTIVE_KL_THRESHOLD)
            .count();
        active as f64 / self.dim_kl.len() as f64
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Empty in deterministic mode.
    pub layers: Vec<LatentStats>,
    pub layer_weights: Vec<f64>,
}

/// Tape handles of one block's variational terms.
#[derive(Debug, Clone, Copy)]
pub struct LayerTerms {
    /// Mean unit KL.
    pub kl: Var,
    /// Latent energies of every (unit, position), `[n_units * rows]`.
    pub mu2: Var,
    /// Mean AR loss over units and windows, when the AR prior is on.
    pub ar: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[sum of window lengths, vocab]`, windows stacked in order.
    pub logits: Var,
    /// Per block; empty in deterministic mode.
    pub layers: Vec<LayerTerms>,
    pub diagnostics: Diagnostics,
}

fn linear(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let wv = g.param(store, w);
    let y = g.matmul(x, wv)?;
    let bv = g.param(store, b);
    g.add_row(y, bv)
}

/// `H + MHA(LN(H))` for windows stacked row-wise; `spans` are `(start, len)`.
pub fn attention_block(
    g: &mut Graph,
    model: &Model,
    block: &BlockState,
    h: Var,
    spans: &[(usize, usize)],
) -> Result<Var> {
    let store = &model.store;
    let (d, n_heads) = (model.config.d_model, model.config.n_heads);
    let dh = d / n_heads;
    let lg = g.param(store, block.ln1_g);
    let lb = g.param(store, block.ln1_b);
    let x = g.layer_norm(h, lg, lb, LN_EPS)?;
    let a = &block.attn;
    let q = linear(g, store, x, a.wq, a.bq)?;
    let k = linear(g, store, x, a.wk, a.bk)?;
    let v = linear(g, store, x, a.wv, a.bv)?;
    let inv = 1.0 / (dh as f64).sqrt();
    let mut per_window = Vec::with_capacity(spans.len());
    for &(start, len) in spans {
        let (qw, kw, vw) = (
            g.slice_rows(q, start, len)?,
            g.slice_rows(k, start, len)?,
            g.slice_rows(v, start, len)?,
        );
        let mut heads = Vec::with_capacity(n_heads);
        for hd in 0..n_heads {
            let qh = g.slice_cols(qw, hd * dh, dh)?;
            let kh = g.slice_cols(kw, hd * dh, dh)?;
            let vh = g.slice_cols(vw, hd * dh, dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, inv)?;
            let p = g.causal_softmax(s)?;
            heads.push(g.matmul(p, vh)?);
        }
        per_window.push(if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        });
    }
    let cat = if per_window.len() == 1 {
        per_window[0]
    } else {
        g.concat_rows(&per_window)?
    };
    let out = linear(g, store, cat, a.wo, a.bo)?;
    g.add(h, out)
}

/// `H + W2 gelu(W1 LN(H) + b1) + b2`.
pub fn deterministic_ffn(g: &mut Graph, model: &Model, block: &BlockState, h: Var) -> Result<Var> {
    let FfnParams::Deterministic { w1, b1, w2, b2 } = &block.ffn else {
        return Err(Error::Usage("block has no deterministic FFN".into()));
    };
    let store = &model.store;
    let lg = g.param(store, block.ln2_g);
    let lb = g.param(store, block.ln2_b);
    let u = g.layer_norm(h, lg, lb, LN_EPS)?;
    let hid = linear(g, store, u, *w1, *b1)?;
    let hid = g.gelu(hid)?;
    let out = linear(g, store, hid, *w2, *b2)?;
    g.add(h, out)
}

/// `H + W_o [y_1 | ... | y_n] + b_o` where unit `i` decodes a latent inferred
/// from `u = LN(H)`.
pub fn variational_ffn(
    g: &mut Graph,
    model: &Model,
    block: &BlockState,
    h: Var,
    spans: &[(usize, usize)],
    noise: &mut Noise<'_>,
) -> Result<(Var, LayerTerms, LatentStats)> {
    let FfnParams::Variational {
        units,
        w_out,
        b_out,
    } = &block.ffn
    else {
        return Err(Error::Usage("block has no variational FFN".into()));
    };
    let store = &model.store;
    let lg = g.param(store, block.ln2_g);
    let lb = g.param(store, block.ln2_b);
    let u = g.layer_norm(h, lg, lb, LN_EPS)?;
    let rows = g.value(u).rows();
    let sequential = model.config.autoregressive_prior;

    let mut ys = Vec::with_capacity(units.len());
    let mut kls = Vec::with_capacity(units.len());
    let mut mu2s = Vec::with_capacity(units.len());
    let mut ars = Vec::new();
    let mut stats = LatentStats::default();
    for p in units {
        // The AR recursion restarts in every window; otherwise all rows run at once.
        let outs = if sequential {
            let mut outs = Vec::with_capacity(spans.len());
            for &(start, len) in spans {
                let uw = g.slice_rows(u, start, len)?;
                outs.push(run_unit(g, store, p, uw, noise)?);
            }
            outs
        } else {
            vec![run_unit(g, store, p, u, noise)?]
        };
        let mut y_parts = Vec::with_capacity(outs.len());
        let mut mu2_parts = Vec::with_capacity(outs.len());
        let mut kl_acc: Option<Var> = None;
        let mut dim_kl = vec![0.0; p.d_z];
        for o in &outs {
            let len = g.value(o.y).rows() as f64;
            let w = len / rows as f64;
            let k = g.scale(o.kl, w)?;
            kl_acc = Some(match kl_acc {
                Some(a) => g.add(a, k)?,
                None => k,
            });
            for (acc, v) in dim_kl.iter_mut().zip(kl_per_dim(g, &o.dist)) {
                *acc += w * v;
            }
            let sig = g.value(o.dist.sigma_q);
            stats.sigma_sum += sig.sum();
            stats.sigma_count += sig.numel();
            y_parts.push(o.y);
            mu2_parts.push(o.mu2);
            if let Some(a) = o.ar_loss {
                ars.push(a);
            }
        }
        let kl = kl_acc.expect("at least one window");
        stats.unit_kl.push(g.value(kl).item());
        stats.dim_kl.extend(dim_kl);
        ys.push(if y_parts.len() == 1 {
            y_parts[0]
        } else {
            g.concat_rows(&y_parts)?
        });
        let m = if mu2_parts.len() == 1 {
            mu2_parts[0]
        } else {
            let cols: Vec<Var> = mu2_parts
                .iter()
                .map(|&v| {
                    let n = g.value(v).numel();
                    g.reshape(v, vec![n, 1])
                })
                .collect::<Result<_>>()?;
            let c = g.concat_rows(&cols)?;
            g.reshape(c, vec![rows])?
        };
        mu2s.push(m);
        kls.push(kl);
    }

    let cat = if ys.len() == 1 {
        ys[0]
    } else {
        g.concat_cols(&ys)?
    };
    let out = linear(g, store, cat, *w_out, *b_out)?;
    let h_next = g.add(h, out)?;

    let kl_sum = sum_vars(g, &kls)?;
    let kl = g.scale(kl_sum, 1.0 / kls.len() as f64)?;
    let mu2_cols: Vec<Var> = mu2s
        .iter()
        .map(|&v| g.reshape(v, vec![rows, 1]))
        .collect::<Result<_>>()?;
    let mu2_all = g.concat_rows(&mu2_cols)?;
    let mu2 = g.reshape(mu2_all, vec![rows * units.len()])?;
    stats.mu2 = g.value(mu2).data().to_vec();
    let ar = if ars.is_empty() {
        None
    } else {
        let s = sum_vars(g, &ars)?;
        Some(g.scale(s, 1.0 / ars.len() as f64)?)
    };
    Ok((h_next, LayerTerms { kl, mu2, ar }, stats))
}

pub(crate) fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

/// Forward over a batch of token sequences.
///
/// `noise` selects sampled or mean latents; deterministic models never touch it.
pub fn forward(
    g: &mut Graph,
    model: &Model,
    inputs: &[&[usize]],
    noise: &mut Noise<'_>,
) -> Result<ForwardOutput> {
    let cfg = &model.config;
    if inputs.is_empty() {
        return Err(Error::Input("forward needs at least one sequence".into()));
    }
    let mut spans = Vec::with_capacity(inputs.len());
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    for seq in inputs {
        if seq.is_empty() || seq.len() > cfg.window_length {
            return Err(Error::Input(format!(
                "sequence length {} outside 1..={}",
                seq.len(),
                cfg.window_length
            )));
        }
        if let Some(&bad) = seq.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        spans.push((ids.len(), seq.len()));
        ids.extend_from_slice(seq);
        positions.extend(0..seq.len());
    }
    let store = &model.store;
    let te = g.param(store, model.tok_emb);
    let pe = g.param(store, model.pos_emb);
    let tok = g.gather_rows(te, &ids)?;
    let pos = g.gather_rows(pe, &positions)?;
    let mut h = g.add(tok, pos)?;

    let mut layers = Vec::new();
    let mut diagnostics = Diagnostics::default();
    let mut block_outputs = Vec::with_capacity(model.blocks.len());
    for block in &model.blocks {
        h = attention_block(g, model, block, h, &spans)?;
        h = match cfg.ffn_mode {
            FfnMode::Deterministic => deterministic_ffn(g, model, block, h)?,
            FfnMode::Variational => {
                let (h2, terms, stats) = variational_ffn(g, model, block, h, &spans, noise)?;
                layers.push(terms);
                diagnostics.layers.push(stats);
                h2
            }
        };
        block_outputs.push(h);
    }

    let hd = &model.head;
    let raw = g.param(store, hd.layer_logits);
    let raw = g.reshape(raw, vec![1, cfg.n_layers])?;
    let w = g.softmax(raw)?;
    diagnostics.layer_weights = g.value(w).data().to_vec();
    let fg = g.param(store, hd.lnf_g);
    let fb = g.param(store, hd.lnf_b);
    let mut mixed = Vec::with_capacity(block_outputs.len());
    for (l, &out) in block_outputs.iter().enumerate() {
        let normed = g.layer_norm(out, fg, fb, LN_EPS)?;
        let wl = g.index(w, l)?;
        mixed.push(g.mul_scalar_var(normed, wl)?);
    }
    let rep = sum_vars(g, &mixed)?;
    let logits = linear(g, store, rep, hd.w_unembed, hd.b_unembed)?;
    Ok(ForwardOutput {
        logits,
        layers,
        diagnostics,
    })
}
