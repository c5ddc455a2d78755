//! Local variational unit.
//!
//! A unit reads an input `x` and a memory `h`, infers a diagonal Gaussian
//! posterior over a latent `z`, compares it with a learned local prior, samples
//! `z` by reparameterization and decodes it into an activation. Latent energy
//! (mean squared posterior mean) is regulated by a squared-hinge band penalty
//! whose gain is adjusted homeostatically between monitoring windows.
//!
//! When the autoregressive prior is enabled the prior mean follows
//! `m(t) = g * m(t-1) + (1 - g) * (z(t-1) W_ar)` with a per-dimension retain
//! gate `g = sigmoid(raw)`, and `m(t)` doubles as the unit memory `h(t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensorcore::{softplus_scalar, Graph, ParamId, ParamStore, Tensor, Var};

/// Floor added to every softplus scale.
pub const SIGMA_MIN: f64 = 1e-4;

/// Per-dimension KL (nats) above which a latent dimension counts as active.
pub const ACTIVE_KL_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

/// How a unit is wired. Optional heads are only allocated when enabled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitLayout {
    pub d_in: usize,
    pub d_z: usize,
    pub d_out: usize,
    /// Posterior heads read the memory `h` as well as `x`.
    pub posterior_memory: bool,
    /// Prior mean head reads `h` (otherwise it is a learned constant).
    pub prior_mean_memory: bool,
    /// Prior scale head reads `h` (otherwise it is a learned constant).
    pub prior_sigma_memory: bool,
    pub autoregressive: bool,
    pub activation: Activation,
    pub sigma_min: f64,
}

impl UnitLayout {
    pub fn new(d_in: usize, d_z: usize, d_out: usize) -> Self {
        UnitLayout {
            d_in,
            d_z,
            d_out,
            posterior_memory: false,
            prior_mean_memory: false,
            prior_sigma_memory: false,
            autoregressive: false,
            activation: Activation::Gelu,
            sigma_min: SIGMA_MIN,
        }
    }

    /// Number of scalar parameters a unit with this layout owns.
    pub fn param_count(&self) -> usize {
        let (di, dz, dout) = (self.d_in, self.d_z, self.d_out);
        let mut n = 2 * (di * dz + dz); // posterior mean and scale heads
        if self.posterior_memory {
            n += 2 * dz * dz;
        }
        n += 2 * dz; // prior biases
        if self.prior_mean_memory {
            n += dz * dz;
        }
        if self.prior_sigma_memory {
            n += dz * dz;
        }
        n += dz * dout + dout;
        if self.autoregressive {
            n += dz + dz * dz;
        }
        n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArParams {
    pub gate_raw: ParamId,
    pub map: ParamId,
}

/// Parameter handles for one unit. Values live in the shared [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalUnitParams {
    pub q_mu_x: ParamId,
    pub q_mu_h: Option<ParamId>,
    pub q_mu_b: ParamId,
    pub q_sigma_x: ParamId,
    pub q_sigma_h: Option<ParamId>,
    pub q_sigma_b: ParamId,
    pub p_mu_h: Option<ParamId>,
    pub p_mu_b: ParamId,
    pub p_sigma_h: Option<ParamId>,
    pub p_sigma_b: ParamId,
    pub dec_w: ParamId,
    pub dec_b: ParamId,
    pub ar: Option<ArParams>,
    pub d_in: usize,
    pub d_z: usize,
    pub d_out: usize,
    pub activation: Activation,
    pub sigma_min: f64,
}

fn normal_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal() * std).collect())
        .expect("shape product matches")
}

fn identity(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    t
}

impl VariationalUnitParams {
    /// Allocates a unit in `store`. Projections are N(0, std²), biases zero,
    /// the retain gate starts at 0.5 and the AR map at the identity.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        layout: &UnitLayout,
        std: f64,
        rng: &mut Rng,
    ) -> Self {
        let UnitLayout {
            d_in, d_z, d_out, ..
        } = *layout;
        let mut w = |store: &mut ParamStore, name: &str, shape: &[usize]| {
            store.add(
                format!("{prefix}.{name}"),
                normal_tensor(rng, shape, std),
                true,
            )
        };
        let q_mu_x = w(store, "q_mu_x", &[d_in, d_z]);
        let q_mu_h = layout
            .posterior_memory
            .then(|| w(store, "q_mu_h", &[d_z, d_z]));
        let q_sigma_x = w(store, "q_sigma_x", &[d_in, d_z]);
        let q_sigma_h = layout
            .posterior_memory
            .then(|| w(store, "q_sigma_h", &[d_z, d_z]));
        let p_mu_h = layout
            .prior_mean_memory
            .then(|| w(store, "p_mu_h", &[d_z, d_z]));
        let p_sigma_h = layout
            .prior_sigma_memory
            .then(|| w(store, "p_sigma_h", &[d_z, d_z]));
        let dec_w = w(store, "dec_w", &[d_z, d_out]);
        let zeros = |store: &mut ParamStore, name: &str, n: usize| {
            store.add(format!("{prefix}.{name}"), Tensor::zeros(&[n]), true)
        };
        let q_mu_b = zeros(store, "q_mu_b", d_z);
        let q_sigma_b = zeros(store, "q_sigma_b", d_z);
        let p_mu_b = zeros(store, "p_mu_b", d_z);
        let p_sigma_b = zeros(store, "p_sigma_b", d_z);
        let dec_b = zeros(store, "dec_b", d_out);
        let ar = layout.autoregressive.then(|| ArParams {
            gate_raw: store.add(format!("{prefix}.ar_gate"), Tensor::zeros(&[d_z]), true),
            map: store.add(format!("{prefix}.ar_map"), identity(d_z), true),
        });
        VariationalUnitParams {
            q_mu_x,
            q_mu_h,
            q_mu_b,
            q_sigma_x,
            q_sigma_h,
            q_sigma_b,
            p_mu_h,
            p_mu_b,
            p_sigma_h,
            p_sigma_b,
            dec_w,
            dec_b,
            ar,
            d_in,
            d_z,
            d_out,
            activation: layout.activation,
            sigma_min: layout.sigma_min,
        }
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.q_mu_x,
            self.q_mu_b,
            self.q_sigma_x,
            self.q_sigma_b,
            self.p_mu_b,
            self.p_sigma_b,
            self.dec_w,
            self.dec_b,
        ];
        ids.extend(
            [self.q_mu_h, self.q_sigma_h, self.p_mu_h, self.p_sigma_h]
                .into_iter()
                .flatten(),
        );
        if let Some(ar) = &self.ar {
            ids.extend([ar.gate_raw, ar.map]);
        }
        ids
    }
}

/// Posterior and prior parameters on the tape, each `[n, d_z]`.
#[derive(Debug, Clone, Copy)]
pub struct LatentDistributionPair {
    pub mu_q: Var,
    pub sigma_q: Var,
    pub mu_p: Var,
    pub sigma_p: Var,
}

/// Whether latent draws use fresh noise or the posterior mean.
pub enum Noise<'a> {
    Sample(&'a mut Rng),
    Mean,
}

impl Noise<'_> {
    pub fn is_mean(&self) -> bool {
        matches!(self, Noise::Mean)
    }
}

fn affine(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    w: ParamId,
    h_term: Option<(Var, ParamId)>,
    b: ParamId,
) -> Result<Var> {
    let wv = g.param(store, w);
    let mut out = g.matmul(x, wv)?;
    if let Some((h, wh)) = h_term {
        let whv = g.param(store, wh);
        let hh = g.matmul(h, whv)?;
        out = g.add(out, hh)?;
    }
    let bv = g.param(store, b);
    g.add_row(out, bv)
}

fn positive_scale(g: &mut Graph, raw: Var, sigma_min: f64) -> Result<Var> {
    let sp = g.softplus(raw)?;
    g.add_scalar(sp, sigma_min)
}

fn check_width(g: &Graph, v: Var, width: usize, what: &str) -> Result<usize> {
    let t = g.value(v);
    if t.rank() != 2 || t.cols() != width {
        return Err(Error::dim(format!(
            "{what}: expected [n, {width}], got {:?}",
            t.shape()
        )));
    }
    Ok(t.rows())
}

/// Posterior half: `mu_q = x Wx + h Wh + b`, `sigma_q = softplus(...) + sigma_min`.
pub fn infer_posterior(
    g: &mut Graph,
    store: &ParamStore,
    p: &VariationalUnitParams,
    x: Var,
    h: Option<Var>,
) -> Result<(Var, Var)> {
    let n = check_width(g, x, p.d_in, "infer_posterior x")?;
    let h = match (h, p.q_mu_h) {
        (Some(h), Some(_)) => {
            if check_width(g, h, p.d_z, "infer_posterior h")? != n {
                return Err(Error::dim("infer_posterior: x and h row counts differ"));
            }
            Some(h)
        }
        _ => None,
    };
    let mu = affine(g, store, x, p.q_mu_x, h.zip(p.q_mu_h), p.q_mu_b)?;
    let raw = affine(g, store, x, p.q_sigma_x, h.zip(p.q_sigma_h), p.q_sigma_b)?;
    let sigma = positive_scale(g, raw, p.sigma_min)?;
    Ok((mu, sigma))
}

/// Prior half from memory `h` alone. Without memory the heads reduce to
/// their learned biases, broadcast to `rows`.
pub fn infer_prior(
    g: &mut Graph,
    store: &ParamStore,
    p: &VariationalUnitParams,
    h: Option<Var>,
    rows: usize,
) -> Result<(Var, Var)> {
    if let Some(h) = h {
        if check_width(g, h, p.d_z, "infer_prior h")? != rows {
            return Err(Error::dim("infer_prior: h row count mismatch"));
        }
    }
    let head = |g: &mut Graph, wh: Option<ParamId>, b: ParamId| -> Result<Var> {
        match (h, wh) {
            (Some(h), Some(wh)) => {
                let whv = g.param(store, wh);
                let hh = g.matmul(h, whv)?;
                let bv = g.param(store, b);
                g.add_row(hh, bv)
            }
            _ => {
                let bv = g.param(store, b);
                g.broadcast_rows(bv, rows)
            }
        }
    };
    let mu = head(g, p.p_mu_h, p.p_mu_b)?;
    let raw = head(g, p.p_sigma_h, p.p_sigma_b)?;
    let sigma = positive_scale(g, raw, p.sigma_min)?;
    Ok((mu, sigma))
}

/// Draws `n * d` standard normals in row-major order.
pub fn draw_noise(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], rng.normals(rows * cols)).expect("shape product matches")
}

/// Reparameterized draw `z = mu + sigma * eps`; `eps` is a constant on the tape.
pub fn sample_latent(g: &mut Graph, mu: Var, sigma: Var, noise: &mut Noise<'_>) -> Result<Var> {
    match noise {
        Noise::Mean => Ok(mu),
        Noise::Sample(rng) => {
            let (r, c) = (g.value(mu).rows(), g.value(mu).cols());
            let eps = g.constant(draw_noise(rng, r, c))?;
            let scaled = g.mul(sigma, eps)?;
            g.add(mu, scaled)
        }
    }
}

/// `y = act(z W + b)`.
pub fn decode(g: &mut Graph, store: &ParamStore, p: &VariationalUnitParams, z: Var) -> Result<Var> {
    check_width(g, z, p.d_z, "decode z")?;
    let pre = affine(g, store, z, p.dec_w, None, p.dec_b)?;
    match p.activation {
        Activation::Gelu => g.gelu(pre),
        Activation::Identity => Ok(pre),
    }
}

/// Elementwise KL terms `[n, d]` of `N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)`.
fn kl_terms(g: &mut Graph, d: &LatentDistributionPair) -> Result<Var> {
    let ln_sp = g.ln(d.sigma_p)?;
    let ln_sq = g.ln(d.sigma_q)?;
    let log_ratio = g.sub(ln_sp, ln_sq)?;
    let log_ratio = g.scale(log_ratio, 2.0)?;
    let vq = g.square(d.sigma_q)?;
    let vp = g.square(d.sigma_p)?;
    let diff = g.sub(d.mu_q, d.mu_p)?;
    let diff2 = g.square(diff)?;
    let num = g.add(vq, diff2)?;
    let frac = g.div(num, vp)?;
    let inner = g.add(log_ratio, frac)?;
    let inner = g.add_scalar(inner, -1.0)?;
    g.scale(inner, 0.5)
}

/// KL summed over latent dimensions, averaged over rows.
pub fn kl_diag_gauss(g: &mut Graph, d: &LatentDistributionPair) -> Result<Var> {
    let terms = kl_terms(g, d)?;
    let d_z = g.value(terms).cols() as f64;
    let mean = g.mean(terms)?;
    g.scale(mean, d_z)
}

/// Closed-form per-dimension KL on plain values.
pub fn kl_scalar(mu_q: f64, sigma_q: f64, mu_p: f64, sigma_p: f64) -> f64 {
    let (vq, vp) = (sigma_q * sigma_q, sigma_p * sigma_p);
    0.5 * ((vp / vq).ln() + (vq + (mu_q - mu_p).powi(2)) / vp - 1.0)
}

/// Latent energy per row: `(1/d_z) sum_j mu_q[j]^2`, shape `[n]`.
pub fn latent_energy(g: &mut Graph, mu_q: Var) -> Result<Var> {
    let sq = g.square(mu_q)?;
    g.mean_cols(sq)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    pub enabled: bool,
    pub mu2_target: f64,
    pub band_halfwidth: f64,
    pub initial_gain: f64,
    /// Homeostat rate.
    pub eta: f64,
    pub gain_min: f64,
    pub gain_max: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            enabled: true,
            mu2_target: 0.15,
            band_halfwidth: 0.10,
            initial_gain: 1.0,
            eta: 0.05,
            gain_min: 1e-3,
            gain_max: 10.0,
        }
    }
}

/// Occupancy of the admissible band over one batch or window.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BandStats {
    pub inside_band_fraction: f64,
    pub frac_too_low: f64,
    pub frac_too_high: f64,
    pub target_gap: f64,
    pub mean_mu2: f64,
}

impl BandStats {
    pub fn from_values(values: &[f64], target: f64, band: f64) -> Self {
        if values.is_empty() {
            return BandStats::default();
        }
        let n = values.len() as f64;
        let (lo, hi) = (target - band, target + band);
        let low = values.iter().filter(|&&v| v < lo).count();
        let high = values.iter().filter(|&&v| v > hi).count();
        let frac_too_low = low as f64 / n;
        let frac_too_high = high as f64 / n;
        let mean = values.iter().sum::<f64>() / n;
        BandStats {
            inside_band_fraction: (values.len() - low - high) as f64 / n,
            frac_too_low,
            frac_too_high,
            target_gap: (mean - target).abs(),
            mean_mu2: mean,
        }
    }
}

/// Homeostatic band controller for one layer's unit bank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlState {
    pub mu2_target: f64,
    pub band_halfwidth: f64,
    pub control_gain: f64,
    pub eta: f64,
    pub gain_min: f64,
    pub gain_max: f64,
    pub enabled: bool,
    pub stats: BandStats,
}

impl ControlState {
    pub fn new(cfg: &ControlConfig) -> Self {
        ControlState {
            mu2_target: cfg.mu2_target,
            band_halfwidth: cfg.band_halfwidth,
            control_gain: cfg.initial_gain,
            eta: cfg.eta,
            gain_min: cfg.gain_min,
            gain_max: cfg.gain_max,
            enabled: cfg.enabled,
            stats: BandStats::default(),
        }
    }

    pub fn lower(&self) -> f64 {
        self.mu2_target - self.band_halfwidth
    }

    pub fn upper(&self) -> f64 {
        self.mu2_target + self.band_halfwidth
    }
}

/// `gain * mean(relu(mu2 - upper)^2 + relu(lower - mu2)^2)` plus batch band stats.
///
/// A disabled controller contributes no loss but still reports statistics.
pub fn control_penalty(
    g: &mut Graph,
    mu2: Var,
    state: &ControlState,
) -> Result<(Option<Var>, BandStats)> {
    let stats = BandStats::from_values(g.value(mu2).data(), state.mu2_target, state.band_halfwidth);
    if !state.enabled {
        return Ok((None, stats));
    }
    let over = g.add_scalar(mu2, -state.upper())?;
    let over = g.relu(over)?;
    let over = g.square(over)?;
    let under = g.scale(mu2, -1.0)?;
    let under = g.add_scalar(under, state.lower())?;
    let under = g.relu(under)?;
    let under = g.square(under)?;
    let both = g.add(over, under)?;
    let mean = g.mean(both)?;
    let loss = g.scale(mean, state.control_gain)?;
    Ok((Some(loss), stats))
}

/// Multiplicative gain update from a completed window's mean latent energy.
pub fn homeostat_update(state: &ControlState, window: &BandStats) -> ControlState {
    let mut next = *state;
    next.stats = *window;
    if state.mu2_target > 0.0 {
        let signed_gap = window.mean_mu2 - state.mu2_target;
        let factor = (state.eta * signed_gap / state.mu2_target).exp();
        next.control_gain = (state.control_gain * factor).clamp(state.gain_min, state.gain_max);
    }
    next
}

/// Accumulates latent-energy observations between homeostat updates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyWindow {
    values: Vec<f64>,
}

impl EnergyWindow {
    pub fn push(&mut self, values: &[f64]) {
        self.values.extend_from_slice(values);
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Band statistics of the window, then resets it.
    pub fn close(&mut self, state: &ControlState) -> BandStats {
        let stats = BandStats::from_values(&self.values, state.mu2_target, state.band_halfwidth);
        self.values.clear();
        stats
    }
}

/// One AR prior step: `g * prev + (1 - g) * (z_prev W_ar)`.
pub fn ar_prior_step(
    g: &mut Graph,
    store: &ParamStore,
    p: &VariationalUnitParams,
    mu_p_prev: Var,
    z_prev: Var,
) -> Result<Var> {
    let ar =
        p.ar.as_ref()
            .ok_or_else(|| Error::Usage("unit has no autoregressive prior".into()))?;
    let n = check_width(g, mu_p_prev, p.d_z, "ar_prior_step mu_p")?;
    if check_width(g, z_prev, p.d_z, "ar_prior_step z")? != n {
        return Err(Error::dim("ar_prior_step: row counts differ"));
    }
    let raw = g.param(store, ar.gate_raw);
    let gate = g.sigmoid(raw)?;
    let keep = g.mul_row(mu_p_prev, gate)?;
    let neg = g.scale(gate, -1.0)?;
    let one_minus = g.add_scalar(neg, 1.0)?;
    let w = g.param(store, ar.map);
    let mapped = g.matmul(z_prev, w)?;
    let track = g.mul_row(mapped, one_minus)?;
    g.add(keep, track)
}

/// Mean squared error between prior means and detached posterior means over
/// steps `t >= 1`. Returns `None` for sequences shorter than two steps.
pub fn ar_loss(g: &mut Graph, mu_p_seq: Var, mu_q_seq: Var) -> Result<Option<Var>> {
    let (tp, tq) = (
        g.value(mu_p_seq).shape().to_vec(),
        g.value(mu_q_seq).shape().to_vec(),
    );
    if tp != tq {
        return Err(Error::dim(format!(
            "ar_loss: sequence shapes {tp:?} and {tq:?} differ"
        )));
    }
    let t = g.value(mu_p_seq).rows();
    if t < 2 {
        return Ok(None);
    }
    let p = g.slice_rows(mu_p_seq, 1, t - 1)?;
    let q = g.slice_rows(mu_q_seq, 1, t - 1)?;
    let q = g.detach(q)?;
    let diff = g.sub(p, q)?;
    let sq = g.square(diff)?;
    Ok(Some(g.mean(sq)?))
}

/// Everything one unit produced for one sequence.
#[derive(Debug, Clone)]
pub struct UnitOutput {
    /// Decoded activation `[T, d_out]`.
    pub y: Var,
    pub dist: LatentDistributionPair,
    pub z: Var,
    /// Scalar KL, mean over positions.
    pub kl: Var,
    /// Latent energy per position `[T]`.
    pub mu2: Var,
    pub ar_loss: Option<Var>,
}

/// Runs a unit over a sequence `u` of shape `[T, d_in]`.
///
/// Noise is drawn as one `[T, d_z]` block in row-major order whichever path
/// runs, so sampling is identical with and without the AR prior.
pub fn run_unit(
    g: &mut Graph,
    store: &ParamStore,
    p: &VariationalUnitParams,
    u: Var,
    noise: &mut Noise<'_>,
) -> Result<UnitOutput> {
    let t_len = check_width(g, u, p.d_in, "run_unit input")?;
    let eps = match noise {
        Noise::Sample(rng) => Some(draw_noise(rng, t_len, p.d_z)),
        Noise::Mean => None,
    };

    let (dist, z) = if p.ar.is_some() {
        let mut mu_q_rows = Vec::with_capacity(t_len);
        let mut sigma_q_rows = Vec::with_capacity(t_len);
        let mut mu_p_rows = Vec::with_capacity(t_len);
        let mut sigma_p_rows = Vec::with_capacity(t_len);
        let mut z_rows = Vec::with_capacity(t_len);
        let mut memory = g.constant(Tensor::zeros(&[1, p.d_z]))?;
        for t in 0..t_len {
            let x_t = g.slice_rows(u, t, 1)?;
            let (mu_q, sigma_q) = infer_posterior(g, store, p, x_t, Some(memory))?;
            let (_, sigma_p) = infer_prior(g, store, p, Some(memory), 1)?;
            let z_t = match &eps {
                Some(e) => {
                    let e_t = g.constant(Tensor::new(vec![1, p.d_z], e.row(t).to_vec())?)?;
                    let scaled = g.mul(sigma_q, e_t)?;
                    g.add(mu_q, scaled)?
                }
                None => mu_q,
            };
            mu_q_rows.push(mu_q);
            sigma_q_rows.push(sigma_q);
            mu_p_rows.push(memory);
            sigma_p_rows.push(sigma_p);
            z_rows.push(z_t);
            if t + 1 < t_len {
                let z_const = g.detach(z_t)?;
                memory = ar_prior_step(g, store, p, memory, z_const)?;
            }
        }
        let dist = LatentDistributionPair {
            mu_q: g.concat_rows(&mu_q_rows)?,
            sigma_q: g.concat_rows(&sigma_q_rows)?,
            mu_p: g.concat_rows(&mu_p_rows)?,
            sigma_p: g.concat_rows(&sigma_p_rows)?,
        };
        let z = g.concat_rows(&z_rows)?;
        (dist, z)
    } else {
        let (mu_q, sigma_q) = infer_posterior(g, store, p, u, None)?;
        let (mu_p, sigma_p) = infer_prior(g, store, p, None, t_len)?;
        let z = match eps {
            Some(e) => {
                let e = g.constant(e)?;
                let scaled = g.mul(sigma_q, e)?;
                g.add(mu_q, scaled)?
            }
            None => mu_q,
        };
        (
            LatentDistributionPair {
                mu_q,
                sigma_q,
                mu_p,
                sigma_p,
            },
            z,
        )
    };

    let y = decode(g, store, p, z)?;
    let kl = kl_diag_gauss(g, &dist)?;
    let mu2 = latent_energy(g, dist.mu_q)?;
    let ar_loss = if p.ar.is_some() {
        ar_loss(g, dist.mu_p, dist.mu_q)?
    } else {
        None
    };
    Ok(UnitOutput {
        y,
        dist,
        z,
        kl,
        mu2,
        ar_loss,
    })
}

/// Per-dimension KL averaged over rows, from tape values.
pub fn kl_per_dim(g: &Graph, dist: &LatentDistributionPair) -> Vec<f64> {
    let (mq, sq, mp, sp) = (
        g.value(dist.mu_q),
        g.value(dist.sigma_q),
        g.value(dist.mu_p),
        g.value(dist.sigma_p),
    );
    let (n, d) = (mq.rows(), mq.cols());
    let mut out = vec![0.0; d];
    for r in 0..n {
        for (j, o) in out.iter_mut().enumerate() {
            *o += kl_scalar(mq.at(r, j), sq.at(r, j), mp.at(r, j), sp.at(r, j));
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    out
}

/// `softplus(0) + SIGMA_MIN`, the scale of a zero-initialized head.
pub fn default_sigma() -> f64 {
    softplus_scalar(0.0) + SIGMA_MIN
}
