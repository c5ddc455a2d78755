//! Independent oracles for the variational unit: direct dense evaluation,
//! Monte Carlo statistics, scalar recurrences and finite differences.

use eve_lm::rng::Rng;
use eve_lm::tensorcore::gradcheck::check_params;
use eve_lm::tensorcore::{gelu_scalar, Graph, ParamId, ParamStore, Tensor};
use eve_lm::varneuron::*;

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

fn val(store: &ParamStore, id: ParamId) -> &Tensor {
    store.value(id)
}

/// `x W + b` with explicit loops.
fn dense(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (k, m) = (w.rows(), w.cols());
    (0..m)
        .map(|j| b.data()[j] + (0..k).map(|i| x[i] * w.at(i, j)).sum::<f64>())
        .collect()
}

fn add_dense(acc: &mut [f64], x: &[f64], w: &Tensor) {
    for (j, a) in acc.iter_mut().enumerate() {
        *a += (0..w.rows()).map(|i| x[i] * w.at(i, j)).sum::<f64>();
    }
}

fn random_unit(layout: &UnitLayout, seed: u64) -> (ParamStore, VariationalUnitParams) {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    let p = VariationalUnitParams::init(&mut store, "u", layout, 0.7, &mut rng);
    // randomize biases and the AR gate too
    for id in p.all_ids() {
        for v in store.value_mut(id).data_mut() {
            if *v == 0.0 {
                *v = rng.normal() * 0.3;
            }
        }
    }
    (store, p)
}

fn random_matrix(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, rng.normals(r * c)).unwrap()
}

#[test]
fn posterior_matches_dense_oracle() {
    let layout = UnitLayout {
        posterior_memory: true,
        ..UnitLayout::new(4, 3, 2)
    };
    let (store, p) = random_unit(&layout, 3);
    let mut rng = Rng::new(30);
    let x = random_matrix(&mut rng, 5, 4);
    let h = random_matrix(&mut rng, 5, 3);
    let mut g = Graph::new();
    let (vx, vh) = (
        g.constant(x.clone()).unwrap(),
        g.constant(h.clone()).unwrap(),
    );
    let (mu, sigma) = infer_posterior(&mut g, &store, &p, vx, Some(vh)).unwrap();
    for r in 0..5 {
        let mut m = dense(x.row(r), val(&store, p.q_mu_x), val(&store, p.q_mu_b));
        add_dense(&mut m, h.row(r), val(&store, p.q_mu_h.unwrap()));
        let mut s = dense(x.row(r), val(&store, p.q_sigma_x), val(&store, p.q_sigma_b));
        add_dense(&mut s, h.row(r), val(&store, p.q_sigma_h.unwrap()));
        for j in 0..3 {
            assert!((g.value(mu).at(r, j) - m[j]).abs() < 1e-12);
            let expect = softplus(s[j]) + SIGMA_MIN;
            assert!((g.value(sigma).at(r, j) - expect).abs() < 1e-12);
            assert!(g.value(sigma).at(r, j) >= SIGMA_MIN);
        }
    }
}

#[test]
fn prior_matches_dense_oracle() {
    let layout = UnitLayout {
        prior_mean_memory: true,
        prior_sigma_memory: true,
        ..UnitLayout::new(4, 3, 2)
    };
    let (store, p) = random_unit(&layout, 4);
    let mut rng = Rng::new(31);
    let h = random_matrix(&mut rng, 3, 3);
    let mut g = Graph::new();
    let vh = g.constant(h.clone()).unwrap();
    let (mu, sigma) = infer_prior(&mut g, &store, &p, Some(vh), 3).unwrap();
    for r in 0..3 {
        let m = dense(
            h.row(r),
            val(&store, p.p_mu_h.unwrap()),
            val(&store, p.p_mu_b),
        );
        let s = dense(
            h.row(r),
            val(&store, p.p_sigma_h.unwrap()),
            val(&store, p.p_sigma_b),
        );
        for j in 0..3 {
            assert!((g.value(mu).at(r, j) - m[j]).abs() < 1e-12);
            assert!((g.value(sigma).at(r, j) - (softplus(s[j]) + SIGMA_MIN)).abs() < 1e-12);
        }
    }
}

#[test]
fn decode_matches_dense_gelu_oracle() {
    let (store, p) = random_unit(&UnitLayout::new(2, 3, 4), 5);
    let mut rng = Rng::new(32);
    let z = random_matrix(&mut rng, 6, 3);
    let mut g = Graph::new();
    let vz = g.constant(z.clone()).unwrap();
    let y = decode(&mut g, &store, &p, vz).unwrap();
    for r in 0..6 {
        let pre = dense(z.row(r), val(&store, p.dec_w), val(&store, p.dec_b));
        for j in 0..4 {
            let x = pre[j];
            let oracle = 0.5
                * x
                * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
            assert!((g.value(y).at(r, j) - oracle).abs() < 1e-12);
        }
    }
}

#[test]
fn identity_decoder_is_gelu() {
    let mut store = ParamStore::new();
    let p = VariationalUnitParams::init(
        &mut store,
        "u",
        &UnitLayout::new(1, 1, 1),
        0.0,
        &mut Rng::new(0),
    );
    store.value_mut(p.dec_w).data_mut()[0] = 1.0;
    let mut g = Graph::new();
    let z = g
        .constant(Tensor::matrix(3, 1, vec![-1.0, 0.3, 2.0]).unwrap())
        .unwrap();
    let y = decode(&mut g, &store, &p, z).unwrap();
    for (a, b) in g.value(y).data().iter().zip([-1.0, 0.3, 2.0]) {
        assert_eq!(*a, gelu_scalar(b));
    }
}

#[test]
fn sampling_is_reproducible_and_degenerates_to_mean() {
    let mut g = Graph::new();
    let mu = g.constant(Tensor::from_rows(&[&[0.5, -1.0]])).unwrap();
    let sigma = g.constant(Tensor::from_rows(&[&[0.3, 2.0]])).unwrap();
    let mut r1 = Rng::new(9);
    let mut r2 = Rng::new(9);
    let z1 = sample_latent(&mut g, mu, sigma, &mut Noise::Sample(&mut r1)).unwrap();
    let z2 = sample_latent(&mut g, mu, sigma, &mut Noise::Sample(&mut r2)).unwrap();
    assert_eq!(g.value(z1), g.value(z2));

    let tiny = g.constant(Tensor::from_rows(&[&[1e-300, 1e-300]])).unwrap();
    let z = sample_latent(&mut g, mu, tiny, &mut Noise::Sample(&mut r1)).unwrap();
    assert_eq!(g.value(z).data(), g.value(mu).data());
}

#[test]
fn sample_moments_within_three_standard_errors() {
    let m = 100_000;
    let (mu_v, sigma_v) = ([0.7, -1.3], [0.4, 1.9]);
    let mut g = Graph::new();
    let mu = g
        .constant(Tensor::matrix(m, 2, mu_v.repeat(m)).unwrap())
        .unwrap();
    let sigma = g
        .constant(Tensor::matrix(m, 2, sigma_v.repeat(m)).unwrap())
        .unwrap();
    let mut rng = Rng::new(2024);
    let z = sample_latent(&mut g, mu, sigma, &mut Noise::Sample(&mut rng)).unwrap();
    let zt = g.value(z);
    for j in 0..2 {
        let col: Vec<f64> = (0..m).map(|r| zt.at(r, j)).collect();
        let mean = col.iter().sum::<f64>() / m as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        let se_mean = sigma_v[j] / (m as f64).sqrt();
        // standard error of the sample std is about sigma / sqrt(2(m-1))
        let se_std = sigma_v[j] / (2.0 * (m - 1) as f64).sqrt();
        assert!((mean - mu_v[j]).abs() < 3.0 * se_mean, "mean {mean}");
        assert!(
            (var.sqrt() - sigma_v[j]).abs() < 3.0 * se_std,
            "std {}",
            var.sqrt()
        );
    }
}

#[test]
fn reparameterization_routes_gradient_to_mu_and_sigma() {
    let mut g = Graph::new();
    let mu = g.leaf(Tensor::from_rows(&[&[0.5]]), true).unwrap();
    let sigma = g.leaf(Tensor::from_rows(&[&[2.0]]), true).unwrap();
    let mut rng = Rng::new(1);
    let z = sample_latent(&mut g, mu, sigma, &mut Noise::Sample(&mut rng)).unwrap();
    let eps = (g.value(z).item() - 0.5) / 2.0;
    let s = g.sum(z).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(mu).unwrap().item(), 1.0);
    assert!((grads.get(sigma).unwrap().item() - eps).abs() < 1e-12);
}

/// High-precision KL via log-space terms, independent of the tape.
fn kl_oracle(mq: &[f64], sq: &[f64], mp: &[f64], sp: &[f64]) -> f64 {
    let mut total = 0.0;
    for j in 0..mq.len() {
        let log_ratio = 2.0 * (sp[j].ln() - sq[j].ln());
        let r = sq[j] / sp[j];
        let d = (mq[j] - mp[j]) / sp[j];
        total += 0.5 * (log_ratio + r * r + d * d - 1.0);
    }
    total
}

#[test]
fn kl_random_pairs_match_oracle_and_are_nonnegative() {
    let mut rng = Rng::new(77);
    for _ in 0..200 {
        let d = 1 + rng.below(5);
        let n = 1 + rng.below(4);
        let mq = rng.normals(n * d);
        let mp = rng.normals(n * d);
        let sq: Vec<f64> = (0..n * d).map(|_| 0.05 + rng.uniform() * 3.0).collect();
        let sp: Vec<f64> = (0..n * d).map(|_| 0.05 + rng.uniform() * 3.0).collect();
        let mut g = Graph::new();
        let mk = |g: &mut Graph, v: &Vec<f64>| {
            g.constant(Tensor::matrix(n, d, v.clone()).unwrap())
                .unwrap()
        };
        let dist = LatentDistributionPair {
            mu_q: mk(&mut g, &mq),
            sigma_q: mk(&mut g, &sq),
            mu_p: mk(&mut g, &mp),
            sigma_p: mk(&mut g, &sp),
        };
        let kl_var = kl_diag_gauss(&mut g, &dist).unwrap();
        let kl = g.value(kl_var).item();
        let oracle: f64 = (0..n)
            .map(|r| {
                let s = r * d..(r + 1) * d;
                kl_oracle(&mq[s.clone()], &sq[s.clone()], &mp[s.clone()], &sp[s])
            })
            .sum::<f64>()
            / n as f64;
        assert!(kl >= 0.0);
        assert!(
            (kl - oracle).abs() < 1e-10 * oracle.max(1.0),
            "{kl} vs {oracle}"
        );
    }
}

#[test]
fn control_stats_match_counting_oracle() {
    let state = ControlState::new(&ControlConfig {
        initial_gain: 1.7,
        ..ControlConfig::default()
    });
    let mut rng = Rng::new(8);
    let values: Vec<f64> = (0..500).map(|_| rng.uniform() * 0.5).collect();
    let mut g = Graph::new();
    let mu2 = g.constant(Tensor::vector(values.clone())).unwrap();
    let (loss, stats) = control_penalty(&mut g, mu2, &state).unwrap();
    let (lo, hi) = (state.lower(), state.upper());
    let (mut low, mut high, mut inside, mut pen) = (0, 0, 0, 0.0);
    for &v in &values {
        if v < lo {
            low += 1;
            pen += (lo - v) * (lo - v);
        } else if v > hi {
            high += 1;
            pen += (v - hi) * (v - hi);
        } else {
            inside += 1;
        }
    }
    let n = values.len() as f64;
    assert_eq!(stats.frac_too_low, low as f64 / n);
    assert_eq!(stats.frac_too_high, high as f64 / n);
    assert_eq!(stats.inside_band_fraction, inside as f64 / n);
    assert!(
        (stats.inside_band_fraction + stats.frac_too_low + stats.frac_too_high - 1.0).abs() < 1e-9
    );
    let mean = values.iter().sum::<f64>() / n;
    assert!((stats.target_gap - (mean - state.mu2_target).abs()).abs() < 1e-12);
    assert!((g.value(loss.unwrap()).item() - 1.7 * pen / n).abs() < 1e-12);
}

#[test]
fn homeostat_replays_scalar_recurrence() {
    let cfg = ControlConfig::default();
    let mut state = ControlState::new(&cfg);
    let mut oracle_gain = cfg.initial_gain;
    for step in 0..300 {
        // energy drifts up then back down
        let mean = 0.05 + 0.4 * ((step as f64) / 40.0).sin().abs();
        let window = BandStats {
            mean_mu2: mean,
            ..BandStats::default()
        };
        state = homeostat_update(&state, &window);
        oracle_gain *= (cfg.eta * (mean - cfg.mu2_target) / cfg.mu2_target).exp();
        oracle_gain = oracle_gain.max(cfg.gain_min).min(cfg.gain_max);
        assert!((state.control_gain - oracle_gain).abs() <= 1e-12 * oracle_gain);
    }
}

#[test]
fn ar_step_limits() {
    let layout = UnitLayout {
        autoregressive: true,
        ..UnitLayout::new(2, 3, 2)
    };
    let (mut store, p) = random_unit(&layout, 6);
    let ar = p.ar.clone().unwrap();
    let mut rng = Rng::new(33);
    let prev = random_matrix(&mut rng, 1, 3);
    let z = random_matrix(&mut rng, 1, 3);

    // retention: gate -> 1
    store.value_mut(ar.gate_raw).data_mut().fill(50.0);
    let mut g = Graph::new();
    let (vp, vz) = (
        g.constant(prev.clone()).unwrap(),
        g.constant(z.clone()).unwrap(),
    );
    let next = ar_prior_step(&mut g, &store, &p, vp, vz).unwrap();
    for (a, b) in g.value(next).data().iter().zip(prev.data()) {
        assert!((a - b).abs() < 1e-15);
    }

    // tracking: gate -> 0 with identity map
    store.value_mut(ar.gate_raw).data_mut().fill(-50.0);
    let eye = store.value(ar.map).clone();
    let mut id = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        id.data_mut()[i * 4] = 1.0;
    }
    *store.value_mut(ar.map) = id;
    let mut g = Graph::new();
    let (vp, vz) = (
        g.constant(prev.clone()).unwrap(),
        g.constant(z.clone()).unwrap(),
    );
    let next = ar_prior_step(&mut g, &store, &p, vp, vz).unwrap();
    for (a, b) in g.value(next).data().iter().zip(z.data()) {
        assert!((a - b).abs() < 1e-15);
    }
    *store.value_mut(ar.map) = eye;
}

#[test]
fn ar_gate_one_is_identity_for_any_z() {
    let layout = UnitLayout {
        autoregressive: true,
        ..UnitLayout::new(2, 2, 2)
    };
    let (mut store, p) = random_unit(&layout, 7);
    // sigmoid saturates to exactly 1.0 in f64 here
    store
        .value_mut(p.ar.as_ref().unwrap().gate_raw)
        .data_mut()
        .fill(40.0);
    let mut rng = Rng::new(34);
    for _ in 0..20 {
        let prev = random_matrix(&mut rng, 1, 2);
        let z = random_matrix(&mut rng, 1, 2).map(|v| v * 100.0);
        let mut g = Graph::new();
        let (vp, vz) = (g.constant(prev.clone()).unwrap(), g.constant(z).unwrap());
        let next = ar_prior_step(&mut g, &store, &p, vp, vz).unwrap();
        assert_eq!(g.value(next).data(), prev.data());
    }
}

#[test]
fn ar_recurrence_matches_direct_oracle_over_ten_steps() {
    let layout = UnitLayout {
        autoregressive: true,
        ..UnitLayout::new(2, 3, 2)
    };
    let (store, p) = random_unit(&layout, 8);
    let ar = p.ar.clone().unwrap();
    let gate: Vec<f64> = val(&store, ar.gate_raw)
        .data()
        .iter()
        .map(|r| 1.0 / (1.0 + (-r).exp()))
        .collect();
    let map = val(&store, ar.map).clone();
    let mut rng = Rng::new(35);
    let zs: Vec<Tensor> = (0..10).map(|_| random_matrix(&mut rng, 1, 3)).collect();

    let mut g = Graph::new();
    let mut m = g.constant(Tensor::zeros(&[1, 3])).unwrap();
    let mut oracle = vec![0.0; 3];
    for z in &zs {
        let vz = g.constant(z.clone()).unwrap();
        m = ar_prior_step(&mut g, &store, &p, m, vz).unwrap();
        let mapped: Vec<f64> = (0..3)
            .map(|j| (0..3).map(|i| z.data()[i] * map.at(i, j)).sum())
            .collect();
        for j in 0..3 {
            oracle[j] = gate[j] * oracle[j] + (1.0 - gate[j]) * mapped[j];
        }
        for j in 0..3 {
            assert!((g.value(m).data()[j] - oracle[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn ar_loss_matches_direct_mse_and_only_reaches_prior_side() {
    let mut rng = Rng::new(36);
    let p = random_matrix(&mut rng, 6, 3);
    let q = random_matrix(&mut rng, 6, 3);
    let mut g = Graph::new();
    let (vp, vq) = (
        g.leaf(p.clone(), true).unwrap(),
        g.leaf(q.clone(), true).unwrap(),
    );
    let l = ar_loss(&mut g, vp, vq).unwrap().unwrap();
    let mut mse = 0.0;
    for t in 1..6 {
        for j in 0..3 {
            mse += (p.at(t, j) - q.at(t, j)).powi(2);
        }
    }
    mse /= 15.0;
    assert!((g.value(l).item() - mse).abs() < 1e-12);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(vq).is_none());
    assert!(grads.get(vp).is_some());
}

/// Full unit loss (task + beta KL + control + alpha AR) against central differences.
#[test]
fn unit_loss_gradient_matches_finite_differences() {
    for (seed, ar) in [(40u64, false), (41, true), (42, true)] {
        let layout = UnitLayout {
            posterior_memory: ar,
            autoregressive: ar,
            prior_sigma_memory: ar && seed == 42,
            ..UnitLayout::new(3, 2, 3)
        };
        let (mut store, p) = random_unit(&layout, seed);
        let mut rng = Rng::new(seed + 100);
        let u = random_matrix(&mut rng, 5, 3);
        let target = random_matrix(&mut rng, 5, 3);
        let state = ControlState::new(&ControlConfig {
            mu2_target: 0.05,
            band_halfwidth: 0.02,
            initial_gain: 0.8,
            ..ControlConfig::default()
        });
        let loss_fn =
            |store: &ParamStore, graph: &mut Graph| -> eve_lm::Result<eve_lm::tensorcore::Var> {
                let mut noise_rng = Rng::new(seed);
                let vu = graph.constant(u.clone())?;
                let out = run_unit(graph, store, &p, vu, &mut Noise::Sample(&mut noise_rng))?;
                let t = graph.constant(target.clone())?;
                let diff = graph.sub(out.y, t)?;
                let sq = graph.square(diff)?;
                let task = graph.mean(sq)?;
                let kl = graph.scale(out.kl, 0.3)?;
                let mut total = graph.add(task, kl)?;
                if let (Some(c), _) = control_penalty(graph, out.mu2, &state)? {
                    total = graph.add(total, c)?;
                }
                if let Some(a) = out.ar_loss {
                    let a = graph.scale(a, 0.5)?;
                    total = graph.add(total, a)?;
                }
                Ok(total)
            };
        let mut g = Graph::new();
        let l = loss_fn(&store, &mut g).unwrap();
        let frozen = g.detached_values().to_vec();
        let analytic = g.backward(l).unwrap().dense(&store);
        let checks = check_params(&mut store, &analytic, 1e-5, 64, &mut Rng::new(1), |s| {
            let mut g = Graph::replaying(frozen.clone());
            let l = loss_fn(s, &mut g)?;
            Ok(g.value(l).item())
        })
        .unwrap();
        for c in checks {
            let rel = c.relative_error(1e-6);
            assert!(rel < 1e-4, "seed {seed} {c:?} rel {rel}");
        }
    }
}

#[test]
fn run_unit_ar_and_plain_agree_when_memory_is_inert() {
    // With the AR path on but h-weights zero and gate at retention, the
    // posterior ignores memory and matches the vectorized path exactly.
    let plain_layout = UnitLayout::new(3, 2, 2);
    let ar_layout = UnitLayout {
        posterior_memory: true,
        autoregressive: true,
        ..plain_layout
    };
    let mut store = ParamStore::new();
    let mut rng = Rng::new(50);
    let plain = VariationalUnitParams::init(&mut store, "a", &plain_layout, 0.5, &mut rng);
    let mut store2 = ParamStore::new();
    let ar = VariationalUnitParams::init(&mut store2, "b", &ar_layout, 0.5, &mut Rng::new(51));
    for (dst, src) in [
        (ar.q_mu_x, plain.q_mu_x),
        (ar.q_sigma_x, plain.q_sigma_x),
        (ar.dec_w, plain.dec_w),
    ] {
        *store2.value_mut(dst) = store.value(src).clone();
    }
    store2.value_mut(ar.q_mu_h.unwrap()).data_mut().fill(0.0);
    store2.value_mut(ar.q_sigma_h.unwrap()).data_mut().fill(0.0);
    let u = random_matrix(&mut rng, 4, 3);
    let mut g1 = Graph::new();
    let mut g2 = Graph::new();
    let (u1, u2) = (g1.constant(u.clone()).unwrap(), g2.constant(u).unwrap());
    let o1 = run_unit(
        &mut g1,
        &store,
        &plain,
        u1,
        &mut Noise::Sample(&mut Rng::new(3)),
    )
    .unwrap();
    let o2 = run_unit(
        &mut g2,
        &store2,
        &ar,
        u2,
        &mut Noise::Sample(&mut Rng::new(3)),
    )
    .unwrap();
    assert_eq!(g1.value(o1.z), g2.value(o2.z));
    assert_eq!(g1.value(o1.y), g2.value(o2.y));
}
