use eve_lm::diagnostics::*;
use eve_lm::model::{Diagnostics, LatentStats};
use eve_lm::rng::Rng;
use eve_lm::varneuron::{ControlConfig, ControlState};
use proptest::prelude::*;

fn direct(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

proptest! {
    #[test]
    fn streaming_matches_batch(xs in prop::collection::vec(0.0f64..5.0, 1..400), chunk in 1usize..50) {
        let mut rs = RunningStats::default();
        for c in xs.chunks(chunk) {
            rs.extend(c);
        }
        let (m, s) = direct(&xs);
        prop_assert!((rs.mean() - m).abs() < 1e-9);
        prop_assert!((rs.std() - s).abs() < 1e-9);
    }

    #[test]
    fn status_is_monotone_in_kl(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let th = CollapseThresholds::default();
        let rank = |s: LayerStatus| match s {
            LayerStatus::Dead => 0,
            LayerStatus::Weak => 1,
            LayerStatus::Active => 2,
        };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(rank(layer_status(lo, &th)) <= rank(layer_status(hi, &th)));
    }
}

#[test]
fn layer_magnitudes_classify() {
    let th = CollapseThresholds::default();
    assert_eq!(layer_status(1.6e-5, &th), LayerStatus::Dead);
    assert_eq!(layer_status(0.192, &th), LayerStatus::Active);
    assert_eq!(layer_status(5e-3, &th), LayerStatus::Weak);
}

fn stats(rng: &mut Rng, kl: f64, n: usize) -> LatentStats {
    LatentStats {
        unit_kl: vec![kl; 2],
        dim_kl: vec![kl / 2.0; 4],
        mu2: (0..n).map(|_| rng.uniform() * 0.4).collect(),
        sigma_sum: n as f64,
        sigma_count: n,
    }
}

#[test]
fn recorder_aggregates_equal_direct_statistics() {
    let mut rng = Rng::new(3);
    let controls = vec![ControlState::new(&ControlConfig::default()); 2];
    let mut rec = DiagRecorder::default();
    let mut all = vec![Vec::new(), Vec::new()];
    for step in 0..25 {
        let d = Diagnostics {
            layers: vec![stats(&mut rng, 0.3, 7 + step % 5), stats(&mut rng, 0.0, 3)],
            layer_weights: vec![0.25, 0.75],
        };
        for (l, s) in d.layers.iter().enumerate() {
            all[l].extend_from_slice(&s.mu2);
        }
        let recs = rec.record(step, &d, &controls, 10);
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].kl, 0.0);
        assert_eq!(recs[1].active_fraction, 0.0);
    }
    for l in 0..2 {
        let (m, s) = direct(&all[l]);
        assert!((rec.layers[l].mu2.mean() - m).abs() < 1e-9);
        assert!((rec.layers[l].mu2.std() - s).abs() < 1e-9);
    }
    let status = collapse_monitor(&rec.records, &CollapseThresholds::default());
    assert_eq!(status, vec![LayerStatus::Active, LayerStatus::Dead]);
}

#[test]
fn identical_layers_give_identical_records() {
    let mut rng = Rng::new(8);
    let s = stats(&mut rng, 0.05, 6);
    let control = ControlState::new(&ControlConfig::default());
    let a = LayerDiag::from_stats(4, 0, &s, 0.5, &control);
    let b = LayerDiag::from_stats(4, 1, &s, 0.5, &control);
    assert_eq!(LayerDiag { layer: 0, ..b }, a);
    let sum = a.band.inside_band_fraction + a.band.frac_too_low + a.band.frac_too_high;
    assert!((sum - 1.0).abs() < 1e-9);
}

#[test]
fn jsonl_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    let mut rng = Rng::new(1);
    let control = ControlState::new(&ControlConfig::default());
    let recs: Vec<LayerDiag> = (0..5)
        .map(|i| LayerDiag::from_stats(i, i % 2, &stats(&mut rng, 0.1, 4), 0.5, &control))
        .collect();
    let mut w = JsonlWriter::create(&path).unwrap();
    for r in &recs[..3] {
        w.write(r).unwrap();
    }
    w.flush().unwrap();
    drop(w);
    let mut w = JsonlWriter::append(&path).unwrap();
    for r in &recs[3..] {
        w.write(r).unwrap();
    }
    w.flush().unwrap();
    let back: Vec<LayerDiag> = read_jsonl(&path).unwrap();
    assert_eq!(back, recs);
}
