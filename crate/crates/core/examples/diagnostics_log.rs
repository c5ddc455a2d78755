//! Reads the per-layer diagnostics a training run logs and applies the
//! collapse monitor.

use eve_lm::config::RunConfig;
use eve_lm::diagnostics::{collapse_monitor, read_jsonl, CollapseThresholds, LayerDiag};
use eve_lm::run;

fn main() -> eve_lm::Result<()> {
    let mut cfg = RunConfig {
        name: "diag".into(),
        seed: Some(4),
        ..RunConfig::default()
    };
    cfg.model.n_layers = 3;
    cfg.model.window_length = 32;
    cfg.model.layer_aux_enabled = true;
    cfg.train.epochs = 2;
    cfg.train.steps_per_epoch = Some(30);
    cfg.train.diag_every = 10;
    let out = std::env::temp_dir().join("evelm-examples/diagnostics_log");
    run::train(&cfg, &out)?;

    let recs: Vec<LayerDiag> = read_jsonl(&out.join(run::DIAG_LOG))?;
    println!(
        "{:>5} {:>5} {:>8} {:>8} {:>7} {:>7} {:>7}",
        "step", "layer", "kl", "mu2", "gain", "inside", "weight"
    );
    for r in &recs {
        println!(
            "{:>5} {:>5} {:>8.4} {:>8.4} {:>7.3} {:>7.2} {:>7.3}",
            r.step, r.layer, r.kl, r.mu2, r.control_gain, r.band.inside_band_fraction, r.weight
        );
    }
    let th = CollapseThresholds::default();
    println!("thresholds: dead < {:e}, weak < {:e}", th.dead, th.weak);
    for (l, s) in collapse_monitor(&recs, &th).iter().enumerate() {
        println!("layer {l}: {s:?}");
    }
    Ok(())
}
