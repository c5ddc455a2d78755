//! Trains the variational model on the built-in toy corpus and prints the
//! epoch log and the final report.
//!
//! `cargo run --release --example train_toy -- [out_dir]`

use eve_lm::config::RunConfig;
use eve_lm::run;

fn main() -> eve_lm::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("evelm-examples/train_toy"));
    let mut cfg = RunConfig {
        name: "toy".into(),
        seed: Some(3),
        ..RunConfig::default()
    };
    cfg.model.n_layers = 2;
    cfg.model.window_length = 32;
    cfg.train.lr = 1e-2;
    cfg.train.epochs = 3;
    cfg.train.steps_per_epoch = Some(40);

    let s = run::train(&cfg, &out)?;
    println!(
        "{:>5} {:>10} {:>8} {:>8} {:>10}",
        "epoch", "train", "val ce", "acc", "MI"
    );
    for e in &s.epochs {
        println!(
            "{:>5} {:>10.4} {:>8.4} {:>8.4} {:>10.2e}",
            e.epoch, e.train_loss, e.ce, e.acc, e.mutual_information
        );
    }
    let r = &s.report;
    println!("selected epoch {}", s.selected_epoch);
    println!(
        "ce {:.4} ppl {:.2} acc {:.4} | nll {:.4} ece {:.4} MI {:.2e} flip {:.4} cvar {:.4}",
        r.final_validation.ce,
        r.final_validation.ppl,
        r.final_validation.acc,
        r.extended.nll,
        r.extended.ece,
        r.extended.mutual_information,
        r.extended.top1_flip_rate_mc,
        r.extended.cvar_nll
    );
    for l in &r.internal {
        println!(
            "layer {}: kl {:.4} mu2 {:.4} gain {:.3} weight {:.3} {:?}",
            l.layer, l.kl, l.mu2, l.control_gain, l.weight, l.status
        );
    }
    println!("outputs in {}", out.display());
    Ok(())
}
