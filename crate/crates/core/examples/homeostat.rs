//! A task that pulls latent energy far above the target, run with and
//! without homeostatic control.

use eve_lm::synthetic::{run_energy_task, EnergyTaskConfig};

fn main() -> eve_lm::Result<()> {
    let on = EnergyTaskConfig::default();
    let mut off = on;
    off.control.enabled = false;
    let c = on.control;
    println!(
        "target {:.2} band [{:.2}, {:.2}]",
        c.mu2_target,
        c.mu2_target - c.band_halfwidth,
        c.mu2_target + c.band_halfwidth
    );
    let a = run_energy_task(&on)?;
    let b = run_energy_task(&off)?;
    println!(
        "{:>6} {:>12} {:>8} {:>12}",
        "step", "mu2 (on)", "gain", "mu2 (off)"
    );
    for s in (0..a.mu2.len()).step_by(100).chain([a.mu2.len() - 1]) {
        println!(
            "{s:>6} {:>12.4} {:>8.3} {:>12.4}",
            a.mu2[s], a.gain[s], b.mu2[s]
        );
    }
    println!(
        "last 25%: on {:.4}, off {:.4}",
        a.tail_mean(0.25),
        b.tail_mean(0.25)
    );
    Ok(())
}
