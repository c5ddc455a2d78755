//! Monte Carlo predictive distribution of a briefly trained variational
//! model, token by token, next to the aggregate uncertainty metrics.

use eve_lm::config::RunConfig;
use eve_lm::mceval::{
    conditional_variance_mc, cvar_nll, ece, epistemic_ratio, mc_forward, mutual_information,
    nll_mc, top1_flip_rate,
};
use eve_lm::rng::Rng;
use eve_lm::run;

fn main() -> eve_lm::Result<()> {
    let mut cfg = RunConfig {
        name: "mc".into(),
        seed: Some(3),
        ..RunConfig::default()
    };
    cfg.model.n_layers = 2;
    cfg.model.window_length = 32;
    cfg.train.lr = 1e-2;
    cfg.train.epochs = 1;
    cfg.train.steps_per_epoch = Some(60);
    let out = std::env::temp_dir().join("evelm-examples/mc_uncertainty");
    let s = run::train(&cfg, &out)?;

    let data = run::prepare_data(&cfg)?;
    let batch: Vec<_> = data.val.iter().take(4).collect();
    let pred = mc_forward(&s.model, &batch, 8, &mut Rng::new(11))?;
    let stats = pred.token_stats();
    println!(
        "{:>4} {:>8} {:>8} {:>10} {:>6}",
        "tok", "nll", "conf", "MI", "flip"
    );
    for (i, t) in stats.iter().take(12).enumerate() {
        println!(
            "{i:>4} {:>8.4} {:>8.4} {:>10.2e} {:>6}",
            t.nll,
            t.confidence,
            t.mutual_information(),
            t.flipped
        );
    }
    println!("{} tokens, M = {}", pred.n_tokens(), pred.m);
    println!("nll_mc               {:.4}", nll_mc(&stats));
    println!("ece (15 bins)        {:.4}", ece(&stats, 15));
    println!("mutual information   {:.3e}", mutual_information(&stats));
    println!(
        "conditional variance {:.3e}",
        conditional_variance_mc(&stats)
    );
    println!("top-1 flip rate      {:.4}", top1_flip_rate(&stats));
    println!("cvar_nll (0.05)      {:.4}", cvar_nll(&stats, 0.05));
    println!("epistemic ratio      {:.2}%", epistemic_ratio(&stats));
    Ok(())
}
