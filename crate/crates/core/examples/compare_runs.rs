//! Matched deterministic vs variational comparison: same seed, data and
//! budget, feed-forward parameter counts matched. Writes the table, CSV and
//! SVG plots.

use eve_lm::config::RunConfig;
use eve_lm::model::FfnMode;
use eve_lm::run::{self, compare_table};

fn config(mode: FfnMode) -> RunConfig {
    let mut c = RunConfig {
        name: match mode {
            FfnMode::Deterministic => "det".into(),
            FfnMode::Variational => "eve".into(),
        },
        seed: Some(3),
        ..RunConfig::default()
    };
    c.model.ffn_mode = mode;
    c.model.n_layers = 2;
    c.model.window_length = 32;
    c.train.lr = 1e-2;
    c.train.epochs = 3;
    c.train.steps_per_epoch = Some(30);
    c
}

fn main() -> eve_lm::Result<()> {
    let (det, eve) = (config(FfnMode::Deterministic), config(FfnMode::Variational));
    println!(
        "feed-forward parameters: det {} eve {}",
        run::ffn_params(&det.model),
        run::ffn_params(&eve.model)
    );
    let out = std::env::temp_dir().join("evelm-examples/compare_runs");
    let s = run::compare(&det, &eve, &out)?;
    println!("{}", compare_table(&s.rows));
    let mut files: Vec<_> = std::fs::read_dir(&out)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.path())
        .collect();
    files.sort();
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}
