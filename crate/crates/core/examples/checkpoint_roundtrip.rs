//! Saves a model, reloads it, re-evaluates it, and shows the checksum
//! rejecting a corrupted file.

use eve_lm::checkpoint::{self, CheckpointMeta};
use eve_lm::config::RunConfig;
use eve_lm::rng::Rng;
use eve_lm::run;

fn main() -> eve_lm::Result<()> {
    let mut cfg = RunConfig {
        name: "ckpt".into(),
        seed: Some(5),
        ..RunConfig::default()
    };
    cfg.model.n_layers = 2;
    cfg.model.window_length = 32;
    cfg.train.epochs = 1;
    cfg.train.steps_per_epoch = Some(20);
    let out = std::env::temp_dir().join("evelm-examples/checkpoint_roundtrip");
    let s = run::train(&cfg, &out)?;

    let best = out.join(run::BEST_CKPT);
    let ckpt = checkpoint::load(&best)?;
    println!(
        "{}: epoch {}, {} = {:.4}, {} tensors",
        best.display(),
        ckpt.header.epoch,
        ckpt.header.select_by,
        ckpt.header.metric,
        ckpt.model.store.len()
    );
    let again = run::evaluate_checkpoint(&best, None, None)?;
    println!("re-evaluated report identical: {}", again == s.report);

    // a fresh save of the reloaded model is byte-identical
    let meta = CheckpointMeta {
        run_config: ckpt.header.run_config.clone(),
        rng: Rng::new(5).state(),
        epoch: ckpt.header.epoch,
        select_by: ckpt.header.select_by.clone(),
        metric: ckpt.header.metric,
        skipped_batches: 0,
    };
    let a = checkpoint::encode(&ckpt.model, &meta)?;
    let b = checkpoint::encode(&checkpoint::decode(&a)?.model, &meta)?;
    println!("encode/decode/encode stable: {}", a == b);

    let mut bytes = std::fs::read(&best)?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = out.join("corrupt.ckpt");
    std::fs::write(&bad, bytes)?;
    match checkpoint::load(&bad) {
        Err(e) => println!("corrupted copy rejected: {e}"),
        Ok(_) => println!("corrupted copy loaded?"),
    }
    Ok(())
}
