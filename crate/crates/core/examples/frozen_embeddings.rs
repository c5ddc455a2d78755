//! Trains with a token embedding table read from a file and kept frozen.
//! The file holds one row per vocabulary id.

use eve_lm::config::RunConfig;
use eve_lm::data::{read_embedding_file, write_embedding_file, VOCAB_SIZE};
use eve_lm::model::EmbeddingMode;
use eve_lm::rng::Rng;
use eve_lm::run;
use eve_lm::tensorcore::Tensor;

fn main() -> eve_lm::Result<()> {
    let dir = std::env::temp_dir().join("evelm-examples/frozen_embeddings");
    std::fs::create_dir_all(&dir)?;
    let d = 32;
    let mut rng = Rng::new(21);
    let table = Tensor::matrix(
        VOCAB_SIZE,
        d,
        (0..VOCAB_SIZE * d).map(|_| 0.1 * rng.normal()).collect(),
    )?;
    let path = dir.join("embeddings.bin");
    write_embedding_file(&path, &table)?;
    println!("wrote {VOCAB_SIZE} x {d} table to {}", path.display());

    let mut cfg = RunConfig {
        name: "frozen".into(),
        seed: Some(2),
        ..RunConfig::default()
    };
    cfg.model.d_model = d;
    cfg.model.n_layers = 2;
    cfg.model.window_length = 32;
    cfg.model.embedding_mode = EmbeddingMode::FrozenFromFile;
    cfg.model.embedding_path = Some(path.clone());
    cfg.train.epochs = 1;
    cfg.train.steps_per_epoch = Some(20);
    let s = run::train(&cfg, &dir.join("run"))?;

    let emb = s.model.store.get(s.model.tok_emb);
    println!("embedding trainable: {}", emb.trainable);
    println!(
        "unchanged after training: {}",
        emb.value == read_embedding_file(&path)?
    );
    println!(
        "trainable parameters {} of {}",
        s.model.store.trainable_numel(),
        s.model.store.numel()
    );
    println!("val ce {:.4}", s.report.final_validation.ce);
    Ok(())
}
