//! Byte tokenization, prompt/story streams, window slicing, the seeded split
//! and the JSONL corpus format.

use eve_lm::data::{
    example_stream, ingest, make_windows, split, write_jsonl, ByteTokenizer, Corpus, CorpusFormat,
    Example, SplitSpec, WindowSpec,
};

fn main() -> eve_lm::Result<()> {
    let tok = ByteTokenizer;
    let ids = tok.encode("héllo");
    println!("\"héllo\" -> {ids:?} -> {:?}", tok.decode(&ids)?);

    let corpus = Corpus::from_examples(
        (0..12)
            .map(|i| Example {
                prompt: format!("Prompt {i}:"),
                story: "a short story about the sea and a boat".repeat(1 + i % 2),
            })
            .collect(),
    );
    let (stream, story_start) = example_stream(&corpus.examples[0]);
    println!(
        "stream of {} tokens, story starts at {story_start}",
        stream.len()
    );

    let mut spec = WindowSpec::new(16);
    for story_only in [false, true] {
        spec.story_only_loss = story_only;
        let set = make_windows(&corpus, &spec)?;
        let w = &set.windows[0];
        let counted = w.loss_mask.iter().filter(|&&m| m).count();
        println!(
            "story_only_loss = {story_only}: {} windows of T = {}, first counts {counted} targets",
            set.windows.len(),
            w.len()
        );
    }
    let w = &make_windows(&corpus, &WindowSpec::new(16))?.windows[0];
    println!("input  {:?}", tok.decode(&w.input)?);
    println!("target {:?}", tok.decode(&w.target)?);

    let (train, val) = split(
        &corpus,
        &SplitSpec {
            val_frac: 0.34,
            seed: 5,
        },
    )?;
    println!("split: {} train, {} val", train.len(), val.len());

    let dir = tempfile_dir("corpus_windows");
    let path = dir.join("corpus.jsonl");
    write_jsonl(&path, &corpus)?;
    let mut text = std::fs::read_to_string(&path)?;
    text.push_str("{\"prompt\": 3}\n");
    std::fs::write(&path, text)?;
    let back = ingest(&path, CorpusFormat::Jsonl)?;
    println!(
        "re-read {} examples from {}, rejected {:?}",
        back.len(),
        path.display(),
        back.malformed
    );
    Ok(())
}

fn tempfile_dir(name: &str) -> std::path::PathBuf {
    let d = std::env::temp_dir().join("evelm-examples").join(name);
    std::fs::create_dir_all(&d).unwrap();
    d
}
