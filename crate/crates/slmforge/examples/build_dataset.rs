//! Turn intent/prompt pairs into fixed-size training blocks: format each
//! pair as a command-token instance, tokenize, pack into blocks, and split
//! into train/val shards. Prints the shard metadata and decodes one block
//! back to text so the packing is visible.

use anyhow::Result;
use slmforge::corpus::{build_dataset, format_instance, PromptPair, Task};
use slmforge::distiller::{grammar_generate, GrammarTeacherSpec, IntentRecord};
use slmforge::tokenizer::{train_bpe, ControlToken};

fn main() -> Result<()> {
    // Synthesize a small deterministic corpus.
    let spec = GrammarTeacherSpec::standard(11);
    let mut pairs = Vec::new();
    for i in 0..40 {
        let record = IntentRecord::new(vec![
            ("Topic", format!("theme {i}")),
            ("Scene object", format!("object {i}")),
        ]);
        for task in [Task::Ip, Task::Tp] {
            for target in [6u32, 9, 12] {
                let prompt = grammar_generate(&record, task, target, 900 + i, &spec)?;
                pairs.push(PromptPair {
                    intent: record.rendered(),
                    prompt,
                    task,
                    source: None,
                });
            }
        }
    }
    println!("pairs: {}", pairs.len());

    // Tokenizer trained on the instances themselves.
    let mut text = String::new();
    for p in &pairs {
        text.push_str(&format_instance(p)?.text);
        text.push('\n');
    }
    let artifact = train_bpe(text.as_bytes(), 512, &ControlToken::standard_set())?;
    println!("vocab: {}", artifact.vocab_size());

    let shards = build_dataset(&pairs, &artifact, 64, 0.1, 1337)?;
    let meta = &shards.meta;
    println!(
        "packed {} instances into {} train + {} val blocks (block_size {})",
        meta.instances_packed, meta.train_blocks, meta.val_blocks, meta.block_size
    );
    println!(
        "skipped: {} too long, {} invalid",
        meta.skipped_too_long, meta.skipped_invalid
    );

    // Round-trip through disk.
    let dir = tempfile::tempdir()?;
    shards.save(dir.path())?;
    let reloaded = slmforge::corpus::DatasetShards::load(dir.path())?;
    assert_eq!(reloaded.meta.train_blocks, meta.train_blocks);

    // Show the first training block as text.
    let block = reloaded.train.block(0);
    println!("first block decoded:\n{}", artifact.decode(block)?);
    Ok(())
}
