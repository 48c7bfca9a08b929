//! End-to-end micro training run on a synthetic command-token corpus.
//! Small enough to finish in well under a minute on a laptop CPU while
//! still showing the full loop: metrics rows, checkpoints, and resume.

use anyhow::Result;
use slmforge::corpus::{build_dataset, format_instance, PromptPair, Task};
use slmforge::distiller::{grammar_generate, GrammarTeacherSpec, IntentRecord};
use slmforge::model::ModelConfig;
use slmforge::tokenizer::{train_bpe, ControlToken};
use slmforge::trainer::{load_checkpoint, train, TrainConfig, TrainState};

fn main() -> Result<()> {
    let spec = GrammarTeacherSpec::standard(5);
    let mut pairs = Vec::new();
    for i in 0..60 {
        let record = IntentRecord::new(vec![
            ("Topic", format!("subject {i}")),
            ("Scene object", format!("object {i}")),
        ]);
        for task in [Task::Ip, Task::Tp] {
            for target in [6u32, 9, 12] {
                pairs.push(PromptPair {
                    intent: record.rendered(),
                    prompt: grammar_generate(&record, task, target, 70 + i, &spec)?,
                    task,
                    source: None,
                });
            }
        }
    }

    let mut text = String::new();
    for p in &pairs {
        text.push_str(&format_instance(p)?.text);
        text.push('\n');
    }
    let artifact = train_bpe(text.as_bytes(), 512, &ControlToken::standard_set())?;
    let shards = build_dataset(&pairs, &artifact, 64, 0.1, 1337)?;

    let model_cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 64,
        vocab_size: artifact.vocab_size(),
        context_len: 64,
        tie_embeddings: true,
        dropout: 0.0,
    };
    let train_cfg = TrainConfig {
        max_iters: 60,
        warmup_iters: 10,
        batch_size: 8,
        eval_interval: 20,
        eval_batches: 4,
        ..TrainConfig::desk()
    };

    let dir = tempfile::tempdir()?;
    let mut state = TrainState::new(model_cfg, train_cfg, &artifact.content_hash_hex())?;
    let outcome = train(
        &mut state,
        &shards,
        &artifact,
        dir.path(),
        Some(&mut |row| {
            println!(
                "step {:>3}  train {:.4}  val {:.4}  lr {:.2e}",
                row.step, row.train_loss, row.val_loss, row.lr
            );
        }),
    )?;
    println!(
        "initial val {:.4} -> final val {:.4} (best {:.4})",
        outcome.initial_val, outcome.final_val, outcome.best_val
    );
    assert!(outcome.final_val < outcome.initial_val, "loss must drop");

    // Resume from the latest checkpoint: step counter carries on.
    let resumed = load_checkpoint(&outcome.latest_path, None)?;
    println!("checkpoint resumes at step {}", resumed.step());
    assert_eq!(resumed.step(), outcome.final_step);
    Ok(())
}
