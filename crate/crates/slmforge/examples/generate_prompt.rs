//! Train a micro model on grammar-generated pairs, then sample from it
//! with length and modality conditioning. A model this small already
//! copies the intent and separates the two task styles; tight word-count
//! adherence needs the full-size configuration exercised in the test
//! suite, so expect realized lengths to only roughly track the targets
//! here.

use anyhow::Result;
use slmforge::corpus::{build_dataset, format_instance, PromptPair, Task};
use slmforge::distiller::{grammar_generate, GrammarTeacherSpec, IntentRecord};
use slmforge::model::ModelConfig;
use slmforge::sampler::{generate, GenSpec};
use slmforge::tokenizer::{train_bpe, ControlToken};
use slmforge::trainer::{load_checkpoint, train, TrainConfig, TrainState};

fn main() -> Result<()> {
    // Small, regular corpus: few topics and targets, so a micro model can
    // pick up the length pattern in a few hundred steps.
    let spec = GrammarTeacherSpec::standard(3);
    let mut pairs = Vec::new();
    for i in 0..16 {
        let record = IntentRecord::new(vec![
            ("Topic", format!("scene {i}")),
            ("Scene object", format!("prop {i}")),
        ]);
        for task in [Task::Ip, Task::Tp] {
            for target in [6u32, 8, 10] {
                pairs.push(PromptPair {
                    intent: record.rendered(),
                    prompt: grammar_generate(&record, task, target, 300 + i, &spec)?,
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
    let artifact = train_bpe(text.as_bytes(), 480, &ControlToken::standard_set())?;
    let shards = build_dataset(&pairs, &artifact, 64, 0.05, 1337)?;

    let model_cfg = ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 96,
        vocab_size: artifact.vocab_size(),
        context_len: 64,
        tie_embeddings: true,
        dropout: 0.0,
    };
    let train_cfg = TrainConfig {
        max_iters: 1000,
        warmup_iters: 100,
        batch_size: 16,
        eval_interval: 100,
        eval_batches: 4,
        ..TrainConfig::desk()
    };

    let dir = tempfile::tempdir()?;
    let mut state = TrainState::new(model_cfg, train_cfg, &artifact.content_hash_hex())?;
    eprintln!("training micro model (1000 steps)...");
    let outcome = train(&mut state, &shards, &artifact, dir.path(), None)?;
    eprintln!(
        "val loss {:.3} -> {:.3}",
        outcome.initial_val, outcome.final_val
    );

    let state = load_checkpoint(&outcome.best_path, None)?;
    let intent = "Topic: scene 7, Scene object: prop 7";
    for task in [Task::Ip, Task::Tp] {
        for target in [6u32, 8, 10] {
            let mut gen_spec = GenSpec::new(intent, task, target);
            gen_spec.temperature = 0.0;
            gen_spec.seed = 9;
            let out = generate(&state.params, &artifact, &gen_spec)?;
            println!(
                "task {:?} target {:>2} -> realized {:>2}: {}",
                task, target, out.realized_len, out.text
            );
        }
    }
    Ok(())
}
