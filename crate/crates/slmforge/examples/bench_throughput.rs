//! Measure sampling throughput on a randomly initialized micro model.
//! Every run generates with the same conditioning; the report carries the
//! median, p10, and p90 tokens/sec plus peak RSS, alongside the published
//! full-scale reference numbers.

use anyhow::Result;
use slmforge::corpus::Task;
use slmforge::evaluator::ReportReferences;
use slmforge::model::{count_params, init_params, ModelConfig};
use slmforge::sampler::{bench_throughput, GenSpec};
use slmforge::tokenizer::{train_bpe, ControlToken};

fn main() -> Result<()> {
    let mut text = String::new();
    for i in 0..64 {
        text.push_str(&format!(
            "a photo of a paper lantern {i} at a night market, warm light, bokeh, \
             soft focus, golden glow, festival crowd {i}, rainy street reflections\n"
        ));
    }
    let artifact = train_bpe(text.as_bytes(), 400, &ControlToken::standard_set())?;

    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 64,
        vocab_size: artifact.vocab_size(),
        context_len: 128,
        tie_embeddings: true,
        dropout: 0.0,
    };
    println!("model: {} params", count_params(&cfg));
    let params = init_params::<f32>(&cfg, 1234)?;

    let mut spec = GenSpec::new("Topic: market, Scene object: lantern", Task::Ip, 12);
    spec.max_new_tokens = 48;
    spec.seed = 7;

    let report = bench_throughput(&params, &artifact, &spec, 5)?;
    let payload = serde_json::json!({
        "measured": report,
        "reference": ReportReferences::paper().throughput,
    });
    println!("{}", serde_json::to_string_pretty(&payload)?);
    Ok(())
}
