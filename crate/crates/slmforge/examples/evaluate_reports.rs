//! Build all three evaluation report sections from synthetic samples:
//! length control, modality separation, and judged relevance (mock judge,
//! fully offline). Writes report.json and report.md and prints the
//! markdown, including the full-scale reference rows.

use anyhow::Result;
use slmforge::corpus::Task;
use slmforge::evaluator::{
    emit_report, judge_relevance, length_adherence, measured_lengths, EvalReport,
    EvalSample, JudgeConfig, ModalityReport,
};

fn main() -> Result<()> {
    // Synthetic generations: mostly on-target lengths, task-appropriate text.
    let mut samples = Vec::new();
    for target in [8u32, 12, 16] {
        for i in 0..10u32 {
            let jitter = [0i64, 0, 1, -1, 0, 0, 2, 0, -1, 0][i as usize % 10];
            let n = (target as i64 + jitter).max(1) as usize;
            let (task, filler) = if i % 2 == 0 {
                (Task::Ip, "lantern")
            } else {
                (Task::Tp, "template")
            };
            let words = vec![filler; n].join(" ");
            samples.push(EvalSample {
                target,
                intent: format!("Topic: festival {i}, Scene object: lantern"),
                task,
                text: words,
            });
        }
    }

    let length = length_adherence(&measured_lengths(&samples))?;
    for row in &length.rows {
        println!(
            "target {:>2}: mean {:>5.2}  mse {:.3}  within±2 {:>5.1}%  (n={})",
            row.target, row.mean_len, row.mse, row.pct_within_2, row.n
        );
    }

    let labeled: Vec<(Task, String)> =
        samples.iter().map(|s| (s.task, s.text.clone())).collect();
    let modality = ModalityReport::compute(&labeled)?;
    println!(
        "modality separation: {:.3} over {} samples",
        modality.accuracy, modality.n
    );

    let prompts: Vec<EvalSample> = samples.iter().take(12).cloned().collect();
    let relevance = judge_relevance(&prompts, &JudgeConfig::mock())?;
    for tm in &relevance.per_task {
        println!(
            "judge mean for {}: {:.2} (n={})",
            tm.task, tm.mean, tm.n_scores
        );
    }

    let report = EvalReport {
        length: Some(length),
        modality: Some(modality),
        relevance: Some(relevance),
        ..EvalReport::default()
    };
    let dir = tempfile::tempdir()?;
    let paths = emit_report(&report, dir.path())?;
    println!("\n--- {} ---", paths.markdown.display());
    println!("{}", std::fs::read_to_string(&paths.markdown)?);
    Ok(())
}
