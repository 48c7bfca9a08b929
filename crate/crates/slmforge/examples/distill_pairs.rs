//! Run a full distillation pass with the offline grammar teacher: intents
//! in, safety filtering and dedup in the middle, pairs.jsonl and a run
//! report out.

use anyhow::Result;
use slmforge::distiller::{
    distill_run, sanitize_and_dedup, GrammarTeacher, GrammarTeacherSpec, IntentRecord,
    SafetyFilter,
};

fn main() -> Result<()> {
    let records: Vec<IntentRecord> = (0..10)
        .map(|i| {
            IntentRecord::new(vec![
                ("Topic", format!("festival {i}")),
                ("Scene object", format!("lantern {i}")),
            ])
        })
        .collect();

    let teacher = GrammarTeacher::new(GrammarTeacherSpec::standard(42));
    let filter = SafetyFilter::new(["gore"]);
    let out = tempfile::tempdir()?;

    let report = distill_run(&records, &teacher, &filter, 4, 3, out.path())?;
    println!(
        "teacher={} jobs={} pairs={} accepted={} blocklisted={} duplicates={} failures={}",
        report.teacher,
        report.jobs,
        report.pairs_from_teacher,
        report.accepted,
        report.rejected_blocklist,
        report.rejected_duplicate,
        report.failures.len(),
    );

    let pairs = slmforge::corpus::read_pairs_jsonl(&out.path().join("pairs.jsonl"))?;
    println!("\nfirst three accepted pairs:");
    for pair in &pairs[..3] {
        println!("  [{:?}] {} => {}", pair.task, pair.intent, pair.prompt);
    }

    // Sanitization is idempotent: a second pass changes nothing.
    let (again, stats) = sanitize_and_dedup(pairs.clone(), &filter);
    assert_eq!(again, pairs);
    assert_eq!(stats.rejected_blocklist + stats.rejected_duplicate, 0);
    println!("\nre-sanitizing the accepted set rejects nothing (idempotent)");
    Ok(())
}
