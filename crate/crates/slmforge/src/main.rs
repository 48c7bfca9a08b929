//! Thin command-line front end over the library: each subcommand loads the
//! layered config, applies flag overrides, calls one library entry point,
//! and echoes the effective config into its output directory. Diagnostics
//! go to standard error; only payload (prompt text or JSON) goes to
//! standard output.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use slmforge::corpus::{build_dataset, read_pairs_jsonl, DatasetShards, Task};
use slmforge::distiller::{
    distill_run, read_intents_jsonl, teacher_key_from_env, GrammarTeacher, GrammarTeacherSpec,
    HttpTeacher, HttpTeacherConfig, SafetyFilter, Teacher, TEACHER_KEY_ENV,
};
use slmforge::evaluator::{
    emit_report, judge_relevance, length_adherence, measured_lengths, read_samples_jsonl,
    EvalReport, HttpJudgeConfig, JudgeConfig, ModalityReport, ReportReferences,
};
use slmforge::model::ModelConfig;
use slmforge::runconfig::RunConfig;
use slmforge::sampler::{bench_throughput, generate, GenSpec};
use slmforge::tokenizer::{train_bpe, ControlToken, TokenizerArtifact};
use slmforge::trainer::{load_checkpoint, train, MetricsRow, TrainState};

#[derive(Parser)]
#[command(
    name = "slmforge",
    version,
    about = "Desk-scale prompt-generation pipeline: tokenizer, data, distillation, training, generation, evaluation",
    propagate_version = true
)]
struct Cli {
    /// TOML config file; command-line flags override file values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the seed of every stage that draws randomness.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory (each command has its own default).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Emit machine-readable JSON on standard output.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenizer artifacts.
    #[command(subcommand)]
    Tokenizer(TokenizerCmd),
    /// Dataset shards.
    #[command(subcommand)]
    Data(DataCmd),
    /// Generate training pairs from intents with a teacher.
    Distill(DistillArgs),
    /// Train a model on packed shards.
    Train(TrainArgs),
    /// Generate one prompt from a checkpoint.
    Generate(GenerateArgs),
    /// Quantitative evaluation reports.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Generation throughput benchmark (JSON on stdout).
    Bench(BenchArgs),
}

#[derive(Subcommand)]
enum TokenizerCmd {
    /// Learn byte-level BPE merges with control tokens from a text corpus.
    Train(TokenizerTrainArgs),
}

#[derive(Args)]
struct TokenizerTrainArgs {
    /// UTF-8 text corpus to learn merges from.
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Total vocabulary size including byte and control tokens.
    #[arg(long, value_name = "N")]
    vocab: Option<usize>,
}

#[derive(Subcommand)]
enum DataCmd {
    /// Tokenize prompt pairs and pack them into training shards.
    Build(DataBuildArgs),
}

#[derive(Args)]
struct DataBuildArgs {
    /// Prompt pairs, one JSON object per line.
    #[arg(long, value_name = "FILE")]
    pairs: PathBuf,
    /// Tokenizer artifact.
    #[arg(long, value_name = "FILE")]
    tokenizer: PathBuf,
    #[arg(long, value_name = "N")]
    block_size: Option<usize>,
    #[arg(long, value_name = "F")]
    val_fraction: Option<f64>,
}

#[derive(Args)]
struct DistillArgs {
    /// Intent records, one JSON object per line.
    #[arg(long, value_name = "FILE")]
    intents: PathBuf,
    /// Teacher backend.
    #[arg(long, value_parser = ["grammar", "http"])]
    teacher: Option<String>,
    /// Chat-completion endpoint for the http teacher. The credential is
    /// read from the SLMFORGE_TEACHER_KEY environment variable.
    #[arg(long, value_name = "URL")]
    endpoint: Option<String>,
    /// Prompts per intent per task.
    #[arg(long, value_name = "N")]
    n: Option<usize>,
    #[arg(long, value_name = "N")]
    concurrency: Option<usize>,
    /// Blocklist file, one term per line.
    #[arg(long, value_name = "FILE")]
    blocklist: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Shard directory from `data build`.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Tokenizer artifact the shards were built with.
    #[arg(long, value_name = "FILE")]
    tokenizer: PathBuf,
    /// Resume from a checkpoint instead of initializing fresh.
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_name = "FILE")]
    ckpt: PathBuf,
    /// Tokenizer artifact; defaults to tokenizer.bin next to the checkpoint.
    #[arg(long, value_name = "FILE")]
    tokenizer: Option<PathBuf>,
    /// Intent as comma-separated `key: value` attributes.
    #[arg(long)]
    intent: String,
    #[arg(long, value_parser = ["IP", "TP"])]
    task: String,
    /// Commanded prompt length in words.
    #[arg(long, value_name = "N")]
    length: u32,
    #[arg(long, value_name = "F")]
    temperature: Option<f64>,
    #[arg(long, value_name = "N")]
    top_k: Option<usize>,
    #[arg(long, value_name = "N")]
    max_new_tokens: Option<usize>,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Word-count adherence per target length.
    Length(EvalSamplesArgs),
    /// Marker-rule task separation accuracy.
    Modality(EvalSamplesArgs),
    /// Judge-scored relevance.
    Relevance(EvalRelevanceArgs),
}

#[derive(Args)]
struct EvalSamplesArgs {
    /// Samples, one JSON object per line: {"target", "intent", "task", "text"}.
    #[arg(long, value_name = "FILE")]
    samples: PathBuf,
}

#[derive(Args)]
struct EvalRelevanceArgs {
    #[command(flatten)]
    samples: EvalSamplesArgs,
    /// Judge backend.
    #[arg(long, value_parser = ["mock", "http"])]
    judge: Option<String>,
    /// Chat-completion endpoint for the http judge.
    #[arg(long, value_name = "URL")]
    endpoint: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_name = "FILE")]
    ckpt: PathBuf,
    /// Tokenizer artifact; defaults to tokenizer.bin next to the checkpoint.
    #[arg(long, value_name = "FILE")]
    tokenizer: Option<PathBuf>,
    #[arg(long, default_value = "Topic: birthday, Scene object: balloon")]
    intent: String,
    #[arg(long, value_parser = ["IP", "TP"], default_value = "IP")]
    task: String,
    #[arg(long, value_name = "N", default_value_t = 12)]
    length: u32,
    /// Total runs; the first warms up and is not timed.
    #[arg(long, value_name = "N", default_value_t = 5)]
    runs: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    match &cli.command {
        Command::Tokenizer(TokenizerCmd::Train(args)) => cmd_tokenizer_train(cli, cfg, args),
        Command::Data(DataCmd::Build(args)) => cmd_data_build(cli, cfg, args),
        Command::Distill(args) => cmd_distill(cli, cfg, args),
        Command::Train(args) => cmd_train(cli, cfg, args),
        Command::Generate(args) => cmd_generate(cli, cfg, args),
        Command::Eval(cmd) => cmd_eval(cli, cfg, cmd),
        Command::Bench(args) => cmd_bench(cli, cfg, args),
    }
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn parse_task(s: &str) -> Task {
    match s {
        "IP" => Task::Ip,
        "TP" => Task::Tp,
        other => unreachable!("clap rejects task {other:?}"),
    }
}

fn load_tokenizer_near(ckpt: &Path, explicit: Option<&Path>) -> Result<TokenizerArtifact> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => ckpt.with_file_name("tokenizer.bin"),
    };
    TokenizerArtifact::load(&path).with_context(|| {
        format!(
            "tokenizer artifact {} (pass --tokenizer if it lives elsewhere)",
            path.display()
        )
    })
}

/// The checkpoint remembers which tokenizer trained it; refuse to decode
/// with a different one.
fn check_tokenizer_hash(state: &TrainState, artifact: &TokenizerArtifact) -> Result<()> {
    let have = artifact.content_hash_hex();
    if state.tokenizer_hash() != have {
        bail!(
            "checkpoint was trained with tokenizer {} but {} was supplied",
            state.tokenizer_hash(),
            have
        );
    }
    Ok(())
}

fn cmd_tokenizer_train(cli: &Cli, mut cfg: RunConfig, args: &TokenizerTrainArgs) -> Result<()> {
    if let Some(v) = args.vocab {
        cfg.tokenizer.vocab_size = v;
    }
    let out = out_dir(cli, "out/tokenizer");
    let corpus = fs::read(&args.corpus)
        .with_context(|| format!("corpus {}", args.corpus.display()))?;
    let artifact = train_bpe(&corpus, cfg.tokenizer.vocab_size, &ControlToken::standard_set())?;
    fs::create_dir_all(&out)?;
    let path = out.join("tokenizer.bin");
    artifact.save(&path)?;
    cfg.write_effective(&out)?;
    eprintln!(
        "tokenizer: {} tokens ({} merges), hash {} -> {}",
        artifact.vocab_size(),
        artifact.merges().len(),
        &artifact.content_hash_hex()[..12],
        path.display()
    );
    if cli.json {
        println!(
            "{}",
            serde_json::json!({
                "path": path,
                "vocab_size": artifact.vocab_size(),
                "n_merges": artifact.merges().len(),
                "content_hash": artifact.content_hash_hex(),
            })
        );
    } else {
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_data_build(cli: &Cli, mut cfg: RunConfig, args: &DataBuildArgs) -> Result<()> {
    if let Some(b) = args.block_size {
        cfg.data.block_size = b;
    }
    if let Some(f) = args.val_fraction {
        cfg.data.val_fraction = f;
    }
    let out = out_dir(cli, "out/data");
    let pairs = read_pairs_jsonl(&args.pairs)
        .with_context(|| format!("pairs {}", args.pairs.display()))?;
    let artifact = TokenizerArtifact::load(&args.tokenizer)
        .with_context(|| format!("tokenizer {}", args.tokenizer.display()))?;
    let shards = build_dataset(
        &pairs,
        &artifact,
        cfg.data.block_size,
        cfg.data.val_fraction,
        cfg.data.seed,
    )?;
    shards.save(&out)?;
    cfg.write_effective(&out)?;
    eprintln!(
        "data: {} pairs -> {} train / {} val blocks of {} tokens ({} skipped) -> {}",
        shards.meta.pairs_in,
        shards.meta.train_blocks,
        shards.meta.val_blocks,
        shards.meta.block_size,
        shards.meta.skipped_too_long + shards.meta.skipped_invalid,
        out.display()
    );
    if cli.json {
        println!("{}", serde_json::to_string(&shards.meta)?);
    } else {
        println!("{}", out.display());
    }
    Ok(())
}

fn cmd_distill(cli: &Cli, mut cfg: RunConfig, args: &DistillArgs) -> Result<()> {
    if let Some(t) = &args.teacher {
        cfg.distill.teacher = t.clone();
    }
    if let Some(e) = &args.endpoint {
        cfg.distill.endpoint = e.clone();
    }
    if let Some(n) = args.n {
        cfg.distill.n_per_intent = n;
    }
    if let Some(c) = args.concurrency {
        cfg.distill.concurrency = c;
    }
    let out = out_dir(cli, "out/distill");
    let records = read_intents_jsonl(&args.intents)
        .with_context(|| format!("intents {}", args.intents.display()))?;
    let filter = match &args.blocklist {
        Some(path) => SafetyFilter::from_file(path)
            .with_context(|| format!("blocklist {}", path.display()))?,
        None => SafetyFilter::new(Vec::<String>::new()),
    };
    let teacher: Box<dyn Teacher> = match cfg.distill.teacher.as_str() {
        "grammar" => Box::new(GrammarTeacher::new(GrammarTeacherSpec::standard(
            cfg.distill.seed,
        ))),
        "http" => {
            if cfg.distill.endpoint.is_empty() {
                bail!("the http teacher needs --endpoint (or [distill].endpoint)");
            }
            let mut tcfg = HttpTeacherConfig::new(cfg.distill.endpoint.clone());
            tcfg.seed = cfg.distill.seed;
            let key = teacher_key_from_env();
            if key.is_none() {
                eprintln!("note: {TEACHER_KEY_ENV} is not set; requests go out unauthenticated");
            }
            Box::new(HttpTeacher::new(tcfg, key)?)
        }
        other => bail!("unknown teacher {other:?} (expected grammar or http)"),
    };
    cfg.write_effective(&out)?;
    let report = distill_run(
        &records,
        teacher.as_ref(),
        &filter,
        cfg.distill.n_per_intent,
        cfg.distill.concurrency,
        &out,
    )?;
    eprintln!(
        "distill[{}]: {} accepted of {} teacher pairs ({} blocklisted, {} duplicate, {} failed jobs) -> {}",
        report.teacher,
        report.accepted,
        report.pairs_from_teacher,
        report.rejected_blocklist,
        report.rejected_duplicate,
        report.failures.len(),
        out.display()
    );
    if cli.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        println!("{}", out.join("pairs.jsonl").display());
    }
    Ok(())
}

fn cmd_train(cli: &Cli, cfg: RunConfig, args: &TrainArgs) -> Result<()> {
    let out = out_dir(cli, "out/train");
    let artifact = TokenizerArtifact::load(&args.tokenizer)
        .with_context(|| format!("tokenizer {}", args.tokenizer.display()))?;
    let shards = DatasetShards::load(&args.data)
        .with_context(|| format!("shards {}", args.data.display()))?;
    let mut state = match &args.resume {
        Some(path) => {
            let state = load_checkpoint(path, None)
                .with_context(|| format!("checkpoint {}", path.display()))?;
            eprintln!("resuming from {} at step {}", path.display(), state.step());
            state
        }
        None => {
            let mut model_cfg = ModelConfig::from(cfg.model);
            if model_cfg.vocab_size < artifact.vocab_size() {
                eprintln!(
                    "note: raising model vocab {} to tokenizer vocab {}",
                    model_cfg.vocab_size,
                    artifact.vocab_size()
                );
                model_cfg.vocab_size = artifact.vocab_size();
            }
            TrainState::new(model_cfg, cfg.train.into(), &artifact.content_hash_hex())?
        }
    };
    cfg.write_effective(&out)?;
    let mut log = |r: &MetricsRow| {
        eprintln!(
            "step {:>6}  train {:.4}  val {:.4}  lr {:.3e}  tok/s {:.0}",
            r.step, r.train_loss, r.val_loss, r.lr, r.tokens_per_sec
        );
    };
    let outcome = train(&mut state, &shards, &artifact, &out, Some(&mut log))?;
    eprintln!(
        "train: step {}, val {:.4} (best {:.4}) -> {}",
        outcome.final_step,
        outcome.final_val,
        outcome.best_val,
        out.display()
    );
    if cli.json {
        println!(
            "{}",
            serde_json::json!({
                "final_step": outcome.final_step,
                "initial_val": outcome.initial_val,
                "final_val": outcome.final_val,
                "best_val": outcome.best_val,
                "metrics": outcome.metrics_path,
                "latest": outcome.latest_path,
                "best": outcome.best_path,
            })
        );
    } else {
        println!("{}", outcome.latest_path.display());
    }
    Ok(())
}

fn cmd_generate(cli: &Cli, mut cfg: RunConfig, args: &GenerateArgs) -> Result<()> {
    if let Some(t) = args.temperature {
        cfg.sample.temperature = t;
    }
    if let Some(k) = args.top_k {
        cfg.sample.top_k = k;
    }
    if let Some(m) = args.max_new_tokens {
        cfg.sample.max_new_tokens = m;
    }
    let state = load_checkpoint(&args.ckpt, None)
        .with_context(|| format!("checkpoint {}", args.ckpt.display()))?;
    let artifact = load_tokenizer_near(&args.ckpt, args.tokenizer.as_deref())?;
    check_tokenizer_hash(&state, &artifact)?;
    let spec = GenSpec {
        intent: args.intent.clone(),
        task: parse_task(&args.task),
        target_len: args.length,
        temperature: cfg.sample.temperature,
        top_k: cfg.sample.top_k,
        max_new_tokens: cfg.sample.max_new_tokens,
        seed: cfg.sample.seed,
    };
    let prompt = generate(&state.params, &artifact, &spec)?;
    eprintln!(
        "generated {} words ({} tokens) in {:.0} ms",
        prompt.realized_len,
        prompt.tokens_emitted,
        prompt.elapsed * 1e3
    );
    if cli.json {
        println!("{}", serde_json::to_string(&prompt)?);
    } else {
        println!("{}", prompt.text);
    }
    Ok(())
}

fn cmd_eval(cli: &Cli, mut cfg: RunConfig, cmd: &EvalCmd) -> Result<()> {
    let out = out_dir(cli, "out/eval");
    let mut report = EvalReport::new();
    let samples_path = match cmd {
        EvalCmd::Length(a) | EvalCmd::Modality(a) => &a.samples,
        EvalCmd::Relevance(a) => &a.samples.samples,
    };
    let samples = read_samples_jsonl(samples_path)
        .with_context(|| format!("samples {}", samples_path.display()))?;
    match cmd {
        EvalCmd::Length(_) => {
            let length = length_adherence(&measured_lengths(&samples))?;
            for row in &length.rows {
                eprintln!(
                    "target {:>3}: mean {:.2}, mse {:.3}, within +/-2 {:.1}% (n={})",
                    row.target, row.mean_len, row.mse, row.pct_within_2, row.n
                );
            }
            report.length = Some(length);
        }
        EvalCmd::Modality(_) => {
            let tuples: Vec<(Task, String)> = samples
                .iter()
                .map(|s| (s.task, s.text.clone()))
                .collect();
            let modality = ModalityReport::compute(&tuples)?;
            eprintln!(
                "modality separation: {:.4} over {} samples",
                modality.accuracy, modality.n
            );
            report.modality = Some(modality);
        }
        EvalCmd::Relevance(a) => {
            if let Some(j) = &a.judge {
                cfg.eval.judge = j.clone();
            }
            if let Some(e) = &a.endpoint {
                cfg.eval.endpoint = e.clone();
            }
            let mut judge_cfg = match cfg.eval.judge.as_str() {
                "mock" => JudgeConfig::mock(),
                "http" => {
                    if cfg.eval.endpoint.is_empty() {
                        bail!("the http judge needs --endpoint (or [eval].endpoint)");
                    }
                    JudgeConfig::http(HttpJudgeConfig::new(cfg.eval.endpoint.clone()))
                }
                other => bail!("unknown judge {other:?} (expected mock or http)"),
            };
            judge_cfg.concurrency = cfg.eval.concurrency;
            let relevance = judge_relevance(&samples, &judge_cfg)?;
            for row in &relevance.per_task {
                eprintln!(
                    "relevance[{}] {:?}: mean {:.2} over {} scores",
                    relevance.judge, row.task, row.mean, row.n_scores
                );
            }
            if relevance.incomplete {
                eprintln!(
                    "warning: {} scoring requests failed; report flagged incomplete",
                    relevance.failures.len()
                );
            }
            report.relevance = Some(relevance);
        }
    }
    let paths = emit_report(&report, &out)?;
    cfg.write_effective(&out)?;
    eprintln!("report -> {} and {}", paths.json.display(), paths.markdown.display());
    if cli.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        println!("{}", paths.json.display());
    }
    Ok(())
}

fn cmd_bench(cli: &Cli, cfg: RunConfig, args: &BenchArgs) -> Result<()> {
    let state = load_checkpoint(&args.ckpt, None)
        .with_context(|| format!("checkpoint {}", args.ckpt.display()))?;
    let artifact = load_tokenizer_near(&args.ckpt, args.tokenizer.as_deref())?;
    check_tokenizer_hash(&state, &artifact)?;
    let spec = GenSpec {
        intent: args.intent.clone(),
        task: parse_task(&args.task),
        target_len: args.length,
        temperature: cfg.sample.temperature,
        top_k: cfg.sample.top_k,
        max_new_tokens: cfg.sample.max_new_tokens,
        seed: cfg.sample.seed,
    };
    let report = bench_throughput(&state.params, &artifact, &spec, args.runs)?;
    eprintln!(
        "bench: median {:.0} tok/s (p10 {:.0}, p90 {:.0}), peak rss {:.0} MB, {} timed runs",
        report.median_tps,
        report.p10_tps,
        report.p90_tps,
        report.peak_rss_bytes as f64 / (1024.0 * 1024.0),
        report.runs.len()
    );
    let payload = serde_json::json!({
        "measured": report,
        "reference": ReportReferences::paper().throughput,
    });
    if let Some(out) = &cli.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("bench.json"), format!("{payload:#}\n"))?;
        cfg.write_effective(out)?;
        eprintln!("bench report -> {}", out.join("bench.json").display());
    }
    println!("{payload}");
    Ok(())
}
