//! Command-line front end: data generation, training, evaluation, decoding,
//! oracle checks and convergence reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vctc_core::decoding::{BeamConfig, NGramLm};
use vctc_core::harness::{
    convergence_report, decode_dataset, evaluate, generate_dataset, parse_key_values, resume, run_oracle_suite,
    train, Dataset, DecodeMode, DecodeOptions, EvalReport, SyntheticTaskSpec, TrainConfig, TrainData,
};
use vctc_core::models::{Model, Variant};
use vctc_core::autodiff::TensorArchive;

#[derive(Parser)]
#[command(name = "vctc", version, about = "Variational CTC toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Generate(GenerateArgs),
    /// Train a model, writing metrics and checkpoints.
    Train(TrainArgs),
    /// Decode a dataset with a checkpoint and report error rates.
    Evaluate(EvalArgs),
    /// Print per-utterance decodes.
    Decode(DecodeArgs),
    /// Compare the fast paths with their brute-force oracles.
    OracleCheck(OracleArgs),
    /// Summarize dev/test gaps across metrics files.
    Report(ReportArgs),
    /// Estimate an n-gram LM from a dataset's transcripts.
    TrainLm(TrainLmArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    /// Number of utterances.
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// `key = value` file of task settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task setting override, e.g. `--set noise_std=0.5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// `key = value` file of training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write a JSON run summary here.
    #[arg(long)]
    summary: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    /// `geometric` or `linear`.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    kl_weight: Option<f64>,
    #[arg(long)]
    kl_warmup: Option<usize>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    d_z: Option<usize>,
    #[arg(long)]
    d_hidden: Option<usize>,
    #[arg(long)]
    gru_hidden: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    record_wall_clock: bool,
    /// Stop (and checkpoint) after this many steps; continue with --resume.
    #[arg(long)]
    halt_after: Option<usize>,
}

impl TrainArgs {
    fn flag_pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        let s = |v: &Option<String>| v.clone();
        let n = |v: Option<usize>| v.map(|v| v.to_string());
        let f = |v: Option<f64>| v.map(|v| v.to_string());
        let p = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string());
        // Variant first: it resets the loss to the variant's own.
        put("variant", s(&self.variant));
        put("loss", s(&self.loss));
        put("batch_size", n(self.batch_size));
        put("steps", n(self.steps));
        put("lr_start", f(self.lr_start));
        put("lr_end", f(self.lr_end));
        put("schedule", s(&self.schedule));
        put("kl_weight", f(self.kl_weight));
        put("kl_warmup", n(self.kl_warmup));
        put("mc_samples", n(self.mc_samples));
        put("seed", self.seed.map(|v| v.to_string()));
        put("d_z", n(self.d_z));
        put("d_hidden", n(self.d_hidden));
        put("gru_hidden", n(self.gru_hidden));
        put("eval_every", n(self.eval_every));
        put("checkpoint_every", n(self.checkpoint_every));
        put("checkpoint", p(&self.checkpoint));
        put("metrics", p(&self.metrics));
        put("halt_after", n(self.halt_after));
        if self.record_wall_clock {
            put("record_wall_clock", Some("true".into()));
        }
        out
    }
}

#[derive(Args)]
struct DecodeFlags {
    /// Beam width; best-path decoding when absent.
    #[arg(long)]
    beam: Option<usize>,
    /// ARPA-format LM used by beam search.
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    lm_weight: f64,
    #[arg(long, default_value_t = 0.0)]
    insertion_bonus: f64,
    /// Cap on the LM history length plus one.
    #[arg(long)]
    lm_order: Option<usize>,
    #[arg(long, default_value_t = 3)]
    bucket_width: usize,
}

impl DecodeFlags {
    fn options(&self, model: &Model) -> Result<DecodeOptions> {
        let lm = match &self.lm {
            Some(p) => Some(NGramLm::load(p, &model.config().vocab).with_context(|| format!("loading {}", p.display()))?),
            None => None,
        };
        let mode = match self.beam {
            Some(w) => DecodeMode::Beam(BeamConfig {
                beam_width: w,
                lm_order: self.lm_order,
                lm_weight: self.lm_weight,
                insertion_bonus: self.insertion_bonus,
            }),
            None if lm.is_some() => bail!("--lm requires --beam"),
            None => DecodeMode::BestPath,
        };
        Ok(DecodeOptions {
            mode,
            lm,
            bucket_width: self.bucket_width,
        })
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    decode: DecodeFlags,
    /// Write the report as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    decode: DecodeFlags,
    /// Decode only the first N utterances.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    instances: usize,
    #[arg(long, default_value_t = 100_000)]
    mc_samples: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics files; ratios compare every pair.
    #[arg(required = true)]
    metrics: Vec<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct TrainLmArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 4)]
    order: usize,
    #[arg(long)]
    out: PathBuf,
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    let archive = TensorArchive::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(Model::from_archive(&archive)?)
}

fn split_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) => Ok((k.trim().to_string(), v.trim().to_string())),
        None => bail!("expected KEY=VALUE, got {s:?}"),
    }
}

fn generate(args: &GenerateArgs) -> Result<()> {
    let mut spec = SyntheticTaskSpec::default();
    if let Some(c) = &args.config {
        spec.apply(&parse_key_values(&std::fs::read_to_string(c)?)?)?;
    }
    let pairs = args.overrides.iter().map(|s| split_override(s)).collect::<Result<Vec<_>>>()?;
    spec.apply(&pairs)?;
    let data = generate_dataset(&spec, args.count)?;
    data.save(&args.out)?;
    let frames: usize = data.samples.iter().map(|s| s.frames()).sum();
    println!("wrote {} utterances ({frames} frames) to {}", data.len(), args.out.display());
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::new(Variant::Ci);
    if let Some(c) = &args.config {
        cfg.apply(&parse_key_values(&std::fs::read_to_string(c)?)?)?;
    }
    cfg.apply(&args.flag_pairs())?;
    let train_set = load_dataset(&args.train)?;
    let dev = args.dev.as_deref().map(load_dataset).transpose()?;
    let test = args.test.as_deref().map(load_dataset).transpose()?;
    let data = TrainData {
        train: &train_set,
        dev: dev.as_ref(),
        test: test.as_ref(),
    };
    let out = match &args.resume {
        Some(ckpt) => resume(&cfg, data, ckpt)?,
        None => train(&cfg, data)?,
    };
    if let Some(last) = out.records.last() {
        println!(
            "step {} loss {:.4} (prediction {:.4}, regularization {:.4}) dev {:.4} test {:.4}",
            last.step,
            last.train.total,
            last.train.prediction_term,
            last.train.regularization_term,
            last.dev_error_rate,
            last.test_error_rate
        );
    }
    if let Some(path) = &args.summary {
        let records: Vec<_> = out
            .records
            .iter()
            .map(|r| {
                serde_json::json!({
                    "step": r.step,
                    "train": r.train,
                    "lr": r.lr,
                    "dev_error_rate": finite_or_null(r.dev_error_rate),
                    "test_error_rate": finite_or_null(r.test_error_rate),
                })
            })
            .collect();
        let summary = serde_json::json!({
            "config": cfg.to_pairs(),
            "parameters": out.model.num_parameters(),
            "final_step": out.step,
            "records": records,
        });
        std::fs::write(path, serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(())
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::Value::Null
    }
}

fn print_report(r: &EvalReport) {
    println!(
        "utterances {}  reference tokens {}  error rate {:.4}  (S {} / I {} / D {})",
        r.utterances, r.ref_tokens, r.error_rate, r.errors.substitutions, r.errors.insertions, r.errors.deletions
    );
    println!("{:>10} {:>6} {:>8} {:>8} {:>5} {:>5} {:>5}", "length", "utts", "tokens", "rate", "S", "I", "D");
    for b in &r.buckets {
        println!(
            "{:>10} {:>6} {:>8} {:>8.4} {:>5} {:>5} {:>5}",
            format!("{}-{}", b.min_len, b.max_len),
            b.utterances,
            b.ref_tokens,
            b.error_rate,
            b.errors.substitutions,
            b.errors.insertions,
            b.errors.deletions
        );
    }
}

fn run_evaluate(args: &EvalArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let data = load_dataset(&args.data)?;
    let report = evaluate(&model, &data, &args.decode.options(&model)?)?;
    print_report(&report);
    if let Some(p) = &args.json {
        std::fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn run_decode(args: &DecodeArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let mut data = load_dataset(&args.data)?;
    if let Some(n) = args.limit {
        data.samples.truncate(n);
    }
    let results = decode_dataset(&model, &data, &args.decode.options(&model)?)?;
    let vocab = &model.config().vocab;
    let words = |ids: &[usize]| -> String {
        ids.iter().map(|&i| vocab.symbol(i).unwrap_or("?")).collect::<Vec<_>>().join(" ")
    };
    for (i, (r, s)) in results.iter().zip(&data.samples).enumerate() {
        println!("{i}\thyp: {}\tref: {}\tframes: {:?}\tscore: {:.4}", words(r.tokens.tokens()), words(s.y.tokens()), r.emission_frames, r.score.0);
    }
    Ok(())
}

fn run_oracle(args: &OracleArgs) -> Result<bool> {
    let checks = run_oracle_suite(args.seed, args.instances, args.mc_samples)?;
    for c in &checks {
        println!(
            "{} {:<40} instances {:>5}  worst {:.3e}  tolerance {:.1e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.instances,
            c.worst,
            c.tolerance
        );
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn run_report(args: &ReportArgs) -> Result<()> {
    let report = convergence_report(&args.metrics)?;
    println!("{:>4} {:>8} {:>8} {:>9}  source", "run", "dev", "test", "gap");
    for (i, r) in report.runs.iter().enumerate() {
        println!("{i:>4} {:>8.4} {:>8.4} {:>+9.4}  {}", r.final_dev, r.final_test, r.final_gap, r.source.display());
    }
    if report.runs.len() > 1 {
        println!("gap reduction of row run against column run:");
        for (i, row) in report.reduction.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .map(|v| v.map_or("      n/a".into(), |v| format!("{:>8.2}%", 100.0 * v)))
                .collect();
            println!("{i:>4} {}", cells.join(" "));
        }
    }
    if let Some(p) = &args.json {
        std::fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn run_train_lm(args: &TrainLmArgs) -> Result<()> {
    let data = load_dataset(&args.data)?;
    let lm = NGramLm::train(&data.vocab, args.order, &data.transcripts())?;
    lm.save(&args.out)?;
    println!("wrote {}-gram LM over {} symbols to {}", args.order, data.vocab.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Decode(a) => run_decode(a),
        Command::OracleCheck(a) => match run_oracle(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::FAILURE,
            Err(e) => Err(e),
        },
        Command::Report(a) => run_report(a),
        Command::TrainLm(a) => run_train_lm(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
