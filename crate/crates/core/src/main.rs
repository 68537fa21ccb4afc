//! `tidewater` command-line tool.
//!
//! Exit status: 0 on success, 1 on a usage error (flags or configuration),
//! 2 when the command fails at run time.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tidewater::aimnet::AimNet;
use tidewater::bank::ReliableBank;
use tidewater::eval::{
    evaluate_full_reference, evaluate_non_reference, load_pairs, make_synth, Identity, NetworkRestorer, Restorer,
    SynthOptions,
};
use tidewater::imaging::load_image;
use tidewater::iqa::{default_alpha_grid, monotonicity_reliability, scorer_by_name, QualityScorer, DEFAULT_TIMEOUT};
use tidewater::plot::{plot_reliability, plot_training_log};
use tidewater::trainer::{
    infer, list_images, load_network, Corpus, NetworkChoice, TrainConfig, TrainError, Trainer, LOG_FILE,
};

#[derive(Parser)]
#[command(name = "tidewater", version, about = "Semi-supervised underwater image restoration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, the loss log and its plot under --out.
    Train(TrainArgs),
    /// Restore one image or every image of a directory.
    Infer(InferArgs),
    /// PSNR and SSIM over a directory with degraded/ and clean/ pairs.
    EvalFr(EvalFrArgs),
    /// No-reference scores of restored outputs next to those of the inputs.
    EvalNr(EvalNrArgs),
    /// Blend-path monotonicity of a no-reference scorer over clean/degraded pairs.
    IqaReliability(ReliabilityArgs),
    /// Summarize a persisted reliable bank.
    BankInspect(BankArgs),
    /// Generate synthetic degraded/clean pairs with a manifest.
    MakeSynth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML configuration; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set ablation.use_contrastive=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Start from the small CPU configuration with this many epochs.
    #[arg(long, value_name = "EPOCHS")]
    desk: Option<usize>,
    /// Epoch checkpoint directory to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum NetworkArg {
    Teacher,
    Student,
}

impl From<NetworkArg> for NetworkChoice {
    fn from(n: NetworkArg) -> Self {
        match n {
            NetworkArg::Teacher => NetworkChoice::Teacher,
            NetworkArg::Student => NetworkChoice::Student,
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Training checkpoint (state.ckpt or its epoch directory).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "teacher")]
    network: NetworkArg,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Image file or directory of images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalFrArgs {
    /// Evaluates the raw inputs when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "teacher")]
    network: NetworkArg,
    #[arg(long)]
    pairs: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalNrArgs {
    /// Evaluates the raw inputs when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "teacher")]
    network: NetworkArg,
    #[arg(long)]
    images: PathBuf,
    /// `uiqm`, `uciqe` or `external:<command with {input}>`; repeatable.
    #[arg(long = "scorer", default_values = ["uiqm", "uciqe"])]
    scorers: Vec<String>,
    /// Seconds allowed per external scorer call.
    #[arg(long, default_value_t = DEFAULT_TIMEOUT.as_secs())]
    timeout: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReliabilityArgs {
    #[arg(long)]
    scorer: String,
    /// Directory with degraded/ and clean/ pairs.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TIMEOUT.as_secs())]
    timeout: u64,
    /// Output CSV; a plot is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BankArgs {
    /// Bank directory (`<checkpoint>/bank`).
    #[arg(long)]
    bank: PathBuf,
    /// Optional CSV of every entry.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Clean source images; procedural scenes when omitted.
    #[arg(long)]
    clean: Option<PathBuf>,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(
                e.downcast_ref::<TrainError>(),
                Some(TrainError::InvalidConfig(_) | TrainError::ConfigParse(_))
            );
            ExitCode::from(if usage { 1 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Infer(a) => infer_cmd(a),
        Command::EvalFr(a) => eval_fr(a),
        Command::EvalNr(a) => eval_nr(a),
        Command::IqaReliability(a) => reliability(a),
        Command::BankInspect(a) => bank_inspect(a),
        Command::MakeSynth(a) => synth(a),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let text = a.config.as_ref().map(|p| fs::read_to_string(p).with_context(|| format!("reading {}", p.display())));
    let text = text.transpose()?;
    let base = a.desk.map_or_else(TrainConfig::default, TrainConfig::desk);
    let config = TrainConfig::load_over(&base, text.as_deref(), &a.overrides)?;
    let trainer = Trainer::new(config)?;
    let corpus = Corpus::load(&trainer.config)?;
    log::info!(
        "{} labeled pairs, {} unlabeled images, {} steps per epoch",
        corpus.labeled.len(),
        corpus.unlabeled.len(),
        trainer.steps_per_epoch(&corpus)
    );
    let state = trainer.train(&corpus, &a.out, a.resume.as_deref())?;
    let log_path = a.out.join(LOG_FILE);
    if state.step > 0 {
        plot_training_log(&log_path, &log_path.with_extension("png"))?;
    }
    println!("trained {} epochs ({} steps); reliable bank holds {} entries", state.epoch, state.step, state.bank.len());
    Ok(())
}

fn restorer(checkpoint: Option<&Path>, network: NetworkArg) -> Result<Box<dyn Restorer>> {
    Ok(match checkpoint {
        Some(p) => {
            let (net, weights): (AimNet, _) =
                load_network(p, network.into()).with_context(|| format!("loading {}", p.display()))?;
            Box::new(NetworkRestorer { net, weights })
        }
        None => Box::new(Identity),
    })
}

fn infer_cmd(a: InferArgs) -> Result<()> {
    let (net, weights) = load_network(&a.model.checkpoint, a.model.network.into())?;
    let inputs = if a.input.is_dir() { list_images(&a.input)? } else { vec![a.input.clone()] };
    if inputs.is_empty() {
        bail!("{} holds no images", a.input.display());
    }
    fs::create_dir_all(&a.out)?;
    for path in &inputs {
        let restored = infer(&net, &weights, &load_image(path)?)?;
        let name = Path::new(path.file_name().context("input has no file name")?).with_extension("png");
        restored.save_png(&a.out.join(name))?;
    }
    println!("restored {} images into {}", inputs.len(), a.out.display());
    Ok(())
}

fn eval_fr(a: EvalFrArgs) -> Result<()> {
    let r = restorer(a.checkpoint.as_deref(), a.network)?;
    let report = evaluate_full_reference(r.as_ref(), &a.pairs)?;
    report.write_csv(&a.out)?;
    println!("{} pairs: mean PSNR {:.3} dB, mean SSIM {:.4}", report.rows.len(), report.mean_psnr, report.mean_ssim);
    Ok(())
}

fn eval_nr(a: EvalNrArgs) -> Result<()> {
    let r = restorer(a.checkpoint.as_deref(), a.network)?;
    let scorers: Vec<Box<dyn QualityScorer>> =
        a.scorers.iter().map(|s| scorer_by_name(s, Duration::from_secs(a.timeout))).collect::<Result<_, _>>()?;
    let refs: Vec<&dyn QualityScorer> = scorers.iter().map(|s| s.as_ref()).collect();
    let report = evaluate_non_reference(r.as_ref(), &a.images, &refs)?;
    report.write_csv(&a.out)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    for s in &report.summaries {
        println!("{}: restored {} vs input {} ({} failed)", s.scorer, fmt(s.restored), fmt(s.input), s.failures);
    }
    Ok(())
}

fn reliability(a: ReliabilityArgs) -> Result<()> {
    let scorer = scorer_by_name(&a.scorer, Duration::from_secs(a.timeout))?;
    let loaded = load_pairs(&a.pairs)?;
    let ids = loaded.iter().map(|(id, _, _)| id.clone()).collect();
    let pairs: Vec<_> = loaded.into_iter().map(|(_, clean, degraded)| (degraded, clean)).collect();
    let report = monotonicity_reliability(scorer.as_ref(), &pairs, &default_alpha_grid())?.with_pair_ids(ids);
    report.write_csv(fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?)?;
    plot_reliability(&report, &a.out.with_extension("png"))?;
    println!("{}: reliability {:.4} over {} pairs", report.scorer_name, report.reliability, report.num_pairs);
    Ok(())
}

fn bank_inspect(a: BankArgs) -> Result<()> {
    let bank = ReliableBank::load(&a.bank)?;
    match bank.summary() {
        None => println!("empty bank"),
        Some(s) => println!(
            "{} entries; score mean {:.4}, min {:.4}, max {:.4}; last update at step {}",
            s.entries, s.mean_score, s.min_score, s.max_score, s.last_step
        ),
    }
    if let Some(out) = a.out {
        let mut w = csv::Writer::from_path(&out)?;
        w.write_record(["sample_id", "score", "updated_at_step", "scorer_name"])?;
        for e in bank.entries() {
            w.write_record([e.sample_id.clone(), e.score.to_string(), e.updated_at_step.to_string(), e.scorer_name.clone()])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let opts = SynthOptions { clean_dir: a.clean, n: a.n, size: a.size, seed: a.seed };
    let entries = make_synth(&opts, &a.out)?;
    println!("wrote {} pairs to {}", entries.len(), a.out.display());
    Ok(())
}
