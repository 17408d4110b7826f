use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ddlm_core::harness::{
    compare_init, evaluate, evaluate_records, gen_data, resolve_seed, sample_template,
    sweep_quality_speed, train, write_sweep_csv, Checkpoint, GenSpec, Layout, Responder, RunConfig,
    TrainMode,
};
use ddlm_core::par::Execution;
use ddlm_core::sampler::{write_trace, DecodeConfig, Strategy};
use ddlm_core::tasks::{read_records, TaskKind};

#[derive(Parser)]
#[command(
    name = "ddlm",
    version,
    about = "Masked diffusion language models on synthetic planning tasks"
)]
struct Cli {
    /// Run instance-level work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Countdown or Sudoku dataset as train/test JSONL.
    GenData(GenDataArgs),
    /// Train a model from a JSON run config, with flag overrides.
    Train(TrainArgs),
    /// Decode held-out prompts and score them with the task verifier.
    Eval(EvalArgs),
    /// Evaluate over a grid of step counts and seeds, writing CSV.
    Sweep(SweepArgs),
    /// Train AR-initialized and scratch diffusion runs side by side.
    CompareInit(CompareArgs),
    /// Fill a completion or infilling template.
    Sample(SampleArgs),
    /// Check answers with the exact task verifier.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value = "countdown")]
    task: TaskKind,
    #[arg(long, default_value_t = 10_000)]
    count: usize,
    #[arg(long, default_value_t = 3)]
    n_numbers: usize,
    #[arg(long, default_value_t = 20)]
    value_max: u64,
    #[arg(long, default_value_t = 8)]
    clue_count: usize,
    #[arg(long, default_value_t = 0.9)]
    train_ratio: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config; omitted means the built-in Countdown defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    mode: Option<TrainModeArg>,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    heldout_data: Option<PathBuf>,
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    log_interval: Option<u64>,
    /// Enable CART weighting with this geometric sharpness.
    #[arg(long)]
    cart_p: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    wallclock: bool,
    /// Write the resolved config here and exit without training.
    #[arg(long)]
    dump_config: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum TrainModeArg {
    ArPretrain,
    DiffusionPretrain,
    Sft,
}

impl From<TrainModeArg> for TrainMode {
    fn from(m: TrainModeArg) -> Self {
        match m {
            TrainModeArg::ArPretrain => TrainMode::ArPretrain,
            TrainModeArg::DiffusionPretrain => TrainMode::DiffusionPretrain,
            TrainModeArg::Sft => TrainMode::Sft,
        }
    }
}

#[derive(Args, Clone)]
struct DecodeArgs {
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[arg(long, default_value = "max_confidence")]
    strategy: Strategy,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long)]
    seed: Option<u64>,
}

impl DecodeArgs {
    fn config(&self) -> Result<DecodeConfig> {
        Ok(DecodeConfig {
            steps: self.steps,
            strategy: self.strategy,
            temperature: self.temperature,
            seed: env_seed(self.seed, 0)?,
        })
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ResponderArg {
    Model,
    Oracle,
    Random,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Refuse the checkpoint unless it was trained under this config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "model")]
    responder: ResponderArg,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    steps_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value = "max_confidence")]
    strategy: Strategy,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Diffusion config shared by both runs.
    #[arg(long)]
    config: PathBuf,
    /// Causal checkpoint that seeds the AR-initialized run.
    #[arg(long)]
    ar_checkpoint: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "")]
    prefix: String,
    /// Lengths of the masked slots, in order.
    #[arg(long, value_delimiter = ',')]
    slots: Vec<usize>,
    /// Fixed text after the prefix and after each slot; one more than slots.
    #[arg(long = "segment")]
    segments: Vec<String>,
    /// Write the per-step records here as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    task: TaskKind,
    #[arg(long, requires = "answer")]
    prompt: Option<String>,
    #[arg(long)]
    answer: Option<String>,
    /// JSONL records to check instead of a single prompt/answer.
    #[arg(long, conflicts_with = "prompt")]
    file: Option<PathBuf>,
}

fn env_seed(flag: Option<u64>, file: u64) -> Result<u64> {
    let env = std::env::var("DDLM_SEED").ok();
    Ok(resolve_seed(flag, env.as_deref(), file)?)
}

fn exec(cli: &Cli) -> Execution {
    if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn run_gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = GenSpec {
        task: a.task,
        count: a.count,
        n_numbers: a.n_numbers,
        value_max: a.value_max,
        clue_count: a.clue_count,
        seed: env_seed(a.seed, 0)?,
    };
    let paths = vec![a.out_dir.join("train.jsonl"), a.out_dir.join("test.jsonl")];
    let counts = gen_data(&spec, &[a.train_ratio, 1.0 - a.train_ratio], &paths)?;
    for (p, c) in paths.iter().zip(counts) {
        println!("{}\t{c}", p.display());
    }
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut c = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let train = a
                .train_data
                .clone()
                .context("--train-data is required without --config")?;
            RunConfig::countdown_default(
                TrainMode::DiffusionPretrain,
                train,
                a.heldout_data.clone(),
            )
        }
    };
    if let Some(m) = a.mode {
        c.mode = m.into();
    }
    if let Some(p) = &a.train_data {
        c.data.train_path = p.clone();
    }
    if let Some(p) = &a.heldout_data {
        c.data.heldout_path = Some(p.clone());
    }
    if let Some(p) = &a.init_checkpoint {
        c.init_checkpoint = Some(p.clone());
    }
    if let Some(s) = a.steps {
        c.total_steps = s;
    }
    if let Some(b) = a.batch_size {
        c.batch_size = b;
    }
    if let Some(lr) = a.lr {
        c.optim.adamw.lr = lr;
    }
    if let Some(i) = a.log_interval {
        c.log_interval = i;
    }
    if let Some(p) = a.cart_p {
        c.cart.enabled = true;
        c.cart.p = p;
    }
    if a.wallclock {
        c.record_wallclock = true;
    }
    c.seed = env_seed(a.seed, c.seed)?;
    let c = c.normalized();
    c.validate()?;
    Ok(c)
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let config = resolve_train_config(a)?;
    if let Some(p) = &a.dump_config {
        config.save(p)?;
        return Ok(());
    }
    let out = train(&config, &a.out_dir)?;
    let last = out.rows.last().context("no metrics logged")?;
    println!(
        "steps {}  loss {:.4}  heldout {}  best step {}  config {}",
        last.step,
        last.loss,
        last.heldout_loss.map_or("-".into(), |v| format!("{v:.4}")),
        out.best_step,
        config.hash()
    );
    println!("{}", out.final_checkpoint.display());
    Ok(())
}

fn run_eval(a: &EvalArgs, exec: Execution) -> Result<()> {
    let ckpt = Checkpoint::<f32>::load(&a.checkpoint)?;
    let records = read_records(&a.data)?;
    let expected = a
        .config
        .as_ref()
        .map(|p| RunConfig::load(p).map(|c| c.normalized().hash()))
        .transpose()?;
    let decode = a.decode.config()?;
    let report = match a.responder {
        ResponderArg::Model => evaluate(&ckpt, &records, a.n, decode, expected.as_deref(), exec)?,
        other => {
            let run = &ckpt.meta.run;
            let responder = match other {
                ResponderArg::Oracle => Responder::Oracle,
                _ => Responder::Random { seed: decode.seed },
            };
            let records = &records[..a.n.min(records.len())];
            evaluate_records(responder, run.data.task, &Layout::of(run), records, exec)?
        }
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run_sweep(a: &SweepArgs, exec: Execution) -> Result<()> {
    let ckpt = Checkpoint::<f32>::load(&a.checkpoint)?;
    let records = read_records(&a.data)?;
    let results = sweep_quality_speed(
        &ckpt,
        &records,
        a.n,
        &a.steps_list,
        &a.seeds,
        a.strategy,
        a.temperature,
        exec,
    )?;
    let rows: Vec<_> = results.into_iter().map(|(r, _)| r).collect();
    write_sweep_csv(&a.out, &rows)?;
    for r in &rows {
        println!(
            "K={:<3} seed={:<3} solve_rate={:.4} passes={}",
            r.k, r.seed, r.solve_rate, r.passes
        );
    }
    Ok(())
}

fn run_compare(a: &CompareArgs) -> Result<()> {
    let mut scratch = RunConfig::load(&a.config)?;
    scratch.init_checkpoint = None;
    scratch.seed = env_seed(None, scratch.seed)?;
    let scratch = scratch.normalized();
    let ar = RunConfig {
        init_checkpoint: Some(a.ar_checkpoint.clone()),
        ..scratch.clone()
    };
    let summary = compare_init(&ar, &scratch, &a.out_dir)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn run_sample(a: &SampleArgs) -> Result<()> {
    let ckpt = Checkpoint::<f32>::load(&a.checkpoint)?;
    let model = ckpt
        .model()
        .with_mode(ddlm_core::model::AttentionMode::Full);
    let mut segments = a.segments.clone();
    if segments.is_empty() {
        segments = vec![String::new(); a.slots.len() + 1];
    }
    let (text, out) = sample_template(&model, &a.prefix, &a.slots, &segments, &a.decode.config()?)?;
    println!("{text}");
    if let Some(p) = &a.trace {
        write_trace(p, &out.trace)?;
    }
    Ok(())
}

fn run_verify(a: &VerifyArgs) -> Result<bool> {
    if let Some(path) = &a.file {
        let records = read_records(path)?;
        let ok = records
            .iter()
            .filter(|r| a.task.verify(&r.prompt, &r.response))
            .count();
        println!("{ok}/{} verified", records.len());
        return Ok(ok == records.len());
    }
    let (Some(prompt), Some(answer)) = (&a.prompt, &a.answer) else {
        bail!("give --prompt and --answer, or --file");
    };
    let ok = a.task.verify(prompt, answer);
    println!("{ok}");
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = exec(&cli);
    let result = match &cli.command {
        Command::GenData(a) => run_gen_data(a).map(|_| true),
        Command::Train(a) => run_train(a).map(|_| true),
        Command::Eval(a) => run_eval(a, exec).map(|_| true),
        Command::Sweep(a) => run_sweep(a, exec).map(|_| true),
        Command::CompareInit(a) => run_compare(a).map(|_| true),
        Command::Sample(a) => run_sample(a).map(|_| true),
        Command::Verify(a) => run_verify(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
