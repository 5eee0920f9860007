//! The `flowsynth` command line: encode flows into symbol sequences, train a
//! sequence model, sample synthetic flows, evaluate them, run PCA on a flow
//! table, or run the whole pipeline on the bundled synthetic benchmark.
//!
//! Every subcommand accepts `--config <file>` with `key = value` lines whose
//! keys are the long flag names of that subcommand. Flags given on the
//! command line take precedence; keys that the subcommand does not know are
//! ignored so one file can serve the whole pipeline.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use flowsynth::benchmark::{self, BenchConfig, BenchOutcome};
use flowsynth::codec::{self, BinningMode};
use flowsynth::eval::{self, EvalReport};
use flowsynth::ingest::{self, FlowTable, SchemaHint};
use flowsynth::sample::generate_flows;
use flowsynth::train::{self, Optimizer};
use flowsynth::{pca, Architecture, Error, Model, ModelConfig, Rng, TrainConfig};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_NON_CONVERGENCE: i32 = 4;

/// A failed command: the process exit code and the message for stderr.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) => EXIT_USAGE,
            Error::Diverged { .. } => EXIT_DIVERGED,
            Error::NonConvergence(_) => EXIT_NON_CONVERGENCE,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "flowsynth", version, about = "Synthetic network flows from autoregressive symbol models")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a codebook on a flow CSV and encode every row as a symbol sequence.
    Encode(EncodeArgs),
    /// Train a sequence model on an encoded dataset.
    Train(TrainArgs),
    /// Sample synthetic flows from a checkpoint.
    Sample(SampleArgs),
    /// Score synthetic flows against the real ones.
    Eval(EvalArgs),
    /// Explained-variance ratios of the numeric columns of a flow CSV.
    Pca(PcaArgs),
    /// Run the full pipeline on the built-in synthetic benchmark.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    /// Comma-separated feature names, or `@file` with one name per line.
    #[arg(long)]
    pub features: String,
    #[arg(long, default_value_t = codec::DEFAULT_K, value_parser = parse_k)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = Mode::Equalfreq)]
    pub mode: Mode,
    /// Extra `column=Kind` hints on top of the built-in port hints.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub out_codebook: PathBuf,
    #[arg(long)]
    pub out_data: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Equalfreq,
    Equalwidth,
}

impl From<Mode> for BinningMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Equalfreq => BinningMode::EqualFrequency,
            Mode::Equalwidth => BinningMode::EqualWidth,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Arch {
    Wavenet,
    Rnn,
    Transformer,
}

impl From<Arch> for Architecture {
    fn from(a: Arch) -> Self {
        match a {
            Arch::Wavenet => Architecture::WaveNet,
            Arch::Rnn => Architecture::Rnn,
            Arch::Transformer => Architecture::Transformer,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Opt {
    Adam,
    Sgd,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub arch: Arch,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Defaults to 3e-4 for Adam and 0.1 for SGD.
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long, value_enum, default_value_t = Opt::Adam)]
    pub opt: Opt,
    /// Keep the learning rate constant instead of dropping it tenfold for
    /// the last third of the run.
    #[arg(long)]
    pub no_decay: bool,
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
    #[arg(long, default_value_t = 100)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub embed: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub codebook: PathBuf,
    #[arg(long, default_value_t = 30_000)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temp: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub real: PathBuf,
    /// Synthetic CSV, optionally labelled as `label=path`; repeat to compare
    /// several models.
    #[arg(long, required = true)]
    pub synth: Vec<String>,
    #[arg(long)]
    pub codebook: PathBuf,
    #[arg(long, default_value_t = eval::DEFAULT_NU)]
    pub nu: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Key-value report; one section per synthetic set.
    #[arg(long)]
    pub out: PathBuf,
    /// One CSV row per synthetic set.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PcaArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub components: usize,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = benchmark::DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = benchmark::DEFAULT_ROWS)]
    pub rows: usize,
    #[arg(long, default_value_t = 3000)]
    pub steps: usize,
    #[arg(long, default_value_t = 10_000)]
    pub n_synth: usize,
    #[arg(long, default_value_t = eval::DEFAULT_NU)]
    pub nu: f64,
    #[arg(long, default_value_t = 3)]
    pub threads: usize,
    /// Suppress the progress log and the printed table.
    #[arg(long)]
    pub quiet: bool,
}

fn parse_k(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(k) if k >= 2 => Ok(k),
        Ok(k) => Err(format!("K must be at least 2, got {k}")),
        Err(e) => Err(e.to_string()),
    }
}

/// Reads `key = value` lines; `#` starts a comment line.
pub fn parse_config(text: &str) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("config line {}: expected key = value", n + 1)))?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Inserts config entries right after the subcommand name, so that flags
/// repeated later on the command line override them.
fn expand_config(args: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let entries = parse_config(&text)?;
    let Some(pos) = args.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')).map(|p| p + 1) else {
        return Ok(args);
    };
    let sub = args[pos].to_string_lossy().into_owned();
    let cmd = Cli::command();
    let Some(sc) = cmd.find_subcommand(&sub) else {
        return Ok(args);
    };
    let mut injected = Vec::new();
    for (key, value) in entries {
        let Some(arg) = sc.get_arguments().find(|a| a.get_long() == Some(key.as_str())) else {
            continue;
        };
        if key == "config" {
            continue;
        }
        let takes_value = arg.get_num_args().is_none_or(|n| n.takes_values());
        if takes_value {
            injected.push(OsString::from(format!("--{key}")));
            injected.push(OsString::from(value));
        } else if matches!(value.as_str(), "true" | "1" | "yes") {
            injected.push(OsString::from(format!("--{key}")));
        }
    }
    let mut out = args[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

/// Parses `args` (program name first) and runs the chosen subcommand.
pub fn run<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args = expand_config(args.into_iter().map(Into::into).collect())?;
    let cli = Cli::try_parse_from(args).map_err(|e| {
        let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
        CliError {
            code,
            message: e.to_string(),
        }
    })?;
    match cli.command {
        Command::Encode(a) => cmd_encode(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Pca(a) => cmd_pca(&a),
        Command::Bench(a) => cmd_bench(&a).map(|_| ()),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError {
        code: EXIT_DATA,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn feature_list(spec: &str) -> CliResult<Vec<String>> {
    let text = match spec.strip_prefix('@') {
        Some(path) => fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read feature list {path}: {e}")))?,
        None => spec.to_string(),
    };
    let names: Vec<String> = text
        .split([',', '\n'])
        .map(str::trim)
        .filter(|s| !s.is_empty() && !s.starts_with('#'))
        .map(String::from)
        .collect();
    if names.is_empty() {
        return Err(CliError::usage("no features given"));
    }
    Ok(names)
}

fn load_hint(extra: Option<&Path>) -> CliResult<SchemaHint> {
    let base = SchemaHint::flow_defaults();
    Ok(match extra {
        Some(p) => base.merged(&SchemaHint::load(p)?),
        None => base,
    })
}

fn load_flows(path: &Path, hint: &SchemaHint) -> CliResult<FlowTable> {
    let (table, report) = ingest::load_csv(path, hint)?;
    if report.rows_dropped > 0 {
        println!("{}: dropped {} of {} rows", path.display(), report.rows_dropped, report.rows_read);
    }
    let (table, stats) = ingest::clean(&table);
    if !stats.is_empty() {
        println!("{}: {stats}", path.display());
    }
    Ok(table)
}

pub fn cmd_encode(a: &EncodeArgs) -> CliResult<()> {
    let names = feature_list(&a.features)?;
    let hint = load_hint(a.schema.as_deref())?;
    let table = load_flows(&a.input, &hint)?;
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let cb = codec::fit_codebook(&table, &refs, a.k, a.mode.into())?;
    let ds = codec::encode(&table, &cb)?;
    codec::save_codebook(&cb, &a.out_codebook)?;
    codec::save_symdata(&ds, &a.out_data)?;
    println!(
        "encoded {} rows: {} features, K={}, sequence length {}",
        ds.len(),
        cb.features().len(),
        cb.k(),
        ds.seq_len()
    );
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let ds = codec::load_symdata(&a.data)?;
    let mut config = ModelConfig::new(a.arch.into(), ds.vocab_size(), ds.seq_len() - 1);
    if let Some(v) = a.embed {
        config.embed_dim = v;
    }
    if let Some(v) = a.hidden {
        config.hidden_dim = v;
    }
    if let Some(v) = a.blocks {
        config.n_blocks = v;
    }
    if let Some(v) = a.heads {
        config.n_heads = v;
    }
    let mut model = Model::init(config, &mut Rng::derived(a.seed, "init"))?;
    println!("model {}", model.describe());
    let cfg = TrainConfig {
        batch_size: a.batch,
        max_steps: a.steps,
        learning_rate: a.lr,
        decay: !a.no_decay,
        optimizer: match a.opt {
            Opt::Adam => Optimizer::adam(),
            Opt::Sgd => Optimizer::Sgd,
        },
        grad_clip_norm: a.clip,
        seed: a.seed,
        eval_every: a.eval_every,
        holdout_fraction: a.holdout,
    };
    let report = train::train_with(&mut model, &ds, &cfg, |p| {
        if let Some(h) = p.holdout_loss {
            println!("step {:>6}  train {:.4}  holdout {:.4}", p.step, p.train_loss, h);
        }
    })?;
    println!("step-0 loss {:.4} (ln V = {:.4})", report.initial_loss(), (ds.vocab_size() as f64).ln());
    println!(
        "final train loss {:.4}, holdout loss {}",
        report.final_train_loss(),
        report.final_holdout_loss().map_or("n/a".into(), |h| format!("{h:.4}"))
    );
    println!("parameters {}", model.n_params());
    train::save_checkpoint(&model, &a.out)?;
    if let Some(path) = &a.loss_log {
        report.write_loss_csv(path)?;
    }
    Ok(())
}

pub fn cmd_sample(a: &SampleArgs) -> CliResult<()> {
    let model = train::load_checkpoint(&a.ckpt)?;
    let cb = codec::load_codebook(&a.codebook)?;
    let flows = generate_flows(&model, &cb, a.n, a.temp, a.seed, Some(&a.out))?;
    println!("wrote {} synthetic flows to {}", flows.n_rows(), a.out.display());
    Ok(())
}

fn split_label(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((label, path)) if !label.is_empty() && !label.contains(['/', '\\']) => (label.to_string(), path.into()),
        _ => {
            let path = PathBuf::from(spec);
            let label = path.file_stem().map_or("synth".into(), |s| s.to_string_lossy().into_owned());
            (label, path)
        }
    }
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let cb = codec::load_codebook(&a.codebook)?;
    let hint = cb.schema_hint();
    let real = load_flows(&a.real, &hint)?;
    let mut text = String::new();
    let mut table = format!("{}\n", EvalReport::CSV_HEADER);
    for spec in &a.synth {
        let (label, path) = split_label(spec);
        let synth = load_flows(&path, &hint)?;
        let report = eval::evaluate(&real, &synth, &cb, a.nu, a.seed)?;
        println!(
            "{label}: inliers {:.2}% (real holdout {:.2}%), discriminator {:.4}",
            report.inlier_pct, report.real_holdout_inlier_pct, report.discriminative_accuracy
        );
        if a.synth.len() > 1 {
            text.push_str(&format!("[{label}]\n"));
        }
        text.push_str(&report.to_string());
        table.push_str(&report.csv_row(&label));
        table.push('\n');
    }
    write_file(&a.out, text)?;
    if let Some(path) = &a.table {
        write_file(path, table)?;
    }
    Ok(())
}

pub fn cmd_pca(a: &PcaArgs) -> CliResult<()> {
    let hint = load_hint(a.schema.as_deref())?;
    let table = load_flows(&a.input, &hint)?;
    let r = pca::pca_explained_variance(&table, a.components)?;
    let mut csv = String::from("component,explained_variance_ratio,cumulative\n");
    for (i, (v, c)) in r.explained_variance_ratio.iter().zip(&r.cumulative).enumerate() {
        csv.push_str(&format!("{},{v},{c}\n", i + 1));
    }
    write_file(&a.out, csv)?;
    println!(
        "{} columns; first component explains {:.4}",
        r.columns.len(),
        r.explained_variance_ratio[0]
    );
    Ok(())
}

/// Runs the benchmark and writes `table.csv`, `control.txt`, one
/// `<arch>.txt` report per model, the generated corpus (`corpus.csv`) and
/// its codebook into the output directory.
pub fn cmd_bench(a: &BenchArgs) -> CliResult<BenchOutcome> {
    let cfg = BenchConfig {
        rows: a.rows,
        seed: a.seed,
        steps: a.steps,
        n_synth: a.n_synth,
        nu: a.nu,
        threads: a.threads,
        ..BenchConfig::default()
    };
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError {
        code: EXIT_DATA,
        message: format!("cannot create {}: {e}", a.out_dir.display()),
    })?;
    let start = Instant::now();
    let outcome = benchmark::run_bench(&cfg, &|line: &str| {
        if !a.quiet {
            println!("[{:>6.1}s] {line}", start.elapsed().as_secs_f64());
        }
    })?;
    write_file(&a.out_dir.join("table.csv"), outcome.table_csv())?;
    ingest::write_csv(&benchmark::generate(cfg.rows, cfg.seed)?, &a.out_dir.join("corpus.csv"))?;
    codec::save_codebook(&outcome.codebook, &a.out_dir.join("codebook.txt"))?;
    write_file(&a.out_dir.join("control.txt"), outcome.control.to_string())?;
    for m in &outcome.models {
        write_file(&a.out_dir.join(format!("{}.txt", m.arch.name())), m.report.to_string())?;
    }
    if a.quiet {
        return Ok(outcome);
    }
    println!("{}", outcome.table_csv());
    println!(
        "control (untrained): inliers {:.2}%, discriminator {:.4}; total {:.1}s",
        outcome.control.inlier_pct,
        outcome.control.discriminative_accuracy,
        outcome.elapsed.as_secs_f64()
    );
    Ok(outcome)
}
