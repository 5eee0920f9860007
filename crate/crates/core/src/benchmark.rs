//! Synthetic flow corpus with a known generating process.
//!
//! Each row picks one of three traffic classes. Nine numeric features are
//! linear in two latent factors whose means depend on the class, plus
//! independent noise, so the features are strongly correlated and the joint
//! distribution is multimodal. Two categorical columns depend on the class.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::codec::{encode, fit_codebook, BinningMode, Codebook};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::ingest::{ColumnKind, ColumnSpec, FlowTable};
use crate::linalg::Matrix;
use crate::model::{Architecture, Model, ModelConfig};
use crate::rng::Rng;
use crate::sample::generate_flows;
use crate::train::{train_with, TrainConfig, TrainReport};

pub const DEFAULT_ROWS: usize = 30_000;
pub const DEFAULT_SEED: u64 = 20_240_917;

pub const NUMERIC_FEATURES: [&str; 9] = [
    "duration",
    "bytes_in",
    "bytes_out",
    "packets_in",
    "packets_out",
    "mean_iat",
    "payload_mean",
    "ttl",
    "window",
];
pub const CATEGORICAL_FEATURES: [&str; 2] = ["proto", "service"];

const WEIGHTS: [f64; 3] = [0.5, 0.3, 0.2];
const FACTOR_MEANS: [[f64; 2]; 3] = [[-1.5, 0.5], [1.0, -1.5], [1.5, 2.0]];
const FACTOR_STD: [f64; 3] = [0.6, 0.8, 0.5];
const NOISE: f64 = 0.3;
const LOADINGS: [[f64; 2]; 9] = [
    [1.0, 0.2],
    [0.9, 0.5],
    [0.8, -0.4],
    [0.3, 1.0],
    [-0.5, 0.9],
    [0.6, 0.6],
    [-0.8, 0.3],
    [0.2, -1.0],
    [0.7, -0.7],
];
const OFFSETS: [f64; 9] = [5.0, 10.0, 8.0, 3.0, 2.0, 1.0, 6.0, 4.0, 7.0];

const PROTOS: [&str; 3] = ["tcp", "udp", "icmp"];
const PROTO_P: [[f64; 3]; 3] = [[0.8, 0.15, 0.05], [0.2, 0.75, 0.05], [0.3, 0.2, 0.5]];
const SERVICES: [&str; 5] = ["http", "dns", "ssh", "smtp", "ntp"];
const SERVICE_P: [[f64; 5]; 3] = [
    [0.6, 0.05, 0.2, 0.1, 0.05],
    [0.05, 0.6, 0.05, 0.05, 0.25],
    [0.2, 0.2, 0.2, 0.2, 0.2],
];

fn pick(p: &[f64], rng: &mut Rng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// `n` rows of the benchmark corpus; equal seeds give equal tables.
pub fn generate(n: usize, seed: u64) -> Result<FlowTable> {
    let mut rng = Rng::derived(seed, "benchmark");
    let mut numeric = Vec::with_capacity(n * NUMERIC_FEATURES.len());
    let mut protos = Vec::with_capacity(n);
    let mut services = Vec::with_capacity(n);
    for _ in 0..n {
        let c = pick(&WEIGHTS, &mut rng);
        let f = [
            FACTOR_MEANS[c][0] + FACTOR_STD[c] * rng.normal(),
            FACTOR_MEANS[c][1] + FACTOR_STD[c] * rng.normal(),
        ];
        for (l, off) in LOADINGS.iter().zip(OFFSETS) {
            numeric.push(off + l[0] * f[0] + l[1] * f[1] + NOISE * rng.normal());
        }
        protos.push(PROTOS[pick(&PROTO_P[c], &mut rng)].to_string());
        services.push(SERVICES[pick(&SERVICE_P[c], &mut rng)].to_string());
    }
    let schema = NUMERIC_FEATURES
        .iter()
        .map(|name| (name, ColumnKind::Numeric))
        .chain(CATEGORICAL_FEATURES.iter().map(|name| (name, ColumnKind::Categorical)))
        .enumerate()
        .map(|(index, (name, kind))| ColumnSpec {
            name: name.to_string(),
            kind,
            index,
        })
        .collect();
    FlowTable::new(schema, Matrix::new(n, NUMERIC_FEATURES.len(), numeric)?, vec![protos, services])
}

/// Feature order used by the benchmark codebook.
pub fn feature_names() -> Vec<&'static str> {
    NUMERIC_FEATURES.iter().chain(&CATEGORICAL_FEATURES).copied().collect()
}

/// Settings of the end-to-end benchmark run.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub rows: usize,
    pub seed: u64,
    pub k: usize,
    pub steps: usize,
    pub batch_size: usize,
    /// Synthetic rows sampled per model.
    pub n_synth: usize,
    pub nu: f64,
    pub temperature: f64,
    /// Worker threads; the three models train concurrently.
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            rows: DEFAULT_ROWS,
            seed: DEFAULT_SEED,
            k: crate::codec::DEFAULT_K,
            steps: 3000,
            batch_size: 64,
            n_synth: 10_000,
            nu: crate::eval::DEFAULT_NU,
            temperature: 1.0,
            threads: 3,
        }
    }
}

/// Adam rate used for each architecture in the benchmark.
pub fn learning_rate(arch: Architecture) -> f32 {
    match arch {
        Architecture::Transformer => 1e-3,
        Architecture::WaveNet | Architecture::Rnn => 3e-3,
    }
}

#[derive(Clone, Debug)]
pub struct BenchModel {
    pub arch: Architecture,
    pub n_params: usize,
    pub train: TrainReport,
    pub report: EvalReport,
}

#[derive(Clone, Debug)]
pub struct BenchOutcome {
    pub codebook: Codebook,
    /// Samples of an untrained model, i.e. near-uniform symbols.
    pub control: EvalReport,
    /// One entry per architecture, in [`Architecture::ALL`] order.
    pub models: Vec<BenchModel>,
    pub elapsed: Duration,
}

impl BenchOutcome {
    pub fn model(&self, arch: Architecture) -> &BenchModel {
        self.models.iter().find(|m| m.arch == arch).expect("every architecture is benchmarked")
    }

    /// Comparison table with one row per trained model. Timings are left
    /// out so reruns produce identical bytes.
    pub fn table_csv(&self) -> String {
        let mut out = format!("{},params\n", EvalReport::CSV_HEADER);
        for m in &self.models {
            out.push_str(&format!("{},{}\n", m.report.csv_row(m.arch.name()), m.n_params));
        }
        out
    }
}

fn train_and_score(
    arch: Architecture,
    real: &FlowTable,
    cb: &Codebook,
    cfg: &BenchConfig,
    log: &(dyn Fn(&str) + Sync),
) -> Result<BenchModel> {
    let ds = encode(real, cb)?;
    let config = ModelConfig::new(arch, cb.vocab_size(), cb.sequence_length() - 1);
    let mut model = Model::init(config, &mut Rng::derived(cfg.seed, &format!("init-{}", arch.name())))?;
    let tc = TrainConfig {
        batch_size: cfg.batch_size,
        max_steps: cfg.steps,
        learning_rate: Some(learning_rate(arch)),
        seed: cfg.seed,
        eval_every: (cfg.steps / 6).max(1),
        ..TrainConfig::default()
    };
    let train = train_with(&mut model, &ds, &tc, |p| {
        if let Some(h) = p.holdout_loss {
            log(&format!("{} step {} train {:.4} holdout {:.4}", arch.name(), p.step, p.train_loss, h));
        }
    })?;
    let synth = generate_flows(&model, cb, cfg.n_synth, cfg.temperature, cfg.seed, None)?;
    let report = evaluate(real, &synth, cb, cfg.nu, cfg.seed)?;
    log(&format!(
        "{} trained in {:.1}s, inliers {:.2}%, discriminator {:.4}",
        arch.name(),
        train.wall_time.as_secs_f64(),
        report.inlier_pct,
        report.discriminative_accuracy
    ));
    Ok(BenchModel {
        arch,
        n_params: model.n_params(),
        train,
        report,
    })
}

/// Generates the corpus, trains all three architectures, samples them and
/// scores everything against the real rows, next to an untrained control.
pub fn run_bench(cfg: &BenchConfig, log: &(dyn Fn(&str) + Sync)) -> Result<BenchOutcome> {
    let start = Instant::now();
    let real = generate(cfg.rows, cfg.seed)?;
    let cb = fit_codebook(&real, &feature_names(), cfg.k, BinningMode::EqualFrequency)?;
    log(&format!(
        "corpus {} rows, {} features, vocabulary {}",
        real.n_rows(),
        cb.features().len(),
        cb.vocab_size()
    ));

    let untrained = Model::init(
        ModelConfig::new(Architecture::Rnn, cb.vocab_size(), cb.sequence_length() - 1),
        &mut Rng::derived(cfg.seed, "control"),
    )?;
    let control_rows = generate_flows(&untrained, &cb, cfg.n_synth, cfg.temperature, cfg.seed, None)?;
    let control = evaluate(&real, &control_rows, &cb, cfg.nu, cfg.seed)?;
    log(&format!(
        "control inliers {:.2}% (real holdout {:.2}%) discriminator {:.4}",
        control.inlier_pct, control.real_holdout_inlier_pct, control.discriminative_accuracy
    ));

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker threads: {e}")))?;
    let models = pool.install(|| {
        Architecture::ALL
            .par_iter()
            .map(|&arch| train_and_score(arch, &real, &cb, cfg, log))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(BenchOutcome {
        codebook: cb,
        control,
        models,
        elapsed: start.elapsed(),
    })
}
