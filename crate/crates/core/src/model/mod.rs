//! The three autoregressive next-symbol models behind one interface.
//!
//! Every architecture maps ids `[B, T]` to logits `[B, T, V]` where the
//! logits at position `t` depend only on ids at positions `≤ t`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, NormMode, RunningStats, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

mod rnn;
mod transformer;
mod wavenet;

/// Gain for weights feeding a tanh.
pub const TANH_GAIN: f64 = 5.0 / 3.0;
/// Default half-width of the uniform output-layer initialisation.
pub const DEFAULT_EPS_INIT: f32 = 1e-3;

const RUNNING_MEAN: &str = "running_mean";
const RUNNING_VAR: &str = "running_var";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Architecture {
    WaveNet,
    Rnn,
    Transformer,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::WaveNet, Architecture::Rnn, Architecture::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::WaveNet => "wavenet",
            Architecture::Rnn => "rnn",
            Architecture::Transformer => "transformer",
        }
    }

    /// Tag stored in checkpoints.
    pub fn tag(self) -> u16 {
        match self {
            Architecture::WaveNet => 1,
            Architecture::Rnn => 2,
            Architecture::Transformer => 3,
        }
    }

    pub fn from_tag(tag: u16) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.tag() == tag)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown architecture '{s}' (wavenet|rnn|transformer)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Architecture,
    /// `K + 1`: value symbols plus the start symbol.
    pub vocab_size: usize,
    /// Longest input the model accepts (sequence length − 1).
    pub context_length: usize,
    pub embed_dim: usize,
    /// Conv channels (WaveNet), state width (RNN); unused by the Transformer.
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Taps per causal convolution; layer `l` uses dilation `conv_kernel^l`.
    pub conv_kernel: usize,
    pub conv_layers: usize,
    pub eps_init: f32,
}

impl ModelConfig {
    /// Defaults: embedding 64; WaveNet 64 channels with kernel 2 and just
    /// enough doubling dilations to cover the context; RNN state 128;
    /// Transformer 4 blocks of 4 heads.
    pub fn new(arch: Architecture, vocab_size: usize, context_length: usize) -> Self {
        let conv_kernel: usize = 2;
        let mut conv_layers = 1;
        while conv_kernel.pow(conv_layers as u32) < context_length {
            conv_layers += 1;
        }
        Self {
            arch,
            vocab_size,
            context_length,
            embed_dim: 64,
            hidden_dim: match arch {
                Architecture::Rnn => 128,
                _ => 64,
            },
            n_blocks: 4,
            n_heads: 4,
            conv_kernel,
            conv_layers,
            eps_init: DEFAULT_EPS_INIT,
        }
    }

    pub fn dilations(&self) -> Vec<usize> {
        (0..self.conv_layers)
            .map(|l| self.conv_kernel.pow(l as u32))
            .collect()
    }

    /// Positions visible to one WaveNet output: `1 + (K_f − 1)·Σ dilations`.
    pub fn receptive_field(&self) -> usize {
        1 + (self.conv_kernel - 1) * self.dilations().iter().sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.vocab_size < 2 || self.context_length == 0 || self.embed_dim == 0 {
            return bad(format!(
                "vocab {} / context {} / embed {} must be positive (vocab ≥ 2)",
                self.vocab_size, self.context_length, self.embed_dim
            ));
        }
        if !(self.eps_init >= 0.0) {
            return bad(format!("eps_init {} must be non-negative", self.eps_init));
        }
        match self.arch {
            Architecture::WaveNet => {
                if self.hidden_dim == 0 || self.conv_kernel < 2 || self.conv_layers == 0 {
                    return bad("WaveNet needs channels > 0, kernel ≥ 2 and ≥ 1 layer".into());
                }
                if self.receptive_field() < self.context_length {
                    return bad(format!(
                        "receptive field {} does not cover context {}",
                        self.receptive_field(),
                        self.context_length
                    ));
                }
            }
            Architecture::Rnn => {
                if self.hidden_dim == 0 {
                    return bad("RNN hidden_dim must be positive".into());
                }
            }
            Architecture::Transformer => {
                if self.n_blocks == 0 || self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
                    return bad(format!(
                        "embed_dim {} must split over {} heads, with ≥ 1 block",
                        self.embed_dim, self.n_heads
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Named tensors, iterated in name order.
///
/// Batch-norm running statistics are stored alongside the weights (so they
/// serialize with them) but are not trainable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_trainable(name: &str) -> bool {
        !name.ends_with(RUNNING_MEAN) && !name.ends_with(RUNNING_VAR)
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter '{name}'")))
    }

    fn running(&self, prefix: &str) -> Result<RunningStats> {
        Ok(RunningStats {
            mean: self.tensor(&format!("{prefix}.{RUNNING_MEAN}"))?.data().to_vec(),
            var: self.tensor(&format!("{prefix}.{RUNNING_VAR}"))?.data().to_vec(),
        })
    }
}

/// Output of [`Model::forward`].
pub struct ForwardPass {
    /// `[B, T, V]`.
    pub logits: Var,
    /// Graph leaves of the trainable parameters, in name order.
    pub params: Vec<(String, Var)>,
    /// Batch statistics per batch-norm layer (Train mode only).
    pub batch_stats: Vec<(String, BatchStats)>,
}

/// Registers parameters in a graph on first use.
pub(crate) struct Binder<'a> {
    params: &'a ModelParams,
    bound: BTreeMap<String, Var>,
    stats: Vec<(String, BatchStats)>,
    mode: NormMode,
}

impl<'a> Binder<'a> {
    fn new(params: &'a ModelParams, mode: NormMode) -> Self {
        Self {
            params,
            bound: BTreeMap::new(),
            stats: Vec::new(),
            mode,
        }
    }

    pub(crate) fn p(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let v = g.param(self.params.tensor(name)?);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub(crate) fn batch_norm(&mut self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(g, &format!("{prefix}.gamma"))?;
        let beta = self.p(g, &format!("{prefix}.beta"))?;
        let running = self.params.running(prefix)?;
        let (y, stats) = g.batch_norm(x, gamma, beta, self.mode, &running)?;
        if let Some(s) = stats {
            self.stats.push((prefix.to_string(), s));
        }
        Ok(y)
    }

    pub(crate) fn layer_norm(&mut self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(g, &format!("{prefix}.gamma"))?;
        let beta = self.p(g, &format!("{prefix}.beta"))?;
        g.layer_norm(x, gamma, beta)
    }

    /// `x · W + b` with `W = {prefix}.weight`, `b = {prefix}.bias`.
    pub(crate) fn linear(&mut self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(g, &format!("{prefix}.weight"))?;
        let b = self.p(g, &format!("{prefix}.bias"))?;
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Adds the initial tensors for `config`, drawing from `rng` in a fixed order.
struct Init<'a> {
    rng: &'a mut Rng,
    params: ModelParams,
}

impl Init<'_> {
    fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let t = normal_tensor(shape, std, self.rng);
        self.params.insert(name, t);
    }

    fn uniform(&mut self, name: &str, shape: &[usize], eps: f32) {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| (rng.uniform_range(-1.0, 1.0) as f32) * eps);
        self.params.insert(name, t);
    }

    fn fill(&mut self, name: &str, shape: &[usize], v: f32) {
        self.params.insert(name, Tensor::full(shape, v));
    }

    fn norm(&mut self, prefix: &str, width: usize, batch: bool) {
        self.fill(&format!("{prefix}.gamma"), &[width], 1.0);
        self.fill(&format!("{prefix}.beta"), &[width], 0.0);
        if batch {
            self.fill(&format!("{prefix}.{RUNNING_MEAN}"), &[width], 0.0);
            self.fill(&format!("{prefix}.{RUNNING_VAR}"), &[width], 1.0);
        }
    }

    fn output(&mut self, fan_in: usize, vocab: usize, eps: f32) {
        self.uniform("out.weight", &[fan_in, vocab], eps);
        self.uniform("out.bias", &[vocab], eps);
    }
}

/// Tensor of independent `N(0, std²)` draws.
pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| (rng.normal() * std) as f32)
}

/// Standard deviation for weights feeding a tanh: `(5/3) / √fan_in`.
pub fn tanh_std(fan_in: usize) -> f64 {
    TANH_GAIN / (fan_in as f64).sqrt()
}

/// Standard deviation for weights feeding a relu: `√(2 / fan_in)`.
pub fn relu_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Fresh parameters: tanh-feeding weights `N(0, (5/3)²/fan_in)`,
/// relu-feeding `N(0, 2/fan_in)`, embeddings `N(0, 1)`, the output layer
/// `U(−ε, ε)`, norm gains 1 and shifts 0.
pub fn init_params(config: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
    config.validate()?;
    let mut init = Init {
        rng,
        params: ModelParams::new(),
    };
    match config.arch {
        Architecture::WaveNet => wavenet::init(config, &mut init),
        Architecture::Rnn => rnn::init(config, &mut init),
        Architecture::Transformer => transformer::init(config, &mut init),
    }
    Ok(init.params)
}

/// Number of stored scalars for `config`, running statistics included;
/// equals the total tensor size of a checkpoint.
pub fn count_params(config: &ModelConfig) -> usize {
    let (v, d, h) = (config.vocab_size, config.embed_dim, config.hidden_dim);
    let embed = v * d;
    match config.arch {
        Architecture::WaveNet => {
            let convs: usize = (0..config.conv_layers)
                .map(|l| {
                    let c_in = if l == 0 { d } else { h };
                    config.conv_kernel * c_in * h + 4 * h
                })
                .sum();
            embed + convs + h * v + v
        }
        Architecture::Rnn => embed + d * h + h * h + h + h * v + v,
        Architecture::Transformer => {
            let block = 4 * (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d) + 2 * d;
            embed + config.context_length * d + config.n_blocks * block + d * v + v
        }
    }
}

/// A configured model and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let model = Self { config, params };
        model.check_shapes()?;
        Ok(model)
    }

    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let params = init_params(&config, rng)?;
        Ok(Self { config, params })
    }

    /// Verifies the parameter table against a fresh initialisation.
    pub fn check_shapes(&self) -> Result<()> {
        let mut scratch = Rng::new(0);
        let reference = init_params(&self.config, &mut scratch)?;
        if reference.len() != self.params.len() {
            return Err(Error::malformed(
                "parameter table",
                format!("{} tensors, expected {}", self.params.len(), reference.len()),
            ));
        }
        for (name, t) in reference.iter() {
            match self.params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::malformed(
                        "parameter table",
                        format!("'{name}' has shape {:?}, expected {:?}", p.shape(), t.shape()),
                    ))
                }
                None => return Err(Error::malformed("parameter table", format!("missing '{name}'"))),
            }
        }
        Ok(())
    }

    /// Builds the forward graph for `ids` (`batch` rows of equal length).
    pub fn forward(&self, g: &mut Graph, ids: &[usize], batch: usize, mode: NormMode) -> Result<ForwardPass> {
        if batch == 0 || ids.is_empty() || !ids.len().is_multiple_of(batch) {
            return Err(Error::shape(
                "model forward",
                format!("{} ids do not form {batch} rows", ids.len()),
            ));
        }
        let len = ids.len() / batch;
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::IndexOutOfRange {
                op: "model forward",
                index: bad,
                limit: self.config.vocab_size,
            });
        }
        let mut b = Binder::new(&self.params, mode);
        let logits = match self.config.arch {
            Architecture::WaveNet => wavenet::forward(&self.config, &mut b, g, ids, batch, len)?,
            Architecture::Rnn => rnn::forward(&self.config, &mut b, g, ids, batch, len)?,
            Architecture::Transformer => transformer::forward(&self.config, &mut b, g, ids, batch, len)?,
        };
        Ok(ForwardPass {
            logits,
            params: b.bound.into_iter().collect(),
            batch_stats: b.stats,
        })
    }

    /// Eval-mode logits `[B, T, V]` without keeping the graph.
    pub fn logits(&self, ids: &[usize], batch: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let fp = self.forward(&mut g, ids, batch, NormMode::Eval)?;
        Ok(g.value(fp.logits).clone())
    }

    /// Folds Train-mode batch statistics into the running averages.
    pub fn apply_batch_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (prefix, s) in stats {
            let mut running = self.params.running(prefix)?;
            running.update(s);
            self.params
                .get_mut(&format!("{prefix}.{RUNNING_MEAN}"))
                .expect("checked")
                .data_mut()
                .copy_from_slice(&running.mean);
            self.params
                .get_mut(&format!("{prefix}.{RUNNING_VAR}"))
                .expect("checked")
                .data_mut()
                .copy_from_slice(&running.var);
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.params.numel()
    }

    /// One-line description for run banners.
    pub fn describe(&self) -> String {
        let c = &self.config;
        let shape = match c.arch {
            Architecture::WaveNet => format!(
                "embed {}, {} conv layers (kernel {}, dilations {:?}), {} channels, receptive field {}",
                c.embed_dim,
                c.conv_layers,
                c.conv_kernel,
                c.dilations(),
                c.hidden_dim,
                c.receptive_field()
            ),
            Architecture::Rnn => format!("embed {}, hidden {}", c.embed_dim, c.hidden_dim),
            Architecture::Transformer => format!(
                "embed {}, {} blocks, {} heads, ffn {}",
                c.embed_dim,
                c.n_blocks,
                c.n_heads,
                4 * c.embed_dim
            ),
        };
        format!("{}: {shape}, vocab {}, {} parameters", c.arch, c.vocab_size, self.n_params())
    }
}
