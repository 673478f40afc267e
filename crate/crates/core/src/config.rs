//! Experiment configuration files.
//!
//! A config is TOML with a top-level `seed` and `parallel` plus the sections
//! `[problem]`, `[algorithm]`, `[compressor]`, `[hyperparams]` and `[output]`.
//! Unknown keys are errors. [`ExperimentConfig::to_toml`] writes every
//! resolved value back out, so the echo re-parses to the same config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::algorithms::{AlgorithmSpec, ControlInit, HyperParams};
use crate::compress::{CompressorSpec, Partition};
use crate::error::{Error, Result};
use crate::objectives::Mlp;

pub const DEFAULT_LOCAL_STEPS: usize = 10;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_MAX_SAMPLED: usize = 20;
pub const DEFAULT_ROUNDS: usize = 100;
pub const DEFAULT_ETA_L: f64 = 0.01;
pub const DEFAULT_ETA_G: f64 = 1.0;
pub const DEFAULT_EVAL_SUBSAMPLE: usize = 2048;
pub const DEFAULT_MNIST_CLIENTS: usize = 200;
pub const DEFAULT_SHARDS_PER_CLIENT: usize = 2;

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemSpec {
    Quadratic {
        clients: usize,
        dim: usize,
        heterogeneity: f64,
        sigma: f64,
    },
    Mnist(MnistSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MnistSpec {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub clients: usize,
    pub shards_per_client: usize,
    pub hidden: Vec<usize>,
    /// Use only the first `n` training images.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl MnistSpec {
    /// Standard file names under `dir`.
    pub fn in_dir(dir: impl AsRef<Path>, clients: usize) -> Self {
        let dir = dir.as_ref();
        Self {
            train_images: dir.join(MNIST_TRAIN_IMAGES),
            train_labels: dir.join(MNIST_TRAIN_LABELS),
            test_images: Some(dir.join(MNIST_TEST_IMAGES)),
            test_labels: Some(dir.join(MNIST_TEST_LABELS)),
            clients,
            shards_per_client: DEFAULT_SHARDS_PER_CLIENT,
            hidden: vec![256, 128],
            train_limit: None,
            test_limit: None,
        }
    }

    pub fn mlp(&self) -> Result<Mlp> {
        let mut widths = vec![784];
        widths.extend(&self.hidden);
        widths.push(10);
        Mlp::new(widths)
    }
}

impl ProblemSpec {
    pub fn clients(&self) -> usize {
        match self {
            ProblemSpec::Quadratic { clients, .. } => *clients,
            ProblemSpec::Mnist(m) => m.clients,
        }
    }

    /// Model dimension, known without loading any data.
    pub fn dim(&self) -> Result<usize> {
        match self {
            ProblemSpec::Quadratic { dim, .. } => Ok(*dim),
            ProblemSpec::Mnist(m) => Ok(m.mlp()?.param_count()),
        }
    }

    /// Sizes of the natural coordinate groups (network layers).
    pub fn layer_sizes(&self) -> Result<Option<Vec<usize>>> {
        match self {
            ProblemSpec::Quadratic { .. } => Ok(None),
            ProblemSpec::Mnist(m) => Ok(Some(m.mlp()?.layer_param_counts())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub algorithm: AlgorithmSpec,
    pub hyper: HyperParams,
    pub seed: u64,
    pub control_init: ControlInit,
    /// Cap `η_l` by the step-size bound of the convergence theorem.
    pub theory_mode: bool,
    pub eval_interval: usize,
    /// Sample count for the loss/gradient estimate; `None` is exact.
    pub eval_subsample: Option<usize>,
    pub output: Option<PathBuf>,
    pub parallel: bool,
}

impl ExperimentConfig {
    /// Defaults for a quadratic problem with SCAFFOLD.
    pub fn quadratic(clients: usize, dim: usize, heterogeneity: f64, sigma: f64) -> Self {
        Self {
            problem: ProblemSpec::Quadratic {
                clients,
                dim,
                heterogeneity,
                sigma,
            },
            algorithm: AlgorithmSpec::ScaffoldSingle,
            hyper: default_hyper(clients),
            seed: 0,
            control_init: ControlInit::Zero,
            theory_mode: false,
            eval_interval: 1,
            eval_subsample: None,
            output: None,
            parallel: false,
        }
    }

    /// Defaults for MNIST with SCAFFOLD.
    pub fn mnist(spec: MnistSpec) -> Self {
        let clients = spec.clients;
        Self {
            problem: ProblemSpec::Mnist(spec),
            algorithm: AlgorithmSpec::ScaffoldSingle,
            hyper: default_hyper(clients),
            seed: 0,
            control_init: ControlInit::Zero,
            theory_mode: false,
            eval_interval: 1,
            eval_subsample: Some(DEFAULT_EVAL_SUBSAMPLE),
            output: None,
            parallel: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.problem {
            ProblemSpec::Quadratic {
                clients,
                dim,
                heterogeneity,
                sigma,
            } => {
                positive("problem.clients", *clients)?;
                positive("problem.dim", *dim)?;
                if !(*heterogeneity >= 0.0 && heterogeneity.is_finite()) {
                    return Err(Error::config("problem.heterogeneity", "must be finite and >= 0"));
                }
                if !(*sigma >= 0.0 && sigma.is_finite()) {
                    return Err(Error::config("problem.sigma", "must be finite and >= 0"));
                }
            }
            ProblemSpec::Mnist(m) => {
                positive("problem.clients", m.clients)?;
                positive("problem.shards_per_client", m.shards_per_client)?;
                if m.hidden.contains(&0) {
                    return Err(Error::config("problem.hidden", "layer widths must be positive"));
                }
                if m.test_images.is_some() != m.test_labels.is_some() {
                    return Err(Error::config(
                        "problem.test_images",
                        "test_images and test_labels must be given together",
                    ));
                }
                if m.train_limit == Some(0) {
                    return Err(Error::config("problem.train_limit", "must be positive"));
                }
                if m.test_limit == Some(0) {
                    return Err(Error::config("problem.test_limit", "must be positive"));
                }
                if self.theory_mode {
                    return Err(Error::config(
                        "algorithm.theory_mode",
                        "needs known smoothness and noise constants; only quadratic problems have them",
                    ));
                }
            }
        }
        if self.theory_mode && self.algorithm == AlgorithmSpec::FedAvg {
            return Err(Error::config(
                "algorithm.theory_mode",
                "no step-size recipe exists for fedavg",
            ));
        }
        if let ControlInit::Minibatch { samples } = self.control_init {
            positive("algorithm.control_init_samples", samples)?;
        }
        self.hyper.validate(self.problem.clients())?;
        self.algorithm.validate(self.problem.dim()?)?;
        positive("output.eval_interval", self.eval_interval)?;
        if self.eval_subsample == Some(0) {
            return Err(Error::config("output.eval_subsample", "use 0 in files, None in code, for exact"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
        raw.resolve()
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Fully resolved TOML echo of this config.
    pub fn to_toml(&self) -> Result<String> {
        let raw = RawConfig::from_resolved(self)?;
        toml::to_string(&raw).map_err(|e| Error::config("seed", e.to_string()))
    }
}

fn default_hyper(clients: usize) -> HyperParams {
    HyperParams {
        eta_l: DEFAULT_ETA_L,
        eta_g: DEFAULT_ETA_G,
        local_steps: DEFAULT_LOCAL_STEPS,
        sampled_clients: clients.clamp(1, DEFAULT_MAX_SAMPLED),
        rounds: DEFAULT_ROUNDS,
        batch_size: DEFAULT_BATCH_SIZE,
    }
}

fn positive(key: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::config(key, "must be >= 1"))
    } else {
        Ok(())
    }
}

/// Names the offending `section.key` by locating the error span in the source.
fn toml_error(text: &str, err: &toml::de::Error) -> Error {
    let message = err.message().to_string();
    let Some(span) = err.span() else {
        return Error::config("<file>", message);
    };
    let mut section = String::new();
    let mut key = String::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            section = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        }
        if offset + line.len() > span.start {
            key = match trimmed.split_once('=') {
                Some((k, _)) => k.trim().trim_matches('"').to_string(),
                None if trimmed.starts_with('[') => String::new(),
                None => trimmed.to_string(),
            };
            break;
        }
        offset += line.len();
    }
    let full = match (section.is_empty(), key.is_empty()) {
        (true, true) => "<file>".to_string(),
        (true, false) => key,
        (false, true) => section,
        (false, false) => format!("{section}.{key}"),
    };
    Error::config(full, message)
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    parallel: Option<bool>,
    problem: RawProblem,
    #[serde(default)]
    algorithm: RawAlgorithm,
    #[serde(skip_serializing_if = "Option::is_none")]
    compressor: Option<RawCompressor>,
    #[serde(default)]
    hyperparams: RawHyper,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    #[serde(skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    clients: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    heterogeneity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    data_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    shards_per_client: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_limit: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAlgorithm {
    #[serde(skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    control_init: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    control_init_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    theory_mode: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum RawGroups {
    Count(usize),
    Named(String),
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCompressor {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    s: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bits: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    groups: Option<RawGroups>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scaled: Option<bool>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHyper {
    #[serde(skip_serializing_if = "Option::is_none")]
    eta_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eta_g: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    local_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sampled_clients: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rounds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_interval: Option<usize>,
    /// 0 means exact evaluation.
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_subsample: Option<usize>,
}

fn reject<T>(key: &str, value: &Option<T>, why: &str) -> Result<()> {
    match value {
        Some(_) => Err(Error::config(key, why)),
        None => Ok(()),
    }
}

impl RawProblem {
    fn resolve(self) -> Result<ProblemSpec> {
        match self.kind.as_deref().unwrap_or("quadratic") {
            "quadratic" => {
                let why = "only valid for kind = \"mnist\"";
                reject("problem.data_dir", &self.data_dir, why)?;
                reject("problem.train_images", &self.train_images, why)?;
                reject("problem.train_labels", &self.train_labels, why)?;
                reject("problem.test_images", &self.test_images, why)?;
                reject("problem.test_labels", &self.test_labels, why)?;
                reject("problem.shards_per_client", &self.shards_per_client, why)?;
                reject("problem.hidden", &self.hidden, why)?;
                reject("problem.train_limit", &self.train_limit, why)?;
                reject("problem.test_limit", &self.test_limit, why)?;
                Ok(ProblemSpec::Quadratic {
                    clients: self
                        .clients
                        .ok_or_else(|| Error::config("problem.clients", "required"))?,
                    dim: self.dim.ok_or_else(|| Error::config("problem.dim", "required"))?,
                    heterogeneity: self.heterogeneity.unwrap_or(1.0),
                    sigma: self.sigma.unwrap_or(0.0),
                })
            }
            "mnist" => {
                let why = "only valid for kind = \"quadratic\"";
                reject("problem.dim", &self.dim, why)?;
                reject("problem.heterogeneity", &self.heterogeneity, why)?;
                reject("problem.sigma", &self.sigma, why)?;
                let clients = self.clients.unwrap_or(DEFAULT_MNIST_CLIENTS);
                let mut spec = match &self.data_dir {
                    Some(dir) => {
                        for (key, v) in [
                            ("problem.train_images", &self.train_images),
                            ("problem.train_labels", &self.train_labels),
                            ("problem.test_images", &self.test_images),
                            ("problem.test_labels", &self.test_labels),
                        ] {
                            reject(key, v, "conflicts with problem.data_dir")?;
                        }
                        MnistSpec::in_dir(dir, clients)
                    }
                    None => MnistSpec {
                        train_images: self.train_images.ok_or_else(|| {
                            Error::config("problem.train_images", "required without data_dir")
                        })?,
                        train_labels: self.train_labels.ok_or_else(|| {
                            Error::config("problem.train_labels", "required without data_dir")
                        })?,
                        test_images: self.test_images,
                        test_labels: self.test_labels,
                        ..MnistSpec::in_dir("", clients)
                    },
                };
                if let Some(s) = self.shards_per_client {
                    spec.shards_per_client = s;
                }
                if let Some(h) = self.hidden {
                    spec.hidden = h;
                }
                spec.train_limit = self.train_limit;
                spec.test_limit = self.test_limit;
                Ok(ProblemSpec::Mnist(spec))
            }
            other => Err(Error::config(
                "problem.kind",
                format!("unknown problem kind {other:?}; expected \"quadratic\" or \"mnist\""),
            )),
        }
    }
}

impl RawCompressor {
    fn resolve(&self, problem: &ProblemSpec) -> Result<CompressorSpec> {
        let only = |key: &str, v: bool| {
            if v {
                Err(Error::config(
                    format!("compressor.{key}"),
                    format!("not a parameter of kind {:?}", self.kind),
                ))
            } else {
                Ok(())
            }
        };
        let kind = self.kind.as_str();
        only("s", self.s.is_some() && kind != "random-sparsify")?;
        only("bits", self.bits.is_some() && kind != "random-dither")?;
        only("r", self.r.is_some() && kind != "top-r")?;
        only("groups", self.groups.is_some() && kind != "grouped-sign")?;
        let need = |key: &str| Error::config(format!("compressor.{key}"), "required for this kind");
        let base = match kind {
            "identity" => CompressorSpec::Identity,
            "random-sparsify" => CompressorSpec::RandomSparsify {
                s: self.s.ok_or_else(|| need("s"))?,
            },
            "random-dither" => CompressorSpec::RandomDither {
                bits: self.bits.ok_or_else(|| need("bits"))?,
            },
            "top-r" => CompressorSpec::TopR {
                r: self.r.ok_or_else(|| need("r"))?,
            },
            "grouped-sign" => {
                let partition = match self.groups.as_ref().ok_or_else(|| need("groups"))? {
                    RawGroups::Count(m) => Partition::contiguous(problem.dim()?, *m),
                    RawGroups::Named(n) if n == "layers" => match problem.layer_sizes()? {
                        Some(sizes) => Partition::from_sizes(&sizes),
                        None => Err(Error::config(
                            "compressor.groups",
                            "\"layers\" needs a network problem",
                        )),
                    },
                    RawGroups::Named(n) => Err(Error::config(
                        "compressor.groups",
                        format!("expected a group count or \"layers\", got {n:?}"),
                    )),
                }
                .map_err(|e| match e {
                    Error::InvalidInput { reason, .. } => Error::config("compressor.groups", reason),
                    other => other,
                })?;
                CompressorSpec::GroupedSign { partition }
            }
            other => {
                return Err(Error::config(
                    "compressor.kind",
                    format!(
                        "unknown compressor {other:?}; expected identity, random-sparsify, random-dither, top-r or grouped-sign"
                    ),
                ))
            }
        };
        Ok(if self.scaled.unwrap_or(false) {
            CompressorSpec::scaled(base)
        } else {
            base
        })
    }

    fn from_spec(spec: &CompressorSpec, problem: &ProblemSpec) -> Result<Self> {
        let mut raw = RawCompressor::default();
        let inner = match spec {
            CompressorSpec::ScaledUnbiased(inner) => {
                raw.scaled = Some(true);
                inner.as_ref()
            }
            other => other,
        };
        match inner {
            CompressorSpec::Identity => raw.kind = "identity".into(),
            CompressorSpec::RandomSparsify { s } => {
                raw.kind = "random-sparsify".into();
                raw.s = Some(*s);
            }
            CompressorSpec::RandomDither { bits } => {
                raw.kind = "random-dither".into();
                raw.bits = Some(*bits);
            }
            CompressorSpec::TopR { r } => {
                raw.kind = "top-r".into();
                raw.r = Some(*r);
            }
            CompressorSpec::GroupedSign { partition } => {
                raw.kind = "grouped-sign".into();
                let m = partition.groups().len();
                let layers = problem
                    .layer_sizes()?
                    .map(|s| Partition::from_sizes(&s))
                    .transpose()?;
                raw.groups = if layers.as_ref() == Some(partition) {
                    Some(RawGroups::Named("layers".into()))
                } else if Partition::contiguous(partition.dim(), m).ok().as_ref() == Some(partition) {
                    Some(RawGroups::Count(m))
                } else {
                    return Err(Error::config(
                        "compressor.groups",
                        "only contiguous or per-layer partitions can be written to a config file",
                    ));
                };
            }
            CompressorSpec::ScaledUnbiased(_) => {
                return Err(Error::config("compressor.scaled", "nested scaling"));
            }
        }
        Ok(raw)
    }
}

impl RawConfig {
    fn resolve(self) -> Result<ExperimentConfig> {
        let problem = self.problem.resolve()?;
        let clients = problem.clients();
        let alg = self.algorithm;
        let name = alg.name.as_deref().unwrap_or("scaffold");
        let compressor = match &self.compressor {
            Some(c) => Some(c.resolve(&problem)?),
            None => None,
        };
        let no_compressor = |n: &str| match &self.compressor {
            Some(_) => Err(Error::config(
                "compressor",
                format!("{n} sends uncompressed messages; remove the [compressor] section"),
            )),
            None => Ok(()),
        };
        let algorithm = match name {
            "fedavg" | "scaffold" | "scaffold-original" => {
                no_compressor(name)?;
                reject("algorithm.alpha", &alg.alpha, "only valid for scallion")?;
                reject("algorithm.beta", &alg.beta, "only valid for scafcom")?;
                match name {
                    "fedavg" => AlgorithmSpec::FedAvg,
                    "scaffold" => AlgorithmSpec::ScaffoldSingle,
                    _ => AlgorithmSpec::ScaffoldOriginal,
                }
            }
            "scallion" => {
                reject("algorithm.beta", &alg.beta, "only valid for scafcom")?;
                AlgorithmSpec::Scallion {
                    compressor: compressor.unwrap_or(CompressorSpec::Identity),
                    alpha: alg.alpha.unwrap_or(1.0),
                }
            }
            "scafcom" => {
                reject("algorithm.alpha", &alg.alpha, "only valid for scallion")?;
                AlgorithmSpec::Scafcom {
                    compressor: compressor.unwrap_or(CompressorSpec::Identity),
                    beta: alg.beta.unwrap_or(1.0),
                }
            }
            other => {
                return Err(Error::config(
                    "algorithm.name",
                    format!(
                        "unknown algorithm {other:?}; expected fedavg, scaffold, scaffold-original, scallion or scafcom"
                    ),
                ))
            }
        };
        let control_init = match alg.control_init.as_deref().unwrap_or("zero") {
            "zero" => {
                reject(
                    "algorithm.control_init_samples",
                    &alg.control_init_samples,
                    "only valid with control_init = \"minibatch\"",
                )?;
                ControlInit::Zero
            }
            "minibatch" => ControlInit::Minibatch {
                samples: alg.control_init_samples.unwrap_or(DEFAULT_BATCH_SIZE),
            },
            other => {
                return Err(Error::config(
                    "algorithm.control_init",
                    format!("expected \"zero\" or \"minibatch\", got {other:?}"),
                ))
            }
        };
        let defaults = default_hyper(clients);
        let h = self.hyperparams;
        let hyper = HyperParams {
            eta_l: h.eta_l.unwrap_or(defaults.eta_l),
            eta_g: h.eta_g.unwrap_or(defaults.eta_g),
            local_steps: h.local_steps.unwrap_or(defaults.local_steps),
            sampled_clients: h.sampled_clients.unwrap_or(defaults.sampled_clients),
            rounds: h.rounds.unwrap_or(defaults.rounds),
            batch_size: h.batch_size.unwrap_or(defaults.batch_size),
        };
        let default_subsample = match problem {
            ProblemSpec::Quadratic { .. } => None,
            ProblemSpec::Mnist(_) => Some(DEFAULT_EVAL_SUBSAMPLE),
        };
        let config = ExperimentConfig {
            problem,
            algorithm,
            hyper,
            seed: self.seed.unwrap_or(0),
            control_init,
            theory_mode: alg.theory_mode.unwrap_or(false),
            eval_interval: self.output.eval_interval.unwrap_or(1),
            eval_subsample: match self.output.eval_subsample {
                Some(0) => None,
                Some(m) => Some(m),
                None => default_subsample,
            },
            output: self.output.path,
            parallel: self.parallel.unwrap_or(false),
        };
        config.validate()?;
        Ok(config)
    }

    fn from_resolved(c: &ExperimentConfig) -> Result<Self> {
        let problem = match &c.problem {
            ProblemSpec::Quadratic {
                clients,
                dim,
                heterogeneity,
                sigma,
            } => RawProblem {
                kind: Some("quadratic".into()),
                clients: Some(*clients),
                dim: Some(*dim),
                heterogeneity: Some(*heterogeneity),
                sigma: Some(*sigma),
                ..Default::default()
            },
            ProblemSpec::Mnist(m) => RawProblem {
                kind: Some("mnist".into()),
                clients: Some(m.clients),
                train_images: Some(m.train_images.clone()),
                train_labels: Some(m.train_labels.clone()),
                test_images: m.test_images.clone(),
                test_labels: m.test_labels.clone(),
                shards_per_client: Some(m.shards_per_client),
                hidden: Some(m.hidden.clone()),
                train_limit: m.train_limit,
                test_limit: m.test_limit,
                ..Default::default()
            },
        };
        let mut algorithm = RawAlgorithm {
            name: Some(c.algorithm.name().into()),
            theory_mode: Some(c.theory_mode),
            ..Default::default()
        };
        match c.control_init {
            ControlInit::Zero => algorithm.control_init = Some("zero".into()),
            ControlInit::Minibatch { samples } => {
                algorithm.control_init = Some("minibatch".into());
                algorithm.control_init_samples = Some(samples);
            }
        }
        let compressor = match &c.algorithm {
            AlgorithmSpec::Scallion { compressor, alpha } => {
                algorithm.alpha = Some(*alpha);
                Some(RawCompressor::from_spec(compressor, &c.problem)?)
            }
            AlgorithmSpec::Scafcom { compressor, beta } => {
                algorithm.beta = Some(*beta);
                Some(RawCompressor::from_spec(compressor, &c.problem)?)
            }
            _ => None,
        };
        let h = &c.hyper;
        Ok(RawConfig {
            seed: Some(c.seed),
            parallel: Some(c.parallel),
            problem,
            algorithm,
            compressor,
            hyperparams: RawHyper {
                eta_l: Some(h.eta_l),
                eta_g: Some(h.eta_g),
                local_steps: Some(h.local_steps),
                sampled_clients: Some(h.sampled_clients),
                rounds: Some(h.rounds),
                batch_size: Some(h.batch_size),
            },
            output: RawOutput {
                path: c.output.clone(),
                eval_interval: Some(c.eval_interval),
                eval_subsample: Some(c.eval_subsample.unwrap_or(0)),
            },
        })
    }
}
