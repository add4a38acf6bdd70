//! Run configuration: one JSON document, see `docs/config.md`.

use std::fs;
use std::path::{Path, PathBuf};

use arlif::data::{load_idx, synth_events, Dataset, SynthPattern};
use arlif::network::{conv_small, mlp, LayerSpec, Network};
use arlif::neurons::NeuronParams;
use arlif::training::{Encoding, LossConfig, OptimizerConfig, Samples, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// A directory holding the four standard MNIST IDX files.
    Mnist {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    /// Generated spike frames on an 8x8 grid.
    Synthetic {
        pattern: String,
        train_samples: usize,
        test_samples: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkSpec {
    /// Flatten, hidden spiking linear layers, linear readout.
    Mlp { hidden: Vec<usize> },
    /// Two spiking conv + pool stages and a linear readout (28x28 input).
    ConvSmall,
    /// Explicit layers; hidden weight layers without a neuron get the run's neuron defaults.
    Custom { layers: Vec<LayerSpec> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub network: NetworkSpec,
    #[serde(default)]
    pub neuron: NeuronParams,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub timesteps: usize,
    #[serde(default)]
    pub encoding: Encoding,
    #[serde(default)]
    pub eval_batch_size: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Seeds initialization, shuffling and encoders; overrides `optimizer.seed`.
    #[serde(default)]
    pub seed: Option<u64>,
}

/// A parsed config together with where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub path: PathBuf,
    text: String,
}

fn line_of(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

impl LoadedConfig {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| {
            CliError::Usage(format!("{}:{}:{}: {}", path.display(), e.line(), e.column(), strip_position(&e)))
        })?;
        let loaded = Self {
            config,
            path: path.to_path_buf(),
            text: text.to_string(),
        };
        loaded.validate()?;
        Ok(loaded)
    }

    /// A range error pointing at the line that sets `key`.
    fn range_error(&self, key: &str, detail: impl std::fmt::Display) -> CliError {
        match line_of(&self.text, key) {
            Some(line) => CliError::Usage(format!("{}:{line}: {detail}", self.path.display())),
            None => CliError::Usage(format!("{}: {detail}", self.path.display())),
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        if c.timesteps == 0 {
            return Err(self.range_error("timesteps", "timesteps must be >= 1, got 0"));
        }
        c.neuron.validate().map_err(|e| self.core_range_error(e))?;
        c.loss.validate().map_err(|e| self.core_range_error(e))?;
        c.optimizer.validate().map_err(|e| self.core_range_error(e))?;
        if c.eval_batch_size == Some(0) {
            return Err(self.range_error("eval_batch_size", "eval_batch_size must be >= 1"));
        }
        match &c.dataset {
            DatasetSpec::Mnist { train_limit, test_limit, .. } => {
                if *train_limit == Some(0) || *test_limit == Some(0) {
                    return Err(self.range_error("train_limit", "sample limits must be >= 1"));
                }
            }
            DatasetSpec::Synthetic {
                pattern,
                train_samples,
                test_samples,
            } => {
                SynthPattern::from_name(pattern).map_err(|e| self.range_error("pattern", e))?;
                if *train_samples == 0 || *test_samples == 0 {
                    return Err(self.range_error("train_samples", "sample counts must be >= 1"));
                }
            }
        }
        if let NetworkSpec::Mlp { hidden } = &c.network {
            if hidden.contains(&0) {
                return Err(self.range_error("hidden", "hidden widths must be >= 1"));
            }
        }
        if let NetworkSpec::Custom { layers } = &c.network {
            for l in layers {
                if let Some(n) = &l.neuron {
                    n.validate().map_err(|e| self.core_range_error(e))?;
                }
            }
        }
        Ok(())
    }

    fn core_range_error(&self, e: arlif::Error) -> CliError {
        match &e {
            arlif::Error::Parameter { name, .. } => {
                let key = name.split('.').next().unwrap_or(name);
                self.range_error(key, e)
            }
            _ => self.range_error("", e),
        }
    }

    /// Directory that relative paths are resolved against.
    pub fn base_dir(&self) -> PathBuf {
        self.path.parent().map(Path::to_path_buf).unwrap_or_default()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir().join(p)
        }
    }

    /// Effective seed: `override_seed`, else `seed`, else `optimizer.seed`.
    pub fn seed(&self, override_seed: Option<u64>) -> u64 {
        override_seed.or(self.config.seed).unwrap_or(self.config.optimizer.seed)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let c = &self.config;
        TrainConfig {
            timesteps: c.timesteps,
            encoding: c.encoding,
            loss: c.loss,
            optimizer: OptimizerConfig { seed, ..c.optimizer },
            eval_batch_size: c.eval_batch_size,
        }
    }

    pub fn output_dir(&self, override_dir: Option<&Path>) -> Result<PathBuf, CliError> {
        match (override_dir, &self.config.output_dir) {
            (Some(d), _) => Ok(d.to_path_buf()),
            (None, Some(d)) => Ok(self.resolve(d)),
            (None, None) => Err(CliError::Usage(format!(
                "{}: no output_dir in config and no --out given",
                self.path.display()
            ))),
        }
    }

    /// Loads (or generates) the train and test splits.
    pub fn load_data(&self, seed: u64) -> Result<(Samples, Samples), CliError> {
        match &self.config.dataset {
            DatasetSpec::Mnist {
                dir,
                train_limit,
                test_limit,
            } => {
                let dir = self.resolve(dir);
                let files: Vec<PathBuf> = MNIST_FILES.iter().map(|f| dir.join(f)).collect();
                if let Some(missing) = files.iter().find(|f| !f.is_file()) {
                    return Err(CliError::Usage(format!(
                        "dataset file {} not found (run scripts/fetch_mnist.sh)",
                        missing.display()
                    )));
                }
                let limit = |ds: Dataset, n: &Option<usize>| -> Result<Dataset, CliError> {
                    Ok(match n {
                        Some(n) => ds.truncated(*n)?,
                        None => ds,
                    })
                };
                let train = limit(load_idx(&files[0], &files[1])?, train_limit)?;
                let test = limit(load_idx(&files[2], &files[3])?, test_limit)?;
                Ok((Samples::Static(train), Samples::Static(test)))
            }
            DatasetSpec::Synthetic {
                pattern,
                train_samples,
                test_samples,
            } => {
                let pattern = SynthPattern::from_name(pattern)?;
                let t = self.config.timesteps;
                let train = synth_events(pattern, *train_samples, t, seed)?;
                let test = synth_events(pattern, *test_samples, t, seed.wrapping_add(1))?;
                Ok((Samples::Events(train), Samples::Events(test)))
            }
        }
    }

    /// Layer list for the configured network, with every spiking layer using
    /// `neuron` (or, for custom layers that set one, their own).
    pub fn layer_specs(&self, sample_shape: &[usize], classes: usize, neuron: NeuronParams) -> Vec<LayerSpec> {
        match &self.config.network {
            NetworkSpec::Mlp { hidden } => mlp(sample_shape.iter().product(), hidden, classes, neuron),
            NetworkSpec::ConvSmall => conv_small(classes, neuron),
            NetworkSpec::Custom { layers } => {
                let last = layers.len().saturating_sub(1);
                layers
                    .iter()
                    .enumerate()
                    .map(|(i, l)| {
                        let mut l = l.clone();
                        if i != last && l.kind.has_weights() && l.neuron.is_none() {
                            l.neuron = Some(neuron);
                        }
                        l
                    })
                    .collect()
            }
        }
    }

    /// Builds the network, replacing every spiking layer's neuron with `adjust(neuron)`.
    pub fn build_network(
        &self,
        sample_shape: &[usize],
        classes: usize,
        seed: u64,
        adjust: impl Fn(NeuronParams) -> NeuronParams,
    ) -> Result<Network, CliError> {
        let specs = self
            .layer_specs(sample_shape, classes, self.config.neuron)
            .into_iter()
            .map(|mut l| {
                l.neuron = l.neuron.map(&adjust);
                l
            })
            .collect();
        Network::new(specs, sample_shape, seed).map_err(|e| CliError::Usage(format!("{}: {e}", self.path.display())))
    }
}

fn strip_position(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg,
    }
}
