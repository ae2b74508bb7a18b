//! Experiment configuration: one strict TOML document covering data, network,
//! noise levels, training, sampling and likelihood estimation.
//!
//! Every field has a default, unknown keys are rejected, and
//! [`Config::resolve`] fills in derived values so the echoed file fully
//! determines a run.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::GmmOracle;
use crate::error::{Error, Result};
use crate::likelihood::AisConfig;
use crate::net::NetConfig;
use crate::noise::{NoiseSchedule, Spacing};
use crate::sampler::{default_end_temperature, AnnealSchedule, SampleConfig};
use crate::tensor::Tensor;
use crate::train::{AdamConfig, TrainConfig, Weighting};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    /// Synthetic ring of Gaussians.
    #[default]
    Ring,
    /// Comma-separated rows of floats.
    Csv2d,
    /// IDX image file, flattened and scaled to `[0, 1]`.
    IdxImages,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Keep at most this many rows of a file dataset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    /// Ring: number of points drawn once before training.
    pub n_points: usize,
    pub n_modes: usize,
    pub radius: f64,
    pub std: f64,
    pub center: [f64; 2],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Ring,
            path: None,
            limit: None,
            n_points: 10_000,
            n_modes: 8,
            radius: 1.0,
            std: 0.05,
            center: [0.5, 0.5],
        }
    }
}

impl DataConfig {
    pub fn oracle(&self) -> Result<GmmOracle> {
        GmmOracle::ring(self.n_modes, self.radius, self.std, self.center)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSection {
    pub hidden_dims: Vec<usize>,
    /// Initialization seed; defaults to the global seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for NetSection {
    fn default() -> Self {
        NetSection {
            hidden_dims: vec![64, 64],
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub min: f64,
    pub max: f64,
    pub levels: usize,
    pub spacing: Spacing,
    pub sigma0: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            min: 0.05,
            max: 1.2,
            levels: 128,
            spacing: Spacing::Linear,
            sigma0: 0.1,
        }
    }
}

impl NoiseSection {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.min, self.max, self.levels, self.spacing, self.sigma0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub weighting: Weighting,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 20_000,
            batch_size: 128,
            checkpoint_every: 5000,
            weighting: Weighting::InverseVariance,
            learning_rate: AdamConfig::default().learning_rate,
            beta1: AdamConfig::default().beta1,
            beta2: AdamConfig::default().beta2,
            eps: AdamConfig::default().eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub n_chains: usize,
    pub n_steps: usize,
    pub t_start: f64,
    /// Defaults to `(σ_min/σ₀)²`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    pub step_size: f64,
    pub init_center: f64,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            n_chains: 2000,
            n_steps: crate::sampler::DEFAULT_ANNEAL_STEPS,
            t_start: crate::sampler::DEFAULT_START_TEMPERATURE,
            t_end: None,
            step_size: crate::sampler::DEFAULT_STEP_SIZE,
            init_center: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct Config {
    pub seed: u64,
    /// Output directory; the command line takes precedence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub data: DataConfig,
    pub net: NetSection,
    pub noise: NoiseSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub ais: AisConfig,
}


impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    /// Fills in every derived default and validates the result.
    pub fn resolve(mut self) -> Result<Self> {
        self.net.seed.get_or_insert(self.seed);
        if self.sample.t_end.is_none() {
            self.sample.t_end = Some(default_end_temperature(self.noise.min, self.noise.sigma0));
        }
        self.noise.schedule()?;
        self.train_config()?.validate()?;
        self.anneal()?;
        self.ais.validate()?;
        if self.data.kind != DataKind::Ring && self.data.path.is_none() {
            return Err(Error::config("file datasets need data.path"));
        }
        Ok(self)
    }

    pub fn net_config(&self, input_dim: usize) -> NetConfig {
        NetConfig::new(input_dim, self.net.hidden_dims.clone(), self.net.seed.unwrap_or(self.seed))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            schedule: self.noise.schedule()?,
            weighting: self.train.weighting,
            batch_size: self.train.batch_size,
            adam: AdamConfig {
                learning_rate: self.train.learning_rate,
                beta1: self.train.beta1,
                beta2: self.train.beta2,
                eps: self.train.eps,
            },
            steps: self.train.steps,
            checkpoint_every: self.train.checkpoint_every,
            seed: self.seed,
        })
    }

    pub fn anneal(&self) -> Result<AnnealSchedule> {
        let s = &self.sample;
        let t_end = s
            .t_end
            .unwrap_or_else(|| default_end_temperature(self.noise.min, self.noise.sigma0));
        AnnealSchedule::default_anneal(s.n_steps, s.t_start, t_end)?.with_step_size(s.step_size)
    }

    pub fn sample_config(&self, trace: bool) -> SampleConfig {
        SampleConfig {
            n_chains: self.sample.n_chains,
            sigma0: self.noise.sigma0,
            init_center: self.sample.init_center,
            trace,
        }
    }

    /// The training data. Ring data are drawn with a generator seeded from
    /// the global seed, independent of every other stream.
    pub fn dataset(&self, base: &Path) -> Result<Tensor> {
        match self.data.kind {
            DataKind::Ring => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(1);
                Ok(self.data.oracle()?.sample(self.data.n_points, &mut rng).0)
            }
            kind => {
                let path = self.data.path.as_ref().ok_or_else(|| Error::config("data.path missing"))?;
                let path = if path.is_relative() { base.join(path) } else { path.clone() };
                let data = crate::io::load_dataset(&path, kind)?;
                Ok(match self.data.limit {
                    Some(n) if n < data.rows() => data.slice_rows(0, n),
                    _ => data,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::from_toml("sed = 1").is_err());
        assert!(Config::from_toml("[train]\nstep = 5").is_err());
        assert!(Config::from_toml("[ais]\nchains = 5").is_err());
    }

    #[test]
    fn resolved_echo_round_trips() {
        let c = Config::from_toml("seed = 7\n[train]\nlearning_rate = 1e-3\n[ais.beta_spacing]\nkind = \"exponential\"\nrate = 4.0\n")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(c.net.seed, Some(7));
        assert_eq!(c.sample.t_end, Some(0.25));
        let back = Config::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.clone().resolve().unwrap(), back);
    }

    #[test]
    fn file_data_needs_path() {
        let c = Config::from_toml("[data]\nkind = \"csv2d\"").unwrap();
        assert!(c.resolve().is_err());
    }
}
