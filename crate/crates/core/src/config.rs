//! Run-level configuration shared by the command-line entry points.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bench::protocols::BenchConfig;
use crate::embedding::{CachedProvider, EmbeddingProvider, OfflineEmbedder, RandomEmbedder, RemoteConfig, RemoteProvider};
use crate::encoder::EncoderVariant;
use crate::error::{Error, Result};
use crate::model::FusionConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Offline,
    Remote,
}

impl FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(ProviderKind::Offline),
            "remote" => Ok(ProviderKind::Remote),
            other => Err(Error::Validation(format!("provider must be `offline` or `remote`, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderSettings {
    pub kind: ProviderKind,
    pub dimension: usize,
    /// Seed of the offline embedder.
    pub seed: u64,
    /// Disk cache for remote vectors.
    pub cache_dir: Option<PathBuf>,
}

impl Default for ProviderSettings {
    fn default() -> Self {
        ProviderSettings {
            kind: ProviderKind::Offline,
            dimension: 256,
            seed: 0,
            cache_dir: None,
        }
    }
}

impl ProviderSettings {
    /// The provider backing `variant`. The random-embedding ablation always
    /// uses the structure-free hashing embedder.
    pub fn build(&self, variant: EncoderVariant) -> Result<Box<dyn EmbeddingProvider>> {
        if variant == EncoderVariant::RandomEmbed {
            return Ok(Box::new(RandomEmbedder::new(self.seed, self.dimension)));
        }
        match self.kind {
            ProviderKind::Offline => Ok(Box::new(OfflineEmbedder::new(self.seed, self.dimension)?)),
            ProviderKind::Remote => {
                let remote = RemoteProvider::new(RemoteConfig::from_env(self.dimension)?);
                match &self.cache_dir {
                    Some(dir) => Ok(Box::new(CachedProvider::new(remote, dir)?)),
                    None => Ok(Box::new(remote)),
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: EncoderVariant,
    pub provider: ProviderSettings,
    pub model: FusionConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            variant: EncoderVariant::Semantic,
            provider: ProviderSettings::default(),
            model: FusionConfig::default(),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::parse("run config", e))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    /// Copies the run seed into the nested configurations.
    pub fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.bench.seed = self.seed;
        self.bench.provider.seed = self.seed;
        self.provider.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.provider.dimension != self.model.embed_dim {
            return Err(Error::Validation(format!(
                "provider.dimension ({}) must equal model.embed_dim ({})",
                self.provider.dimension, self.model.embed_dim
            )));
        }
        self.bench.validate()
    }

    /// Writes `config.json` into `dir`, creating it if needed.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }
}
