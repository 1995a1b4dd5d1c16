//! Run configuration file.
//!
//! ```toml
//! [model]
//! arch = "vit"
//! image_height = 32
//! image_width = 32
//! patch_size = 8
//! embed_dim = 32
//! depth = 2
//! heads = 4
//!
//! [head]
//! out_dim = 64
//!
//! [train]
//! epochs = 50
//! lr = 1e-3
//!
//! [eval]
//! mode = "finetune"
//! voting = "four_crop"
//!
//! [data]
//! images = "corpus/images.csv"
//! labels = "corpus/labels.csv"
//! task = "bright"
//! ```

use std::path::{Path, PathBuf};

use nvk_core::backbone::BackboneConfig;
use nvk_core::checkpoint::sha256_hex;
use nvk_core::dino::{DinoConfig, HeadConfig};
use nvk_core::eval::ProbeConfig;
use nvk_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Written next to every output so later commands can find the architecture.
pub const RESOLVED_NAME: &str = "config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Image list for pretraining: a `path` CSV or a label manifest.
    pub images: Option<PathBuf>,
    /// `path,task,label` manifest.
    pub labels: Option<PathBuf>,
    /// `path,split` manifest.
    pub splits: Option<PathBuf>,
    pub task: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<BackboneConfig>,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub train: DinoConfig,
    #[serde(default)]
    pub eval: ProbeConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl RunConfig {
    /// Parses `path`; relative data paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let data = &mut cfg.data;
        for p in [&mut data.images, &mut data.labels, &mut data.splits]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// The explicit config, else the one saved beside `ckpt`, else defaults.
    pub fn resolve(config: Option<&Path>, ckpt: Option<&Path>) -> Result<Self> {
        if let Some(path) = config {
            return Self::load(path);
        }
        if let Some(beside) = ckpt.and_then(Path::parent).map(|d| d.join(RESOLVED_NAME)) {
            if beside.exists() {
                log::info!("using {}", beside.display());
                return Self::load(&beside);
            }
        }
        Ok(Self::default())
    }

    pub fn model(&self) -> Result<&BackboneConfig> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| Error::Config("the config has no [model] section".into()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.eval.seed = seed;
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// SHA-256 of the canonical serialization, so CLI overrides count.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }
}
