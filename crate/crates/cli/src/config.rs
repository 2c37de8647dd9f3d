use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use vncseg_core::nn::NetworkConfig;
use vncseg_core::postprocess::Connectivity;
use vncseg_core::preprocess::PreprocessConfig;
use vncseg_core::training::TrainConfig;

/// File name of the resolved configuration written next to outputs.
pub const RESOLVED_CONFIG: &str = "config.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub preprocess: PreprocessConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub connectivity: Connectivity,
    /// Score predictions after resampling back to the input grid.
    pub native_space_eval: bool,
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED_CONFIG);
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        if self.network.in_channels != self.preprocess.slab_depth {
            bail!(
                "network.in_channels ({}) must equal preprocess.slab_depth ({})",
                self.network.in_channels,
                self.preprocess.slab_depth
            );
        }
        if self.network.n_classes != vncseg_core::NUM_CLASSES {
            bail!("network.n_classes must be {}", vncseg_core::NUM_CLASSES);
        }
        Ok(())
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.paths.data.as_deref().context("no data directory (pass --data or set paths.data)")
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.paths.out.as_deref().context("no output directory (pass --out or set paths.out)")
    }
}

/// Flags shared by the commands that resolve an [`ExperimentConfig`].
/// Flags override values from `--config`, which override built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Experiment configuration JSON
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Dataset directory holding manifest.json
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Cross-validation folds [default: 6]
    #[arg(long, value_name = "N")]
    pub folds: Option<usize>,
    /// Training iterations [default: 10000]
    #[arg(long, value_name = "N")]
    pub iters: Option<usize>,
    /// Mini-batch size [default: 32]
    #[arg(long, value_name = "N")]
    pub batch: Option<usize>,
    /// Initial learning rate [default: 0.001]
    #[arg(long, value_name = "X")]
    pub lr: Option<f64>,
    /// Learning-rate multiplier per decay step [default: 0.3]
    #[arg(long, value_name = "X")]
    pub decay: Option<f64>,
    /// Iterations between decay steps [default: 2000]
    #[arg(long, value_name = "N")]
    pub decay_every: Option<usize>,
    /// Gaussian smoothing sigma in mm [default: 1.0]
    #[arg(long, value_name = "X")]
    pub sigma_mm: Option<f64>,
    /// Isotropic target spacing in mm [default: 0.8]
    #[arg(long, value_name = "X")]
    pub spacing: Option<f64>,
    /// Component connectivity for post-processing [default: 26]
    #[arg(long, value_parser = ["6", "26"])]
    pub connectivity: Option<String>,
    /// Width of the first network stage [default: 32]
    #[arg(long, value_name = "N")]
    pub base_channels: Option<usize>,
    /// Evaluate in the input geometry instead of the resampled one
    #[arg(long)]
    pub native_space_eval: bool,
}

impl Overrides {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = self.$flag.clone() {
                    cfg.$($field)+ = v;
                }
            };
        }
        set!(seed => train.seed);
        set!(folds => train.n_folds);
        set!(iters => train.iterations);
        set!(batch => train.batch_size);
        set!(lr => train.lr0);
        set!(decay => train.decay_factor);
        set!(decay_every => train.decay_every);
        set!(sigma_mm => preprocess.sigma_mm);
        set!(spacing => preprocess.target_spacing_mm);
        set!(base_channels => network.base_channels);
        if let Some(c) = &self.connectivity {
            cfg.connectivity = Connectivity::try_from(c.parse::<u8>()?).map_err(anyhow::Error::msg)?;
        }
        if self.data.is_some() {
            cfg.paths.data = self.data.clone();
        }
        if self.out.is_some() {
            cfg.paths.out = self.out.clone();
        }
        cfg.native_space_eval |= self.native_space_eval;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_unknown_keys() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.lr0 = 0.1 + 0.2;
        cfg.connectivity = Connectivity::Six;
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"train": {"lr": 1}}"#).is_err());
    }

    #[test]
    fn flags_override() {
        let o = Overrides { iters: Some(7), connectivity: Some("6".into()), base_channels: Some(8), ..Default::default() };
        let cfg = o.resolve().unwrap();
        assert_eq!(cfg.train.iterations, 7);
        assert_eq!(cfg.connectivity, Connectivity::Six);
        assert_eq!(cfg.network.base_channels, 8);
        assert!(Overrides { decay: Some(0.0), ..Default::default() }.resolve().is_err());
    }
}
