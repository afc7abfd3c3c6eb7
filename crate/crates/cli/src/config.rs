//! Experiment configuration (TOML).
//!
//! ```toml
//! seed = 0                      # master seed
//! hierarchy = "builtin:native"  # training hierarchy; required for hcot
//! eval_hierarchy = "builtin:native"  # optional, defaults to the dataset's own
//!
//! [data]
//! kind = "synthetic"            # or "cifar100" with optional `path`
//! num_coarse = 3
//! fines_per_coarse = 3
//! dim = 16
//! samples_per_fine = 600
//! test_samples_per_fine = 2000
//! coarse_spread = 1.0
//! fine_spread = 0.5
//! noise_sigma = 1.0
//!
//! [network]
//! hidden = [32]
//!
//! [train]
//! objective = "hcot"
//! schedule = "direct"
//! epochs = 60
//! batch_size = 128
//! lr = 0.05
//! momentum = 0.9
//! weight_decay = 1e-4
//! lr_milestones = [30, 45]
//! ```
//!
//! Hierarchy sources are `builtin:flat`, `builtin:identity`,
//! `builtin:native` (the dataset's own taxonomy), `builtin:cifar100`, or a
//! path to a hierarchy file. Relative paths resolve against the config
//! file's directory.
//!
//! The master seed fans out through `hcot_core::seed::derive`: counter 0
//! seeds the synthetic data, 1 the network init, 2 the shuffle stream.
//! `train.seed` is always the derived shuffle seed; the resolved config
//! written next to every run records it.

use std::path::{Path, PathBuf};

use hcot_core::data::SyntheticSpec;
use hcot_core::objectives::ObjectiveKind;
use hcot_core::seed;
use hcot_core::trainer::{Schedule, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::RunError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hierarchy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_hierarchy: Option<String>,
    pub data: DataConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        num_coarse: usize,
        fines_per_coarse: usize,
        dim: usize,
        samples_per_fine: usize,
        test_samples_per_fine: usize,
        coarse_spread: f64,
        fine_spread: f64,
        noise_sigma: f64,
    },
    Cifar100 {
        /// Defaults to `$HCE_DATA_DIR`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Hidden dense widths, each followed by relu.
    #[serde(default)]
    pub hidden: Vec<usize>,
}

/// Where a hierarchy comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HierarchySource {
    Flat,
    Identity,
    Native,
    Cifar100,
    File(PathBuf),
}

impl HierarchySource {
    pub fn parse(s: &str) -> Result<Self, RunError> {
        match s.strip_prefix("builtin:") {
            Some("flat") => Ok(Self::Flat),
            Some("identity") => Ok(Self::Identity),
            Some("native") => Ok(Self::Native),
            Some("cifar100") => Ok(Self::Cifar100),
            Some(other) => Err(RunError::Config(format!(
                "unknown builtin hierarchy `builtin:{other}` (expected flat, identity, native or cifar100)"
            ))),
            None => Ok(Self::File(PathBuf::from(s))),
        }
    }
}

impl ExperimentConfig {
    /// The desk-scale synthetic task: 3 coarse x 3 fine Gaussian clusters,
    /// 600 training samples per fine class, 60 epochs, direct schedule.
    pub fn synthetic_default() -> Self {
        let mut cfg = Self {
            seed: 0,
            hierarchy: Some("builtin:native".into()),
            eval_hierarchy: None,
            data: DataConfig::Synthetic {
                num_coarse: 3,
                fines_per_coarse: 3,
                dim: 16,
                samples_per_fine: 600,
                test_samples_per_fine: 2000,
                coarse_spread: 1.0,
                fine_spread: 0.5,
                noise_sigma: 1.0,
            },
            network: NetworkConfig { hidden: vec![32] },
            train: TrainConfig {
                objective: ObjectiveKind::Hcot,
                schedule: Schedule::Direct,
                epochs: 60,
                batch_size: 128,
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 1e-4,
                lr_milestones: vec![30, 45],
                seed: 0,
                entropy: Default::default(),
                alternating_order: Default::default(),
                complement_lr_scale: None,
                augment: false,
            },
        };
        cfg.train.seed = cfg.shuffle_seed();
        cfg
    }

    /// Reads a config file and resolves relative hierarchy paths against its directory.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for s in [&mut cfg.hierarchy, &mut cfg.eval_hierarchy]
            .into_iter()
            .flatten()
        {
            if !s.starts_with("builtin:") && Path::new(s.as_str()).is_relative() {
                *s = base.join(&*s).to_string_lossy().into_owned();
            }
        }
        if let DataConfig::Cifar100 { path: Some(p) } = &mut cfg.data {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.train.seed == 0 {
            cfg.train.seed = cfg.shuffle_seed();
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Replaces the master seed and the derived shuffle seed.
    pub fn set_seed(&mut self, master: u64) {
        self.seed = master;
        self.train.seed = self.shuffle_seed();
    }

    pub fn data_seed(&self) -> u64 {
        seed::derive(self.seed, seed::DATA)
    }

    pub fn init_seed(&self) -> u64 {
        seed::derive(self.seed, seed::INIT)
    }

    pub fn shuffle_seed(&self) -> u64 {
        seed::derive(self.seed, seed::SHUFFLE)
    }

    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        match self.data {
            DataConfig::Synthetic {
                num_coarse,
                fines_per_coarse,
                dim,
                samples_per_fine,
                test_samples_per_fine,
                coarse_spread,
                fine_spread,
                noise_sigma,
            } => Some(SyntheticSpec {
                num_coarse,
                fines_per_coarse,
                dim,
                samples_per_fine,
                test_samples_per_fine,
                coarse_spread,
                fine_spread,
                noise_sigma,
                seed: self.data_seed(),
            }),
            DataConfig::Cifar100 { .. } => None,
        }
    }

    /// Checks everything that can be checked without touching the data.
    pub fn validate(&self) -> Result<(), RunError> {
        self.train
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        if self.train.seed != self.shuffle_seed() {
            return Err(RunError::Config(
                "train.seed is derived from the master seed; remove it or use the value from a run's config.toml".into(),
            ));
        }
        if self.train.objective == ObjectiveKind::Hcot && self.hierarchy.is_none() {
            return Err(RunError::Config(
                "missing field `hierarchy` (objective hcot requires a label hierarchy)".into(),
            ));
        }
        for source in [&self.hierarchy, &self.eval_hierarchy]
            .into_iter()
            .flatten()
        {
            if let HierarchySource::File(p) = HierarchySource::parse(source)? {
                if !p.is_file() {
                    return Err(RunError::Config(format!(
                        "hierarchy file {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        if let Some(spec) = self.synthetic_spec() {
            spec.validate()
                .map_err(|e| RunError::Config(e.to_string()))?;
        }
        if self.network.hidden.contains(&0) {
            return Err(RunError::Config(
                "network.hidden widths must be positive".into(),
            ));
        }
        if self.train.augment && matches!(self.data, DataConfig::Synthetic { .. }) {
            return Err(RunError::Config(
                "train.augment applies to 32x32x3 images only".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::synthetic_default();
        cfg.validate().unwrap();
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn hcot_without_hierarchy_names_the_field() {
        let mut cfg = ExperimentConfig::synthetic_default();
        cfg.hierarchy = None;
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("`hierarchy`"), "{err}");
    }

    #[test]
    fn seeds_fan_out() {
        let mut cfg = ExperimentConfig::synthetic_default();
        cfg.set_seed(9);
        let seeds = [cfg.data_seed(), cfg.init_seed(), cfg.shuffle_seed()];
        assert_eq!(cfg.train.seed, seeds[2]);
        assert!(seeds[0] != seeds[1] && seeds[1] != seeds[2]);
        cfg.train.seed ^= 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hierarchy_sources() {
        assert_eq!(
            HierarchySource::parse("builtin:flat").unwrap(),
            HierarchySource::Flat
        );
        assert_eq!(
            HierarchySource::parse("a/b.hierarchy").unwrap(),
            HierarchySource::File("a/b.hierarchy".into())
        );
        assert!(HierarchySource::parse("builtin:nope").is_err());
        let mut cfg = ExperimentConfig::synthetic_default();
        cfg.hierarchy = Some("/does/not/exist.hierarchy".into());
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn load_resolves_relative_paths_and_fills_seed() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::synthetic_default();
        cfg.hierarchy = Some("groups.hierarchy".into());
        let mut text = cfg.to_toml();
        text = text.replace(&format!("seed = {}\n", cfg.train.seed), "");
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, text).unwrap();
        let loaded = ExperimentConfig::load(&path).unwrap();
        assert_eq!(
            loaded.hierarchy.as_deref(),
            Some(dir.path().join("groups.hierarchy").to_str().unwrap())
        );
        assert_eq!(loaded.train.seed, loaded.shuffle_seed());
    }
}
