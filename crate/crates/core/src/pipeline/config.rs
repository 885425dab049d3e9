use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::SynthConfig;
use super::task::TaskSpec;
use crate::error::{Error, Result};
use crate::features::ConfigMode;
use crate::hht::SiftingCriteria;
use crate::neuralnet::{NetworkSpec, TrainConfig};
use crate::preprocess::SegmentationParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub enabled: bool,
    pub taps: usize,
    pub cutoff_hz: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            taps: 4097,
            cutoff_hz: 70.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    pub reference: usize,
    pub max_lag_ms: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            reference: 0,
            max_lag_ms: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Columns averaged into one time step before the networks.
    pub pool: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { pool: 1 }
    }
}

/// Every tunable of a run, loaded from TOML. Relative paths in a file are
/// resolved against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub tasks: Vec<TaskSpec>,
    pub modes: Vec<ConfigMode>,
    pub test_fraction: f64,
    pub write_checkpoints: bool,
    /// Layer stacks in `C1D(..) -> GRU(..) -> Dense(classes)` notation.
    pub models: Vec<String>,
    pub filter: FilterConfig,
    pub segmentation: SegmentationParams,
    pub alignment: AlignmentConfig,
    pub hht: SiftingCriteria,
    pub features: FeatureConfig,
    pub training: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: true,
            manifest: None,
            output_dir: None,
            tasks: TaskSpec::ALL.to_vec(),
            modes: ConfigMode::ALL.to_vec(),
            test_fraction: 0.2,
            write_checkpoints: true,
            models: NetworkSpec::defaults(1, 2)
                .iter()
                .map(|s| s.to_string().replace("Dense(2)", "Dense(classes)"))
                .collect(),
            filter: FilterConfig::default(),
            segmentation: SegmentationParams::default(),
            alignment: AlignmentConfig::default(),
            hht: SiftingCriteria::default(),
            features: FeatureConfig::default(),
            training: TrainConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.manifest, &mut cfg.output_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.tasks.is_empty() || self.modes.is_empty() || self.models.is_empty() {
            return bad("tasks, modes and models must be non-empty".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!(
                "test_fraction {} outside (0, 1)",
                self.test_fraction
            ));
        }
        if self.features.pool == 0 || self.hht.max_imfs == 0 {
            return bad("features.pool and hht.max_imfs must be >= 1".into());
        }
        if self.training.epochs == 0 {
            return bad("training.epochs must be >= 1".into());
        }
        if self.alignment.max_lag_ms < 0.0 {
            return bad("alignment.max_lag_ms must be non-negative".into());
        }
        for m in &self.models {
            NetworkSpec::parse(m, 1, 2).map_err(|e| Error::Config(format!("model {m:?}: {e}")))?;
        }
        self.hht.validate()?;
        self.segmentation.validate()?;
        self.training.validate()?;
        Ok(())
    }

    /// Name of the `i`-th configured model.
    pub fn model_name(i: usize) -> String {
        format!("model{}", i + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(
            cfg.models[0],
            "C1D(32,8,4,0.1) -> C1D(64,4,2,0.2) -> GRU(64,0.2) -> Dense(classes)"
        );
    }

    #[test]
    fn partial_file_and_errors() {
        let cfg = ExperimentConfig::from_toml_str(
            "seed = 5\ntasks = [\"speaker\"]\nmodes = [\"all_ordered\"]\n[features]\npool = 8\n[training]\nepochs = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.features.pool, 8);
        assert_eq!(cfg.training.batch_size, 32);
        assert!(ExperimentConfig::from_toml_str("colour = 1").is_err());
        assert!(ExperimentConfig::from_toml_str("test_fraction = 1.5").is_err());
        assert!(ExperimentConfig::from_toml_str("models = [\"GRU(4,0)\"]").is_err());
    }
}
