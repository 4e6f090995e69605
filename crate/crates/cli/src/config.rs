use std::path::Path;

use serde::{Deserialize, Serialize};
use visgeo_core::distill::DistillConfig;
use visgeo_core::model::{ModelConfig, TrainConfig};
use visgeo_core::{io, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckConfig {
    pub n_trials: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self { n_trials: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub sizes: Vec<usize>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { sizes: vec![4, 8, 12] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub repeats: usize,
    /// Required excess of the dihedral oracle slope over the fast path's.
    pub min_slope_gap: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![16, 32, 64, 128],
            repeats: 3,
            min_slope_gap: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyCriteria {
    /// Pass when final L1 is below this fraction of the baseline.
    pub max_ratio: f64,
}

impl Default for ToyCriteria {
    fn default() -> Self {
        Self { max_ratio: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_pairs: usize,
    pub min_atoms: usize,
    pub max_atoms: usize,
    pub sigma: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_pairs: 32,
            min_atoms: 4,
            max_atoms: 10,
            sigma: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub k: usize,
    pub min_atoms_threshold: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            k: 10,
            min_atoms_threshold: 4,
        }
    }
}

/// Every command reads the sections it needs from one TOML file; missing
/// sections take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    /// Encoder settings for the distillation teacher; graph features are
    /// always switched off.
    pub teacher: Option<ModelConfig>,
    pub train: TrainConfig,
    pub toy: ToyCriteria,
    pub distill: DistillConfig,
    pub corpus: CorpusConfig,
    pub check: CheckConfig,
    pub oracle: OracleConfig,
    pub bench: BenchConfig,
    pub ensemble: EnsembleConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = io::read_text(p)?;
                toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Propagates the run seed to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.distill.seed = seed;
        self
    }

    pub fn teacher_config(&self) -> ModelConfig {
        let mut t = self.teacher.clone().unwrap_or_else(|| self.model.clone());
        t.use_graph_features = false;
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 5\n[bench]\nrepeats = 1\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.bench.repeats, 1);
        assert_eq!(cfg.bench.sizes, [16, 32, 64, 128]);
        assert!(toml::from_str::<RunConfig>("bogus = 1\n").is_err());
    }
}
