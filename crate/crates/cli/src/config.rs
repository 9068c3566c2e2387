//! Run configuration documents.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use msgcrf::factor_graph::{ConnectivitySpec, FactorGraph};
use msgcrf::gradcheck::GradcheckOptions;
use msgcrf::message_estimator::Architecture;
use msgcrf::seeds::derive_seed;
use msgcrf::synthetic_data::DatasetParams;
use msgcrf::trainer::TrainingConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_count: usize,
    pub test_count: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub channels: usize,
    pub noise: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { train_count: 200, test_count: 50, height: 16, width: 16, num_classes: 4, channels: 3, noise: 0.5 }
    }
}

/// Estimator shape apart from the fields fixed by data and graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSection {
    pub trunk_widths: Vec<usize>,
    pub kernel_size: usize,
    pub head_hidden: usize,
    pub shared: bool,
}

impl Default for ArchSection {
    fn default() -> Self {
        ArchSection { trunk_widths: vec![16, 16, 16], kernel_size: 3, head_hidden: 16, shared: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    /// Side of the square crop the exact-likelihood baseline trains on.
    pub crop: usize,
    pub max_states: u64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection { crop: 3, max_states: 1 << 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleCompareSection {
    pub graphs: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub rounds: Vec<usize>,
    /// Energies are drawn from `U(-scale, scale)`.
    pub energy_scale: f64,
}

impl Default for OracleCompareSection {
    fn default() -> Self {
        OracleCompareSection { graphs: 5, height: 3, width: 3, num_classes: 3, rounds: vec![1, 2, 3, 5, 10], energy_scale: 1.0 }
    }
}

/// Every command reads the same document; each uses the sections it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed. Module seeds are derived from it and overwrite the
    /// `seed` fields of the sub-sections on resolution.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataSection,
    pub connectivity: ConnectivitySpec,
    pub architecture: ArchSection,
    pub training: TrainingConfig,
    /// Save a checkpoint every this many epochs (0: only the final one).
    pub checkpoint_every: usize,
    pub baseline: BaselineSection,
    pub oracle_compare: OracleCompareSection,
    pub gradcheck: GradcheckOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: None,
            data: DataSection::default(),
            connectivity: ConnectivitySpec::default(),
            architecture: ArchSection::default(),
            training: TrainingConfig::default(),
            checkpoint_every: 10,
            baseline: BaselineSection::default(),
            oracle_compare: OracleCompareSection::default(),
            gradcheck: GradcheckOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("malformed config {}", path.display()))
    }

    /// Applies overrides and fans the root seed out to every module.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if out.is_some() {
            self.out = out;
        }
        self.training.seed = derive_seed(self.seed, "trainer");
        self.gradcheck.seed = derive_seed(self.seed, "gradcheck");
        self.training.validate()?;
        if self.data.num_classes < 2 || self.data.height == 0 || self.data.width == 0 {
            bail!("data section needs num_classes >= 2 and a non-empty grid");
        }
        Ok(self)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("run"))
    }

    pub fn train_params(&self) -> DatasetParams {
        self.dataset_params(derive_seed(self.seed, "synthetic_data/train"), self.data.train_count)
    }

    pub fn test_params(&self) -> DatasetParams {
        self.dataset_params(derive_seed(self.seed, "synthetic_data/test"), self.data.test_count)
    }

    fn dataset_params(&self, seed: u64, count: usize) -> DatasetParams {
        let d = &self.data;
        DatasetParams { seed, count, height: d.height, width: d.width, num_classes: d.num_classes, channels: d.channels, noise: d.noise }
    }

    pub fn architecture_for(&self, graph: &FactorGraph) -> Architecture {
        let a = &self.architecture;
        Architecture {
            in_channels: self.data.channels,
            num_classes: self.data.num_classes,
            trunk_widths: a.trunk_widths.clone(),
            kernel_size: a.kernel_size,
            head_hidden: a.head_hidden,
            factor_types: graph.factor_types().to_vec(),
            rounds: self.training.rounds,
            shared: a.shared,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_unknown_keys_fail() {
        let c = RunConfig::default();
        assert_eq!(serde_json::from_str::<RunConfig>(&c.to_json()).unwrap(), c);
        assert_eq!(serde_json::from_str::<RunConfig>("{}").unwrap(), c);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sead": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"data": {"noize": 0.1}}"#).is_err());
    }

    #[test]
    fn resolution_fans_out_seeds() {
        let a = RunConfig::default().resolve(Some(3), None).unwrap();
        let b = RunConfig::default().resolve(Some(4), None).unwrap();
        assert_eq!(a.seed, 3);
        assert_ne!(a.training.seed, b.training.seed);
        assert_ne!(a.train_params().seed, a.test_params().seed);
        assert_eq!(a.training.seed, derive_seed(3, "trainer"));
    }
}
