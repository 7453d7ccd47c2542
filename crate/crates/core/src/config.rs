//! TOML pipeline configuration shared by the command-line stages.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constellation::{ConstellationConfig, IslPolicy};
use crate::error::{Error, Result};
use crate::gnn::Hyperparameters;
use crate::graph::FeatureLayout;
use crate::oracle::DatasetSpec;
use crate::routing::{Algorithm, DelayModel};
use crate::sim::ExperimentConfig;

/// Evenly spaced snapshot instants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnapshotSchedule {
    pub start_s: f64,
    pub cadence_s: f64,
    pub count: usize,
}

impl Default for SnapshotSchedule {
    fn default() -> Self {
        Self {
            start_s: 0.0,
            cadence_s: 60.0,
            count: 10,
        }
    }
}

impl SnapshotSchedule {
    pub fn times(&self) -> Vec<f64> {
        (0..self.count)
            .map(|k| self.start_s + k as f64 * self.cadence_s)
            .collect()
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.count == 0 || !(self.cadence_s > 0.0) || !self.start_s.is_finite() {
            return Err(Error::Config(format!(
                "{what}: need count >= 1 and cadence_s > 0 (got count {}, cadence_s {})",
                self.count, self.cadence_s
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub snapshots: SnapshotSchedule,
    pub destinations_per_snapshot: usize,
    pub validation_fraction: f64,
    pub layout: FeatureLayout,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            snapshots: SnapshotSchedule::default(),
            destinations_per_snapshot: 16,
            validation_fraction: 0.1,
            layout: FeatureLayout::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// Evaluation instants; keep them disjoint from the training snapshots.
    pub snapshots: SnapshotSchedule,
    pub packets: usize,
    pub interruption_probs: Vec<f64>,
    /// Plane counts of the scalability sweep; satellites per plane stay fixed.
    pub scale_planes: Vec<usize>,
    /// Interruption probability used for the scalability sweep.
    pub scale_interruption_prob: f64,
    pub algorithms: Vec<Algorithm>,
    pub packet_size_bits: f64,
    pub tx_rate_bps: f64,
    pub ttl: Option<usize>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            snapshots: SnapshotSchedule {
                start_s: 30.0,
                cadence_s: 120.0,
                count: 10,
            },
            packets: 1000,
            interruption_probs: vec![0.0, 0.01, 0.02, 0.03, 0.04, 0.05],
            scale_planes: vec![12, 24, 36],
            scale_interruption_prob: 0.02,
            algorithms: Algorithm::ALL.to_vec(),
            packet_size_bits: DelayModel::default().packet_size_bits,
            tx_rate_bps: DelayModel::default().tx_rate_bps,
            ttl: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub constellation: ConstellationConfig,
    pub isl_policy: IslPolicy,
    pub dataset: DatasetSection,
    pub training: Hyperparameters,
    pub experiment: ExperimentSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            constellation: ConstellationConfig::reference(),
            isl_policy: IslPolicy::default(),
            dataset: DatasetSection::default(),
            training: Hyperparameters::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        self.constellation.validate()?;
        self.dataset.snapshots.validate("dataset.snapshots")?;
        self.experiment.snapshots.validate("experiment.snapshots")?;
        self.training.validate()?;
        if let Some(p) = self
            .experiment
            .interruption_probs
            .iter()
            .chain([&self.experiment.scale_interruption_prob])
            .find(|p| !(0.0..=1.0).contains(*p))
        {
            return Err(Error::Config(format!(
                "interruption probabilities must lie in [0, 1] (got {p})"
            )));
        }
        if let Some(&planes) = self.experiment.scale_planes.iter().find(|&&p| p == 0) {
            return Err(Error::Config(format!("scale_planes entries must be >= 1 (got {planes})")));
        }
        Ok(())
    }

    /// The training seed follows the run seed.
    pub fn hyperparameters(&self) -> Hyperparameters {
        Hyperparameters {
            seed: self.seed,
            ..self.training.clone()
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            constellation: self.constellation.clone(),
            isl_policy: self.isl_policy,
            layout: self.dataset.layout,
            snapshot_times: self.dataset.snapshots.times(),
            destinations_per_snapshot: self.dataset.destinations_per_snapshot,
            validation_fraction: self.dataset.validation_fraction,
            seed: self.seed,
        }
    }

    /// Experiment at interruption probability `p` on `constellation`.
    pub fn experiment(&self, constellation: ConstellationConfig, p: f64, jobs: usize) -> ExperimentConfig {
        let e = &self.experiment;
        ExperimentConfig {
            constellation,
            isl_policy: self.isl_policy,
            snapshot_times: e.snapshots.times(),
            interruption_prob: p,
            packets: e.packets,
            delay: DelayModel {
                packet_size_bits: e.packet_size_bits,
                tx_rate_bps: e.tx_rate_bps,
            },
            ttl: e.ttl,
            algorithms: e.algorithms.clone(),
            seed: self.seed,
            jobs,
        }
    }

    pub fn scaled_constellation(&self, planes: usize) -> ConstellationConfig {
        ConstellationConfig {
            num_planes: planes,
            phase_factor: self.constellation.phase_factor.min(planes - 1),
            ..self.constellation.clone()
        }
    }
}
