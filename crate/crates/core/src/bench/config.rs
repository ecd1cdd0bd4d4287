//! The experiment configuration file and run manifests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::report::{TrackEntry, TrackSet, VariantEntry};
use super::BenchError;
use crate::learn::{BcConfig, CollectConfig, FinetuneConfig};
use crate::mpc::{expert_config, realtime_config, MpcConfig, WarmStartSource};
use crate::policy::LOG_STD_INIT;
use crate::vehicle::VehicleSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectSection {
    pub n: usize,
    #[serde(flatten)]
    pub options: CollectConfig,
}

impl Default for CollectSection {
    fn default() -> Self {
        CollectSection { n: 14000, options: CollectConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSection {
    pub total_steps: usize,
    #[serde(flatten)]
    pub options: FinetuneConfig,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection { total_steps: 150 * 2048, options: FinetuneConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicySection {
    pub log_std_init: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection { log_std_init: LOG_STD_INIT }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateSection {
    pub seeds: Vec<u64>,
    pub max_steps: usize,
    /// Policy variants name checkpoints relative to the output directory
    /// unless the path is absolute.
    pub variants: Vec<VariantEntry>,
    pub improvement: Option<(String, String)>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            seeds: vec![0],
            max_steps: super::DEFAULT_MAX_STEPS,
            variants: vec![
                VariantEntry { name: "zeros".into(), warm_start: WarmStartSource::Zeros, checkpoint: None },
                VariantEntry {
                    name: "bc".into(),
                    warm_start: WarmStartSource::Policy,
                    checkpoint: Some("policy_bc.json".into()),
                },
                VariantEntry {
                    name: "finetuned".into(),
                    warm_start: WarmStartSource::Policy,
                    checkpoint: Some("policy_ft.json".into()),
                },
            ],
            improvement: Some(("bc".into(), "finetuned".into())),
        }
    }
}

/// Everything a pipeline run needs. Sub-component seeds are derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Applied to both controllers.
    pub vehicle: VehicleSpec,
    pub expert: MpcConfig,
    pub realtime: MpcConfig,
    pub collect: CollectSection,
    pub bc: BcConfig,
    pub finetune: FinetuneSection,
    pub policy: PolicySection,
    pub tracks: Vec<TrackEntry>,
    pub evaluate: EvaluateSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            vehicle: VehicleSpec::default(),
            expert: expert_config(),
            realtime: realtime_config(),
            collect: CollectSection::default(),
            bc: BcConfig::default(),
            finetune: FinetuneSection::default(),
            policy: PolicySection::default(),
            tracks: vec![
                TrackEntry::synthetic("circle", TrackSet::Training),
                TrackEntry::synthetic("hairpin", TrackSet::Training),
                TrackEntry::synthetic("sweeper", TrackSet::FineTuning),
                TrackEntry::synthetic("s_curve", TrackSet::HoldoutComplex),
                TrackEntry::synthetic("straight", TrackSet::HoldoutSimple),
            ],
            evaluate: EvaluateSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        toml::from_str(text).map_err(|e| BenchError::InvalidPlan(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BenchError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Propagates the top-level seed and vehicle into every section.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.expert.vehicle = c.vehicle;
        c.realtime.vehicle = c.vehicle;
        c.collect.options.seed = c.seed;
        c.bc.seed = c.seed;
        c.finetune.options.seed = c.seed;
        c
    }

    pub fn training_tracks(&self) -> impl Iterator<Item = &TrackEntry> {
        self.tracks.iter().filter(|t| t.set == TrackSet::Training)
    }

    /// Training tracks plus the fine-tuning-only ones.
    pub fn finetune_tracks(&self) -> impl Iterator<Item = &TrackEntry> {
        self.tracks.iter().filter(|t| matches!(t.set, TrackSet::Training | TrackSet::FineTuning))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// What a run did, with the configuration it resolved to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub crate_version: String,
    pub outputs: Vec<String>,
    pub config: PipelineConfig,
}

impl Manifest {
    pub fn new(command: &str, config: &PipelineConfig, outputs: Vec<String>) -> Self {
        Manifest {
            command: command.to_string(),
            seed: config.seed,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            outputs,
            config: config.clone(),
        }
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<std::path::PathBuf, BenchError> {
        let path = dir.as_ref().join(format!("manifest_{}.toml", self.command));
        let text = toml::to_string(self).map_err(|e| BenchError::InvalidPlan(e.to_string()))?;
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = PipelineConfig::from_toml("seed = 7\n[collect]\nn = 12\nlateral_noise = 0.1\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.collect.n, 12);
        assert_eq!(c.collect.options.lateral_noise, 0.1);
        assert_eq!(c.bc, BcConfig::default());
        let r = c.resolved();
        assert_eq!((r.collect.options.seed, r.bc.seed, r.finetune.options.seed), (7, 7, 7));
    }

    #[test]
    fn partial_finetune_table_keeps_tuned_options() {
        let c = PipelineConfig::from_toml("[finetune]\ntotal_steps = 512\nsteps_per_batch = 256\n").unwrap();
        let tuned = FinetuneSection::default().options;
        assert_eq!(c.finetune.total_steps, 512);
        assert_eq!(c.finetune.options.steps_per_batch, 256);
        assert_eq!(c.finetune.options.learning_rate, tuned.learning_rate);
        assert_eq!(c.finetune.options.log_std_init, tuned.log_std_init);
        assert!(c.finetune.options.random_start);
    }

    #[test]
    fn fine_tuning_tracks_stay_out_of_collection() {
        let c = PipelineConfig::default();
        let names = |it: &mut dyn Iterator<Item = &TrackEntry>| it.map(|t| t.name.clone()).collect::<Vec<_>>();
        assert_eq!(names(&mut c.training_tracks()), ["circle", "hairpin"]);
        assert_eq!(names(&mut c.finetune_tracks()), ["circle", "hairpin", "sweeper"]);
    }

    #[test]
    fn malformed_values_are_rejected() {
        assert!(PipelineConfig::from_toml("seed = \"x\"").is_err());
    }
}
