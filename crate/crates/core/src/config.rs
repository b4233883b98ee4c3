//! Run configuration: one TOML document with a section per component.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::NetSpec;
use crate::dataset::{Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::objective::ObjectiveConfig;
use crate::sampler::SamplerConfig;
use crate::schedule::ScheduleSpec;
use crate::trainer::TrainPlan;

/// Architecture sizes; data dimension and class count come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub width: usize,
    pub depth: usize,
    pub cond_dim: usize,
    pub n_freqs: usize,
    pub time_scale: f64,
    pub max_period: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let n = NetSpec::default();
        Self {
            width: n.width,
            depth: n.depth,
            cond_dim: n.cond_dim,
            n_freqs: n.n_freqs,
            time_scale: n.time_scale,
            max_period: n.max_period,
        }
    }
}

/// Evaluation defaults used by `eval` and `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub steps: Vec<usize>,
    /// Samples per (condition, step count) cell.
    pub n: usize,
    pub bootstrap: usize,
    /// Noise floors allowed above the running minimum in the monotonicity check.
    pub tolerance: f64,
    pub seed: u64,
    /// Independent evaluation draws averaged per cell.
    pub repeats: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            steps: vec![1, 2, 4, 8, 32],
            n: 256,
            bootstrap: crate::evalsuite::BOOTSTRAP_RESAMPLES,
            tolerance: 3.0,
            seed: 1,
            repeats: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Where `train` creates the run directory when none is given.
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainPlan,
    pub objective: ObjectiveConfig,
    pub schedule: ScheduleSpec,
    pub sampler: SamplerConfig,
    pub eval: EvalSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainPlan::default();
        Self {
            seed: 0,
            out_dir: None,
            dataset: DatasetSpec::default(),
            model: ModelSpec::default(),
            schedule: ScheduleSpec {
                tau_anneal_iters: default_tau_iters(&train),
                ..ScheduleSpec::default()
            },
            train,
            objective: ObjectiveConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalSpec::default(),
        }
    }
}

/// `s` reaches its full range after 30% of training.
pub fn default_tau_iters(plan: &TrainPlan) -> u64 {
    ((plan.total_iters as f64 * 0.3).round() as u64).max(1)
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ConfigParse(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Short form of [`RunConfig::hash`] used in file headers.
    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        let data = Dataset::from_spec(&self.dataset)?;
        self.net_spec(&data).validate()?;
        self.train.validate()?;
        self.objective.validate()?;
        self.schedule.validate()?;
        self.sampler.validate()?;
        let e = &self.eval;
        if e.steps.is_empty() || e.steps.contains(&0) {
            return Err(Error::config("eval.steps", "need at least one step count, all >= 1"));
        }
        if e.n < 2 {
            return Err(Error::config("eval.n", "must be >= 2"));
        }
        if e.bootstrap < 2 {
            return Err(Error::config("eval.bootstrap", "must be >= 2"));
        }
        if e.repeats == 0 {
            return Err(Error::config("eval.repeats", "must be >= 1"));
        }
        if !(e.tolerance >= 0.0 && e.tolerance.is_finite()) {
            return Err(Error::config("eval.tolerance", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn net_spec(&self, data: &Dataset) -> NetSpec {
        NetSpec {
            dim: data.dim(),
            n_classes: data.n_classes(),
            width: self.model.width,
            depth: self.model.depth,
            cond_dim: self.model.cond_dim,
            n_freqs: self.model.n_freqs,
            time_scale: self.model.time_scale,
            max_period: self.model.max_period,
            zero_init_output: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Preset;
    use crate::trainer::TrainMode;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.schedule.tau_anneal_iters, 6_000);
        let text = cfg.to_toml();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn sparse_file_fills_defaults() {
        let cfg = RunConfig::from_toml_str(
            "seed = 4\n[train]\nmode = \"flow_matching_baseline\"\ntotal_iters = 100\nwarmup_iters = 10\n[dataset]\npreset = \"checkerboard\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.mode, TrainMode::FlowMatchingBaseline);
        assert_eq!(cfg.train.batch_size, 256);
        assert_eq!(cfg.dataset.preset, Preset::Checkerboard);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml_str("[train]\ntotal_itres = 5\n").unwrap_err();
        assert!(matches!(err, Error::ConfigParse(ref m) if m.contains("total_itres")), "{err}");
        assert!(RunConfig::from_toml_str("bogus = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[dataset]\npreset = \"moons\"\n").is_err());
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = RunConfig::from_toml_str("[sampler]\neta = 2.0\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "sampler.eta"), "{err}");
        let err = RunConfig::from_toml_str("[eval]\nsteps = []\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "eval.steps"), "{err}");
        let err = RunConfig::from_toml_str("[model]\nwidth = 0\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "model.width"), "{err}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..RunConfig::default() };
        assert_ne!(a.hash(), b.hash());
    }
}
