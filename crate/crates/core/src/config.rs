//! Experiment configuration: one TOML file with a section per module.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{BinaryTask, Site, SyntheticSiteSpec};
use crate::error::{Error, Result};
use crate::eval::importance::DEFAULT_IG_STEPS;
use crate::eval::metrics::DEFAULT_THRESHOLDS;
use crate::federation::FederationConfig;
use crate::model::ModelConfig;

/// Environment variable naming the directory that holds run directories.
pub const RUNS_DIR_ENV: &str = "FEDDA_RUNS_DIR";
pub const DEFAULT_RUNS_DIR: &str = "runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Root seed; every random stream derives from it.
    pub seed: u64,
    /// Run directory name under the runs root; defaults to the config
    /// file stem plus the seed.
    pub name: Option<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 0, name: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Subject table for `source = "csv"`; sites come from its site column.
    pub csv: Option<PathBuf>,
    pub task: BinaryTask,
    pub train_frac: f64,
    /// Fraction of one site's training labels to flip.
    pub label_noise: f64,
    pub noisy_site: Site,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Synthetic,
            csv: None,
            task: BinaryTask::NcVsAd,
            train_frac: 0.8,
            label_noise: 0.0,
            noisy_site: Site::A,
        }
    }
}

/// Generator settings for one site. Seeds derive from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSite {
    pub n_per_class: [usize; 3],
    pub mean_shift: f64,
    pub scale_shift: f64,
    pub class_separation: f64,
    pub noise_sigma: f64,
}

impl Default for SyntheticSite {
    fn default() -> Self {
        let d = SyntheticSiteSpec::default();
        SyntheticSite {
            n_per_class: d.n_per_class,
            mean_shift: d.mean_shift,
            scale_shift: d.scale_shift,
            class_separation: d.class_separation,
            noise_sigma: d.noise_sigma,
        }
    }
}

impl SyntheticSite {
    pub fn spec(&self, seed: u64) -> SyntheticSiteSpec {
        SyntheticSiteSpec {
            n_per_class: self.n_per_class,
            mean_shift: self.mean_shift,
            scale_shift: self.scale_shift,
            class_separation: self.class_separation,
            noise_sigma: self.noise_sigma,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    /// Cells carrying the class signal; 0 spreads it over every cell.
    pub signal_cells: usize,
    pub a: SyntheticSite,
    pub b: SyntheticSite,
    pub c: SyntheticSite,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            signal_cells: 0,
            a: SyntheticSite::default(),
            b: SyntheticSite {
                mean_shift: 0.5,
                ..Default::default()
            },
            c: SyntheticSite {
                mean_shift: 1.0,
                scale_shift: 1.5,
                ..Default::default()
            },
        }
    }
}

impl SyntheticSection {
    pub fn sites(&self) -> [&SyntheticSite; 3] {
        [&self.a, &self.b, &self.c]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub batch_size: usize,
    pub thresholds: Vec<f64>,
    pub ig_steps: usize,
    /// Cap on target test samples used for importance; `None` uses all.
    pub importance_samples: Option<usize>,
    pub qq_components: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            batch_size: 32,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            ig_steps: DEFAULT_IG_STEPS,
            importance_samples: None,
            qq_components: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub synthetic: SyntheticSection,
    pub model: ModelConfig,
    pub federation: FederationConfig,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.federation.validate()?;
        let field = |name: &str, msg: String| Error::Config(format!("{name}: {msg}"));
        if !(self.data.train_frac > 0.0 && self.data.train_frac < 1.0) {
            return Err(field("data.train_frac", format!("{} outside (0, 1)", self.data.train_frac)));
        }
        if !(0.0..=1.0).contains(&self.data.label_noise) {
            return Err(field("data.label_noise", format!("{} outside [0, 1]", self.data.label_noise)));
        }
        if self.data.noisy_site == Site::C && self.data.label_noise > 0.0 && !self.federation.target_labeled {
            return Err(field("data.noisy_site", "label noise on the unlabeled target has no effect".into()));
        }
        match (self.data.source, &self.data.csv) {
            (DataSource::Csv, None) => return Err(field("data.csv", "required when data.source = \"csv\"".into())),
            (DataSource::Synthetic, Some(_)) => {
                return Err(field("data.csv", "only valid when data.source = \"csv\"".into()))
            }
            _ => {}
        }
        if self.eval.batch_size == 0 {
            return Err(field("eval.batch_size", "must be positive".into()));
        }
        if let Some(t) = self.eval.thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(field("eval.thresholds", format!("{t} outside (0, 1]")));
        }
        if self.eval.ig_steps < 2 {
            return Err(field("eval.ig_steps", format!("{} must be at least 2", self.eval.ig_steps)));
        }
        if self.eval.importance_samples == Some(0) {
            return Err(field("eval.importance_samples", "must be positive".into()));
        }
        if self.eval.qq_components == 0 {
            return Err(field("eval.qq_components", "must be positive".into()));
        }
        Ok(())
    }
}

/// Root directory for run directories, from the environment or the default.
pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV).map_or_else(|| PathBuf::from(DEFAULT_RUNS_DIR), PathBuf::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.federation.learning_rate, 1e-4);
        assert_eq!(cfg.federation.batch_size, 32);
        assert_eq!(cfg.federation.mc_passes, 10);
        assert_eq!(cfg.federation.alignment_rounds, 25);
        assert_eq!(cfg.federation.classification_rounds, 100);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.run.seed = 7;
        cfg.federation.sweep_limit = Some(16);
        cfg.federation.policy.tau = Some(0.3);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_name_the_field() {
        let err = ExperimentConfig::from_toml_str("[federation]\nlearning_rat = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("learning_rat"), "{msg}");
        let err = ExperimentConfig::from_toml_str("[federation.losses]\nkl = false\nuce = false\nmse = false\n");
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            "[data]\ntrain_frac = 1.0\n",
            "[eval]\nig_steps = 1\n",
            "[data]\nsource = \"csv\"\n",
            "[federation]\nbatch_size = 1\n",
            "[eval]\nthresholds = [0.0]\n",
        ] {
            assert!(matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }
}
