//! Experiment configuration (one JSON document, unknown keys rejected) and
//! the run manifest written next to every run's outputs.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::dataset::TextureParams;
use crate::detector::DetectorTrainingConfig;
use crate::dnf::{DnfConfig, FusionStrategy};
use crate::error::{Error, Result};
use crate::perturb::{Augmentation, PerturbationSpec};
use crate::predictor::{
    AnalyticGaussianPredictor, ExternalPredictor, NoisePredictor, PredictorTrainingConfig, TrainablePredictor,
};
use crate::schedule::{SamplingMode, ScheduleParams};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

fn default_timeout_ms() -> u64 {
    30_000
}

/// Where noise predictions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PredictorSpec {
    /// Closed-form posterior for i.i.d. Gaussian pixels.
    Analytic { mu: f64, sigma2: f64 },
    /// Trained on the run's real training images and stored in the run
    /// directory.
    Trainable {
        #[serde(default)]
        training: PredictorTrainingConfig,
    },
    /// A previously saved trainable predictor.
    File { path: PathBuf },
    /// A child process speaking the stream protocol on stdin/stdout.
    External {
        command: Vec<String>,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

impl Default for PredictorSpec {
    fn default() -> Self {
        Self::Trainable {
            training: PredictorTrainingConfig::default(),
        }
    }
}

impl PredictorSpec {
    /// Build the predictor; `trained_dir` is where a trainable predictor of
    /// this run lives.
    pub fn load(&self, trained_dir: &Path) -> Result<Arc<dyn NoisePredictor>> {
        Ok(match self {
            Self::Analytic { mu, sigma2 } => Arc::new(AnalyticGaussianPredictor::new(*mu, *sigma2)?),
            Self::Trainable { .. } => Arc::new(TrainablePredictor::load(trained_dir)?),
            Self::File { path } => Arc::new(TrainablePredictor::load(path)?),
            Self::External { command, timeout_ms } => {
                let (program, args) = command
                    .split_first()
                    .ok_or_else(|| Error::param("external predictor command is empty"))?;
                Arc::new(ExternalPredictor::spawn(
                    program,
                    args,
                    Duration::from_millis(*timeout_ms),
                )?)
            }
        })
    }

    fn resolve(&mut self, base: &Path) {
        if let Self::File { path } = self {
            *path = base.join(&*path);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub textures: TextureParams,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Sampler steps used to draw generated images.
    pub generator_steps: usize,
    pub generator_mode: SamplingMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            textures: TextureParams::default(),
            train_per_class: 2000,
            test_per_class: 500,
            generator_steps: 10,
            generator_mode: SamplingMode::Uniform,
        }
    }
}

/// Pipeline stages, executed in this order whatever order they are listed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    TrainPredictor,
    Extract,
    TrainDetector,
    Eval,
    PerturbSweep,
    Spectrum,
    Embed,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Self::GenData,
        Self::TrainPredictor,
        Self::Extract,
        Self::TrainDetector,
        Self::Eval,
        Self::PerturbSweep,
        Self::Spectrum,
        Self::Embed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::TrainPredictor => "train-predictor",
            Self::Extract => "extract",
            Self::TrainDetector => "train-detector",
            Self::Eval => "eval",
            Self::PerturbSweep => "perturb-sweep",
            Self::Spectrum => "spectrum",
            Self::Embed => "embed",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Evaluate a saved detector on stored features, skipping every other stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOnly {
    /// Stacked `[n, h, w]` tensor container.
    pub features: PathBuf,
    /// JSON array of 0/1 labels.
    pub labels: PathBuf,
    /// Detector model directory.
    pub model: PathBuf,
}

fn default_strategies() -> Vec<FusionStrategy> {
    vec![FusionStrategy::First]
}

fn default_validation_fraction() -> f64 {
    0.1
}

fn default_stages() -> Vec<Stage> {
    vec![
        Stage::GenData,
        Stage::Extract,
        Stage::TrainDetector,
        Stage::Eval,
        Stage::PerturbSweep,
    ]
}

fn default_embed_dim() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    /// Generator of the `generated/` images.
    #[serde(default)]
    pub predictor: PredictorSpec,
    /// Predictor used for feature extraction; the generator when absent.
    #[serde(default)]
    pub dnf_predictor: Option<PredictorSpec>,
    /// Inversion settings. `dnf.strategy` is ignored in favour of
    /// `strategies`.
    #[serde(default)]
    pub dnf: DnfConfig,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<FusionStrategy>,
    #[serde(default)]
    pub detector: DetectorTrainingConfig,
    #[serde(default)]
    pub augmentation: Augmentation,
    /// Also train and evaluate a detector on raw pixels.
    #[serde(default)]
    pub pixel_baseline: bool,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default = "PerturbationSpec::standard_grid")]
    pub perturbations: Vec<PerturbationSpec>,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_stages")]
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub eval_only: Option<EvalOnly>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::format("run config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.predictor.resolve(base);
        if let Some(p) = cfg.dnf_predictor.as_mut() {
            p.resolve(base);
        }
        if let Some(e) = cfg.eval_only.as_mut() {
            e.features = base.join(&e.features);
            e.labels = base.join(&e.labels);
            e.model = base.join(&e.model);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.textures.validate()?;
        self.augmentation.validate()?;
        self.perturbations.iter().try_for_each(PerturbationSpec::validate)?;
        self.dnf.schedule.build()?;
        if self.strategies.is_empty() {
            return Err(Error::param("at least one fusion strategy is required"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::param("validation fraction must lie strictly between 0 and 1"));
        }
        if self.data.train_per_class == 0 {
            return Err(Error::param("training set needs at least one image per class"));
        }
        if self.embed_dim == 0 {
            return Err(Error::param("embedding dimension must be positive"));
        }
        let mut seen = self.stages.clone();
        seen.sort();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::param("a stage is listed twice"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> ScheduleParams {
        self.dnf.schedule
    }

    /// Stages to execute, in pipeline order.
    pub fn ordered_stages(&self) -> Vec<Stage> {
        let mut s = self.stages.clone();
        s.sort();
        s
    }
}

/// Everything needed to reproduce a run bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub schedule: ScheduleParams,
    pub generator_taus: Vec<usize>,
    pub dnf_taus: Vec<usize>,
    pub resolution: usize,
    pub strategies: Vec<FusionStrategy>,
    pub generator: Option<String>,
    pub dnf_predictor: Option<String>,
    pub stages: Vec<Stage>,
    /// Output files (relative to the run directory) with their SHA-256.
    pub outputs: std::collections::BTreeMap<String, String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::parse("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.strategies, vec![FusionStrategy::First]);
        assert_eq!(cfg.perturbations.len(), 7);
        assert_eq!(cfg.ordered_stages()[0], Stage::GenData);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for text in [
            r#"{"sede": 1}"#,
            r#"{"data": {"train_per_clas": 3}}"#,
            r#"{"data": {"textures": {"edge": 2}}}"#,
            r#"{"detector": {"lr": 0.1}}"#,
            r#"{"predictor": {"kind": "analytic", "mu": 0, "sigma2": 1, "x": 0}}"#,
            r#"{"dnf": {"resolution": 32, "steps": 10, "strategi": "first"}}"#,
            r#"{"stages": ["extract", "train"]}"#,
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Format { .. })), "{text}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            r#"{"strategies": []}"#,
            r#"{"validation_fraction": 1.0}"#,
            r#"{"stages": ["eval", "eval"]}"#,
            r#"{"augmentation": {"blur_probability": 2}}"#,
            r#"{"perturbations": [{"kind": "jpeg", "quality": 0}]}"#,
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn stages_run_in_pipeline_order() {
        let cfg = RunConfig::parse(r#"{"stages": ["eval", "gen-data", "train-detector"]}"#).unwrap();
        assert_eq!(
            cfg.ordered_stages(),
            vec![Stage::GenData, Stage::TrainDetector, Stage::Eval]
        );
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(
            &path,
            r#"{"eval_only": {"features": "f.dnft", "labels": "l.json", "model": "m"},
                "predictor": {"kind": "file", "path": "gen"}}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.eval_only.unwrap().model, dir.path().join("m"));
        assert_eq!(cfg.predictor, PredictorSpec::File { path: dir.path().join("gen") });
    }
}
