//! Fusing estimated-noise sequences into DNF features, and the cached batch
//! extraction pipeline around it.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use image::GrayImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::diffusion;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::hash;
use crate::imageio;
use crate::predictor::NoisePredictor;
use crate::schedule::{NoiseSchedule, SamplingMode, ScheduleParams, TimestepSequence};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    #[default]
    First,
    Avg,
    Last,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 3] = [Self::First, Self::Avg, Self::Last];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::First => "first",
            Self::Avg => "avg",
            Self::Last => "last",
        }
    }

    /// How many inversion steps a sequence of `steps` must run before this
    /// strategy can be evaluated.
    fn steps_needed(self, steps: usize) -> usize {
        match self {
            Self::First => 1,
            Self::Avg | Self::Last => steps,
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(Self::First),
            "avg" => Ok(Self::Avg),
            "last" => Ok(Self::Last),
            other => Err(Error::param(format!("unknown fusion strategy `{other}`"))),
        }
    }
}

/// Collapse a noise sequence into one tensor.
pub fn fuse(noises: &[Tensor], strategy: FusionStrategy) -> Result<Tensor> {
    let (first, rest) = noises
        .split_first()
        .ok_or_else(|| Error::param("cannot fuse an empty noise sequence"))?;
    match strategy {
        FusionStrategy::First => Ok(first.clone()),
        FusionStrategy::Last => Ok(noises[noises.len() - 1].clone()),
        FusionStrategy::Avg => {
            let mut acc = first.clone();
            for e in rest {
                acc = acc.zip_map(e, |a, b| a + b)?;
            }
            let n = noises.len() as f64;
            Ok(acc.map(|v| v / n))
        }
    }
}

pub const DEFAULT_RESOLUTION: usize = 32;
pub const DEFAULT_STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DnfConfig {
    /// Side of the square working resolution.
    pub resolution: usize,
    #[serde(default)]
    pub schedule: ScheduleParams,
    /// Number of inversion steps `S`.
    pub steps: usize,
    #[serde(default)]
    pub mode: SamplingMode,
    #[serde(default)]
    pub strategy: FusionStrategy,
}

impl Default for DnfConfig {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            schedule: ScheduleParams::default(),
            steps: DEFAULT_STEPS,
            mode: SamplingMode::Uniform,
            strategy: FusionStrategy::First,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub predictor: String,
    pub schedule: ScheduleParams,
    pub taus: Vec<usize>,
    pub mode: SamplingMode,
    pub strategy: FusionStrategy,
    pub resolution: usize,
    pub source_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DnfFeature {
    pub values: Tensor,
    pub provenance: Provenance,
}

/// A configured extraction pipeline: schedule, timesteps and predictor.
#[derive(Clone)]
pub struct Extractor {
    config: DnfConfig,
    schedule: NoiseSchedule,
    taus: TimestepSequence,
    predictor: Arc<dyn NoisePredictor>,
    predictor_id: String,
}

impl fmt::Debug for Extractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Extractor")
            .field("config", &self.config)
            .field("predictor", &self.predictor_id)
            .finish()
    }
}

impl Extractor {
    pub fn new(config: DnfConfig, predictor: Arc<dyn NoisePredictor>) -> Result<Self> {
        let schedule = config.schedule.build()?;
        let taus = TimestepSequence::sample(schedule.total_steps(), config.steps, config.mode)?;
        Self::with_taus(config, taus, predictor)
    }

    /// Use an explicit timestep sequence instead of sampling one.
    pub fn with_taus(
        config: DnfConfig,
        taus: TimestepSequence,
        predictor: Arc<dyn NoisePredictor>,
    ) -> Result<Self> {
        if config.resolution == 0 {
            return Err(Error::param("working resolution must be positive"));
        }
        let schedule = config.schedule.build()?;
        TimestepSequence::from_taus(taus.taus().to_vec(), schedule.total_steps())?;
        if taus.steps() == 0 {
            return Err(Error::param("inversion needs at least one step"));
        }
        let predictor_id = predictor.id();
        Ok(Self {
            config,
            schedule,
            taus,
            predictor,
            predictor_id,
        })
    }

    pub fn config(&self) -> &DnfConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn taus(&self) -> &TimestepSequence {
        &self.taus
    }

    pub fn predictor_id(&self) -> &str {
        &self.predictor_id
    }

    /// Same pipeline with a different fusion strategy.
    pub fn with_strategy(&self, strategy: FusionStrategy) -> Self {
        let mut e = self.clone();
        e.config.strategy = strategy;
        e
    }

    /// Hash of everything that affects a feature other than the image.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Keyed<'a> {
            config: &'a DnfConfig,
            taus: &'a [usize],
            predictor: &'a str,
        }
        hash::json_hash(&Keyed {
            config: &self.config,
            taus: self.taus.taus(),
            predictor: &self.predictor_id,
        })
    }

    /// Features for several strategies from a single inversion, run only as
    /// deep as the most demanding strategy requires. Values are rounded to
    /// `f32`, the storage precision.
    pub fn features_for(&self, x: &Tensor, strategies: &[FusionStrategy]) -> Result<Vec<Tensor>> {
        let depth = strategies
            .iter()
            .map(|s| s.steps_needed(self.taus.steps()))
            .max()
            .unwrap_or(0);
        if depth == 0 {
            return Ok(Vec::new());
        }
        let trace = diffusion::invert_partial(
            x,
            &self.taus,
            depth,
            self.predictor.as_ref(),
            &self.schedule,
        )?;
        strategies
            .iter()
            .map(|&s| {
                let f = fuse(&trace.noises, s)?.quantize_f32();
                if !f.all_finite() {
                    return Err(Error::Parameter(format!(
                        "predictor `{}` produced non-finite noise",
                        self.predictor_id
                    )));
                }
                Ok(f)
            })
            .collect()
    }

    /// Feature of a model-space tensor under the configured strategy.
    pub fn feature_of_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let mut v = self.features_for(x, &[self.config.strategy])?;
        Ok(v.pop().expect("one strategy requested"))
    }

    /// Resize, map to `[-1, 1]` and extract.
    pub fn feature_of_image(&self, img: &GrayImage) -> Result<Tensor> {
        let img = imageio::resize_square(img, self.config.resolution)?;
        self.feature_of_tensor(&imageio::to_unit_tensor(&img))
    }

    pub fn provenance(&self, source_sha256: String) -> Provenance {
        Provenance {
            predictor: self.predictor_id.clone(),
            schedule: self.config.schedule,
            taus: self.taus.taus().to_vec(),
            mode: self.config.mode,
            strategy: self.config.strategy,
            resolution: self.config.resolution,
            source_sha256,
        }
    }

    /// Decode an encoded image and extract its feature.
    pub fn extract_bytes(&self, bytes: &[u8]) -> Result<DnfFeature> {
        let img = imageio::decode_gray(bytes)?;
        Ok(DnfFeature {
            values: self.feature_of_image(&img)?,
            provenance: self.provenance(hash::bytes_hash(bytes)),
        })
    }

    pub fn extract_file(&self, path: &Path) -> Result<DnfFeature> {
        let bytes = std::fs::read(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        self.extract_bytes(&bytes).map_err(|e| match e {
            Error::Format { reason, .. } => Error::Decode {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}

/// Cache key for an image's content hash under an extractor configuration.
pub fn cache_key(content_hash: &str, config_hash: &str) -> String {
    format!("{content_hash}-{config_hash}")
}

pub fn feature_path(cache_dir: &Path, key: &str) -> PathBuf {
    cache_dir.join(format!("{key}.dnft"))
}

pub fn sidecar_path(cache_dir: &Path, key: &str) -> PathBuf {
    cache_dir.join(format!("{key}.json"))
}

pub fn write_feature(cache_dir: &Path, key: &str, feature: &DnfFeature) -> Result<()> {
    fsutil::write_atomic(&feature_path(cache_dir, key), &container::encode(&feature.values)?)?;
    fsutil::write_json(&sidecar_path(cache_dir, key), &feature.provenance)
}

pub fn read_feature(cache_dir: &Path, key: &str) -> Result<DnfFeature> {
    let values = container::decode(&std::fs::read(feature_path(cache_dir, key))?)?;
    let provenance = serde_json::from_slice(&std::fs::read(sidecar_path(cache_dir, key))?)?;
    Ok(DnfFeature { values, provenance })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchItem {
    pub file: PathBuf,
    pub key: String,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub file: PathBuf,
    pub reason: String,
}

/// Outcome of a batch extraction, in input order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchReport {
    pub items: Vec<Result<BatchItem, ItemFailure>>,
}

impl BatchReport {
    pub fn computed(&self) -> usize {
        self.succeeded().filter(|i| !i.cached).count()
    }

    pub fn cache_hits(&self) -> usize {
        self.succeeded().filter(|i| i.cached).count()
    }

    pub fn succeeded(&self) -> impl Iterator<Item = &BatchItem> {
        self.items.iter().filter_map(|r| r.as_ref().ok())
    }

    pub fn failures(&self) -> impl Iterator<Item = &ItemFailure> {
        self.items.iter().filter_map(|r| r.as_ref().err())
    }
}

/// Run `f` over `0..n` on a pool of `workers` threads, preserving order.
pub(crate) fn parallel_map<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::param(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(&f).collect()))
}

/// Extract one cached feature per file. Unreadable or undecodable files are
/// reported per item and do not stop the batch.
pub fn extract_batch(
    files: &[PathBuf],
    extractor: &Extractor,
    cache_dir: &Path,
    workers: usize,
) -> Result<BatchReport> {
    std::fs::create_dir_all(cache_dir)?;
    let config_hash = extractor.config_hash();
    let items = parallel_map(files.len(), workers, |i| {
        let file = &files[i];
        let fail = |reason: String| ItemFailure {
            file: file.clone(),
            reason,
        };
        let bytes = std::fs::read(file).map_err(|e| fail(e.to_string()))?;
        let key = cache_key(&hash::bytes_hash(&bytes), &config_hash);
        if feature_path(cache_dir, &key).is_file() && sidecar_path(cache_dir, &key).is_file() {
            return Ok(BatchItem {
                file: file.clone(),
                key,
                cached: true,
            });
        }
        let feature = extractor.extract_bytes(&bytes).map_err(|e| fail(e.to_string()))?;
        write_feature(cache_dir, &key, &feature).map_err(|e| fail(e.to_string()))?;
        Ok(BatchItem {
            file: file.clone(),
            key,
            cached: false,
        })
    })?;
    Ok(BatchReport { items })
}
