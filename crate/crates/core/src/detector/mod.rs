//! Real-versus-generated classification over feature planes.
//!
//! Label 1 marks a generated image, label 0 a real one. Scores are the
//! classifier's probability of label 1.

pub mod metrics;
mod net;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dnf::parallel_map;
use crate::error::{Error, Result};
use crate::modelfile::{self, ParamGroups};
use crate::nn::{self, Adam, AdamConfig, Plane};
use crate::tensor::Tensor;

pub use metrics::{accuracy, average_precision, EvalReport};
pub use net::Architecture;
use net::Classifier;

pub const BUNDLE_KIND: &str = "dnf-detector";
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorTrainingConfig {
    pub architecture: Architecture,
    pub batch: usize,
    pub learning_rate: f64,
    /// Training ends once the decayed rate reaches this value.
    pub min_learning_rate: f64,
    pub decay_factor: f64,
    /// Epochs without sufficient validation improvement before decaying.
    pub patience: usize,
    pub min_improvement: f64,
    pub max_epochs: usize,
    pub flip_probability: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for DetectorTrainingConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Resnet { width: 8 },
            batch: 64,
            learning_rate: 1e-4,
            min_learning_rate: 1e-6,
            decay_factor: 10.0,
            patience: 5,
            min_improvement: 0.001,
            max_epochs: 100,
            flip_probability: 0.5,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl DetectorTrainingConfig {
    fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        if self.batch == 0 {
            return Err(Error::param("batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.min_learning_rate > 0.0 && self.decay_factor > 1.0) {
            return Err(Error::param(
                "learning rates must be positive and the decay factor above 1",
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::param("flip probability must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub seed: u64,
    pub epochs: usize,
    /// Epoch whose weights were kept (best validation accuracy).
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub final_learning_rate: f64,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DetectorMeta {
    architecture: Architecture,
    height: usize,
    width: usize,
    threshold: f64,
    config: DetectorTrainingConfig,
    training: TrainingSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    meta: DetectorMeta,
    mean: Vec<f32>,
    std: Vec<f32>,
    classifier: Classifier,
}

fn check_set(features: &[Tensor], labels: &[u8], what: &str) -> Result<(usize, usize)> {
    if features.len() != labels.len() {
        return Err(Error::param(format!(
            "{what}: {} features for {} labels",
            features.len(),
            labels.len()
        )));
    }
    let first = features
        .first()
        .ok_or_else(|| Error::param(format!("{what} set is empty")))?;
    if first.shape().len() != 2 {
        return Err(Error::param(format!("{what}: features must be 2-D planes")));
    }
    if let Some(f) = features.iter().find(|f| f.shape() != first.shape()) {
        return Err(Error::Shape {
            expected: first.shape().to_vec(),
            actual: f.shape().to_vec(),
        });
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::param(format!("{what}: labels must be 0 or 1")));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::param(format!("{what} set needs both classes")));
    }
    Ok(first.plane_dims())
}

/// Per-pixel mean and deviation, rounded to `f32` so stored and in-memory
/// models agree exactly.
fn fit_stats(features: &[Tensor]) -> (Vec<f32>, Vec<f32>) {
    let d = features[0].len();
    let n = features.len() as f64;
    let mut mean = vec![0.0f64; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f.data()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; d];
    for f in features {
        for ((s, v), m) in var.iter_mut().zip(f.data()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR) as f32).collect();
    (mean.iter().map(|&m| m as f32).collect(), std)
}

fn bce(logit: f64, label: u8) -> (f64, f64) {
    let y = label as f64;
    (nn::softplus(logit) - y * logit, nn::sigmoid(logit) - y)
}

impl DetectorModel {
    pub fn plane(&self) -> Plane {
        Plane::new(self.meta.height, self.meta.width)
    }

    pub fn threshold(&self) -> f64 {
        self.meta.threshold
    }

    pub fn architecture(&self) -> Architecture {
        self.meta.architecture
    }

    pub fn training(&self) -> &TrainingSummary {
        &self.meta.training
    }

    pub fn stats(&self) -> (&[f32], &[f32]) {
        (&self.mean, &self.std)
    }

    fn normalize(&self, feature: &Tensor) -> Result<Vec<f32>> {
        let p = self.plane();
        if feature.shape() != [p.h, p.w] {
            return Err(Error::Shape {
                expected: vec![p.h, p.w],
                actual: feature.shape().to_vec(),
            });
        }
        Ok(feature
            .data()
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| ((v - m as f64) / s as f64) as f32)
            .collect())
    }

    pub fn logit(&self, feature: &Tensor) -> Result<f64> {
        let x = self.normalize(feature)?;
        Ok(self.classifier.forward(&x, self.plane()).0 as f64)
    }

    /// Probability that `feature` comes from a generated image.
    pub fn predict_score(&self, feature: &Tensor) -> Result<f64> {
        Ok(nn::sigmoid(self.logit(feature)?))
    }

    pub fn scores(&self, features: &[Tensor], workers: usize) -> Result<Vec<f64>> {
        parallel_map(features.len(), workers, |i| self.predict_score(&features[i]))?
            .into_iter()
            .collect()
    }

    pub fn evaluate(&self, features: &[Tensor], labels: &[u8], workers: usize) -> Result<EvalReport> {
        if features.is_empty() {
            return Err(Error::Metric("evaluation set is empty".into()));
        }
        let scores = self.scores(features, workers)?;
        EvalReport::from_scores(scores, labels.to_vec(), self.meta.threshold)
    }

    fn groups(&self) -> ParamGroups {
        let mut g = ParamGroups::new();
        let shape = vec![self.meta.height, self.meta.width];
        g.push("stats.mean", shape.clone(), self.mean.clone());
        g.push("stats.std", shape, self.std.clone());
        for (name, shape, data) in self.classifier.groups().iter() {
            g.push(format!("classifier.{name}"), shape.to_vec(), data.to_vec());
        }
        g
    }

    /// Hash over configuration, statistics and parameters.
    pub fn fingerprint(&self) -> String {
        crate::hash::bytes_hash(
            format!(
                "{}|{}",
                serde_json::to_string(&self.meta).expect("metadata serializes"),
                self.groups().fingerprint()
            )
            .as_bytes(),
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        modelfile::save(dir, BUNDLE_KIND, &self.meta, &self.groups())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (meta, mut groups): (DetectorMeta, ParamGroups) = modelfile::load(dir, BUNDLE_KIND)?;
        let plane = Plane::new(meta.height, meta.width);
        let shape = [meta.height, meta.width];
        let mean = groups.take("stats.mean", &shape)?;
        let std = groups.take("stats.std", &shape)?;
        if std.iter().any(|&s| !(s as f64 >= STD_FLOOR * 0.999)) {
            return Err(Error::format("detector bundle", "deviation below floor"));
        }
        let mut inner = ParamGroups::new();
        for (name, shape, data) in groups.iter() {
            if let Some(rest) = name.strip_prefix("classifier.") {
                inner.push(rest, shape.to_vec(), data.to_vec());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut classifier = Classifier::new(meta.architecture, plane, &mut rng)?;
        classifier.load_groups(&mut inner)?;
        Ok(Self {
            meta,
            mean,
            std,
            classifier,
        })
    }
}

/// Train a classifier on `train`, selecting and scheduling by accuracy on
/// `val`.
///
/// Adam at the configured rate; the rate is divided by `decay_factor` when
/// validation accuracy has not improved by `min_improvement` over the best
/// so far for `patience` epochs, and training ends when it reaches
/// `min_learning_rate` (or after `max_epochs`). Each sample is flipped
/// horizontally with `flip_probability`. The weights of the best validation
/// epoch are returned.
pub fn train_detector(
    train: &[Tensor],
    train_labels: &[u8],
    val: &[Tensor],
    val_labels: &[u8],
    cfg: &DetectorTrainingConfig,
) -> Result<DetectorModel> {
    cfg.validate()?;
    let (h, w) = check_set(train, train_labels, "training")?;
    let vdims = check_set(val, val_labels, "validation")?;
    if vdims != (h, w) {
        return Err(Error::Shape {
            expected: vec![h, w],
            actual: vec![vdims.0, vdims.1],
        });
    }
    let plane = Plane::new(h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mean, std) = fit_stats(train);
    let mut model = DetectorModel {
        meta: DetectorMeta {
            architecture: cfg.architecture,
            height: h,
            width: w,
            threshold: cfg.threshold,
            config: *cfg,
            training: TrainingSummary {
                seed: cfg.seed,
                epochs: 0,
                best_epoch: 0,
                best_val_accuracy: 0.0,
                final_learning_rate: cfg.learning_rate,
                history: Vec::new(),
            },
        },
        mean,
        std,
        classifier: Classifier::new(cfg.architecture, plane, &mut rng)?,
    };
    let normalized: Vec<[Vec<f32>; 2]> = train
        .iter()
        .map(|f| Ok([model.normalize(f)?, model.normalize(&f.flip_horizontal())?]))
        .collect::<Result<_>>()?;

    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(Classifier, f64, usize)> = None;
    let mut stale = 0usize;
    let mut history = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            for &i in batch {
                let flip = cfg.flip_probability > 0.0 && rng.random::<f64>() < cfg.flip_probability;
                let x = &normalized[i][usize::from(flip)];
                let (logit, tape) = model.classifier.forward(x, plane);
                let (loss, dlogit) = bce(logit as f64, train_labels[i]);
                if !loss.is_finite() {
                    return Err(Error::Training(format!("non-finite loss in epoch {epoch}")));
                }
                loss_sum += loss;
                model.classifier.backward(x, plane, &tape, dlogit as f32);
            }
            adam.update(model.classifier.params_mut(), 1.0 / batch.len() as f32);
        }
        let val_scores: Vec<f64> = val
            .iter()
            .map(|f| model.predict_score(f))
            .collect::<Result<_>>()?;
        let val_acc = accuracy(&val_scores, val_labels, cfg.threshold)?;
        history.push(EpochRecord {
            epoch,
            learning_rate: adam.config.learning_rate,
            train_loss: loss_sum / train.len() as f64,
            val_accuracy: val_acc,
        });
        let improved = match &best {
            None => true,
            Some((_, b, _)) => val_acc >= b + cfg.min_improvement,
        };
        if improved {
            best = Some((model.classifier.clone(), val_acc, epoch));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stale = 0;
                adam.config.learning_rate /= cfg.decay_factor;
                // Tolerate rounding in repeated division.
                if adam.config.learning_rate <= cfg.min_learning_rate * (1.0 + 1e-9) {
                    break;
                }
            }
        }
    }

    let (classifier, best_acc, best_epoch) = best.expect("at least one epoch when max_epochs > 0");
    model.classifier = classifier;
    model.meta.training = TrainingSummary {
        seed: cfg.seed,
        epochs: history.len(),
        best_epoch,
        best_val_accuracy: best_acc,
        final_learning_rate: adam.config.learning_rate,
        history,
    };
    Ok(model)
}

/// Split indices into a validation part (every `k`-th item per class) and
/// the rest, deterministically and class-balanced.
pub fn holdout_split(labels: &[u8], fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [0u8, 1] {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        // At least one validation item per class once a class has two.
        let n_val = ((idx.len() as f64 * fraction).round() as usize)
            .max(usize::from(idx.len() >= 2))
            .min(idx.len() - usize::from(!idx.is_empty()));
        let stride = if n_val == 0 { usize::MAX } else { idx.len() / n_val };
        let mut taken = 0;
        for (j, &i) in idx.iter().enumerate() {
            if taken < n_val && j % stride == stride - 1 {
                val.push(i);
                taken += 1;
            } else {
                train.push(i);
            }
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}
