//! Orchestration of a full run: data generation, feature extraction,
//! detector training, evaluation, perturbation sweeps and analyses, all
//! under one output directory.
//!
//! ```text
//! <out>/data/{train,test,train-aug}/   datasets
//! <out>/predictor/                     trained generator (when trainable)
//! <out>/features/<split>-<name>.dnft   stacked [n, h, w] features
//! <out>/features/<split>.labels.json
//! <out>/detectors/<name>/              detector models
//! <out>/reports/*.json                 evaluation and sweep reports
//! <out>/analysis/                      spectra and embeddings
//! <out>/run_manifest.json
//! <out>/failure.log                    only after a failed stage
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, mean_log_spectrum, pca_embed, spectral_flatness};
use crate::config::{PredictorSpec, RunConfig, RunManifest, Stage, TOOL_VERSION};
use crate::container;
use crate::dataset::{self, Dataset, Manifest, ManifestEntry, LABEL_GENERATED, LABEL_REAL};
use crate::detector::{holdout_split, train_detector, DetectorModel, EvalReport, TrainingSummary};
use crate::dnf::{extract_batch, parallel_map, read_feature, DnfConfig, Extractor, FusionStrategy};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::hash;
use crate::imageio;
use crate::perturb::{apply_all, perturbation_sweep, SweepRow};
use crate::predictor::{NoisePredictor, TrainablePredictor};
use crate::schedule::TimestepSequence;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const FAILURE_LOG: &str = "failure.log";
pub const PIXELS: &str = "pixels";

/// A configured run bound to its output and cache directories.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
    pub cache: PathBuf,
    pub workers: usize,
}

/// Seed for one named component, derived from the run seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let digest = hash::bytes_hash(format!("{seed}:{label}").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

/// Feature set name for a fusion strategy.
pub fn dnf_name(s: FusionStrategy) -> String {
    format!("dnf-{s}")
}

/// Write a stacked `[n, h, w]` feature file.
pub fn write_stack(path: &Path, features: &[Tensor], dims: (usize, usize)) -> Result<()> {
    let mut data = Vec::with_capacity(features.len() * dims.0 * dims.1);
    for f in features {
        if f.shape() != [dims.0, dims.1] {
            return Err(Error::Shape {
                expected: vec![dims.0, dims.1],
                actual: f.shape().to_vec(),
            });
        }
        data.extend_from_slice(f.data());
    }
    let stack = Tensor::new(vec![features.len(), dims.0, dims.1], data)?;
    fsutil::write_atomic(path, &container::encode(&stack)?)
}

pub fn read_stack(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = std::fs::read(path)?;
    let stack = container::decode(&bytes)?;
    let [n, h, w] = *stack.shape() else {
        return Err(Error::format(
            "feature stack",
            format!("expected 3 dimensions, got {:?}", stack.shape()),
        ));
    };
    let per = h * w;
    (0..n)
        .map(|i| Tensor::new(vec![h, w], stack.data()[i * per..(i + 1) * per].to_vec()))
        .collect()
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let labels: Vec<u8> = serde_json::from_slice(&std::fs::read(path)?)?;
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::format("labels", format!("label {l} is not 0 or 1")));
    }
    Ok(labels)
}

/// Evaluation of one named detector on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub accuracy: f64,
    pub average_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub name: String,
    pub mean_flatness_real: f64,
    pub mean_flatness_generated: f64,
}

/// Evaluate a stored model on stored features; the eval-only path.
pub fn evaluate_files(features: &Path, labels: &Path, model: &Path, workers: usize) -> Result<EvalReport> {
    let feats = read_stack(features)?;
    let labels = read_labels(labels)?;
    let model = DetectorModel::load(model)?;
    model.evaluate(&feats, &labels, workers)
}

impl Run {
    pub fn new(config: RunConfig, out: PathBuf, cache: Option<PathBuf>, workers: usize) -> Self {
        let cache = cache.unwrap_or_else(|| out.join("cache"));
        Self {
            config,
            out,
            cache,
            workers: workers.max(1),
        }
    }

    pub fn data_dir(&self, split: &str) -> PathBuf {
        self.out.join("data").join(split)
    }

    pub fn predictor_dir(&self) -> PathBuf {
        self.out.join("predictor")
    }

    pub fn features_path(&self, split: &str, name: &str) -> PathBuf {
        self.out.join("features").join(format!("{split}-{name}.dnft"))
    }

    pub fn labels_path(&self, split: &str) -> PathBuf {
        self.out.join("features").join(format!("{split}.labels.json"))
    }

    pub fn detector_dir(&self, name: &str) -> PathBuf {
        self.out.join("detectors").join(name)
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.out.join("reports").join(format!("{name}.json"))
    }

    fn seed(&self, label: &str) -> u64 {
        derive_seed(self.config.seed, label)
    }

    /// Names of the detectors this run trains.
    pub fn detector_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.config.strategies.iter().map(|&s| dnf_name(s)).collect();
        if self.config.pixel_baseline {
            v.push(PIXELS.to_string());
        }
        v
    }

    fn generator_taus(&self) -> Result<TimestepSequence> {
        let s = self.config.schedule();
        TimestepSequence::sample(s.total_steps, self.config.data.generator_steps, self.config.data.generator_mode)
    }

    fn generator(&self) -> Result<Arc<dyn NoisePredictor>> {
        self.config.predictor.load(&self.predictor_dir())
    }

    fn dnf_predictor(&self) -> Result<Arc<dyn NoisePredictor>> {
        match &self.config.dnf_predictor {
            Some(spec) => spec.load(&self.predictor_dir()),
            None => self.generator(),
        }
    }

    fn extractor(&self, strategy: FusionStrategy, predictor: Arc<dyn NoisePredictor>) -> Result<Extractor> {
        Extractor::new(
            DnfConfig {
                strategy,
                ..self.config.dnf
            },
            predictor,
        )
    }

    /// The split detectors are trained on: the augmented copy when
    /// augmentation is configured.
    fn train_split(&self) -> &'static str {
        if self.config.augmentation.is_identity() {
            "train"
        } else {
            "train-aug"
        }
    }

    /// Fit the generator on the real training images and save it.
    pub fn train_predictor(&self) -> Result<()> {
        let PredictorSpec::Trainable { training } = &self.config.predictor else {
            return Err(Error::param("the configured generator is not trainable"));
        };
        let real = Dataset::open(&self.data_dir("train"))?;
        let images = real.load_images(self.workers)?;
        let r = self.config.data.textures.resolution;
        let tensors: Vec<Tensor> = images
            .iter()
            .zip(real.labels())
            .filter(|(_, l)| *l == LABEL_REAL)
            .map(|(img, _)| Ok(imageio::to_unit_tensor(&imageio::resize_square(img, r)?)))
            .collect::<Result<_>>()?;
        let mut training = *training;
        training.seed = self.seed("predictor");
        let model = TrainablePredictor::train(&tensors, &self.config.schedule().build()?, &training)?;
        model.save(&self.predictor_dir())
    }

    pub fn gen_data(&self) -> Result<()> {
        let cfg = &self.config;
        let splits = [("train", cfg.data.train_per_class), ("test", cfg.data.test_per_class)];
        for (split, n) in splits {
            if n > 0 {
                dataset::gen_real_dataset(
                    &self.data_dir(split),
                    n,
                    self.seed(&format!("real-{split}")),
                    &cfg.data.textures,
                    self.workers,
                )?;
            }
        }
        if matches!(cfg.predictor, PredictorSpec::Trainable { .. }) && !self.predictor_dir().is_dir() {
            self.train_predictor()?;
        }
        let generator = self.generator()?;
        let schedule = cfg.schedule().build()?;
        let taus = self.generator_taus()?;
        for (split, n) in splits {
            if n > 0 {
                dataset::gen_fake_dataset(
                    &self.data_dir(split),
                    n,
                    self.seed(&format!("generated-{split}")),
                    generator.as_ref(),
                    &schedule,
                    &taus,
                    cfg.data.textures.resolution,
                    self.workers,
                )?;
            }
        }
        if !cfg.augmentation.is_identity() {
            self.augment_training_set()?;
        }
        Ok(())
    }

    /// Write a corrupted copy of the training split to `train-aug`.
    fn augment_training_set(&self) -> Result<()> {
        let src = Dataset::open(&self.data_dir("train"))?;
        let dst = self.data_dir("train-aug");
        let seed = self.seed("augmentation");
        let aug = self.config.augmentation;
        let entries = src.entries();
        let rows = parallel_map(entries.len(), self.workers, |i| -> Result<ManifestEntry> {
            let e = &entries[i];
            let img = imageio::load_gray(&src.root().join(&e.file))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let specs = aug.draw(&mut rng);
            imageio::save_png(&dst.join(&e.file), &apply_all(&img, &specs)?)?;
            let applied: Vec<String> = specs.iter().map(ToString::to_string).collect();
            Ok(ManifestEntry {
                file: e.file.clone(),
                label: e.label,
                source: format!("{};aug=[{}]", e.source, applied.join(",")),
            })
        })?
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Manifest { entries: rows }.save(&dst)
    }

    fn splits(&self) -> Vec<&'static str> {
        let mut v = vec![self.train_split()];
        if self.config.data.test_per_class > 0 {
            v.push("test");
        }
        v
    }

    pub fn extract(&self) -> Result<()> {
        let predictor = self.dnf_predictor()?;
        let r = self.config.dnf.resolution;
        for split in self.splits() {
            let data = Dataset::open(&self.data_dir(split))?;
            fsutil::write_json(&self.labels_path(split), &data.labels())?;
            let files = data.files();
            for &strategy in &self.config.strategies {
                let ex = self.extractor(strategy, predictor.clone())?;
                let report = extract_batch(&files, &ex, &self.cache, self.workers)?;
                let failures: Vec<String> = report
                    .failures()
                    .map(|f| format!("{}: {}", f.file.display(), f.reason))
                    .collect();
                if !failures.is_empty() {
                    return Err(Error::Stage {
                        stage: Stage::Extract.to_string(),
                        reason: format!("{} items failed: {}", failures.len(), failures.join("; ")),
                    });
                }
                let feats: Vec<Tensor> = report
                    .succeeded()
                    .map(|item| Ok(read_feature(&self.cache, &item.key)?.values))
                    .collect::<Result<_>>()?;
                write_stack(&self.features_path(split, &dnf_name(strategy)), &feats, (r, r))?;
            }
            if self.config.pixel_baseline {
                let images = data.load_images(self.workers)?;
                let feats: Vec<Tensor> = images
                    .iter()
                    .map(|img| Ok(imageio::to_unit_tensor(&imageio::resize_square(img, r)?)))
                    .collect::<Result<_>>()?;
                write_stack(&self.features_path(split, PIXELS), &feats, (r, r))?;
            }
        }
        Ok(())
    }

    pub fn train_detectors(&self) -> Result<()> {
        let split = self.train_split();
        let labels = read_labels(&self.labels_path(split))?;
        let (tr, va) = holdout_split(&labels, self.config.validation_fraction);
        let mut cfg = self.config.detector;
        cfg.seed = self.seed("detector");
        let mut summaries: BTreeMap<String, TrainingSummary> = BTreeMap::new();
        for name in self.detector_names() {
            let feats = read_stack(&self.features_path(split, &name))?;
            if feats.len() != labels.len() {
                return Err(Error::param(format!("{name}: feature and label counts differ")));
            }
            let pick = |idx: &[usize]| -> (Vec<Tensor>, Vec<u8>) {
                (idx.iter().map(|&i| feats[i].clone()).collect(), idx.iter().map(|&i| labels[i]).collect())
            };
            let (xt, yt) = pick(&tr);
            let (xv, yv) = pick(&va);
            let model = train_detector(&xt, &yt, &xv, &yv, &cfg)?;
            model.save(&self.detector_dir(&name))?;
            summaries.insert(name, model.training().clone());
        }
        fsutil::write_json(&self.report_path("training"), &summaries)
    }

    fn test_set(&self, name: &str) -> Result<(Vec<Tensor>, Vec<u8>)> {
        Ok((
            read_stack(&self.features_path("test", name))?,
            read_labels(&self.labels_path("test"))?,
        ))
    }

    pub fn eval(&self) -> Result<Vec<SummaryRow>> {
        if let Some(e) = &self.config.eval_only {
            let report = evaluate_files(&e.features, &e.labels, &e.model, self.workers)?;
            fsutil::write_json(&self.report_path("eval"), &report)?;
            return Ok(vec![SummaryRow {
                name: "eval".into(),
                accuracy: report.accuracy,
                average_precision: report.average_precision,
            }]);
        }
        if self.config.data.test_per_class == 0 {
            return Err(Error::Metric("the test set is empty".into()));
        }
        let mut rows = Vec::new();
        for name in self.detector_names() {
            let (feats, labels) = self.test_set(&name)?;
            let model = DetectorModel::load(&self.detector_dir(&name))?;
            let report = model.evaluate(&feats, &labels, self.workers)?;
            fsutil::write_json(&self.report_path(&format!("eval-{name}")), &report)?;
            rows.push(SummaryRow {
                name,
                accuracy: report.accuracy,
                average_precision: report.average_precision,
            });
        }
        fsutil::write_json(&self.report_path("summary"), &rows)?;
        Ok(rows)
    }

    pub fn perturb_sweep(&self) -> Result<BTreeMap<String, Vec<SweepRow>>> {
        let data = Dataset::open(&self.data_dir("test"))?;
        let images = data.load_images(self.workers)?;
        let labels = data.labels();
        let predictor = self.dnf_predictor()?;
        let mut all = BTreeMap::new();
        for &strategy in &self.config.strategies {
            let name = dnf_name(strategy);
            let model = DetectorModel::load(&self.detector_dir(&name))?;
            let ex = self.extractor(strategy, predictor.clone())?;
            let rows = perturbation_sweep(&images, &labels, &model, &ex, &self.config.perturbations, self.workers)?;
            all.insert(name, rows);
        }
        fsutil::write_json(&self.report_path("sweep"), &all)?;
        Ok(all)
    }

    pub fn spectrum(&self) -> Result<Vec<SpectrumSummary>> {
        let dir = self.out.join("analysis");
        let labels = read_labels(&self.labels_path("test"))?;
        let mut names = self.config.strategies.iter().map(|&s| dnf_name(s)).collect::<Vec<_>>();
        if self.config.pixel_baseline {
            names.push(PIXELS.into());
        }
        let mut summary = Vec::new();
        for name in names {
            let feats = read_stack(&self.features_path("test", &name))?;
            let mut flat = [0.0f64; 2];
            for (class, tag) in [(LABEL_REAL, "real"), (LABEL_GENERATED, "generated")] {
                let part: Vec<Tensor> = feats
                    .iter()
                    .zip(&labels)
                    .filter(|(_, &l)| l == class)
                    .map(|(f, _)| f.clone())
                    .collect();
                mean_log_spectrum(&part)?.save(&dir, &format!("spectrum-{name}-{tag}"), true)?;
                let values = parallel_map(part.len(), self.workers, |i| spectral_flatness(&part[i]))?;
                let values: Vec<f64> = values.into_iter().collect::<Result<_>>()?;
                flat[class as usize] = values.iter().sum::<f64>() / values.len() as f64;
            }
            summary.push(SpectrumSummary {
                name,
                mean_flatness_real: flat[0],
                mean_flatness_generated: flat[1],
            });
        }
        fsutil::write_json(&self.report_path("spectrum"), &summary)?;
        Ok(summary)
    }

    pub fn embed(&self) -> Result<()> {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            name: &'a str,
            labels: &'a [u8],
            variances: &'a [f64],
        }
        let labels = read_labels(&self.labels_path("test"))?;
        for name in self.detector_names() {
            let feats = read_stack(&self.features_path("test", &name))?;
            let e = pca_embed(&feats, self.config.embed_dim)?;
            let dir = self.out.join("analysis");
            fsutil::write_atomic(
                &dir.join(format!("embed-{name}.dnft")),
                &container::encode(&e.coords_tensor()?)?,
            )?;
            fsutil::write_json(
                &dir.join(format!("embed-{name}.json")),
                &Sidecar {
                    name: &name,
                    labels: &labels,
                    variances: &e.variances,
                },
            )?;
            let sep = {
                let pick = |c: u8| -> Vec<Tensor> {
                    feats.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(f, _)| f.clone()).collect()
                };
                analysis::class_separation(&pick(LABEL_REAL), &pick(LABEL_GENERATED)).ok()
            };
            if let Some(s) = sep {
                fsutil::write_json(&dir.join(format!("separation-{name}.json")), &s)?;
            }
        }
        Ok(())
    }

    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        if self.config.eval_only.is_some() && stage != Stage::Eval {
            return Ok(());
        }
        match stage {
            Stage::GenData => self.gen_data(),
            Stage::TrainPredictor => self.train_predictor(),
            Stage::Extract => self.extract(),
            Stage::TrainDetector => self.train_detectors(),
            Stage::Eval => self.eval().map(drop),
            Stage::PerturbSweep => self.perturb_sweep().map(drop),
            Stage::Spectrum => self.spectrum().map(drop),
            Stage::Embed => self.embed(),
        }
    }

    /// Run `stages` in pipeline order. A failing stage leaves earlier
    /// outputs in place and writes `failure.log`.
    pub fn execute(&self, stages: &[Stage]) -> Result<RunManifest> {
        std::fs::create_dir_all(&self.out)?;
        let _ = std::fs::remove_file(self.out.join(FAILURE_LOG));
        let mut ordered = stages.to_vec();
        ordered.sort();
        ordered.dedup();
        let mut done = Vec::new();
        for stage in ordered {
            if let Err(e) = self.run_stage(stage) {
                let log = format!(
                    "stage: {stage}\nerror: {e}\ncompleted: {}\n",
                    done.iter().map(Stage::to_string).collect::<Vec<_>>().join(", ")
                );
                fsutil::write_atomic(&self.out.join(FAILURE_LOG), log.as_bytes())?;
                return Err(match e {
                    Error::Stage { .. } => e,
                    other => Error::Stage {
                        stage: stage.to_string(),
                        reason: other.to_string(),
                    },
                });
            }
            done.push(stage);
        }
        let manifest = self.manifest(done)?;
        fsutil::write_json(&self.out.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }

    pub fn run_all(&self) -> Result<RunManifest> {
        self.execute(&self.config.stages)
    }

    fn manifest(&self, stages: Vec<Stage>) -> Result<RunManifest> {
        let eval_only = self.config.eval_only.is_some();
        let describe = |spec: &PredictorSpec| -> Option<String> {
            if eval_only {
                return None;
            }
            spec.load(&self.predictor_dir()).ok().map(|p| p.id())
        };
        let generator = describe(&self.config.predictor);
        let dnf_predictor = match &self.config.dnf_predictor {
            Some(spec) => describe(spec),
            None => generator.clone(),
        };
        let s = self.config.schedule();
        Ok(RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            seed: self.config.seed,
            config_sha256: hash::json_hash(&self.config),
            schedule: s,
            generator_taus: self.generator_taus()?.taus().to_vec(),
            dnf_taus: TimestepSequence::sample(s.total_steps, self.config.dnf.steps, self.config.dnf.mode)?
                .taus()
                .to_vec(),
            resolution: self.config.dnf.resolution,
            strategies: self.config.strategies.clone(),
            generator,
            dnf_predictor,
            stages,
            outputs: hash_outputs(&self.out, &self.cache)?,
        })
    }
}

/// SHA-256 of every file under `root`, keyed by `/`-separated relative path,
/// skipping the manifest, the failure log and the cache directory.
fn hash_outputs(root: &Path, cache: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(dir: &Path, root: &Path, cache: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let path = e.path();
            if path == cache {
                continue;
            }
            if path.is_dir() {
                walk(&path, root, cache, out)?;
                continue;
            }
            let rel: Vec<String> = path
                .strip_prefix(root)
                .expect("walked from root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect();
            let rel = rel.join("/");
            if rel == MANIFEST_FILE || rel == FAILURE_LOG || rel.starts_with('.') || rel.contains("/.") {
                continue;
            }
            out.insert(rel, hash::bytes_hash(&std::fs::read(&path)?));
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(root, root, cache, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_label_and_seed() {
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
    }

    #[test]
    fn stacks_round_trip_including_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.dnft");
        let feats: Vec<Tensor> = (0..3).map(|i| Tensor::filled(&[2, 3], i as f64 * 0.5)).collect();
        write_stack(&p, &feats, (2, 3)).unwrap();
        assert_eq!(read_stack(&p).unwrap(), feats);
        write_stack(&p, &[], (2, 3)).unwrap();
        assert!(read_stack(&p).unwrap().is_empty());
        assert!(write_stack(&p, &feats, (3, 2)).is_err());
        std::fs::write(&p, container::encode(&Tensor::zeros(&[4])).unwrap()).unwrap();
        assert!(read_stack(&p).is_err());
    }

    #[test]
    fn labels_must_be_binary() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.json");
        std::fs::write(&p, "[0, 1, 1]").unwrap();
        assert_eq!(read_labels(&p).unwrap(), vec![0, 1, 1]);
        std::fs::write(&p, "[0, 2]").unwrap();
        assert!(read_labels(&p).is_err());
    }
}
