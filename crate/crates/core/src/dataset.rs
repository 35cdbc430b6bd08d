//! Synthetic image datasets on disk: `real/` textures, `generated/` sampler
//! outputs and a `manifest.tsv` listing both.

use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion;
use crate::dnf::parallel_map;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::imageio::{self, to_u8};
use crate::perturb::{blur_plane, gaussian_kernel};
use crate::predictor::NoisePredictor;
use crate::schedule::{NoiseSchedule, TimestepSequence};
use crate::tensor::Tensor;

pub const REAL_DIR: &str = "real";
pub const GENERATED_DIR: &str = "generated";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const LABEL_REAL: u8 = 0;
pub const LABEL_GENERATED: u8 = 1;

const MANIFEST_HEADER: &str = "filename\tlabel\tsource";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the dataset root, `/`-separated.
    pub file: String,
    pub label: u8,
    pub source: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

fn check_relative(file: &str) -> std::result::Result<(), String> {
    if file.is_empty() {
        return Err("empty filename".into());
    }
    if file.starts_with('/') || file.contains('\\') || file.split('/').any(|c| c.is_empty() || c == "." || c == "..") {
        return Err(format!("filename {file:?} is not a plain relative path"));
    }
    Ok(())
}

impl Manifest {
    /// Parse a header line followed by `filename<TAB>label<TAB>source` rows.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, reason: String| Error::format("dataset manifest", format!("line {line}: {reason}"));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == MANIFEST_HEADER => {}
            _ => return Err(bad(1, format!("expected header {MANIFEST_HEADER:?}"))),
        }
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in lines {
            let n = i + 1;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(bad(n, format!("expected 3 fields, found {}", fields.len())));
            }
            check_relative(fields[0]).map_err(|r| bad(n, r))?;
            let label = match fields[1] {
                "0" => LABEL_REAL,
                "1" => LABEL_GENERATED,
                other => return Err(bad(n, format!("label {other:?} is not 0 or 1"))),
            };
            if !seen.insert(fields[0]) {
                return Err(bad(n, format!("duplicate filename {:?}", fields[0])));
            }
            entries.push(ManifestEntry {
                file: fields[0].to_string(),
                label,
                source: fields[2].to_string(),
            });
        }
        Ok(Self { entries })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.file, e.label, e.source));
        }
        out
    }

    pub fn load(root: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(root.join(MANIFEST_FILE))?)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        for e in &self.entries {
            check_relative(&e.file).map_err(|r| Error::format("dataset manifest", r))?;
            if e.label > 1 || e.source.contains(['\t', '\n', '\r']) {
                return Err(Error::format("dataset manifest", format!("unwritable entry {:?}", e.file)));
            }
        }
        fsutil::write_atomic(&root.join(MANIFEST_FILE), self.to_tsv().as_bytes())
    }
}

/// A dataset root whose manifest rows all name existing files.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = Manifest::load(root)?;
        for e in &manifest.entries {
            let path = root.join(&e.file);
            if !path.is_file() {
                return Err(Error::Decode {
                    path,
                    reason: "listed in the manifest but missing".into(),
                });
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.manifest.entries
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn files(&self) -> Vec<PathBuf> {
        self.manifest.entries.iter().map(|e| self.root.join(&e.file)).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.manifest.entries.iter().map(|e| e.label).collect()
    }

    /// Decode every image, in manifest order.
    pub fn load_images(&self, workers: usize) -> Result<Vec<GrayImage>> {
        let files = self.files();
        parallel_map(files.len(), workers, |i| imageio::load_gray(&files[i]))?
            .into_iter()
            .collect()
    }
}

/// Replace the manifest rows under `dir` with `fresh`, keeping the rest;
/// rows are ordered by label, then filename.
fn merge_manifest(root: &Path, dir: &str, fresh: Vec<ManifestEntry>) -> Result<Dataset> {
    let mut manifest = if root.join(MANIFEST_FILE).is_file() {
        Manifest::load(root)?
    } else {
        Manifest::default()
    };
    let prefix = format!("{dir}/");
    manifest.entries.retain(|e| !e.file.starts_with(&prefix));
    manifest.entries.extend(fresh);
    manifest
        .entries
        .sort_by(|a, b| (a.label, &a.file).cmp(&(b.label, &b.file)));
    manifest.save(root)?;
    Dataset::open(root)
}

fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn file_name(dir: &str, index: usize) -> String {
    format!("{dir}/{index:06}.png")
}

/// Parameters of the structured "real" image model: a smooth Gaussian random
/// field, a few straight edges between flat regions, and optional per-pixel
/// grain, all in the `[-1, 1]` pixel scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureParams {
    pub resolution: usize,
    /// Standard deviation (pixels) of the Gaussian smoothing kernel; 0 gives
    /// white noise.
    pub correlation_length: f64,
    pub field_std: f64,
    pub edges: usize,
    /// Total height of the edge steps.
    pub edge_contrast: f64,
    pub grain: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self {
            resolution: 32,
            correlation_length: 2.0,
            field_std: 0.3,
            edges: 3,
            edge_contrast: 0.5,
            grain: 0.0,
        }
    }
}

impl TextureParams {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if self.resolution == 0 || self.resolution > 4096 {
            return Err(Error::param(format!("texture resolution {} not in 1..=4096", self.resolution)));
        }
        if !(finite_nonneg(self.correlation_length)
            && finite_nonneg(self.field_std)
            && finite_nonneg(self.edge_contrast)
            && finite_nonneg(self.grain))
        {
            return Err(Error::param("texture parameters must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One texture in the `[-1, 1]` pixel scale, before 8-bit quantization.
pub fn texture(params: &TextureParams, seed: u64, index: usize) -> Result<Tensor> {
    params.validate()?;
    let r = params.resolution;
    let mut rng = item_rng(seed, index);
    let white: Vec<f64> = (0..r * r).map(|_| rng.sample(StandardNormal)).collect();
    let field = if params.correlation_length > 0.0 {
        // A separable kernel k x k leaves white noise with variance (sum k^2)^2.
        let k = gaussian_kernel(params.correlation_length)?;
        let sq = k[0] * k[0] + 2.0 * k[1..].iter().map(|w| w * w).sum::<f64>();
        let smooth = blur_plane(&white, r, r, params.correlation_length)?;
        smooth.into_iter().map(|v| v / sq).collect()
    } else {
        white
    };
    let mut out: Vec<f64> = field.iter().map(|v| params.field_std * v).collect();
    if params.edges > 0 {
        let step = params.edge_contrast / params.edges as f64;
        for _ in 0..params.edges {
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let (ny, nx) = angle.sin_cos();
            let cy = rng.random_range(0.0..r as f64);
            let cx = rng.random_range(0.0..r as f64);
            let sign = if rng.random_bool(0.5) { step } else { -step };
            for y in 0..r {
                for x in 0..r {
                    if (y as f64 + 0.5 - cy) * ny + (x as f64 + 0.5 - cx) * nx > 0.0 {
                        out[y * r + x] += sign;
                    }
                }
            }
        }
    }
    if params.grain > 0.0 {
        for v in out.iter_mut() {
            *v += params.grain * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Tensor::new(vec![r, r], out)
}

/// Quantize a `[-1, 1]` plane to 8 bits.
pub fn to_image(t: &Tensor) -> Result<GrayImage> {
    let (h, w) = t.plane_dims();
    if t.shape().len() != 2 {
        return Err(Error::param("expected a 2-D plane"));
    }
    let px = t.data().iter().map(|&v| to_u8((v + 1.0) * 127.5)).collect();
    Ok(GrayImage::from_raw(w as u32, h as u32, px).expect("buffer matches dimensions"))
}

/// Write `n` textures to `root/real/` and list them in the manifest.
pub fn gen_real_dataset(root: &Path, n: usize, seed: u64, params: &TextureParams, workers: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::param("dataset size must be at least 1"));
    }
    params.validate()?;
    std::fs::create_dir_all(root.join(REAL_DIR))?;
    let source = format!("texture:seed={seed}");
    let entries = parallel_map(n, workers, |i| -> Result<ManifestEntry> {
        let file = file_name(REAL_DIR, i);
        imageio::save_png(&root.join(&file), &to_image(&texture(params, seed, i)?)?)?;
        Ok(ManifestEntry {
            file,
            label: LABEL_REAL,
            source: source.clone(),
        })
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    merge_manifest(root, REAL_DIR, entries)
}

/// One deterministic sample: `x_T ~ N(0, I)` drawn from the per-item stream,
/// then run down the timestep sequence.
pub fn sample_image(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    taus: &TimestepSequence,
    resolution: usize,
    seed: u64,
    index: usize,
) -> Result<Tensor> {
    let mut rng = item_rng(seed, index);
    let latent: Vec<f64> = (0..resolution * resolution).map(|_| rng.sample(StandardNormal)).collect();
    let x_t = Tensor::new(vec![resolution, resolution], latent)?;
    diffusion::generate(&x_t, taus, predictor, schedule)
}

/// Write `n` sampler outputs to `root/generated/` and list them in the
/// manifest.
#[allow(clippy::too_many_arguments)]
pub fn gen_fake_dataset(
    root: &Path,
    n: usize,
    seed: u64,
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    taus: &TimestepSequence,
    resolution: usize,
    workers: usize,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::param("dataset size must be at least 1"));
    }
    if resolution == 0 {
        return Err(Error::param("resolution must be positive"));
    }
    std::fs::create_dir_all(root.join(GENERATED_DIR))?;
    let source = format!("ddim:{}:seed={seed}", predictor.id());
    let entries = parallel_map(n, workers, |i| -> Result<ManifestEntry> {
        let file = file_name(GENERATED_DIR, i);
        let x0 = sample_image(predictor, schedule, taus, resolution, seed, i)?;
        if !x0.all_finite() {
            return Err(Error::Stage {
                stage: "gen-data".into(),
                reason: format!("sample {i} is not finite"),
            });
        }
        imageio::save_png(&root.join(&file), &to_image(&x0)?)?;
        Ok(ManifestEntry {
            file,
            label: LABEL_GENERATED,
            source: source.clone(),
        })
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    merge_manifest(root, GENERATED_DIR, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::spectral_flatness;
    use crate::predictor::{AnalyticGaussianPredictor, ConstantPredictor};
    use crate::schedule::SamplingMode;

    #[test]
    fn manifest_parse_and_print() {
        let text = "filename\tlabel\tsource\nreal/a.png\t0\ttexture\ngenerated/b.png\t1\tddim:x\n";
        let m = Manifest::parse(text).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[1].label, 1);
        assert_eq!(m.to_tsv(), text);
        for bad in [
            "",
            "file\tlabel\tsource\n",
            "filename\tlabel\tsource\na.png\t2\tx\n",
            "filename\tlabel\tsource\na.png\t0\n",
            "filename\tlabel\tsource\n../a.png\t0\tx\n",
            "filename\tlabel\tsource\n/a.png\t0\tx\n",
            "filename\tlabel\tsource\na.png\t0\tx\na.png\t1\tx\n",
        ] {
            assert!(matches!(Manifest::parse(bad), Err(Error::Format { .. })), "{bad:?}");
        }
    }

    #[test]
    fn textures_are_deterministic_and_seed_dependent() {
        let p = TextureParams::default();
        let a = texture(&p, 1, 0).unwrap();
        assert_eq!(a, texture(&p, 1, 0).unwrap());
        assert_ne!(a, texture(&p, 2, 0).unwrap());
        assert_ne!(a, texture(&p, 1, 1).unwrap());
        assert_eq!(a.shape(), &[32, 32]);
    }

    #[test]
    fn white_field_is_spectrally_flat() {
        let p = TextureParams {
            correlation_length: 0.0,
            edges: 0,
            resolution: 64,
            ..TextureParams::default()
        };
        for i in 0..5 {
            let img = to_image(&texture(&p, 9, i).unwrap()).unwrap();
            let f = spectral_flatness(&imageio::to_unit_tensor(&img)).unwrap();
            assert!(f >= 0.8, "{f}");
        }
    }

    #[test]
    fn smoothing_keeps_the_requested_spread() {
        let p = TextureParams {
            edges: 0,
            field_std: 1.0,
            correlation_length: 1.5,
            resolution: 64,
            ..TextureParams::default()
        };
        let t = texture(&p, 3, 0).unwrap();
        let sd = t.mean_square().sqrt();
        assert!((0.6..1.4).contains(&sd), "{sd}");
        // Neighbouring pixels are strongly correlated.
        let d = t.data();
        let lag: f64 = (0..64 * 63).map(|i| d[i] * d[i + 64]).sum::<f64>() / (64.0 * 63.0);
        assert!(lag / t.mean_square() > 0.6);
    }

    #[test]
    fn zero_predictor_rescales_the_latent() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let taus = TimestepSequence::sample(1000, 10, SamplingMode::Uniform).unwrap();
        let x0 = sample_image(&ConstantPredictor(0.0), &s, &taus, 4, 5, 0).unwrap();
        let mut rng = item_rng(5, 0);
        let first = *taus.taus().first().unwrap();
        let last = *taus.taus().last().unwrap();
        let scale = (s.alpha_bar(first).unwrap() / s.alpha_bar(last).unwrap()).sqrt();
        for v in x0.data() {
            let z: f64 = rng.sample(StandardNormal);
            assert!((v - scale * z).abs() < 1e-12 * scale.max(1.0));
        }
    }

    #[test]
    fn matched_gaussian_sampler_has_unit_variance() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let taus = TimestepSequence::sample(1000, 50, SamplingMode::Uniform).unwrap();
        let p = AnalyticGaussianPredictor::new(0.0, 1.0).unwrap();
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut n = 0.0;
        for i in 0..200 {
            for &v in sample_image(&p, &s, &taus, 8, 11, i).unwrap().data() {
                sum += v;
                sq += v * v;
                n += 1.0;
            }
        }
        let var = sq / n - (sum / n).powi(2);
        assert!((var - 1.0).abs() <= 0.1, "{var}");
    }

    #[test]
    fn generation_writes_a_consistent_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = TextureParams {
            resolution: 8,
            ..TextureParams::default()
        };
        let real = gen_real_dataset(dir.path(), 3, 1, &p, 2).unwrap();
        assert_eq!(real.labels(), vec![0, 0, 0]);
        let first = std::fs::read(dir.path().join("real/000000.png")).unwrap();
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let taus = TimestepSequence::sample(1000, 5, SamplingMode::Uniform).unwrap();
        let both = gen_fake_dataset(dir.path(), 2, 1, &AnalyticGaussianPredictor::standard(), &s, &taus, 8, 2).unwrap();
        assert_eq!(both.labels(), vec![0, 0, 0, 1, 1]);
        let imgs = both.load_images(3).unwrap();
        assert!(imgs.iter().all(|i| i.dimensions() == (8, 8)));

        // Regenerating is byte-identical and keeps the other half listed.
        let again = gen_real_dataset(dir.path(), 3, 1, &p, 1).unwrap();
        assert_eq!(again.len(), 5);
        assert_eq!(first, std::fs::read(dir.path().join("real/000000.png")).unwrap());

        std::fs::remove_file(dir.path().join("generated/000001.png")).unwrap();
        assert!(matches!(Dataset::open(dir.path()), Err(Error::Decode { .. })));
        assert!(gen_real_dataset(dir.path(), 0, 1, &p, 1).is_err());
    }
}
