//! A small convolutional denoiser trained with the epsilon-matching loss.
//!
//! The prediction is a Gaussian baseline plus a learned residual:
//!
//! ```text
//! eps(x, t) = gaussian(x, t; mean, var) + conv3(silu(conv2(silu(conv1(c_in * (x - sqrt(a) mean)) + e1(t))) + e2(t)))
//! ```
//!
//! `mean` and `var` are the pixel moments of the training set, so the
//! baseline is the exact posterior estimate for i.i.d. Gaussian pixels with
//! those moments. `c_in = 1 / sqrt(a var + 1 - a)` brings the network input
//! to unit scale at every timestep and `e1`, `e2` are linear readouts of a
//! sinusoidal timestep embedding added per channel. The last layer starts at
//! zero, so an untrained network is exactly the Gaussian baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelfile::{self, ParamGroups};
use crate::nn::{self, Adam, AdamConfig, Conv3x3, Linear, Param, Plane};
use crate::predictor::{AnalyticGaussianPredictor, NoisePredictor};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

pub const BUNDLE_KIND: &str = "dnf-denoiser";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Hidden channel count, at most 32.
    pub width: usize,
    /// Sinusoidal embedding size (even).
    pub embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            width: 16,
            embed_dim: 16,
        }
    }
}

impl DenoiserConfig {
    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.width > 32 {
            return Err(Error::param(format!("denoiser width {} not in 1..=32", self.width)));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(Error::param("embedding size must be even and positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorTrainingConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub denoiser: DenoiserConfig,
}

impl Default for PredictorTrainingConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            learning_rate: 2e-3,
            seed: 0,
            denoiser: DenoiserConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DenoiserMeta {
    config: DenoiserConfig,
    data_mean: f64,
    data_var: f64,
    seed: u64,
    steps_trained: usize,
    final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainablePredictor {
    meta: DenoiserMeta,
    conv1: Conv3x3,
    conv2: Conv3x3,
    conv3: Conv3x3,
    embed1: Linear,
    embed2: Linear,
}

struct Activations {
    input: Vec<f32>,
    embedding: Vec<f32>,
    pre1: Vec<f32>,
    act1: Vec<f32>,
    pre2: Vec<f32>,
    act2: Vec<f32>,
}

impl TrainablePredictor {
    /// Seeded initialization for data with the given pixel moments.
    pub fn init(config: DenoiserConfig, data_mean: f64, data_var: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        if !(data_var >= 0.0 && data_var.is_finite() && data_mean.is_finite()) {
            return Err(Error::param("data moments must be finite with non-negative variance"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.width;
        let conv1 = Conv3x3::new(1, w, 1, &mut rng);
        let conv2 = Conv3x3::new(w, w, 1, &mut rng);
        let mut conv3 = Conv3x3::new(w, 1, 1, &mut rng);
        conv3.weight = Param::zeros(w * 9);
        let embed1 = Linear::new(config.embed_dim, w, &mut rng);
        let embed2 = Linear::new(config.embed_dim, w, &mut rng);
        Ok(Self {
            meta: DenoiserMeta {
                config,
                data_mean,
                data_var,
                seed,
                steps_trained: 0,
                final_loss: None,
            },
            conv1,
            conv2,
            conv3,
            embed1,
            embed2,
        })
    }

    pub fn config(&self) -> DenoiserConfig {
        self.meta.config
    }

    pub fn data_moments(&self) -> (f64, f64) {
        (self.meta.data_mean, self.meta.data_var)
    }

    pub fn steps_trained(&self) -> usize {
        self.meta.steps_trained
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.meta.final_loss
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        v.extend(self.conv1.params());
        v.extend(self.conv2.params());
        v.extend(self.conv3.params());
        v.extend(self.embed1.params());
        v.extend(self.embed2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        v.extend(self.conv1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.conv3.params_mut());
        v.extend(self.embed1.params_mut());
        v.extend(self.embed2.params_mut());
        v
    }

    fn input_gain(&self, a: f64) -> f64 {
        1.0 / (a * self.meta.data_var + 1.0 - a).sqrt()
    }

    fn baseline(&self, x: f64, a: f64) -> f64 {
        let (mu, var) = (self.meta.data_mean, self.meta.data_var);
        let sa = a.sqrt();
        let posterior = (sa * var * x + (1.0 - a) * mu) / (a * var + 1.0 - a);
        (x - sa * posterior) / (1.0 - a).sqrt()
    }

    fn forward_plane(&self, x: &[f64], plane: Plane, t: usize, a: f64) -> (Vec<f32>, Activations) {
        let gain = self.input_gain(a);
        let shift = a.sqrt() * self.meta.data_mean;
        let input: Vec<f32> = x.iter().map(|&v| (gain * (v - shift)) as f32).collect();
        let embedding = nn::timestep_embedding(t, self.meta.config.embed_dim);
        let area = plane.area();

        let mut pre1 = self.conv1.forward(&input, plane);
        nn::add_channel_bias(&mut pre1, &self.embed1.forward(&embedding), area);
        let act1 = nn::silu(&pre1);
        let mut pre2 = self.conv2.forward(&act1, plane);
        nn::add_channel_bias(&mut pre2, &self.embed2.forward(&embedding), area);
        let act2 = nn::silu(&pre2);
        let residual = self.conv3.forward(&act2, plane);
        (
            residual,
            Activations {
                input,
                embedding,
                pre1,
                act1,
                pre2,
                act2,
            },
        )
    }

    fn backward_plane(&mut self, acts: &Activations, plane: Plane, grad_residual: &[f32]) {
        let area = plane.area();
        let mut g2 = self.conv3.backward(&acts.act2, plane, grad_residual);
        nn::silu_backward(&acts.pre2, &mut g2);
        self.embed2
            .backward(&acts.embedding, &nn::channel_sums(&g2, area));
        let mut g1 = self.conv2.backward(&acts.act1, plane, &g2);
        nn::silu_backward(&acts.pre1, &mut g1);
        self.embed1
            .backward(&acts.embedding, &nn::channel_sums(&g1, area));
        self.conv1.backward(&acts.input, plane, &g1);
    }

    /// Fit the denoiser to `dataset` (2-D images, one shared shape) by
    /// minimizing the mean squared error between predicted and true noise on
    /// `x_t = sqrt(a_t) x_0 + sqrt(1 - a_t) eps` with `t` uniform on `[1, T]`.
    pub fn train(
        dataset: &[Tensor],
        schedule: &NoiseSchedule,
        config: &PredictorTrainingConfig,
    ) -> Result<Self> {
        let first = dataset
            .first()
            .ok_or_else(|| Error::param("cannot train a predictor on an empty dataset"))?;
        if first.shape().len() != 2 || first.is_empty() {
            return Err(Error::param(format!(
                "training images must be non-empty 2-D planes, got {:?}",
                first.shape()
            )));
        }
        for img in dataset {
            first.check_same_shape(img)?;
        }
        if config.batch == 0 && config.steps > 0 {
            return Err(Error::param("batch size must be positive"));
        }
        let n_pix = (dataset.len() * first.len()) as f64;
        let mean = dataset.iter().flat_map(|t| t.data()).sum::<f64>() / n_pix;
        let var = dataset
            .iter()
            .flat_map(|t| t.data())
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n_pix;

        let mut model = Self::init(config.denoiser, mean, var, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
        let mut adam = Adam::new(AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        });
        let (h, w) = first.plane_dims();
        let plane = Plane::new(h, w);
        let npx = plane.area();
        let total = schedule.total_steps();
        let window = config.steps.clamp(1, 100);
        let mut recent = std::collections::VecDeque::with_capacity(window);

        for _ in 0..config.steps {
            let mut batch_loss = 0.0f64;
            for _ in 0..config.batch {
                let img = &dataset[rng.random_range(0..dataset.len())];
                let t = rng.random_range(1..=total);
                let a = schedule.alpha_bar(t)?;
                let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
                let noise: Vec<f64> = (0..npx).map(|_| rng.sample(StandardNormal)).collect();
                let xt: Vec<f64> = img
                    .data()
                    .iter()
                    .zip(&noise)
                    .map(|(x0, e)| sa * x0 + sn * e)
                    .collect();
                let (residual, acts) = model.forward_plane(&xt, plane, t, a);
                let mut grad = vec![0.0f32; npx];
                let mut loss = 0.0f64;
                for i in 0..npx {
                    let err = model.baseline(xt[i], a) + residual[i] as f64 - noise[i];
                    loss += err * err;
                    grad[i] = (2.0 * err / npx as f64) as f32;
                }
                batch_loss += loss / npx as f64;
                model.backward_plane(&acts, plane, &grad);
            }
            let batch_loss = batch_loss / config.batch as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!(
                    "denoiser loss became non-finite after {} steps",
                    model.meta.steps_trained
                )));
            }
            adam.update(model.params_mut(), 1.0 / config.batch as f32);
            model.meta.steps_trained += 1;
            if recent.len() == window {
                recent.pop_front();
            }
            recent.push_back(batch_loss);
        }
        if !recent.is_empty() {
            model.meta.final_loss = Some(recent.iter().sum::<f64>() / recent.len() as f64);
        }
        Ok(model)
    }

    /// Fingerprint of configuration, moments and every parameter value.
    pub fn fingerprint(&self) -> String {
        let groups = self.groups();
        crate::hash::bytes_hash(
            format!(
                "{}|{}|{}",
                serde_json::to_string(&self.meta.config).expect("config serializes"),
                crate::hash::json_hash(&(self.meta.data_mean, self.meta.data_var)),
                groups.fingerprint()
            )
            .as_bytes(),
        )
    }

    fn groups(&self) -> ParamGroups {
        let w = self.meta.config.width;
        let d = self.meta.config.embed_dim;
        let mut g = ParamGroups::new();
        g.push_param("conv1.weight", vec![w, 1, 3, 3], &self.conv1.weight);
        g.push_param("conv1.bias", vec![w], &self.conv1.bias);
        g.push_param("conv2.weight", vec![w, w, 3, 3], &self.conv2.weight);
        g.push_param("conv2.bias", vec![w], &self.conv2.bias);
        g.push_param("conv3.weight", vec![1, w, 3, 3], &self.conv3.weight);
        g.push_param("conv3.bias", vec![1], &self.conv3.bias);
        g.push_param("embed1.weight", vec![w, d], &self.embed1.weight);
        g.push_param("embed1.bias", vec![w], &self.embed1.bias);
        g.push_param("embed2.weight", vec![w, d], &self.embed2.weight);
        g.push_param("embed2.bias", vec![w], &self.embed2.bias);
        g
    }

    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        modelfile::save(dir, BUNDLE_KIND, &self.meta, &self.groups())
    }

    pub fn load(dir: &std::path::Path) -> Result<Self> {
        let (meta, mut groups): (DenoiserMeta, _) = modelfile::load(dir, BUNDLE_KIND)?;
        let mut model = Self::init(meta.config, meta.data_mean, meta.data_var, meta.seed)?;
        let w = meta.config.width;
        let d = meta.config.embed_dim;
        model.conv1.weight = Param::new(groups.take("conv1.weight", &[w, 1, 3, 3])?);
        model.conv1.bias = Param::new(groups.take("conv1.bias", &[w])?);
        model.conv2.weight = Param::new(groups.take("conv2.weight", &[w, w, 3, 3])?);
        model.conv2.bias = Param::new(groups.take("conv2.bias", &[w])?);
        model.conv3.weight = Param::new(groups.take("conv3.weight", &[1, w, 3, 3])?);
        model.conv3.bias = Param::new(groups.take("conv3.bias", &[1])?);
        model.embed1.weight = Param::new(groups.take("embed1.weight", &[w, d])?);
        model.embed1.bias = Param::new(groups.take("embed1.bias", &[w])?);
        model.embed2.weight = Param::new(groups.take("embed2.weight", &[w, d])?);
        model.embed2.bias = Param::new(groups.take("embed2.bias", &[w])?);
        model.meta = meta;
        Ok(model)
    }
}

impl NoisePredictor for TrainablePredictor {
    fn id(&self) -> String {
        format!(
            "denoiser(w={},{})",
            self.meta.config.width,
            crate::hash::short(&self.fingerprint())
        )
    }

    fn predict(&self, x: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
        let a = schedule.alpha_bar(t)?;
        let (h, w) = x.plane_dims();
        let plane = Plane::new(h, w);
        let mut out = Vec::with_capacity(x.len());
        if plane.area() > 0 {
            for chunk in x.data().chunks(plane.area()) {
                let (residual, _) = self.forward_plane(chunk, plane, t, a);
                out.extend(
                    chunk
                        .iter()
                        .zip(&residual)
                        .map(|(&v, &r)| self.baseline(v, a) + r as f64),
                );
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}

impl From<&TrainablePredictor> for AnalyticGaussianPredictor {
    /// The Gaussian baseline alone (variance floored to stay valid).
    fn from(p: &TrainablePredictor) -> Self {
        AnalyticGaussianPredictor::new(p.meta.data_mean, p.meta.data_var.max(1e-12))
            .expect("floored variance is positive")
    }
}
