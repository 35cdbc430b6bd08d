//! Noise predictors: anything that maps a noisy image and timestep to an
//! estimate of the noise it contains.

mod analytic;
mod external;
mod trainable;

pub use analytic::{AnalyticGaussianPredictor, GaussianMean};
pub use external::ExternalPredictor;
pub use trainable::{DenoiserConfig, PredictorTrainingConfig, TrainablePredictor};

use crate::error::Result;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Estimated-noise oracle `eps(x, t)`.
///
/// Implementations must return a tensor with the input's shape and must be
/// deterministic: the same `(x, t)` always yields bit-identical output.
pub trait NoisePredictor: Send + Sync {
    /// Short human-readable identity, including a parameter fingerprint where
    /// the predictor carries learned state.
    fn id(&self) -> String;

    fn predict(&self, x: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor>;
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn id(&self) -> String {
        (**self).id()
    }

    fn predict(&self, x: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
        (**self).predict(x, t, schedule)
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for Box<P> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn predict(&self, x: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
        (**self).predict(x, t, schedule)
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for std::sync::Arc<P> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn predict(&self, x: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
        (**self).predict(x, t, schedule)
    }
}

/// Returns the same value at every pixel regardless of input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantPredictor(pub f64);

impl NoisePredictor for ConstantPredictor {
    fn id(&self) -> String {
        format!("constant({})", self.0)
    }

    fn predict(&self, x: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
        schedule.check_timestep(t)?;
        Ok(Tensor::filled(x.shape(), self.0))
    }
}
