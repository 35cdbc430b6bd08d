use crate::error::{Error, Result};
use crate::predictor::NoisePredictor;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum GaussianMean {
    Scalar(f64),
    PerPixel(Tensor),
}

/// Exact posterior noise estimate for data drawn i.i.d. per pixel from
/// `Normal(mu, sigma2)`.
///
/// With `a = alpha_bar(t)` and `x_t = sqrt(a) x_0 + sqrt(1 - a) eps`, the
/// posterior mean of `x_0` is
/// `m(x) = (sqrt(a) sigma2 x + (1 - a) mu) / (a sigma2 + 1 - a)` and the
/// returned estimate is `E[eps | x_t = x] = (x - sqrt(a) m(x)) / sqrt(1 - a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticGaussianPredictor {
    mean: GaussianMean,
    sigma2: f64,
}

impl AnalyticGaussianPredictor {
    pub fn new(mu: f64, sigma2: f64) -> Result<Self> {
        Self::with_mean(GaussianMean::Scalar(mu), sigma2)
    }

    pub fn with_mean(mean: GaussianMean, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::param(format!("sigma2 must be positive, got {sigma2}")));
        }
        Ok(Self { mean, sigma2 })
    }

    pub fn standard() -> Self {
        Self {
            mean: GaussianMean::Scalar(0.0),
            sigma2: 1.0,
        }
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn mean(&self) -> &GaussianMean {
        &self.mean
    }

    /// Posterior noise estimate for a single pixel value at signal fraction
    /// `a`.
    #[inline]
    pub fn predict_value(x: f64, mu: f64, sigma2: f64, a: f64) -> f64 {
        let sa = a.sqrt();
        let posterior = (sa * sigma2 * x + (1.0 - a) * mu) / (a * sigma2 + 1.0 - a);
        (x - sa * posterior) / (1.0 - a).sqrt()
    }
}

impl NoisePredictor for AnalyticGaussianPredictor {
    fn id(&self) -> String {
        match &self.mean {
            GaussianMean::Scalar(mu) => format!("analytic(mu={mu},sigma2={})", self.sigma2),
            GaussianMean::PerPixel(m) => format!(
                "analytic(mu=per-pixel:{},sigma2={})",
                crate::hash::tensor_hash(m),
                self.sigma2
            ),
        }
    }

    fn predict(&self, x: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
        let a = schedule.alpha_bar(t)?;
        match &self.mean {
            GaussianMean::Scalar(mu) => Ok(x.map(|v| Self::predict_value(v, *mu, self.sigma2, a))),
            GaussianMean::PerPixel(mu) => {
                x.zip_map(mu, |v, m| Self::predict_value(v, m, self.sigma2, a))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::NoiseSchedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// A schedule whose alpha_bar at t=1 is exactly `a`.
    fn one_step(a: f64) -> NoiseSchedule {
        NoiseSchedule::linear(1, 1.0 - a, 1.0 - a).unwrap()
    }

    #[test]
    fn reduces_to_scaled_input_for_standard_data() {
        let s = one_step(0.75);
        let p = AnalyticGaussianPredictor::standard();
        let out = p.predict(&Tensor::scalar(2.0), 1, &s).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-12);
        let zero = p.predict(&Tensor::zeros(&[3, 3]), 1, &s).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_at_mean_with_zero_mean_is_exactly_zero() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let p = AnalyticGaussianPredictor::new(0.0, 0.3).unwrap();
        for t in [1, 7, 50] {
            let out = p.predict(&Tensor::zeros(&[2, 5]), t, &s).unwrap();
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(AnalyticGaussianPredictor::new(0.0, 0.0).is_err());
        assert!(AnalyticGaussianPredictor::new(0.0, f64::NAN).is_err());
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let p = AnalyticGaussianPredictor::standard();
        assert!(p.predict(&Tensor::scalar(1.0), 0, &s).is_err());
        assert!(p.predict(&Tensor::scalar(1.0), 11, &s).is_err());
    }

    #[test]
    fn per_pixel_mean_requires_matching_shape() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let mu = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let p = AnalyticGaussianPredictor::with_mean(GaussianMean::PerPixel(mu), 1.0).unwrap();
        assert!(p.predict(&Tensor::zeros(&[3]), 1, &s).is_err());
        let out = p.predict(&Tensor::zeros(&[2]), 1, &s).unwrap();
        assert!(out.data()[0] < 0.0 && out.data()[1] > 0.0);
    }

    #[test]
    fn affine_in_input() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let p = AnalyticGaussianPredictor::new(0.3, 0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut draw = || {
            let v: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
            Tensor::new(vec![4, 4], v).unwrap()
        };
        let (x, y) = (draw(), draw());
        let (alpha, beta) = (1.7, -0.4);
        for t in [1, 40, 100] {
            let zero = p.predict(&Tensor::zeros(&[4, 4]), t, &s).unwrap();
            let px = p.predict(&x, t, &s).unwrap();
            let py = p.predict(&y, t, &s).unwrap();
            let combo = x.zip_map(&y, |a, b| alpha * a + beta * b).unwrap();
            let lhs = p.predict(&combo, t, &s).unwrap();
            // c(t) = (1 - alpha - beta) * predict(0)
            for i in 0..16 {
                let rhs = alpha * px.data()[i]
                    + beta * py.data()[i]
                    + (1.0 - alpha - beta) * zero.data()[i];
                assert!((lhs.data()[i] - rhs).abs() < 1e-10);
            }
        }
    }
}
