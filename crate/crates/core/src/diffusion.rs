//! Deterministic DDIM sampling and its inverse.
//!
//! Inversion walks from a clean image toward noise along a timestep
//! subsequence, recording the predictor's noise estimate at every visited
//! point. In the scaled variable `y = x / sqrt(a)` each step is
//!
//! ```text
//! y_b = y_a + (sqrt((1 - a_b) / a_b) - sqrt((1 - a_a) / a_a)) * eps(x_a, tau_a)
//! ```
//!
//! and generation applies the same relation backwards with the estimate
//! taken at the noisier point.

use crate::error::{Error, Result};
use crate::predictor::NoisePredictor;
use crate::schedule::{NoiseSchedule, TimestepSequence};
use crate::tensor::Tensor;

/// Coefficients linking two subsequence points `tau_a < tau_b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoeffs {
    pub alpha_bar_a: f64,
    pub alpha_bar_b: f64,
    /// `sqrt(a_b / a_a)`
    pub ratio: f64,
    /// `sqrt((1 - a_b) / a_b) - sqrt((1 - a_a) / a_a)`
    pub eta: f64,
}

impl StepCoeffs {
    pub fn new(schedule: &NoiseSchedule, tau_a: usize, tau_b: usize) -> Result<Self> {
        if tau_a >= tau_b {
            return Err(Error::param(format!(
                "step must move to a later timestep, got {tau_a} -> {tau_b}"
            )));
        }
        let a = schedule.alpha_bar(tau_a)?;
        let b = schedule.alpha_bar(tau_b)?;
        Ok(Self::from_alpha_bars(a, b))
    }

    pub fn from_alpha_bars(alpha_bar_a: f64, alpha_bar_b: f64) -> Self {
        let noise_ratio = |a: f64| ((1.0 - a) / a).sqrt();
        Self {
            alpha_bar_a,
            alpha_bar_b,
            ratio: (alpha_bar_b / alpha_bar_a).sqrt(),
            eta: noise_ratio(alpha_bar_b) - noise_ratio(alpha_bar_a),
        }
    }

    /// `x_b = sqrt(a_b) * (x_a / sqrt(a_a) + eta * eps)`, expanded so that a
    /// zero estimate leaves a pure rescaling by `ratio`.
    #[inline]
    pub fn invert_value(&self, x_a: f64, eps: f64) -> f64 {
        self.ratio * x_a + self.alpha_bar_b.sqrt() * self.eta * eps
    }

    /// `x_a = sqrt(a_a) * (x_b - sqrt(1 - a_b) eps) / sqrt(a_b) + sqrt(1 - a_a) eps`
    #[inline]
    pub fn generate_value(&self, x_b: f64, eps: f64) -> f64 {
        let (a, b) = (self.alpha_bar_a, self.alpha_bar_b);
        let scale = (a / b).sqrt();
        scale * x_b + ((1.0 - a).sqrt() - scale * (1.0 - b).sqrt()) * eps
    }
}

/// Latents `x_{tau_0} .. x_{tau_k}` and the noise estimates taken at every
/// latent except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionTrace {
    pub latents: Vec<Tensor>,
    pub noises: Vec<Tensor>,
}

impl InversionTrace {
    pub fn final_latent(&self) -> &Tensor {
        self.latents.last().expect("trace holds at least the input")
    }
}

fn check_shape(x: &Tensor, eps: &Tensor) -> Result<()> {
    if x.shape() != eps.shape() {
        return Err(Error::Shape {
            expected: x.shape().to_vec(),
            actual: eps.shape().to_vec(),
        });
    }
    Ok(())
}

/// One inversion step from `tau_a` to `tau_b`; returns the new latent and
/// the noise estimate taken at `(x_a, tau_a)`.
pub fn invert_step(
    x_a: &Tensor,
    tau_a: usize,
    tau_b: usize,
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<(Tensor, Tensor)> {
    let c = StepCoeffs::new(schedule, tau_a, tau_b)?;
    let eps = predictor.predict(x_a, tau_a, schedule)?;
    check_shape(x_a, &eps)?;
    let x_b = x_a.zip_map(&eps, |x, e| c.invert_value(x, e))?;
    Ok((x_b, eps))
}

/// One deterministic sampling step from `tau_b` down to `tau_a`.
pub fn generate_step(
    x_b: &Tensor,
    tau_b: usize,
    tau_a: usize,
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let c = StepCoeffs::new(schedule, tau_a, tau_b)?;
    let eps = predictor.predict(x_b, tau_b, schedule)?;
    check_shape(x_b, &eps)?;
    x_b.zip_map(&eps, |x, e| c.generate_value(x, e))
}

fn require_steps(taus: &TimestepSequence) -> Result<()> {
    if taus.taus().len() < 2 {
        return Err(Error::param("need at least two timesteps to take a step"));
    }
    Ok(())
}

/// Full inversion starting from `x0` treated as the latent at `tau_0`.
pub fn invert(
    x0: &Tensor,
    taus: &TimestepSequence,
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<InversionTrace> {
    invert_partial(x0, taus, usize::MAX, predictor, schedule)
}

/// Inversion stopped after at most `max_steps` steps.
pub fn invert_partial(
    x0: &Tensor,
    taus: &TimestepSequence,
    max_steps: usize,
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<InversionTrace> {
    require_steps(taus)?;
    let mut latents = vec![x0.clone()];
    let mut noises = Vec::new();
    for pair in taus.taus().windows(2).take(max_steps) {
        let x_a = latents.last().expect("non-empty");
        let (x_b, eps) = invert_step(x_a, pair[0], pair[1], predictor, schedule)?;
        latents.push(x_b);
        noises.push(eps);
    }
    Ok(InversionTrace { latents, noises })
}

/// Deterministic sampling from the latent at the last timestep down to
/// `tau_0`.
pub fn generate(
    x_last: &Tensor,
    taus: &TimestepSequence,
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    require_steps(taus)?;
    let mut x = x_last.clone();
    for pair in taus.taus().windows(2).rev() {
        x = generate_step(&x, pair[1], pair[0], predictor, schedule)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{AnalyticGaussianPredictor, ConstantPredictor};
    use crate::schedule::SamplingMode;

    /// Two-step schedule with alpha_bar = [0.64, 0.36].
    fn two_point() -> NoiseSchedule {
        NoiseSchedule::linear(2, 0.36, 0.4375).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn hand_evaluated_step_pair() {
        let s = two_point();
        assert!(rel(s.alpha_bar(2).unwrap(), 0.36) < 1e-15);
        let one = ConstantPredictor(1.0);
        let (xb, eps) = invert_step(&Tensor::scalar(0.8), 1, 2, &one, &s).unwrap();
        assert_eq!(eps.data(), &[1.0]);
        assert!(rel(xb.data()[0], 0.95) < 1e-12, "{}", xb.data()[0]);
        let xa = generate_step(&Tensor::scalar(0.95), 2, 1, &one, &s).unwrap();
        assert!(rel(xa.data()[0], 0.8) < 1e-12, "{}", xa.data()[0]);
    }

    #[test]
    fn coefficients_are_in_range() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        for (a, b) in [(1, 2), (1, 1000), (500, 501), (999, 1000)] {
            let c = StepCoeffs::new(&s, a, b).unwrap();
            assert!(c.ratio > 0.0 && c.ratio < 1.0);
            assert!(c.eta > 0.0);
        }
        assert!(StepCoeffs::new(&s, 5, 5).is_err());
        assert!(StepCoeffs::new(&s, 6, 5).is_err());
    }

    #[test]
    fn zero_predictor_is_pure_rescaling() {
        let s = two_point();
        let x = Tensor::new(vec![2], vec![0.3, -1.1]).unwrap();
        let (xb, _) = invert_step(&x, 1, 2, &ConstantPredictor(0.0), &s).unwrap();
        let c = StepCoeffs::new(&s, 1, 2).unwrap();
        assert_eq!(xb, x.map(|v| c.ratio * v));
        let back = generate_step(&xb, 2, 1, &ConstantPredictor(0.0), &s).unwrap();
        let inv = (c.alpha_bar_a / c.alpha_bar_b).sqrt();
        assert_eq!(back, xb.map(|v| inv * v));
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!(rel(*a, *b) < 1e-12);
        }
    }

    #[test]
    fn zero_signal_cases() {
        let s = two_point();
        let (xb, _) = invert_step(
            &Tensor::zeros(&[3]),
            1,
            2,
            &AnalyticGaussianPredictor::standard(),
            &s,
        )
        .unwrap();
        assert_eq!(xb, Tensor::zeros(&[3]));
        // x_b = sqrt(1 - a_b) * c maps to sqrt(1 - a_a) * c.
        let c = 1.7;
        let xb = Tensor::scalar(0.8 * c);
        let xa = generate_step(&xb, 2, 1, &ConstantPredictor(c), &s).unwrap();
        assert!(rel(xa.data()[0], 0.6 * c) < 1e-12);
    }

    #[test]
    fn single_step_trace() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let taus = TimestepSequence::sample(10, 1, SamplingMode::Uniform).unwrap();
        let x = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let p = AnalyticGaussianPredictor::standard();
        let trace = invert(&x, &taus, &p, &s).unwrap();
        assert_eq!(trace.noises.len(), 1);
        assert_eq!(trace.latents.len(), 2);
        assert_eq!(trace.noises[0], p.predict(&x, 1, &s).unwrap());
    }

    #[test]
    fn constant_predictor_matches_unrolled_fold() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let taus = TimestepSequence::sample(1000, 7, SamplingMode::Logarithmic).unwrap();
        let c = 0.37;
        let x0 = 0.52;
        let trace = invert(&Tensor::scalar(x0), &taus, &ConstantPredictor(c), &s).unwrap();
        // In y = x / sqrt(a): y_S = y_0 + c * (r(tau_S) - r(tau_0)), r(a) = sqrt((1-a)/a).
        let a0 = s.alpha_bar(taus.taus()[0]).unwrap();
        let a_last = s.alpha_bar(*taus.taus().last().unwrap()).unwrap();
        let r = |a: f64| ((1.0 - a) / a).sqrt();
        let closed = a_last.sqrt() * (x0 / a0.sqrt() + c * (r(a_last) - r(a0)));
        assert!(rel(trace.final_latent().data()[0], closed) < 1e-12);
        // And generation undoes it.
        let back = generate(trace.final_latent(), &taus, &ConstantPredictor(c), &s).unwrap();
        assert!(rel(back.data()[0], x0) < 1e-12);
    }

    #[test]
    fn partial_inversion_stops_early() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let taus = TimestepSequence::sample(100, 10, SamplingMode::Uniform).unwrap();
        let trace = invert_partial(
            &Tensor::scalar(1.0),
            &taus,
            1,
            &AnalyticGaussianPredictor::standard(),
            &s,
        )
        .unwrap();
        assert_eq!(trace.noises.len(), 1);
        let one = TimestepSequence::from_taus(vec![3], 100).unwrap();
        assert!(invert(&Tensor::scalar(1.0), &one, &ConstantPredictor(0.0), &s).is_err());
    }

    fn gaussian_images(n: usize, side: usize, mu: f64, sigma2: f64, seed: u64) -> Vec<Tensor> {
        use rand::{Rng, SeedableRng};
        use rand_distr::StandardNormal;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let data = (0..side * side)
                    .map(|_| mu + sigma2.sqrt() * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Tensor::new(vec![side, side], data).unwrap()
            })
            .collect()
    }

    fn excess_kurtosis(t: &Tensor) -> f64 {
        let m = t.mean();
        let n = t.len() as f64;
        let m2 = t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        let m4 = t.data().iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
        m4 / (m2 * m2) - 3.0
    }

    #[test]
    fn inversion_is_bit_deterministic() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let taus = TimestepSequence::sample(1000, 20, SamplingMode::Uniform).unwrap();
        let x = &gaussian_images(1, 8, 0.0, 0.3, 4)[0];
        let p = AnalyticGaussianPredictor::new(0.0, 0.3).unwrap();
        assert_eq!(invert(x, &taus, &p, &s).unwrap(), invert(x, &taus, &p, &s).unwrap());
    }

    #[test]
    fn analytic_latents_have_unit_power() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let taus = TimestepSequence::sample(1000, 100, SamplingMode::Uniform).unwrap();
        let p = AnalyticGaussianPredictor::standard();
        let images = gaussian_images(200, 16, 0.0, 1.0, 11);
        let power = images
            .iter()
            .map(|x| invert(x, &taus, &p, &s).unwrap().final_latent().mean_square())
            .sum::<f64>()
            / images.len() as f64;
        assert!((power - 1.0).abs() < 0.05, "{power}");
    }

    /// For zero-mean Gaussian data every step scales `y = x / sqrt(a)` by a
    /// scalar: `1 + dr * r_a / (s2 + r_a^2)` forward and
    /// `1 - dr * r_b / (s2 + r_b^2)` backward, with `r = sqrt((1 - a) / a)`.
    fn round_trip_gain(s: &NoiseSchedule, taus: &TimestepSequence, sigma2: f64) -> f64 {
        let r = |t: usize| {
            let a = s.alpha_bar(t).unwrap();
            ((1.0 - a) / a).sqrt()
        };
        taus.taus()
            .windows(2)
            .map(|w| {
                let (ra, rb) = (r(w[0]), r(w[1]));
                (1.0 + (rb - ra) * ra / (sigma2 + ra * ra)) * (1.0 - (rb - ra) * rb / (sigma2 + rb * rb))
            })
            .product()
    }

    #[test]
    fn analytic_round_trip_error_matches_scalar_gain() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let sigma2 = 0.5;
        let p = AnalyticGaussianPredictor::new(0.0, sigma2).unwrap();
        let images = gaussian_images(20, 16, 0.0, sigma2, 12);
        let rmse = |steps: usize| {
            let taus = TimestepSequence::sample(1000, steps, SamplingMode::Uniform).unwrap();
            let g = round_trip_gain(&s, &taus, sigma2);
            let mut total = 0.0;
            for x in &images {
                let trace = invert(x, &taus, &p, &s).unwrap();
                let back = generate(trace.final_latent(), &taus, &p, &s).unwrap();
                let err = back.rmse(x).unwrap();
                let expected = (g - 1.0).abs() * x.mean_square().sqrt();
                assert!(rel(err, expected) < 1e-9, "{err} vs {expected}");
                total += err;
            }
            total / images.len() as f64
        };
        let (coarse, fine) = (rmse(25), rmse(100));
        assert!(fine < coarse, "{fine} vs {coarse}");
    }

    #[test]
    fn noise_kurtosis_does_not_move_away_from_gaussian() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let taus = TimestepSequence::sample(1000, 10, SamplingMode::Uniform).unwrap();
        let (mu, sigma2) = (0.05, 0.2);
        let p = AnalyticGaussianPredictor::new(mu, sigma2).unwrap();
        let images = gaussian_images(100, 16, mu, sigma2, 13);
        let mut gap = vec![0.0; taus.steps()];
        for x in &images {
            for (g, eps) in gap.iter_mut().zip(&invert(x, &taus, &p, &s).unwrap().noises) {
                *g += excess_kurtosis(eps).abs() / images.len() as f64;
            }
        }
        // Every step is an affine map of x0, so the trend is flat up to rounding.
        assert!(gap.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{gap:?}");
        assert!(gap[0] < 0.5, "{gap:?}");
    }

    proptest::proptest! {
        #[test]
        fn constant_predictor_steps_invert_exactly(
            a in 1usize..1000,
            gap in 1usize..1000,
            x in 0.1f64..2.0,
            neg in proptest::bool::ANY,
            c in -3.0f64..3.0,
        ) {
            let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
            let b = (a + gap).min(1000);
            proptest::prop_assume!(b > a);
            let x = if neg { -x } else { x };
            let p = ConstantPredictor(c);
            let (xb, _) = invert_step(&Tensor::scalar(x), a, b, &p, &s).unwrap();
            let back = generate_step(&xb, b, a, &p, &s).unwrap().data()[0];
            proptest::prop_assert!(rel(back, x) < 1e-12, "{} vs {}", back, x);
        }

        #[test]
        fn zero_predictor_round_trip_is_identity(
            steps in 1usize..200,
            log in proptest::bool::ANY,
            x in -2.0f64..2.0,
        ) {
            let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
            let mode = if log { SamplingMode::Logarithmic } else { SamplingMode::Uniform };
            let taus = TimestepSequence::sample(1000, steps, mode).unwrap();
            let zero = ConstantPredictor(0.0);
            let trace = invert(&Tensor::scalar(x), &taus, &zero, &s).unwrap();
            let back = generate(trace.final_latent(), &taus, &zero, &s).unwrap().data()[0];
            proptest::prop_assert!((back - x).abs() <= 1e-12 * x.abs().max(1e-300), "{} vs {}", back, x);
        }
    }

    struct BadShape;

    impl NoisePredictor for BadShape {
        fn id(&self) -> String {
            "bad".into()
        }

        fn predict(&self, _: &Tensor, _: usize, _: &NoiseSchedule) -> Result<Tensor> {
            Ok(Tensor::zeros(&[1]))
        }
    }

    #[test]
    fn shape_violations_surface() {
        let s = two_point();
        assert!(invert_step(&Tensor::zeros(&[2]), 1, 2, &BadShape, &s).is_err());
        assert!(generate_step(&Tensor::zeros(&[2]), 2, 1, &BadShape, &s).is_err());
    }
}
