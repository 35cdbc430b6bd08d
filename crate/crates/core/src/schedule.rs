//! Noise schedules and timestep subsequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TOTAL_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// The parameters a schedule is rebuilt from. This is what gets persisted;
/// the tables themselves never are.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            total_steps: DEFAULT_TOTAL_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.total_steps, self.beta_start, self.beta_end)
    }
}

/// Linear beta schedule with its cumulative signal fractions.
///
/// Timesteps are 1-based: `alpha_bar(t)` for `t` in `1..=T` is
/// `prod_{s<=t} (1 - beta_s)`. The reverse-process variance is zero at every
/// step, so no per-step sigma is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::param("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::param(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = if total_steps == 1 {
            vec![beta_start]
        } else {
            let span = (beta_end - beta_start) / (total_steps - 1) as f64;
            (0..total_steps)
                .map(|i| beta_start + span * i as f64)
                .collect()
        };
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self {
            params: ScheduleParams {
                total_steps,
                beta_start,
                beta_end,
            },
            betas,
            alpha_bars,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Deterministic sampling: the stochastic term is always zero.
    pub fn sigma(&self, _t: usize) -> f64 {
        0.0
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.total_steps() {
            return Err(Error::param(format!(
                "timestep {t} outside [1, {}]",
                self.total_steps()
            )));
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_timestep(t)?;
        Ok(self.alpha_bars[t - 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    #[default]
    Uniform,
    Logarithmic,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "logarithmic" | "log" => Ok(Self::Logarithmic),
            other => Err(Error::param(format!("unknown sampling mode `{other}`"))),
        }
    }
}

/// Strictly increasing timesteps in `[1, T]` driving accelerated inversion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepSequence {
    taus: Vec<usize>,
    mode: SamplingMode,
}

impl TimestepSequence {
    /// Sample `S + 1` points (fewer after deduplication when `S` is close to
    /// `T`) including both endpoints.
    pub fn sample(total_steps: usize, steps: usize, mode: SamplingMode) -> Result<Self> {
        if total_steps == 0 || steps == 0 {
            return Err(Error::param("T and S must both be positive"));
        }
        if steps > total_steps {
            return Err(Error::param(format!(
                "cannot sample {steps} steps from a {total_steps}-step schedule"
            )));
        }
        let t = total_steps as f64;
        let s = steps as f64;
        let mut taus: Vec<usize> = (0..=steps)
            .map(|i| {
                let i = i as f64;
                let v = match mode {
                    SamplingMode::Uniform => 1.0 + i * (t - 1.0) / s,
                    SamplingMode::Logarithmic => t.powf(i / s),
                };
                (v.round() as usize).clamp(1, total_steps)
            })
            .collect();
        taus.dedup();
        Ok(Self { taus, mode })
    }

    /// Explicit timesteps, validated against a schedule length.
    pub fn from_taus(taus: Vec<usize>, total_steps: usize) -> Result<Self> {
        if taus.is_empty() {
            return Err(Error::param("empty timestep sequence"));
        }
        if taus[0] == 0 || *taus.last().unwrap() > total_steps {
            return Err(Error::param(format!("timesteps must lie in [1, {total_steps}]")));
        }
        if taus.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param("timesteps must be strictly increasing"));
        }
        Ok(Self {
            taus,
            mode: SamplingMode::Uniform,
        })
    }

    pub fn taus(&self) -> &[usize] {
        &self.taus
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    /// Number of inversion steps, one less than the number of points.
    pub fn steps(&self) -> usize {
        self.taus.len().saturating_sub(1)
    }
}
