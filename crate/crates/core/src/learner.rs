//! Online extraction and learning of the sensitivity disturbance.
//!
//! Each sampling interval, the gap between the estimated state transition
//! and the nominal model is attributed to the sensitivity input channel:
//!
//! `w_{k-1} = (x_k[3] - (A_d x_{k-1})[3] - B_d[3] u_{k-1}) / Bk_d[3]`
//!
//! Row 3 is used because the sensitivity channel acts on it with the largest
//! discrete gain, giving the best-conditioned single-row inversion. Announced
//! meals are injected into `x_{k-1}` first, exactly as the estimator does, so
//! meal dynamics cancel instead of polluting the learned disturbance.
//!
//! Raw residuals are noisy (the estimator differentiates the measurement
//! noise); a zero-phase low-pass cleans them without lag, and a periodic
//! Gaussian process learns the circadian structure and extrapolates it ahead
//! of time for the controller.

use crate::error::{Error, Result};
use crate::gp::{fit_hyperparams, GpHyperParams, GpModel};
use crate::model::{state, ModelSet, StateVector};
use crate::numerics::dot;

/// Shortest series the zero-phase filter will touch; anything shorter is
/// passed through so reflection padding never dominates the data.
pub const FILTER_MIN_LEN: usize = 60;

/// Reconstructs the sensitivity input active over `[t_{k-1}, t_k)` from two
/// consecutive state estimates, the applied input, and the announced meal
/// mass (gain times grams, 0 when none) that landed at the interval start.
pub fn compute_residual(
    model: &ModelSet,
    x_prev: &StateVector,
    x_curr: &StateVector,
    u_dev: f64,
    meal_mass: f64,
) -> f64 {
    const ROW: usize = state::INTRACELLULAR_GLUCOSE;
    let mut x_in = *x_prev;
    x_in[state::INTESTINE_GLUCOSE_FLOW] += meal_mass;
    let propagated = dot(model.a_hat_d.row(ROW), &x_in) + model.b_d.get(ROW, 0) * u_dev;
    (x_curr[ROW] - propagated) / model.b_kis_d.get(ROW, 0)
}

/// Second-order Butterworth low-pass, cutoff at 0.1 of Nyquist.
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    /// Steady-state filter state for a unit-amplitude constant input.
    zi: [f64; 2],
}

impl Biquad {
    fn lowpass() -> Biquad {
        let k = (std::f64::consts::PI * 0.05).tan();
        let norm = 1.0 / (1.0 + std::f64::consts::SQRT_2 * k + k * k);
        let b0 = k * k * norm;
        let b = [b0, 2.0 * b0, b0];
        let a = [
            2.0 * (k * k - 1.0) * norm,
            (1.0 - std::f64::consts::SQRT_2 * k + k * k) * norm,
        ];
        // Steady state of the transposed direct form II for constant input:
        // starting there removes the startup transient entirely.
        let dc = (b[0] + b[1] + b[2]) / (1.0 + a[0] + a[1]);
        let zi = [dc - b[0], b[2] - a[1] * dc];
        Biquad { b, a, zi }
    }

    /// Runs the filter over `x` with the state scaled to the first sample.
    fn run(&self, x: &[f64]) -> Vec<f64> {
        let mut z1 = self.zi[0] * x[0];
        let mut z2 = self.zi[1] * x[0];
        x.iter()
            .map(|&xi| {
                let y = self.b[0] * xi + z1;
                z1 = self.b[1] * xi - self.a[0] * y + z2;
                z2 = self.b[2] * xi - self.a[1] * y;
                y
            })
            .collect()
    }
}

/// Zero-phase filtering: forward pass, backward pass, odd-reflection padding
/// at both ends. Returns the filtered series and whether filtering was
/// applied (series shorter than [`FILTER_MIN_LEN`] pass through unchanged).
pub fn zero_phase_filter(series: &[f64]) -> (Vec<f64>, bool) {
    let n = series.len();
    if n < FILTER_MIN_LEN {
        return (series.to_vec(), false);
    }
    let pad = FILTER_MIN_LEN.min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in 0..pad {
        ext.push(2.0 * series[0] - series[pad - i]);
    }
    ext.extend_from_slice(series);
    for i in 0..pad {
        ext.push(2.0 * series[n - 1] - series[n - 2 - i]);
    }

    let filter = Biquad::lowpass();
    let mut y = filter.run(&ext);
    y.reverse();
    let mut y = filter.run(&y);
    y.reverse();
    (y[pad..pad + n].to_vec(), true)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    /// Training window size [samples]; at 5-minute sampling, 720 covers 2.5
    /// days.
    pub buffer_capacity: usize,
    /// Fewest samples before a model is built.
    pub min_points: usize,
    /// Hyperparameters are refitted every this many samples.
    pub refit_cadence: usize,
    /// No model is built before this time [min].
    pub activation_time: f64,
    /// Skip all model building (plain-controller runs still collect
    /// residuals for analysis without paying for regression).
    pub build_models: bool,
}

impl Default for LearnerConfig {
    fn default() -> LearnerConfig {
        LearnerConfig {
            buffer_capacity: 720,
            min_points: 10,
            refit_cadence: 72,
            activation_time: 3600.0,
            build_models: true,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_points < 2 {
            return Err(Error::Parameter("learner needs at least two points".into()));
        }
        if self.buffer_capacity < self.min_points {
            return Err(Error::Parameter(format!(
                "buffer capacity {} below min points {}",
                self.buffer_capacity, self.min_points
            )));
        }
        if self.refit_cadence == 0 {
            return Err(Error::Parameter("refit cadence must be at least 1".into()));
        }
        if !(self.activation_time >= 0.0) {
            return Err(Error::Parameter("activation time must be non-negative".into()));
        }
        Ok(())
    }
}

/// Rolling window of raw residuals with their timestamps.
#[derive(Debug, Clone, Default)]
pub struct TrainingBuffer {
    capacity: usize,
    times: Vec<f64>,
    raw: Vec<f64>,
}

impl TrainingBuffer {
    pub fn new(capacity: usize) -> TrainingBuffer {
        TrainingBuffer {
            capacity,
            times: Vec::with_capacity(capacity),
            raw: Vec::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, t: f64, value: f64) {
        if self.times.len() == self.capacity {
            self.times.remove(0);
            self.raw.remove(0);
        }
        self.times.push(t);
        self.raw.push(value);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn raw_values(&self) -> &[f64] {
        &self.raw
    }
}

/// Streaming learner: buffers residuals, filters them, maintains the GP
/// posterior every sample, and refits hyperparameters on a cadence.
#[derive(Debug)]
pub struct DisturbanceLearner {
    config: LearnerConfig,
    buffer: TrainingBuffer,
    hyper: GpHyperParams,
    model: Option<GpModel>,
    filtered: Vec<f64>,
    samples_since_refit: usize,
    refit_count: usize,
    /// Latched when a model trained on an unfiltered (too short) series.
    short_series_warning: bool,
}

impl DisturbanceLearner {
    pub fn new(config: LearnerConfig, hyper: GpHyperParams) -> Result<DisturbanceLearner> {
        config.validate()?;
        hyper.validate()?;
        Ok(DisturbanceLearner {
            buffer: TrainingBuffer::new(config.buffer_capacity),
            config,
            hyper,
            model: None,
            filtered: Vec::new(),
            samples_since_refit: 0,
            refit_count: 0,
            short_series_warning: false,
        })
    }

    /// Adds one raw residual stamped at the start of its interval and brings
    /// the model up to date.
    pub fn push(&mut self, t: f64, raw_residual: f64) -> Result<()> {
        if !(t.is_finite() && raw_residual.is_finite()) {
            return Err(Error::Gp("residual samples must be finite".into()));
        }
        self.buffer.push(t, raw_residual);
        let (filtered, applied) = zero_phase_filter(self.buffer.raw_values());
        self.filtered = filtered;

        if !self.config.build_models
            || t < self.config.activation_time
            || self.buffer.len() < self.config.min_points
        {
            return Ok(());
        }
        if !applied {
            self.short_series_warning = true;
        }

        match &mut self.model {
            None => self.refit()?,
            Some(model) => {
                self.samples_since_refit += 1;
                if self.samples_since_refit >= self.config.refit_cadence {
                    // The refit rebuilds from the buffer, so the incremental
                    // window update would be discarded work.
                    self.refit()?;
                } else {
                    if model.len() < self.buffer.len() {
                        model.extend(t, raw_residual)?;
                    } else {
                        model.slide(t, raw_residual)?;
                    }
                    model.set_values(&self.filtered)?;
                }
            }
        }
        Ok(())
    }

    /// Full hyperparameter fit plus model rebuild on the current window.
    fn refit(&mut self) -> Result<()> {
        let times = self.buffer.times();
        let fit = fit_hyperparams(times, &self.filtered, &self.hyper)?;
        self.hyper = fit.params;
        self.model = Some(GpModel::fit(times, &self.filtered, self.hyper)?);
        self.samples_since_refit = 0;
        self.refit_count += 1;
        Ok(())
    }

    /// True once a model exists (activation time passed with enough data).
    pub fn is_active(&self) -> bool {
        self.model.is_some()
    }

    /// Predicted disturbance means at the query times; zeros until active.
    pub fn preview(&self, query: &[f64]) -> Vec<f64> {
        match &self.model {
            Some(model) => model.predict_mean(query),
            None => vec![0.0; query.len()],
        }
    }

    /// Newest filtered residual, if any samples have arrived.
    pub fn last_filtered(&self) -> Option<f64> {
        self.filtered.last().copied()
    }

    pub fn hyperparams(&self) -> &GpHyperParams {
        &self.hyper
    }

    pub fn buffer(&self) -> &TrainingBuffer {
        &self.buffer
    }

    pub fn refit_count(&self) -> usize {
        self.refit_count
    }

    pub fn short_series_warning(&self) -> bool {
        self.short_series_warning
    }
}
