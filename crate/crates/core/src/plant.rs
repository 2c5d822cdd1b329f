//! Continuous-time simulation truth.
//!
//! The plant integrates the nominal model plus the sensitivity channel with
//! classical RK4. The model is written in deviation coordinates, where the
//! basal operating point is the origin; a time-varying sensitivity factor
//! excites the system through
//!
//! `u_truth(t) = (k_is(t) - 1) * (x[4] + i_mi_basal)`
//!
//! because sensitivity physically multiplies the *absolute* interstitial
//! insulin, not its deviation. `i_mi_basal` is the basal absolute level,
//! reconstructed from the insulin-chain steady state at the basal infusion
//! rate (see [`basal_interstitial_insulin`]).

use crate::error::{Error, Result};
use crate::model::{state, IsProfile, ModelSet, StateVector, BG_BASELINE, STATE_DIM};
use crate::numerics::{dot, solve_linear, Matrix};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Longest RK4 sub-step [min]; 0.5 min keeps the stiffest mode (about
/// 5.1/min) inside the RK4 stability region.
pub const MAX_SUBSTEP: f64 = 0.5;

/// Basal absolute interstitial insulin [mU/L] for the default basal rate,
/// `basal_interstitial_insulin(U_BASAL)` frozen to a constant.
pub const I_MI_BASAL_DEFAULT: f64 = 47.263805915195931;

/// Meal gain [mg/min of intestine flow per gram of carbohydrate], calibrated
/// so a 50 g meal under basal-only insulin peaks at 180 mg/dL from baseline.
/// `calibrate_meal_gain(70.0, 50.0)` reproduces it.
pub const MEAL_GAIN_DEFAULT: f64 = 26.756922831285237;

/// Simulation truth with internal clock and step counter.
#[derive(Debug, Clone)]
pub struct Plant {
    a_hat: Matrix,
    b: Matrix,
    b_kis: Matrix,
    profile: IsProfile,
    i_mi_basal: f64,
    meal_gain: f64,
    ts: f64,
    x: StateVector,
    t: f64,
    step_index: usize,
}

impl Plant {
    pub fn new(model: &ModelSet, profile: IsProfile, i_mi_basal: f64, meal_gain: f64) -> Plant {
        Plant {
            a_hat: model.a_hat.clone(),
            b: model.b.clone(),
            b_kis: model.b_kis.clone(),
            profile,
            i_mi_basal,
            meal_gain,
            ts: model.ts,
            x: [0.0; STATE_DIM],
            t: 0.0,
            step_index: 0,
        }
    }

    pub fn state(&self) -> &StateVector {
        &self.x
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    /// Absolute blood glucose [mg/dL].
    pub fn bg_true(&self) -> f64 {
        BG_BASELINE + self.x[state::PLASMA_GLUCOSE]
    }

    /// Sensitivity excitation at time `t` for state `x`.
    pub fn u_truth(&self, x: &StateVector, t: f64) -> f64 {
        (self.profile.value_at(t) - 1.0) * (x[state::INTERSTITIAL_INSULIN] + self.i_mi_basal)
    }

    /// Glucose measurement: baseline plus plasma deviation plus white noise.
    pub fn measure<R: Rng>(&self, noise_sd: f64, rng: &mut R) -> f64 {
        let mut bg = self.bg_true();
        if noise_sd > 0.0 {
            let normal = Normal::new(0.0, noise_sd).expect("finite noise sd");
            bg += normal.sample(rng);
        }
        bg
    }

    fn derivative(&self, x: &StateVector, t: f64, u_dev: f64) -> StateVector {
        let w = self.u_truth(x, t);
        let mut d = [0.0; STATE_DIM];
        for i in 0..STATE_DIM {
            d[i] = dot(self.a_hat.row(i), x) + self.b.get(i, 0) * u_dev + self.b_kis.get(i, 0) * w;
        }
        d
    }

    fn integrate(&mut self, until: f64, u_dev: f64) {
        let span = until - self.t;
        if span <= 0.0 {
            return;
        }
        let n_sub = (span / MAX_SUBSTEP).ceil().max(1.0) as usize;
        let h = span / n_sub as f64;
        for _ in 0..n_sub {
            let t = self.t;
            let x = self.x;
            let k1 = self.derivative(&x, t, u_dev);
            let mut x2 = x;
            for i in 0..STATE_DIM {
                x2[i] += 0.5 * h * k1[i];
            }
            let k2 = self.derivative(&x2, t + 0.5 * h, u_dev);
            let mut x3 = x;
            for i in 0..STATE_DIM {
                x3[i] += 0.5 * h * k2[i];
            }
            let k3 = self.derivative(&x3, t + 0.5 * h, u_dev);
            let mut x4 = x;
            for i in 0..STATE_DIM {
                x4[i] += h * k3[i];
            }
            let k4 = self.derivative(&x4, t + h, u_dev);
            for i in 0..STATE_DIM {
                self.x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            self.t += h;
        }
        self.t = until; // kill accumulated float drift on the clock
    }

    /// Advances one sampling interval with `u_dev` held constant.
    ///
    /// `meals` lists (time [min], grams) events; any event inside
    /// `[t, t + ts)` adds `meal_gain * grams` to the intestine flow state at
    /// its scheduled instant (integration is split there).
    pub fn step(&mut self, u_dev: f64, meals: &[(f64, f64)]) -> Result<()> {
        let t_end = self.t + self.ts;
        let mut due: Vec<(f64, f64)> = meals
            .iter()
            .copied()
            .filter(|&(tm, _)| tm >= self.t && tm < t_end)
            .collect();
        due.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (tm, grams) in due {
            self.integrate(tm, u_dev);
            self.x[state::INTESTINE_GLUCOSE_FLOW] += self.meal_gain * grams;
        }
        self.integrate(t_end, u_dev);
        self.step_index += 1;

        let bg = self.bg_true();
        if !(bg > 0.0 && bg < 1000.0) || !bg.is_finite() {
            return Err(Error::Diverged {
                step: self.step_index,
                bg,
            });
        }
        Ok(())
    }
}

/// Basal absolute interstitial insulin from the steady state of the insulin
/// chain (subcutaneous depot -> active depot -> interstitium) at infusion `u`.
pub fn basal_interstitial_insulin(u_basal: f64) -> Result<f64> {
    let a = crate::model::build_continuous_system(1.0)?;
    let b = crate::model::input_column();
    let (i9, i10, i5) = (
        state::SUBCUT_INSULIN_INACTIVE,
        state::SUBCUT_INSULIN_ACTIVE,
        state::INTERSTITIAL_INSULIN,
    );
    // Steady state of rows 9, 10, 5 with input u: unknowns (x9, x10, x5).
    let sub = Matrix::from_rows(&[
        vec![a.get(i9, i9), 0.0, 0.0],
        vec![a.get(i10, i9), a.get(i10, i10), 0.0],
        vec![0.0, a.get(i5, i10), a.get(i5, i5)],
    ])?;
    let rhs = [
        -b.get(i9, 0) * u_basal,
        -b.get(i10, 0) * u_basal,
        0.0,
    ];
    let x = solve_linear(&sub, &rhs)?;
    Ok(x[2])
}

/// Peak absolute blood glucose after a single meal under basal-only insulin
/// (`u_dev = 0`) at nominal sensitivity, scanning at sub-step resolution.
pub fn meal_peak_bg(meal_gain: f64, grams: f64) -> Result<f64> {
    let model = ModelSet::default_model();
    let profile = IsProfile::constant(1.0)?;
    let mut plant = Plant::new(&model, profile, I_MI_BASAL_DEFAULT, meal_gain);
    // Impulse at t = 0, then scan 24 h; the peak arrives within two hours.
    plant.x[state::INTESTINE_GLUCOSE_FLOW] += meal_gain * grams;
    let mut peak = plant.bg_true();
    let substeps = (24.0 * 60.0 / MAX_SUBSTEP) as usize;
    for _ in 0..substeps {
        let until = plant.t + MAX_SUBSTEP;
        plant.integrate(until, 0.0);
        peak = peak.max(plant.bg_true());
    }
    Ok(peak)
}

/// Calibrates the meal gain so that `grams` of carbohydrate raises the peak
/// by `target_rise` mg/dL above baseline: geometric sweep to bracket the
/// target, then bisection. The glucose response is linear in the gain, so the
/// bracket collapses quickly.
pub fn calibrate_meal_gain(target_rise: f64, grams: f64) -> Result<f64> {
    if !(target_rise > 0.0 && grams > 0.0) {
        return Err(Error::Parameter(
            "calibration needs positive target rise and meal size".into(),
        ));
    }
    let rise = |gain: f64| -> Result<f64> { Ok(meal_peak_bg(gain, grams)? - BG_BASELINE) };
    let mut lo = 1.0;
    let mut hi = 1.0;
    // Sweep upward until the peak overshoots the target.
    while rise(hi)? < target_rise {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::Parameter(
                "meal-gain sweep failed to bracket the target peak".into(),
            ));
        }
    }
    while rise(lo)? > target_rise {
        lo *= 0.5;
        if lo < 1e-6 {
            return Err(Error::Parameter(
                "meal-gain sweep failed to bracket the target peak".into(),
            ));
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if rise(mid)? < target_rise {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) / hi < 1e-12 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}
