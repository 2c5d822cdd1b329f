//! Serializable simulation settings.
//!
//! One struct gathers every tunable used by the closed loop so runs can be
//! described by a single TOML/JSON document. Defaults reproduce the nominal
//! seven-day experiments; `validate` applies the same invariants the
//! component constructors enforce, so a bad file fails before any state is
//! built.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::UkfConfig;
use crate::gp::GpHyperParams;
use crate::learner::LearnerConfig;
use crate::mpc::MpcParams;
use crate::plant::{I_MI_BASAL_DEFAULT, MEAL_GAIN_DEFAULT};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// CGM noise standard deviation [mg/dL].
    pub noise_sd: f64,
    /// Seed for the measurement-noise stream.
    pub seed: u64,
    /// Scenario length [days].
    pub duration_days: f64,
    /// Carbohydrate-to-gut-mass gain [mg/min per g].
    pub meal_gain: f64,
    /// Basal interstitial insulin offset [mU/L].
    pub i_mi_basal: f64,
    /// Filter for runs whose controller learns the disturbance: the rank-one
    /// disturbance direction in its process noise lets the learner read the
    /// circadian model error out of the state estimate.
    pub ukf: UkfConfig,
    /// Filter for plain-MPC runs. A controller without a learner has no use
    /// for the disturbance direction, so the default is the conventional
    /// insulin-kinetics attribution ([`UkfConfig::reactive`]); set it equal
    /// to `ukf` to run both controllers on identical filters.
    pub baseline_ukf: UkfConfig,
    pub gp: GpHyperParams,
    pub mpc: MpcParams,
    pub learner: LearnerConfig,
}

impl Default for SimConfig {
    fn default() -> SimConfig {
        SimConfig {
            noise_sd: 2.0,
            seed: 0,
            duration_days: 7.0,
            meal_gain: MEAL_GAIN_DEFAULT,
            i_mi_basal: I_MI_BASAL_DEFAULT,
            ukf: UkfConfig::default(),
            baseline_ukf: UkfConfig::reactive(),
            gp: GpHyperParams::default(),
            mpc: MpcParams::default(),
            learner: LearnerConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return Err(Error::Config(format!(
                "noise_sd must be finite and nonnegative, got {}",
                self.noise_sd
            )));
        }
        for (name, v) in [
            ("duration_days", self.duration_days),
            ("meal_gain", self.meal_gain),
            ("i_mi_basal", self.i_mi_basal),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        self.mpc.validate().map_err(reclass)?;
        self.validate_ukf()?;
        self.validate_gp()?;
        self.validate_learner()?;
        Ok(())
    }

    fn validate_ukf(&self) -> Result<()> {
        for (label, u) in [("ukf", &self.ukf), ("baseline_ukf", &self.baseline_ukf)] {
            if !(u.alpha > 0.0) || !(u.r > 0.0) {
                return Err(Error::Config(format!(
                    "{label} alpha and r must be positive, got alpha={}, r={}",
                    u.alpha, u.r
                )));
            }
            for (name, arr) in [("q_diag", &u.q_diag), ("p0_diag", &u.p0_diag)] {
                if arr.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                    return Err(Error::Config(format!(
                        "{label} {name} entries must be finite and nonnegative"
                    )));
                }
            }
            if !(u.q_disturbance >= 0.0) || !u.q_disturbance.is_finite() {
                return Err(Error::Config(format!(
                    "{label} q_disturbance must be finite and nonnegative, got {}",
                    u.q_disturbance
                )));
            }
        }
        Ok(())
    }

    fn validate_gp(&self) -> Result<()> {
        let g = &self.gp;
        for (name, v) in [
            ("signal_variance", g.signal_variance),
            ("periodic_length_scale", g.periodic_length_scale),
            ("se_length_scale", g.se_length_scale),
            ("period", g.period),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "gp {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    fn validate_learner(&self) -> Result<()> {
        let l = &self.learner;
        if l.buffer_capacity == 0 || l.min_points == 0 || l.refit_cadence == 0 {
            return Err(Error::Config(
                "learner buffer_capacity, min_points and refit_cadence must be positive".into(),
            ));
        }
        if l.min_points > l.buffer_capacity {
            return Err(Error::Config(format!(
                "learner min_points {} exceeds buffer_capacity {}",
                l.min_points, l.buffer_capacity
            )));
        }
        if !(l.activation_time >= 0.0) || !l.activation_time.is_finite() {
            return Err(Error::Config(format!(
                "learner activation_time must be finite and nonnegative, got {}",
                l.activation_time
            )));
        }
        Ok(())
    }
}

fn reclass(e: Error) -> Error {
    Error::Config(e.to_string())
}
