//! The twelve-state linear minipig glucose model.
//!
//! States are deviations from the basal operating point. Indices (zero-based)
//! with units:
//!
//! | # | state | unit |
//! |---|-------|------|
//! | 0 | plasma glucose | mg/dL |
//! | 1 | liver glucose | mg/dL |
//! | 2 | muscle/adipose vascular glucose | mg/dL |
//! | 3 | muscle/adipose intracellular glucose | mg/dL |
//! | 4 | interstitial insulin | mU/L |
//! | 5 | liver glucagon (normalized) | - |
//! | 6 | glucagon reduction rate (normalized) | - |
//! | 7 | liver insulin | mU/L |
//! | 8 | inactive subcutaneous insulin | mU/L |
//! | 9 | active subcutaneous insulin | mU/L |
//! | 10 | stomach glucose mass flow | mg/min |
//! | 11 | intestine glucose mass flow | mg/min |
//!
//! The insulin-sensitivity factor `k_is` enters exactly one entry: the
//! coupling from interstitial insulin into intracellular glucose uptake,
//! `A[3][4] = -0.1 * k_is`. That makes the dynamics affine in `k_is` and lets
//! the plant and controller treat sensitivity variation as a scalar input on a
//! fixed channel.

use crate::error::{Error, Result};
use crate::numerics::{zoh_discretize, Matrix};

/// Number of model states.
pub const STATE_DIM: usize = 12;

/// State vector in deviation coordinates.
pub type StateVector = [f64; STATE_DIM];

/// Named state indices.
pub mod state {
    pub const PLASMA_GLUCOSE: usize = 0;
    pub const LIVER_GLUCOSE: usize = 1;
    pub const VASCULAR_GLUCOSE: usize = 2;
    pub const INTRACELLULAR_GLUCOSE: usize = 3;
    pub const INTERSTITIAL_INSULIN: usize = 4;
    pub const LIVER_GLUCAGON: usize = 5;
    pub const GLUCAGON_REDUCTION: usize = 6;
    pub const LIVER_INSULIN: usize = 7;
    pub const SUBCUT_INSULIN_INACTIVE: usize = 8;
    pub const SUBCUT_INSULIN_ACTIVE: usize = 9;
    pub const STOMACH_GLUCOSE_FLOW: usize = 10;
    pub const INTESTINE_GLUCOSE_FLOW: usize = 11;
}

/// Blood glucose at the basal operating point [mg/dL].
pub const BG_BASELINE: f64 = 110.0;

/// Basal insulin infusion per sample [U].
pub const U_BASAL: f64 = 0.169;

/// Default controller/estimator sampling interval [min].
pub const TS_DEFAULT: f64 = 5.0;

/// Admissible range for the insulin-sensitivity factor.
pub const K_IS_RANGE: (f64, f64) = (0.1, 3.0);

/// System matrix for a given insulin-sensitivity factor.
pub fn build_continuous_system(k_is: f64) -> Result<Matrix> {
    if !(k_is >= K_IS_RANGE.0 && k_is <= K_IS_RANGE.1) {
        return Err(Error::Parameter(format!(
            "k_is = {k_is} outside [{}, {}]",
            K_IS_RANGE.0, K_IS_RANGE.1
        )));
    }
    let rows = vec![
        vec![-1.14, 0.494, 0.647, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0178, 0.0],
        vec![3.68, -4.56, 0.0, 0.0, -0.018, 86.5, -96.8, 59.3, 0.0, -0.073, 0.0, 0.0],
        vec![2.01, 0.0, -3.3, 1.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.2, -0.2, -0.1 * k_is, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, -0.0697, 0.0, 0.0, 0.0, 0.0, 0.0973, 0.0, 0.0],
        vec![-0.0018, 0.0, 0.0, 0.0, -6.7e-4, -0.371, 0.0, 0.0, 0.0, -0.00272, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.00687, -0.0154, 0.0, 0.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, -2.08e-4, 0.0, 0.0, -0.04, 0.0, -8.42e-4, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -0.0166, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.015, -0.015, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -0.027, 0.027],
        vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -0.017],
    ];
    Matrix::from_rows(&rows)
}

/// Insulin input column: subcutaneous infusion feeds the two subcutaneous
/// insulin compartments.
pub fn input_column() -> Matrix {
    let mut b = vec![0.0; STATE_DIM];
    b[state::SUBCUT_INSULIN_INACTIVE] = 2.23;
    b[state::SUBCUT_INSULIN_ACTIVE] = 0.99;
    Matrix::column(&b)
}

/// Output row: plasma glucose deviation.
pub fn output_row() -> Matrix {
    let mut c = Matrix::zeros(1, STATE_DIM);
    c.set(0, state::PLASMA_GLUCOSE, 1.0);
    c
}

/// Splits the sensitivity-dependent system into the nominal matrix at
/// `k_is = 1` plus a scalar disturbance channel:
///
/// `A(k_is) x = a_hat x + b_kis * u_kis` with `u_kis = (k_is - 1) * x[4]`.
///
/// `b_kis` has a single nonzero entry, -0.1 in the intracellular-glucose row.
pub fn split_system() -> (Matrix, Matrix) {
    let a_hat = build_continuous_system(1.0).expect("nominal k_is is valid");
    let mut b = vec![0.0; STATE_DIM];
    b[state::INTRACELLULAR_GLUCOSE] = -0.1;
    (a_hat, Matrix::column(&b))
}

/// Continuous and discretized system matrices bundled for the estimator,
/// learner and controller.
#[derive(Debug, Clone)]
pub struct ModelSet {
    /// Nominal continuous system at `k_is = 1`.
    pub a_hat: Matrix,
    /// Insulin input column.
    pub b: Matrix,
    /// Sensitivity disturbance column.
    pub b_kis: Matrix,
    /// Output row (plasma glucose).
    pub c: Matrix,
    /// Discrete nominal system.
    pub a_hat_d: Matrix,
    /// Discrete insulin input column.
    pub b_d: Matrix,
    /// Discrete sensitivity disturbance column.
    pub b_kis_d: Matrix,
    /// Sampling interval [min].
    pub ts: f64,
    /// Blood glucose at the operating point [mg/dL].
    pub bg_baseline: f64,
    /// Basal insulin per sample [U].
    pub u_basal: f64,
}

impl ModelSet {
    /// Builds the nominal model and its zero-order-hold discretization.
    pub fn discretize(ts: f64) -> Result<ModelSet> {
        if !(ts > 0.0) {
            return Err(Error::Parameter(format!("sampling interval {ts} must be positive")));
        }
        let (a_hat, b_kis) = split_system();
        let b = input_column();
        let mut inputs = Matrix::zeros(STATE_DIM, 2);
        inputs.set_block(0, 0, &b);
        inputs.set_block(0, 1, &b_kis);
        let (a_hat_d, inputs_d) = zoh_discretize(&a_hat, &inputs, ts)?;
        Ok(ModelSet {
            a_hat,
            b,
            b_kis,
            c: output_row(),
            a_hat_d,
            b_d: inputs_d.block(0, 0, STATE_DIM, 1),
            b_kis_d: inputs_d.block(0, 1, STATE_DIM, 1),
            ts,
            bg_baseline: BG_BASELINE,
            u_basal: U_BASAL,
        })
    }

    /// Default model at the 5-minute sampling interval.
    pub fn default_model() -> ModelSet {
        ModelSet::discretize(TS_DEFAULT).expect("default sampling interval is valid")
    }

    /// One step of the discrete nominal model with disturbance input.
    pub fn step_discrete(&self, x: &StateVector, u_dev: f64, u_kis: f64) -> StateVector {
        let mut next = [0.0; STATE_DIM];
        for i in 0..STATE_DIM {
            next[i] = crate::numerics::dot(self.a_hat_d.row(i), x)
                + self.b_d.get(i, 0) * u_dev
                + self.b_kis_d.get(i, 0) * u_kis;
        }
        next
    }
}

/// Piecewise-linear, 1440-minute-periodic insulin-sensitivity profile.
#[derive(Debug, Clone, PartialEq)]
pub struct IsProfile {
    /// (minute of day, k_is value), sorted by minute, minutes in [0, 1440).
    breakpoints: Vec<(f64, f64)>,
}

/// Admissible range for profile values.
pub const PROFILE_VALUE_RANGE: (f64, f64) = (0.55, 1.4);

impl IsProfile {
    /// Builds a profile from breakpoints, validating ordering and range.
    pub fn new(breakpoints: Vec<(f64, f64)>) -> Result<IsProfile> {
        if breakpoints.is_empty() {
            return Err(Error::Parameter("profile needs at least one breakpoint".into()));
        }
        for w in breakpoints.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Parameter(format!(
                    "profile breakpoints must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        for &(m, v) in &breakpoints {
            if !(0.0..1440.0).contains(&m) {
                return Err(Error::Parameter(format!(
                    "profile minute {m} outside [0, 1440)"
                )));
            }
            if !(v >= PROFILE_VALUE_RANGE.0 && v <= PROFILE_VALUE_RANGE.1) {
                return Err(Error::Parameter(format!(
                    "profile value {v} outside [{}, {}]",
                    PROFILE_VALUE_RANGE.0, PROFILE_VALUE_RANGE.1
                )));
            }
        }
        Ok(IsProfile { breakpoints })
    }

    /// The default circadian rhythm: sensitivity declines overnight into an
    /// early-morning trough at 07:00 (the dawn effect), recovers slowly
    /// through midday and peaks at 22:00. Insulin is less effective than
    /// nominal for most of the day (daily mean about 0.83), so a controller
    /// that ignores the rhythm runs visibly above the glucose set point.
    pub fn default_profile() -> IsProfile {
        IsProfile::new(vec![
            (0.0, 0.95),
            (240.0, 0.70),
            (420.0, 0.55),
            (600.0, 0.62),
            (780.0, 0.72),
            (960.0, 0.82),
            (1140.0, 1.00),
            (1320.0, 1.40),
        ])
        .expect("default breakpoints are valid")
    }

    /// Constant profile (useful for nominal-sensitivity experiments).
    pub fn constant(k: f64) -> Result<IsProfile> {
        IsProfile::new(vec![(0.0, k)])
    }
}

impl Default for IsProfile {
    fn default() -> IsProfile {
        IsProfile::default_profile()
    }
}

impl IsProfile {
    /// Profile value at time `t` [min], periodic with a 1440-minute day.
    pub fn value_at(&self, t: f64) -> f64 {
        let tm = t.rem_euclid(1440.0);
        let pts = &self.breakpoints;
        let n = pts.len();
        if n == 1 {
            return pts[0].1;
        }
        // Wrap segment from the last breakpoint through midnight to the first.
        let (t0, v0, t1, v1) = if tm < pts[0].0 {
            (pts[n - 1].0 - 1440.0, pts[n - 1].1, pts[0].0, pts[0].1)
        } else if tm >= pts[n - 1].0 {
            (pts[n - 1].0, pts[n - 1].1, pts[0].0 + 1440.0, pts[0].1)
        } else {
            let i = pts.partition_point(|&(m, _)| m <= tm) - 1;
            (pts[i].0, pts[i].1, pts[i + 1].0, pts[i + 1].1)
        };
        v0 + (v1 - v0) * (tm - t0) / (t1 - t0)
    }

    pub fn breakpoints(&self) -> &[(f64, f64)] {
        &self.breakpoints
    }
}
