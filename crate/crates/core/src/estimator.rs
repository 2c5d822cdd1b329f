//! Unscented Kalman filter over the nominal discrete model.
//!
//! The filter propagates the nominal dynamics only; the sensitivity channel
//! is deliberately absent so that its effect surfaces in the innovation and
//! can be extracted downstream as a disturbance residual. Announced meals are
//! injected into the intestine flow state of every sigma point *before*
//! propagation, which keeps the filter's gut states in lockstep with the
//! simulation truth.
//!
//! The dynamics and measurement are linear, so the unscented transform is
//! exact here and the filter must agree with a conventional Kalman filter to
//! round-off; tests pin that equivalence.

use crate::error::{Error, Result};
use crate::model::{state, ModelSet, StateVector, BG_BASELINE, STATE_DIM};
use crate::numerics::{cholesky, dot, Matrix};

/// Number of sigma points for the scaled unscented transform.
const N_SIGMA: usize = 2 * STATE_DIM + 1;

/// Filter tuning. Gut states carry near-zero process and initial variance:
/// announced meals make them deterministic, and keeping them rigid prevents
/// the measurement update from smearing glucose innovations into the gut.
///
/// `q_disturbance` scales a rank-one process-noise term along the
/// sensitivity-disturbance input column. The filter deliberately omits that
/// input from its dynamics, so the term tells the filter where the resulting
/// model error lives; without it the Kalman gain attributes almost the whole
/// innovation to plasma glucose alone and the reconstructed disturbance comes
/// out more than an order of magnitude too small. The default is chosen so
/// the steady-state gain recovers a quasi-static disturbance to within 0.2%.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct UkfConfig {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    pub q_diag: [f64; STATE_DIM],
    pub q_disturbance: f64,
    pub r: f64,
    pub p0_diag: [f64; STATE_DIM],
}

impl Default for UkfConfig {
    fn default() -> UkfConfig {
        let mut q_diag = [1e-2; STATE_DIM];
        q_diag[state::STOMACH_GLUCOSE_FLOW] = 1e-12;
        q_diag[state::INTESTINE_GLUCOSE_FLOW] = 1e-12;
        let mut p0_diag = [100.0; STATE_DIM];
        p0_diag[state::STOMACH_GLUCOSE_FLOW] = 1e-12;
        p0_diag[state::INTESTINE_GLUCOSE_FLOW] = 1e-12;
        UkfConfig {
            alpha: 1e-3,
            beta: 2.0,
            kappa: 0.0,
            q_diag,
            q_disturbance: 1.6e6,
            r: 1.0,
            p0_diag,
        }
    }
}

impl UkfConfig {
    /// Conventional tuning for a controller that does not learn the
    /// sensitivity rhythm: a model-trusting filter with a conservative
    /// sensor assumption (r = 25, i.e. 5 mg/dL noise). Process noise is
    /// concentrated on interstitial insulin — the classic habit of
    /// attributing glucose model error to insulin kinetics — with no shaping
    /// along the disturbance input. Glucose innovations therefore translate
    /// into a slow, partial insulin-deficit estimate: the controller reacts
    /// to sensitivity drift well after it shows up in the measurement
    /// instead of anticipating it.
    pub fn reactive() -> UkfConfig {
        let mut config = UkfConfig::default();
        config.q_diag = [1e-6; STATE_DIM];
        config.q_diag[state::INTERSTITIAL_INSULIN] = 1e-2;
        config.q_diag[state::STOMACH_GLUCOSE_FLOW] = 1e-12;
        config.q_diag[state::INTESTINE_GLUCOSE_FLOW] = 1e-12;
        config.q_disturbance = 0.0;
        config.r = 25.0;
        config
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Parameter(format!(
                "ukf alpha must be in (0, 1], got {}",
                self.alpha
            )));
        }
        let lambda = self.alpha * self.alpha * (STATE_DIM as f64 + self.kappa) - STATE_DIM as f64;
        if STATE_DIM as f64 + lambda <= 0.0 {
            return Err(Error::Parameter(
                "ukf scaling n + lambda must be positive".into(),
            ));
        }
        if self.r <= 0.0 {
            return Err(Error::Parameter("ukf measurement noise must be positive".into()));
        }
        if self.q_diag.iter().chain(self.p0_diag.iter()).any(|&v| v < 0.0) {
            return Err(Error::Parameter("ukf variances must be non-negative".into()));
        }
        if !(self.q_disturbance >= 0.0 && self.q_disturbance.is_finite()) {
            return Err(Error::Parameter(format!(
                "ukf disturbance variance must be finite and non-negative, got {}",
                self.q_disturbance
            )));
        }
        Ok(())
    }
}

/// Process-noise covariance: diagonal floor plus the rank-one disturbance
/// direction. Symmetric positive definite whenever the diagonal is positive.
fn process_noise(model: &ModelSet, config: &UkfConfig) -> Matrix {
    let mut q = Matrix::zeros(STATE_DIM, STATE_DIM);
    for i in 0..STATE_DIM {
        q.set(i, i, config.q_diag[i]);
        for j in 0..STATE_DIM {
            let v = q.get(i, j)
                + config.q_disturbance * model.b_kis_d.get(i, 0) * model.b_kis_d.get(j, 0);
            q.set(i, j, v);
        }
    }
    q
}

#[derive(Debug, Clone)]
pub struct Ukf {
    a_hat_d: Matrix,
    b_d: Matrix,
    q: Matrix,
    r: f64,
    // Scaled-UT coefficients. The center mean weight is implied: means are
    // taken in deviation form (center plus wi-weighted spread), which equals
    // the textbook weighted sum because the mean weights add up to one.
    gamma: f64,
    wc0: f64,
    wi: f64,
    x: StateVector,
    p: Matrix,
}

impl Ukf {
    pub fn new(model: &ModelSet, config: &UkfConfig) -> Result<Ukf> {
        config.validate()?;
        let n = STATE_DIM as f64;
        let lambda = config.alpha * config.alpha * (n + config.kappa) - n;
        let mut p = Matrix::zeros(STATE_DIM, STATE_DIM);
        for i in 0..STATE_DIM {
            p.set(i, i, config.p0_diag[i]);
        }
        Ok(Ukf {
            a_hat_d: model.a_hat_d.clone(),
            b_d: model.b_d.clone(),
            q: process_noise(model, config),
            r: config.r,
            gamma: (n + lambda).sqrt(),
            wc0: lambda / (n + lambda) + 1.0 - config.alpha * config.alpha + config.beta,
            wi: 0.5 / (n + lambda),
            x: [0.0; STATE_DIM],
            p,
        })
    }

    pub fn state(&self) -> &StateVector {
        &self.x
    }

    pub fn covariance(&self) -> &Matrix {
        &self.p
    }

    pub fn estimated_bg(&self) -> f64 {
        BG_BASELINE + self.x[state::PLASMA_GLUCOSE]
    }

    /// Sigma points around (x, p): center, then +/- gamma * L columns.
    fn sigma_points(&self) -> Result<Vec<StateVector>> {
        let factor = self.scaled_sqrt()?;
        let mut points = Vec::with_capacity(N_SIGMA);
        points.push(self.x);
        for j in 0..STATE_DIM {
            let mut plus = self.x;
            let mut minus = self.x;
            for i in 0..STATE_DIM {
                let lij = factor.lower().get(i, j);
                plus[i] += self.gamma * lij;
                minus[i] -= self.gamma * lij;
            }
            points.push(plus);
            points.push(minus);
        }
        Ok(points)
    }

    /// Cholesky of the covariance with a symmetrize-and-jitter ladder: the
    /// filter covariance spans ~14 orders of magnitude across states, so
    /// round-off can push a pivot barely negative.
    fn scaled_sqrt(&self) -> Result<crate::numerics::CholeskyFactor> {
        match cholesky(&self.p) {
            Ok(f) => return Ok(f),
            Err(_) => {}
        }
        let max_diag = (0..STATE_DIM)
            .map(|i| self.p.get(i, i).abs())
            .fold(0.0f64, f64::max)
            .max(f64::MIN_POSITIVE);
        let mut jitter = 1e-12 * max_diag;
        while jitter <= 1e-4 * max_diag {
            let mut sym = Matrix::zeros(STATE_DIM, STATE_DIM);
            for i in 0..STATE_DIM {
                for j in 0..STATE_DIM {
                    let v = 0.5 * (self.p.get(i, j) + self.p.get(j, i));
                    sym.set(i, j, v);
                }
                sym.set(i, i, sym.get(i, i) + jitter);
            }
            if let Ok(f) = cholesky(&sym) {
                return Ok(f);
            }
            jitter *= 100.0;
        }
        Err(Error::Estimator(
            "covariance square root failed even with jitter".into(),
        ))
    }

    /// Weighted mean in deviation form: center + wi * sum(point - center).
    /// Algebraically equal to the weighted sum (weights total 1), but avoids
    /// the O(1/alpha^2) cancellation of the scaled center weight.
    fn mean_of(points: &[StateVector], wi: f64) -> StateVector {
        let center = points[0];
        let mut acc = [0.0; STATE_DIM];
        for point in &points[1..] {
            for i in 0..STATE_DIM {
                acc[i] += point[i] - center[i];
            }
        }
        let mut mean = center;
        for i in 0..STATE_DIM {
            mean[i] += wi * acc[i];
        }
        mean
    }

    /// Time update. `u_dev` is the applied insulin deviation over the coming
    /// interval; `meal_mass` is the announced intestine-flow injection
    /// (meal gain times grams) landing at the interval start, 0 when none.
    pub fn predict(&mut self, u_dev: f64, meal_mass: f64) -> Result<()> {
        let mut points = self.sigma_points()?;
        for point in points.iter_mut() {
            point[state::INTESTINE_GLUCOSE_FLOW] += meal_mass;
            let mut next = [0.0; STATE_DIM];
            for i in 0..STATE_DIM {
                next[i] = dot(self.a_hat_d.row(i), point) + self.b_d.get(i, 0) * u_dev;
            }
            *point = next;
        }
        let mean = Self::mean_of(&points, self.wi);
        let mut p = Matrix::zeros(STATE_DIM, STATE_DIM);
        for (s, point) in points.iter().enumerate() {
            let w = if s == 0 { self.wc0 } else { self.wi };
            for i in 0..STATE_DIM {
                let di = point[i] - mean[i];
                for j in 0..STATE_DIM {
                    p.set(i, j, p.get(i, j) + w * di * (point[j] - mean[j]));
                }
            }
        }
        for i in 0..STATE_DIM {
            for j in 0..STATE_DIM {
                p.set(i, j, p.get(i, j) + self.q.get(i, j));
            }
        }
        symmetrize(&mut p);
        self.x = mean;
        self.p = p;
        Ok(())
    }

    /// Measurement update with a glucose reading [mg/dL]. Returns the
    /// innovation (measured minus predicted glucose).
    pub fn update(&mut self, bg_measured: f64) -> Result<f64> {
        let points = self.sigma_points()?;
        // Measurement model: y = baseline + x[0].
        let y_center = BG_BASELINE + points[0][state::PLASMA_GLUCOSE];
        let mut acc = 0.0;
        for point in &points[1..] {
            acc += point[state::PLASMA_GLUCOSE] - points[0][state::PLASMA_GLUCOSE];
        }
        let y_mean = y_center + self.wi * acc;

        let mut s = self.r;
        let mut pxy = [0.0; STATE_DIM];
        for (k, point) in points.iter().enumerate() {
            let w = if k == 0 { self.wc0 } else { self.wi };
            let dy = BG_BASELINE + point[state::PLASMA_GLUCOSE] - y_mean;
            s += w * dy * dy;
            for i in 0..STATE_DIM {
                pxy[i] += w * (point[i] - self.x[i]) * dy;
            }
        }
        if !(s > 0.0) {
            return Err(Error::Estimator(format!(
                "innovation variance not positive: {s}"
            )));
        }
        let innovation = bg_measured - y_mean;
        for i in 0..STATE_DIM {
            let k_i = pxy[i] / s;
            self.x[i] += k_i * innovation;
        }
        for i in 0..STATE_DIM {
            for j in 0..STATE_DIM {
                let v = self.p.get(i, j) - pxy[i] * pxy[j] / s;
                self.p.set(i, j, v);
            }
        }
        symmetrize(&mut self.p);
        Ok(innovation)
    }
}

fn symmetrize(p: &mut Matrix) {
    for i in 0..STATE_DIM {
        for j in (i + 1)..STATE_DIM {
            let v = 0.5 * (p.get(i, j) + p.get(j, i));
            p.set(i, j, v);
            p.set(j, i, v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::IsProfile;
    use crate::plant::{Plant, I_MI_BASAL_DEFAULT, MEAL_GAIN_DEFAULT};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Conventional Kalman filter, the exactness oracle for the UKF on this
    /// linear model. Implemented with a different algebraic route (gain from
    /// the covariance column, Joseph-free update) on purpose.
    struct PlainKf {
        a: Matrix,
        b: Matrix,
        q: Matrix,
        r: f64,
        x: StateVector,
        p: Matrix,
    }

    impl PlainKf {
        fn new(model: &ModelSet, config: &UkfConfig) -> PlainKf {
            let mut p = Matrix::zeros(STATE_DIM, STATE_DIM);
            for i in 0..STATE_DIM {
                p.set(i, i, config.p0_diag[i]);
            }
            PlainKf {
                a: model.a_hat_d.clone(),
                b: model.b_d.clone(),
                q: process_noise(model, config),
                r: config.r,
                x: [0.0; STATE_DIM],
                p,
            }
        }

        fn predict(&mut self, u_dev: f64, meal_mass: f64) {
            let mut x_in = self.x;
            x_in[state::INTESTINE_GLUCOSE_FLOW] += meal_mass;
            let mut next = [0.0; STATE_DIM];
            for i in 0..STATE_DIM {
                next[i] = dot(self.a.row(i), &x_in) + self.b.get(i, 0) * u_dev;
            }
            self.x = next;
            let apat = self.a.mul(&self.p).unwrap().mul(&self.a.transpose()).unwrap();
            self.p = apat.add(&self.q).unwrap();
        }

        fn update(&mut self, bg: f64) {
            let s = self.p.get(0, 0) + self.r;
            let innovation = bg - BG_BASELINE - self.x[0];
            let gain: Vec<f64> = (0..STATE_DIM).map(|i| self.p.get(i, 0) / s).collect();
            for i in 0..STATE_DIM {
                self.x[i] += gain[i] * innovation;
            }
            // P <- (I - K C) P, C = e1^T.
            let row0: Vec<f64> = (0..STATE_DIM).map(|j| self.p.get(0, j)).collect();
            for i in 0..STATE_DIM {
                for j in 0..STATE_DIM {
                    let v = self.p.get(i, j) - gain[i] * row0[j];
                    self.p.set(i, j, v);
                }
            }
        }
    }

    #[test]
    fn unscented_transform_is_exact_on_linear_dynamics() {
        // One predict from a non-trivial covariance must equal A P A' + Q.
        let model = ModelSet::default_model();
        let config = UkfConfig::default();
        let mut ukf = Ukf::new(&model, &config).unwrap();
        ukf.x[0] = 5.0;
        ukf.x[4] = -2.0;
        ukf.predict(0.03, 0.0).unwrap();

        let mut p0 = Matrix::zeros(STATE_DIM, STATE_DIM);
        for i in 0..STATE_DIM {
            p0.set(i, i, config.p0_diag[i]);
        }
        let expected = model
            .a_hat_d
            .mul(&p0)
            .unwrap()
            .mul(&model.a_hat_d.transpose())
            .unwrap()
            .add(&process_noise(&model, &config))
            .unwrap();
        let diff = ukf.covariance().sub(&expected).unwrap().max_abs();
        // Tolerance is relative to the covariance scale, which the rank-one
        // disturbance term pushes to ~2e5.
        assert!(diff < 1e-6, "covariance differs from A P A' + Q by {diff}");

        let mut x_in = [0.0; STATE_DIM];
        x_in[0] = 5.0;
        x_in[4] = -2.0;
        for i in 0..STATE_DIM {
            let want = dot(model.a_hat_d.row(i), &x_in) + model.b_d.get(i, 0) * 0.03;
            assert!((ukf.state()[i] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_conventional_kalman_filter_on_closed_run() {
        // One simulated day with a diurnal sensitivity profile, measurement
        // noise, a control excitation, and an announced meal. The UKF and the
        // plain KF see identical inputs and must agree to much better than
        // 1e-6 in every state at every step.
        let model = ModelSet::default_model();
        let config = UkfConfig::default();
        let mut ukf = Ukf::new(&model, &config).unwrap();
        let mut kf = PlainKf::new(&model, &config);
        let mut plant = Plant::new(
            &model,
            IsProfile::default(),
            I_MI_BASAL_DEFAULT,
            MEAL_GAIN_DEFAULT,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut max_state_diff = 0.0f64;
        let mut max_cov_diff = 0.0f64;
        for k in 0..288usize {
            let t = k as f64 * 5.0;
            let y = plant.measure(2.0, &mut rng);
            ukf.update(y).unwrap();
            kf.update(y);
            let u_dev = 0.05 * (t / 240.0).sin();
            let meal: &[(f64, f64)] = if k == 100 { &[(500.0, 30.0)] } else { &[] };
            let meal_mass = if k == 100 { MEAL_GAIN_DEFAULT * 30.0 } else { 0.0 };
            ukf.predict(u_dev, meal_mass).unwrap();
            kf.predict(u_dev, meal_mass);
            plant.step(u_dev, meal).unwrap();

            for i in 0..STATE_DIM {
                max_state_diff = max_state_diff.max((ukf.state()[i] - kf.x[i]).abs());
            }
            max_cov_diff = max_cov_diff.max(ukf.covariance().sub(&kf.p).unwrap().max_abs());
        }
        // Round-off through the scaled transform amplifies along the closed
        // filter loop; observed ~1e-8, still two decades under the 1e-6
        // equivalence requirement.
        assert!(
            max_state_diff < 1e-7,
            "ukf vs kf state diff {max_state_diff}"
        );
        assert!(max_cov_diff < 1e-6, "ukf vs kf covariance diff {max_cov_diff}");
    }

    #[test]
    fn announced_meal_keeps_gut_states_in_lockstep_with_truth() {
        let model = ModelSet::default_model();
        let config = UkfConfig::default();
        let mut ukf = Ukf::new(&model, &config).unwrap();
        let mut plant = Plant::new(
            &model,
            IsProfile::constant(1.0).unwrap(),
            I_MI_BASAL_DEFAULT,
            MEAL_GAIN_DEFAULT,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 0..288usize {
            let y = plant.measure(1.0, &mut rng);
            ukf.update(y).unwrap();
            let meal: &[(f64, f64)] = if k == 24 { &[(120.0, 50.0)] } else { &[] };
            let meal_mass = if k == 24 { MEAL_GAIN_DEFAULT * 50.0 } else { 0.0 };
            ukf.predict(0.0, meal_mass).unwrap();
            plant.step(0.0, meal).unwrap();
            let ds = (ukf.state()[state::STOMACH_GLUCOSE_FLOW]
                - plant.state()[state::STOMACH_GLUCOSE_FLOW])
                .abs();
            let di = (ukf.state()[state::INTESTINE_GLUCOSE_FLOW]
                - plant.state()[state::INTESTINE_GLUCOSE_FLOW])
                .abs();
            // The gap is the truth integrator's local error on the ~1300
            // mg/min impulse (relative ~1e-10); the filter itself adds none.
            assert!(ds < 1e-6 && di < 1e-6, "gut drift at step {k}: {ds}, {di}");
        }
        // The meal actually flowed through (states were nonzero mid-run).
        assert!(plant.bg_true() > 110.0);
    }

    #[test]
    fn tracks_measured_glucose_after_unannounced_disturbance() {
        // An unannounced meal pushes glucose up; the filter cannot see the
        // gut states move, but the innovation must still pull the estimated
        // glucose onto the measurement within a couple of hours.
        let model = ModelSet::default_model();
        let mut ukf = Ukf::new(&model, &UkfConfig::default()).unwrap();
        let mut plant = Plant::new(
            &model,
            IsProfile::constant(1.0).unwrap(),
            I_MI_BASAL_DEFAULT,
            MEAL_GAIN_DEFAULT,
        );
        let mut worst_late_error = 0.0f64;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 0..96usize {
            let y = plant.measure(0.0, &mut rng);
            ukf.update(y).unwrap();
            let err = (ukf.estimated_bg() - y).abs();
            if k > 36 {
                worst_late_error = worst_late_error.max(err);
            }
            let meal: &[(f64, f64)] = if k == 12 { &[(60.0, 20.0)] } else { &[] };
            ukf.predict(0.0, 0.0).unwrap(); // meal not announced
            plant.step(0.0, meal).unwrap();
        }
        assert!(
            worst_late_error < 2.0,
            "estimate should track measurement, worst late error {worst_late_error}"
        );
    }

    #[test]
    fn rejects_bad_tuning() {
        let model = ModelSet::default_model();
        let mut config = UkfConfig::default();
        config.alpha = 0.0;
        assert!(Ukf::new(&model, &config).is_err());
        let mut config = UkfConfig::default();
        config.r = 0.0;
        assert!(Ukf::new(&model, &config).is_err());
        let mut config = UkfConfig::default();
        config.q_diag[0] = -1.0;
        assert!(Ukf::new(&model, &config).is_err());
        let mut config = UkfConfig::default();
        config.q_disturbance = -1.0;
        assert!(Ukf::new(&model, &config).is_err());
        let mut config = UkfConfig::default();
        config.q_disturbance = f64::NAN;
        assert!(Ukf::new(&model, &config).is_err());
    }

    #[test]
    fn covariance_stays_symmetric_positive_on_long_run() {
        let model = ModelSet::default_model();
        let mut ukf = Ukf::new(&model, &UkfConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut plant = Plant::new(
            &model,
            IsProfile::default(),
            I_MI_BASAL_DEFAULT,
            MEAL_GAIN_DEFAULT,
        );
        for _ in 0..1000usize {
            let y = plant.measure(2.0, &mut rng);
            ukf.update(y).unwrap();
            ukf.predict(0.0, 0.0).unwrap();
            plant.step(0.0, &[]).unwrap();
            assert!(ukf.covariance().max_asymmetry() < 1e-12);
            for i in 0..STATE_DIM {
                assert!(ukf.covariance().get(i, i) > 0.0);
            }
        }
    }
}
