//! Gaussian-process regression with a periodic composite kernel.
//!
//! The kernel is a product of a squared-exponential envelope and a periodic
//! term locked to the 24-hour day,
//!
//! `k(dt) = signal_variance * exp(-dt^2 / (2 l_se^2))
//!                          * exp(-2 sin^2(pi dt / period) / l_p^2)`
//!
//! The envelope length scale defaults to effectively infinite so the learned
//! structure is strictly periodic; it is kept as a parameter so slow drift
//! could be admitted by shortening it. Only the signal variance and the
//! periodic length scale are fitted.
//!
//! Training data arrives on a uniform sampling grid, which makes the Gram
//! matrix Toeplitz. Hyperparameter search exploits that: each likelihood
//! evaluation runs a Levinson recursion (O(n^2) solve plus log-determinant
//! from the innovation variances) instead of a dense Cholesky (O(n^3)). The
//! fitted model itself keeps a Cholesky factor for posterior variances, with
//! O(n^2) incremental updates as the training window grows or slides.

use crate::error::{Error, Result};
use crate::numerics::{cholesky, dot, CholeskyFactor, Matrix};
use crate::simplex::{minimize, NelderMeadOptions};

/// One circadian period [min].
pub const DAY_MINUTES: f64 = 1440.0;

/// Relative jitter ladder: start, multiplier, cap (all relative to the
/// signal variance).
const JITTER_START: f64 = 1e-6;
const JITTER_STEP: f64 = 10.0;
const JITTER_CAP: f64 = 1e-2;

/// Search box for the fitted hyperparameters.
const SIGNAL_VARIANCE_BOUNDS: (f64, f64) = (1e-6, 1e6);
const LENGTH_SCALE_BOUNDS: (f64, f64) = (1e-2, 1e2);

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GpHyperParams {
    /// Marginal signal variance (kernel value at zero lag).
    pub signal_variance: f64,
    /// Length scale of the periodic term (dimensionless, on the unit circle).
    pub periodic_length_scale: f64,
    /// Envelope length scale [min]; effectively infinite by default.
    pub se_length_scale: f64,
    /// Kernel period [min].
    pub period: f64,
}

impl Default for GpHyperParams {
    fn default() -> GpHyperParams {
        GpHyperParams {
            signal_variance: 1.0,
            periodic_length_scale: 1.0,
            se_length_scale: 1e9,
            period: DAY_MINUTES,
        }
    }
}

impl GpHyperParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("signal_variance", self.signal_variance),
            ("periodic_length_scale", self.periodic_length_scale),
            ("se_length_scale", self.se_length_scale),
            ("period", self.period),
        ];
        for (name, v) in all {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!(
                    "gp hyperparameter {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Squared-exponential factor, normalized to 1 at zero lag.
pub fn kernel_se(dt: f64, length_scale: f64) -> f64 {
    let z = dt / length_scale;
    (-0.5 * z * z).exp()
}

/// Periodic factor, normalized to 1 at zero lag.
pub fn kernel_periodic(dt: f64, period: f64, length_scale: f64) -> f64 {
    let s = (std::f64::consts::PI * dt / period).sin();
    (-2.0 * s * s / (length_scale * length_scale)).exp()
}

/// Composite kernel value at lag `dt` [min].
pub fn kernel_value(dt: f64, hp: &GpHyperParams) -> f64 {
    hp.signal_variance
        * kernel_se(dt, hp.se_length_scale)
        * kernel_periodic(dt, hp.period, hp.periodic_length_scale)
}

/// Uniform spacing of a time grid, when every gap is bitwise identical.
fn uniform_spacing(times: &[f64]) -> Option<f64> {
    if times.len() < 2 {
        return None;
    }
    let d0 = times[1] - times[0];
    if !(d0 > 0.0) {
        return None;
    }
    for w in times.windows(2) {
        if w[1] - w[0] != d0 {
            return None;
        }
    }
    Some(d0)
}

/// Dense Gram matrix `K + jitter I`.
fn gram(times: &[f64], hp: &GpHyperParams, jitter: f64) -> Matrix {
    let n = times.len();
    let mut k = Matrix::zeros(n, n);
    if let Some(dt) = uniform_spacing(times) {
        // Toeplitz fill: one kernel evaluation per lag. Bitwise identical to
        // the direct fill because the grid differences are exact.
        let lags: Vec<f64> = (0..n).map(|d| kernel_value(d as f64 * dt, hp)).collect();
        for i in 0..n {
            for j in 0..n {
                let d = i.abs_diff(j);
                k.set(i, j, lags[d]);
            }
        }
    } else {
        for i in 0..n {
            for j in 0..=i {
                let v = kernel_value(times[i] - times[j], hp);
                k.set(i, j, v);
                k.set(j, i, v);
            }
        }
    }
    for i in 0..n {
        k.set(i, i, k.get(i, i) + jitter);
    }
    k
}

/// Levinson recursion on a symmetric positive-definite Toeplitz system.
///
/// `c` is the first column (c[0] includes jitter), `y` the right-hand side.
/// Returns the solution of `T x = y` and `log det T`, or None when the
/// recursion loses positivity (caller falls back to a dense factorization).
fn toeplitz_solve_logdet(c: &[f64], y: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = c.len();
    if n == 0 || c[0] <= 0.0 {
        return None;
    }
    let mut log_det = c[0].ln();
    let mut x = vec![y[0] / c[0]];
    if n == 1 {
        return Some((x, log_det));
    }
    // c_rev[j] = c[n-1-j], so c[m], ..., c[1] sits at c_rev[n-1-m .. n-1]
    // and the reflected inner products become forward dot products.
    let c_rev: Vec<f64> = c.iter().rev().copied().collect();
    // a_m solves T_m a = (c[1], ..., c[m]); e is the innovation variance
    // E_m = c[0] - (c[m], ..., c[1]) . a_m, and det T_{m+1} = det T_m * E_m.
    // ar mirrors reverse(a_m) at the tail of its buffer so every loop below
    // runs forward over contiguous slices.
    let mut a = vec![c[1] / c[0]];
    let mut ar_buf = vec![0.0; n];
    ar_buf[n - 1] = a[0];
    let mut e = c[0] - c[1] * a[0];
    for m in 1..n {
        if !(e > 0.0) || !e.is_finite() {
            return None;
        }
        log_det += e.ln();
        // Extend the solution: x_{m+1} = [x_m - xi * reverse(a_m); xi].
        let c_tail = &c_rev[n - 1 - m..n - 1];
        let ar = &ar_buf[n - m..];
        let s_x = dot(c_tail, &x);
        let xi = (y[m] - s_x) / e;
        for (xv, av) in x.iter_mut().zip(ar) {
            *xv -= xi * av;
        }
        x.push(xi);
        if m == n - 1 {
            break;
        }
        // Extend the predictor: a_{m+1} = [a_m - kappa * reverse(a_m); kappa],
        // with the mirror updated from the same pair reads.
        let s_a = dot(c_tail, &a);
        let kappa = (c[m + 1] - s_a) / e;
        for (av, rv) in a.iter_mut().zip(ar_buf[n - m..].iter_mut()) {
            let (ai, ri) = (*av, *rv);
            *av = ai - kappa * ri;
            *rv = ri - kappa * ai;
        }
        ar_buf[n - m - 1] = kappa;
        a.push(kappa);
        e *= 1.0 - kappa * kappa;
    }
    Some((x, log_det))
}

fn lml_from_parts(quad: f64, log_det: f64, n: usize) -> f64 {
    -0.5 * quad - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Log marginal likelihood of `values` at `times` under the kernel, with the
/// jitter ladder applied until the Gram matrix factors.
pub fn log_marginal_likelihood(times: &[f64], values: &[f64], hp: &GpHyperParams) -> Result<f64> {
    hp.validate()?;
    if times.len() != values.len() || times.is_empty() {
        return Err(Error::Dimension(format!(
            "times/values lengths {} vs {}",
            times.len(),
            values.len()
        )));
    }
    let n = times.len();
    let spacing = uniform_spacing(times);
    let mut jitter = JITTER_START * hp.signal_variance;
    let cap = JITTER_CAP * hp.signal_variance;
    while jitter <= cap * (1.0 + 1e-12) {
        if let Some(dt) = spacing {
            let mut c: Vec<f64> = (0..n).map(|d| kernel_value(d as f64 * dt, hp)).collect();
            c[0] += jitter;
            if let Some((x, log_det)) = toeplitz_solve_logdet(&c, values) {
                return Ok(lml_from_parts(dot(values, &x), log_det, n));
            }
        } else {
            let k = gram(times, hp, jitter);
            if let Ok(factor) = cholesky(&k) {
                let alpha = factor.solve(values);
                return Ok(lml_from_parts(dot(values, &alpha), factor.log_det(), n));
            }
        }
        jitter *= JITTER_STEP;
    }
    Err(Error::Gp(format!(
        "gram matrix would not factor even at jitter {cap:.3e}"
    )))
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub params: GpHyperParams,
    pub log_marginal: f64,
    /// False when no restart beat the initial parameters, in which case
    /// `params` echoes the initial point.
    pub improved: bool,
}

/// Fits (signal_variance, periodic_length_scale) by maximizing the marginal
/// likelihood with Nelder-Mead in log space, from three deterministic starts:
/// the initial point and the initial point scaled by 10 and by 0.1 (clamped
/// into the search box). Restarts run on scoped threads; the best result
/// wins, ties broken by restart order, so the outcome is deterministic.
pub fn fit_hyperparams(
    times: &[f64],
    values: &[f64],
    init: &GpHyperParams,
) -> Result<FitOutcome> {
    init.validate()?;
    if times.len() != values.len() || times.len() < 2 {
        return Err(Error::Dimension(
            "hyperparameter fit needs at least two samples".into(),
        ));
    }

    let lower = [SIGNAL_VARIANCE_BOUNDS.0.ln(), LENGTH_SCALE_BOUNDS.0.ln()];
    let upper = [SIGNAL_VARIANCE_BOUNDS.1.ln(), LENGTH_SCALE_BOUNDS.1.ln()];
    let scales = [1.0, 10.0, 0.1];
    let objective = |p: &[f64]| -> f64 {
        let hp = GpHyperParams {
            signal_variance: p[0].exp(),
            periodic_length_scale: p[1].exp(),
            ..*init
        };
        match log_marginal_likelihood(times, values, &hp) {
            Ok(lml) => -lml,
            Err(_) => f64::INFINITY,
        }
    };

    let opts = NelderMeadOptions {
        max_evals: 200,
        f_tol: 1e-9,
        x_tol: 1e-7,
    };
    let mut outcomes: Vec<Option<(f64, [f64; 2])>> = vec![None; scales.len()];
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for &scale in &scales {
            let opts = opts.clone();
            handles.push(scope.spawn(move || {
                let start = [
                    (init.signal_variance * scale)
                        .clamp(SIGNAL_VARIANCE_BOUNDS.0, SIGNAL_VARIANCE_BOUNDS.1)
                        .ln(),
                    (init.periodic_length_scale * scale)
                        .clamp(LENGTH_SCALE_BOUNDS.0, LENGTH_SCALE_BOUNDS.1)
                        .ln(),
                ];
                minimize(objective, &start, &lower, &upper, &opts)
                    .ok()
                    .filter(|r| r.f.is_finite())
                    .map(|r| (-r.f, [r.x[0], r.x[1]]))
            }));
        }
        for (slot, handle) in outcomes.iter_mut().zip(handles) {
            *slot = handle.join().unwrap_or(None);
        }
    });

    let init_lml = log_marginal_likelihood(times, values, init).unwrap_or(f64::NEG_INFINITY);
    let mut best: Option<(f64, [f64; 2])> = None;
    for outcome in outcomes.into_iter().flatten() {
        let better = match &best {
            Some((lml, _)) => outcome.0 > *lml,
            None => true,
        };
        if better {
            best = Some(outcome);
        }
    }
    match best {
        Some((lml, p)) if lml > init_lml => Ok(FitOutcome {
            params: GpHyperParams {
                signal_variance: p[0].exp(),
                periodic_length_scale: p[1].exp(),
                ..*init
            },
            log_marginal: lml,
            improved: true,
        }),
        Some(_) | None if init_lml.is_finite() => Ok(FitOutcome {
            params: *init,
            log_marginal: init_lml,
            improved: false,
        }),
        _ => Err(Error::Gp(
            "hyperparameter fit failed from every start".into(),
        )),
    }
}

/// A fitted posterior: training window, Cholesky factor of the Gram matrix,
/// and the weight vector `alpha = K^-1 y`.
#[derive(Debug, Clone)]
pub struct GpModel {
    hp: GpHyperParams,
    jitter: f64,
    times: Vec<f64>,
    values: Vec<f64>,
    factor: CholeskyFactor,
    alpha: Vec<f64>,
}

impl GpModel {
    /// Factors the Gram matrix for the full training set, escalating jitter
    /// until it succeeds.
    pub fn fit(times: &[f64], values: &[f64], hp: GpHyperParams) -> Result<GpModel> {
        hp.validate()?;
        if times.len() != values.len() || times.is_empty() {
            return Err(Error::Dimension(format!(
                "times/values lengths {} vs {}",
                times.len(),
                values.len()
            )));
        }
        if times.iter().chain(values.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Gp("training data must be finite".into()));
        }
        let mut jitter = JITTER_START * hp.signal_variance;
        let cap = JITTER_CAP * hp.signal_variance;
        while jitter <= cap * (1.0 + 1e-12) {
            let k = gram(times, &hp, jitter);
            if let Ok(factor) = cholesky(&k) {
                let alpha = factor.solve(values);
                return Ok(GpModel {
                    hp,
                    jitter,
                    times: times.to_vec(),
                    values: values.to_vec(),
                    factor,
                    alpha,
                });
            }
            jitter *= JITTER_STEP;
        }
        Err(Error::Gp(format!(
            "gram matrix would not factor even at jitter {cap:.3e}"
        )))
    }

    pub fn hyperparams(&self) -> &GpHyperParams {
        &self.hp
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
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

    /// Appends one sample, extending the Cholesky factor by a bordered row
    /// (O(n^2)) instead of refactoring. Falls back to a full refit when the
    /// new pivot is not positive.
    pub fn extend(&mut self, t: f64, y: f64) -> Result<()> {
        if !(t.is_finite() && y.is_finite()) {
            return Err(Error::Gp("training data must be finite".into()));
        }
        let n = self.len();
        let k_new: Vec<f64> = self
            .times
            .iter()
            .map(|&ti| kernel_value(t - ti, &self.hp))
            .collect();
        let l_row = self.factor.solve_lower(&k_new);
        let k00 = kernel_value(0.0, &self.hp) + self.jitter;
        let pivot2 = k00 - dot(&l_row, &l_row);
        self.times.push(t);
        self.values.push(y);
        if pivot2 > 0.0 {
            let mut lower = Matrix::zeros(n + 1, n + 1);
            lower.set_block(0, 0, self.factor.lower());
            for (j, lj) in l_row.iter().enumerate() {
                lower.set(n, j, *lj);
            }
            lower.set(n, n, pivot2.sqrt());
            self.factor = CholeskyFactor::from_lower(lower)?;
            self.alpha = self.factor.solve(&self.values);
            Ok(())
        } else {
            // Refit from scratch; the ladder inside fit picks a larger jitter.
            *self = GpModel::fit(&self.times, &self.values, self.hp)?;
            Ok(())
        }
    }

    /// Slides a full uniform window one step: drops the oldest sample and
    /// appends the newest. The Gram matrix depends only on lags, so the
    /// existing factor is reused and only `alpha` is recomputed (O(n^2)).
    /// Returns an error when the new point does not continue the grid.
    pub fn slide(&mut self, t: f64, y: f64) -> Result<()> {
        let n = self.len();
        if n < 2 {
            return Err(Error::Gp("slide needs at least two samples".into()));
        }
        let dt = match uniform_spacing(&self.times) {
            Some(dt) => dt,
            None => {
                return Err(Error::Gp(
                    "slide requires a uniform time grid".into(),
                ))
            }
        };
        if t - self.times[n - 1] != dt {
            return Err(Error::Gp(format!(
                "slide expects the next grid point {} but got {t}",
                self.times[n - 1] + dt
            )));
        }
        if !y.is_finite() {
            return Err(Error::Gp("training data must be finite".into()));
        }
        self.times.rotate_left(1);
        self.values.rotate_left(1);
        self.times[n - 1] = t;
        self.values[n - 1] = y;
        self.alpha = self.factor.solve(&self.values);
        Ok(())
    }

    /// Replaces the training values without touching the factor (the Gram
    /// matrix depends only on times and hyperparameters). Used when an
    /// upstream zero-phase filter rewrites the whole window every sample.
    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Dimension(format!(
                "value count {} vs window size {}",
                values.len(),
                self.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Gp("training data must be finite".into()));
        }
        self.values = values.to_vec();
        self.alpha = self.factor.solve(values);
        Ok(())
    }

    /// Posterior mean and variance at each query time. Variances are clamped
    /// at zero (round-off can push them slightly negative at training
    /// points).
    pub fn predict(&self, query: &[f64]) -> Vec<(f64, f64)> {
        let prior = kernel_value(0.0, &self.hp) + self.jitter;
        query
            .iter()
            .map(|&t| {
                let k_star: Vec<f64> = self
                    .times
                    .iter()
                    .map(|&ti| kernel_value(t - ti, &self.hp))
                    .collect();
                let mean = dot(&k_star, &self.alpha);
                let v = self.factor.solve_lower(&k_star);
                let var = (prior - dot(&v, &v)).max(0.0);
                (mean, var)
            })
            .collect()
    }

    /// Posterior mean only; skips the variance back-substitution, which makes
    /// dense preview queries cheap.
    pub fn predict_mean(&self, query: &[f64]) -> Vec<f64> {
        query
            .iter()
            .map(|&t| {
                let mut mean = 0.0;
                for (ti, a) in self.times.iter().zip(&self.alpha) {
                    mean += kernel_value(t - ti, &self.hp) * a;
                }
                mean
            })
            .collect()
    }
}
