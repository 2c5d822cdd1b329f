//! Acceptance battery: the six headline requirements on the closed-loop
//! system, each reported as one `ACCEPT <n> <name>: PASS|FAIL (...)` line
//! (run with `--nocapture` for the full scoreboard; failures always print).
//!
//! The battery drives full seven-day runs at the default configuration
//! (seed 0, 2 mg/dL sensor noise, learner active after 2.5 days). Runs are
//! shared between criteria through `OnceLock` so each is paid for once.

use std::sync::OnceLock;
use std::time::Instant;

use gpmpc_core::config::SimConfig;
use gpmpc_core::gp::{self, GpHyperParams, GpModel, DAY_MINUTES};
use gpmpc_core::harness::{
    compute_statistics, make_scenario, run_closed_loop, ControllerKind, RunOutput, ScenarioKind,
    MEAL_MINUTE, SKIPPED_DAY,
};
use gpmpc_core::learner::{compute_residual, zero_phase_filter};
use gpmpc_core::model::{state, IsProfile, ModelSet, StateVector, STATE_DIM, U_BASAL};
use gpmpc_core::mpc::{MpcController, MpcParams, TerminalMode};
use gpmpc_core::numerics::{dot, zoh_discretize, Matrix};
use gpmpc_core::plant::{I_MI_BASAL_DEFAULT, MEAL_GAIN_DEFAULT};

/// Learner activation time of the default configuration [min]; summary
/// statistics are taken from here so both controllers are scored on the
/// window where they actually differ.
const ACTIVATION: f64 = 3600.0;

/// Wall-clock budget for one seven-day run [s].
const RUN_BUDGET_SECONDS: f64 = 300.0;

struct TimedRun {
    run: RunOutput,
    wall: f64,
}

fn timed_run(kind: ScenarioKind, controller: ControllerKind, cadence: usize) -> TimedRun {
    let scenario = make_scenario(kind, controller);
    let mut config = SimConfig::default();
    config.learner.refit_cadence = cadence;
    let start = Instant::now();
    let run = run_closed_loop(&scenario, &config).expect("seven-day run failed");
    TimedRun {
        run,
        wall: start.elapsed().as_secs_f64(),
    }
}

fn fasting_mpc() -> &'static TimedRun {
    static RUN: OnceLock<TimedRun> = OnceLock::new();
    RUN.get_or_init(|| timed_run(ScenarioKind::Fasting, ControllerKind::Mpc, 72))
}

fn fasting_gp() -> &'static TimedRun {
    static RUN: OnceLock<TimedRun> = OnceLock::new();
    RUN.get_or_init(|| timed_run(ScenarioKind::Fasting, ControllerKind::GpMpc, 72))
}

fn announced_mpc() -> &'static TimedRun {
    static RUN: OnceLock<TimedRun> = OnceLock::new();
    RUN.get_or_init(|| timed_run(ScenarioKind::AnnouncedMeals, ControllerKind::Mpc, 72))
}

fn announced_gp() -> &'static TimedRun {
    static RUN: OnceLock<TimedRun> = OnceLock::new();
    RUN.get_or_init(|| timed_run(ScenarioKind::AnnouncedMeals, ControllerKind::GpMpc, 72))
}

fn skipped_gp() -> &'static TimedRun {
    static RUN: OnceLock<TimedRun> = OnceLock::new();
    RUN.get_or_init(|| timed_run(ScenarioKind::SkippedMeal, ControllerKind::GpMpc, 72))
}

fn every_sample_gp() -> &'static TimedRun {
    static RUN: OnceLock<TimedRun> = OnceLock::new();
    RUN.get_or_init(|| timed_run(ScenarioKind::Fasting, ControllerKind::GpMpc, 1))
}

fn all_runs() -> [&'static TimedRun; 6] {
    [
        fasting_mpc(),
        fasting_gp(),
        announced_mpc(),
        announced_gp(),
        skipped_gp(),
        every_sample_gp(),
    ]
}

/// Prints the scoreboard line for a criterion, then enforces it.
fn check(n: usize, name: &str, pass: bool, details: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("ACCEPT {n} {name}: {verdict} ({details})");
    assert!(pass, "ACCEPT {n} {name}: FAIL ({details})");
}

/// Names of the sub-conditions that failed, or an empty string.
fn failing_flags(flags: &[(&str, bool)]) -> String {
    let bad: Vec<&str> = flags.iter().filter(|f| !f.1).map(|f| f.0).collect();
    if bad.is_empty() {
        String::new()
    } else {
        format!(" | failing: {}", bad.join(", "))
    }
}

/// True equivalent disturbance over [t, t+5) from the recorded plant states:
/// sensitivity at the interval midpoint, insulin averaged over the endpoints.
fn true_disturbance(run: &RunOutput, profile: &IsProfile) -> Vec<f64> {
    let states = &run.plant_states;
    (1..states.len())
        .map(|k| {
            let t_mid = run.records[k - 1].t + 2.5;
            let ins = 0.5
                * (states[k - 1][state::INTERSTITIAL_INSULIN]
                    + states[k][state::INTERSTITIAL_INSULIN]);
            (profile.value_at(t_mid) - 1.0) * (ins + I_MI_BASAL_DEFAULT)
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    num / (da.sqrt() * db.sqrt()).max(f64::MIN_POSITIVE)
}

#[test]
fn accept_1_fasting_regulation() {
    let mpc = fasting_mpc();
    let gp = fasting_gp();
    let sm = compute_statistics(&mpc.run.records, ACTIVATION);
    let sg = compute_statistics(&gp.run.records, ACTIVATION);
    let slowest = all_runs()
        .iter()
        .map(|r| r.wall)
        .fold(0.0f64, f64::max);

    let flags = [
        ("gp_mean", (sg.mean - 110.0).abs() < 3.0),
        ("gp_sd", sg.sd <= 0.5 * sm.sd),
        ("gp_tight", sg.pct_in_80_140 >= 99.0),
        ("gp_morning", (sg.bg_at_0700 - 110.0).abs() < 5.0),
        ("mpc_loose", sm.pct_in_80_140 < 95.0),
        (
            "morning_gap",
            (sm.bg_at_0700 - 110.0).abs() >= (sg.bg_at_0700 - 110.0).abs() + 10.0,
        ),
        ("runtime", slowest <= RUN_BUDGET_SECONDS),
    ];

    let details = format!(
        "gp mean={:.1} sd={:.2} tight={:.1}% bg0700={:.1} | mpc mean={:.1} sd={:.2} tight={:.1}% bg0700={:.1} | slowest run {:.1}s{}",
        sg.mean, sg.sd, sg.pct_in_80_140, sg.bg_at_0700,
        sm.mean, sm.sd, sm.pct_in_80_140, sm.bg_at_0700, slowest,
        failing_flags(&flags)
    );
    check(1, "fasting regulation", flags.iter().all(|f| f.1), &details);
}

#[test]
fn accept_2_announced_meals() {
    let mpc = announced_mpc();
    let gp = announced_gp();
    let sm = compute_statistics(&mpc.run.records, ACTIVATION);
    let sg = compute_statistics(&gp.run.records, ACTIVATION);
    let full_m = compute_statistics(&mpc.run.records, 0.0);
    let full_g = compute_statistics(&gp.run.records, 0.0);

    let flags = [
        ("no_hyper", sg.pct_above_180 == 0.0),
        ("tight_gap", sg.pct_in_80_140 >= sm.pct_in_80_140 + 10.0),
        (
            "no_hypo",
            full_m.pct_below_70 == 0.0 && full_g.pct_below_70 == 0.0,
        ),
    ];

    let details = format!(
        "gp >180={:.2}% tight={:.1}% | mpc >180={:.2}% tight={:.1}% | full-run <70: gp={:.2}% mpc={:.2}%{}",
        sg.pct_above_180, sg.pct_in_80_140, sm.pct_above_180, sm.pct_in_80_140,
        full_g.pct_below_70, full_m.pct_below_70,
        failing_flags(&flags)
    );
    check(2, "announced meals", flags.iter().all(|f| f.1), &details);
}

#[test]
fn accept_3_skipped_meal() {
    let skipped = skipped_gp();
    let announced = announced_gp();
    let ss = compute_statistics(&skipped.run.records, ACTIVATION);
    let sa = compute_statistics(&announced.run.records, ACTIVATION);

    // The day-5 meal is the skipped one; glucose must hold in a +-3 h window.
    let meal_t = SKIPPED_DAY as f64 * DAY_MINUTES + MEAL_MINUTE;
    let window_min = skipped
        .run
        .records
        .iter()
        .filter(|r| (r.t - meal_t).abs() <= 180.0)
        .map(|r| r.bg_true)
        .fold(f64::INFINITY, f64::min);

    let no_dip = window_min >= 80.0;
    let mean_close = (ss.mean - sa.mean).abs() < 3.0;
    let tight_close = (ss.pct_in_80_140 - sa.pct_in_80_140).abs() < 3.0;

    let details = format!(
        "window min={window_min:.1} | skipped mean={:.1} tight={:.1}% vs announced mean={:.1} tight={:.1}%",
        ss.mean, ss.pct_in_80_140, sa.mean, sa.pct_in_80_140
    );
    check(3, "skipped meal", no_dip && mean_close && tight_close, &details);
}

#[test]
fn accept_4_predictive_phase_lead() {
    // Cross-correlation between the insulin deviation and the (negated)
    // sensitivity profile over days 4-7 of the fasting runs. A controller
    // that anticipates the rhythm peaks at a negative lag; a purely reactive
    // one lags the plant response and peaks at a non-negative lag.
    let lag_of = |timed: &TimedRun| -> (i64, f64) {
        let run = &timed.run;
        let base: Vec<usize> = run
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.t >= 3.0 * DAY_MINUTES && r.t < 7.0 * DAY_MINUTES)
            .map(|(k, _)| k)
            .collect();
        let mut best = (0i64, f64::NEG_INFINITY);
        for lag in -72i64..=72 {
            let mut u = Vec::with_capacity(base.len());
            let mut s = Vec::with_capacity(base.len());
            for &k in &base {
                let j = k as i64 + lag;
                if j < 0 || j as usize >= run.records.len() {
                    continue;
                }
                u.push(run.records[j as usize].u_applied - U_BASAL);
                s.push(-run.scenario.profile.value_at(run.records[k].t));
            }
            let c = pearson(&u, &s);
            if c > best.1 {
                best = (lag, c);
            }
        }
        best
    };

    let (gp_lag, gp_corr) = lag_of(fasting_gp());
    let (mpc_lag, mpc_corr) = lag_of(fasting_mpc());
    let pass = gp_lag < 0 && mpc_lag >= 0;
    let details = format!(
        "gp-mpc peak lag {} min (corr {:.3}), mpc peak lag {} min (corr {:.3})",
        gp_lag * 5,
        gp_corr,
        mpc_lag * 5,
        mpc_corr
    );
    check(4, "predictive phase lead", pass, &details);
}

/// Conventional Kalman filter sharing the estimator's tuning, used to replay
/// a recorded run and pin the unscented filter to the linear-optimal answer.
struct ReplayKf {
    a: Matrix,
    b: Matrix,
    q: Matrix,
    r: f64,
    x: StateVector,
    p: Matrix,
}

impl ReplayKf {
    fn new(model: &ModelSet, config: &SimConfig) -> ReplayKf {
        let u = &config.ukf;
        let mut p = Matrix::zeros(STATE_DIM, STATE_DIM);
        let mut q = Matrix::zeros(STATE_DIM, STATE_DIM);
        for i in 0..STATE_DIM {
            p.set(i, i, u.p0_diag[i]);
            q.set(i, i, u.q_diag[i]);
            for j in 0..STATE_DIM {
                let v = q.get(i, j)
                    + u.q_disturbance * model.b_kis_d.get(i, 0) * model.b_kis_d.get(j, 0);
                q.set(i, j, v);
            }
        }
        ReplayKf {
            a: model.a_hat_d.clone(),
            b: model.b_d.clone(),
            q,
            r: u.r,
            x: [0.0; STATE_DIM],
            p,
        }
    }

    fn update(&mut self, bg: f64) {
        let s = self.p.get(0, 0) + self.r;
        let innovation = bg - 110.0 - self.x[0];
        let gain: Vec<f64> = (0..STATE_DIM).map(|i| self.p.get(i, 0) / s).collect();
        for i in 0..STATE_DIM {
            self.x[i] += gain[i] * innovation;
        }
        let row0: Vec<f64> = (0..STATE_DIM).map(|j| self.p.get(0, j)).collect();
        for i in 0..STATE_DIM {
            for j in 0..STATE_DIM {
                let v = self.p.get(i, j) - gain[i] * row0[j];
                self.p.set(i, j, v);
            }
        }
    }

    fn predict(&mut self, u_dev: f64) {
        let mut next = [0.0; STATE_DIM];
        for i in 0..STATE_DIM {
            next[i] = dot(self.a.row(i), &self.x) + self.b.get(i, 0) * u_dev;
        }
        self.x = next;
        self.p = self
            .a
            .mul(&self.p)
            .unwrap()
            .mul(&self.a.transpose())
            .unwrap()
            .add(&self.q)
            .unwrap();
    }
}

/// Dense inverse by Gauss-Jordan elimination with partial pivoting, plus the
/// log-determinant accumulated from the pivots. Deliberately a different
/// algorithm from anything in the library.
fn invert_logdet(m: &Matrix) -> (Matrix, f64) {
    let n = m.rows();
    let mut a = m.clone();
    let mut inv = Matrix::identity(n);
    let mut log_det = 0.0;
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| {
                a.get(i, col)
                    .abs()
                    .partial_cmp(&a.get(j, col).abs())
                    .unwrap()
            })
            .unwrap();
        if pivot_row != col {
            for j in 0..n {
                let tmp = a.get(col, j);
                a.set(col, j, a.get(pivot_row, j));
                a.set(pivot_row, j, tmp);
                let tmp = inv.get(col, j);
                inv.set(col, j, inv.get(pivot_row, j));
                inv.set(pivot_row, j, tmp);
            }
        }
        let pivot = a.get(col, col);
        assert!(pivot.abs() > 0.0, "singular matrix in oracle inversion");
        log_det += pivot.abs().ln();
        for j in 0..n {
            a.set(col, j, a.get(col, j) / pivot);
            inv.set(col, j, inv.get(col, j) / pivot);
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let factor = a.get(i, col);
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                a.set(i, j, a.get(i, j) - factor * a.get(col, j));
                inv.set(i, j, inv.get(i, j) - factor * inv.get(col, j));
            }
        }
    }
    (inv, log_det)
}

#[test]
fn accept_5_exactness_suites() {
    let mut oks: Vec<(&str, bool, String)> = Vec::new();
    let model = ModelSet::default_model();
    let config = SimConfig::default();

    // (a) Unscented filter vs conventional Kalman filter, replayed over the
    // recorded seven-day fasting run (no meals, so no gut injections).
    {
        let gp = fasting_gp();
        let mut kf = ReplayKf::new(&model, &config);
        let mut worst = 0.0f64;
        for r in &gp.run.records {
            kf.update(r.bg_meas);
            for i in 0..STATE_DIM {
                worst = worst.max((kf.x[i] - r.x_hat[i]).abs());
            }
            kf.predict(r.u_applied - U_BASAL);
        }
        oks.push(("ukf_vs_kf", worst < 1e-6, format!("{worst:.2e}")));
    }

    // (b) Residual recovery on discrete-model synthetic injections, with an
    // announced meal injected mid-run.
    {
        let meal_step = 100usize;
        let meal_mass = MEAL_GAIN_DEFAULT * 40.0;
        let mut x = [0.0; STATE_DIM];
        let mut worst = 0.0f64;
        for k in 0..500usize {
            let w = 12.0 * (2.0 * std::f64::consts::PI * k as f64 / 288.0).sin() + 3.0;
            let u_dev = 0.05 * (k as f64 / 17.0).sin();
            let mass = if k == meal_step { meal_mass } else { 0.0 };
            let mut x_in = x;
            x_in[state::INTESTINE_GLUCOSE_FLOW] += mass;
            let x_next = model.step_discrete(&x_in, u_dev, w);
            let recovered = compute_residual(&model, &x, &x_next, u_dev, mass);
            worst = worst.max((recovered - w).abs());
            x = x_next;
        }
        oks.push(("discrete_residual", worst < 1e-10, format!("{worst:.2e}")));
    }

    // (c) Residual vs continuous-plant truth on a noise-free run; the only
    // error left is the hold-vs-continuous mismatch inside each interval.
    // Uses the learning controller's arm so the filter is the one whose
    // residuals actually feed training.
    {
        let mut scenario = make_scenario(ScenarioKind::Fasting, ControllerKind::GpMpc);
        scenario.duration_days = 2.0;
        let mut cfg = SimConfig::default();
        cfg.noise_sd = 0.0;
        cfg.duration_days = 2.0;
        let out = run_closed_loop(&scenario, &cfg).unwrap();
        let truth = true_disturbance(&out, &out.scenario.profile.clone());
        let mut sq_err = 0.0;
        let mut sq_sig = 0.0;
        for k in 20..out.records.len() {
            let err = out.records[k].u_kis_raw - truth[k - 1];
            sq_err += err * err;
            sq_sig += truth[k - 1] * truth[k - 1];
        }
        let ratio = (sq_err / sq_sig).sqrt();
        oks.push((
            "continuous_residual_rms",
            ratio < 0.05,
            format!("{:.2}%", 100.0 * ratio),
        ));
    }

    // (d) Two-step controller vs a brute-force grid over both inputs, in the
    // penalty regime (the terminal target is unreachable in two steps from a
    // large glucose offset, and the controller must report that).
    {
        let params = MpcParams {
            horizon: 2,
            ..MpcParams::default()
        };
        let mpc = MpcController::new(&model, params.clone()).unwrap();
        let mut x0 = [0.0; STATE_DIM];
        x0[state::PLASMA_GLUCOSE] = 20.0;
        x0[state::INTERSTITIAL_INSULIN] = -0.4;
        let preview = [-8.0, -8.0];
        let (u_abs, info) = mpc.mpc_step(&x0, &preview).unwrap();
        let penalty_mode = matches!(info.terminal_mode, TerminalMode::Penalty);

        let u_ss = mpc.steady_state_input(-8.0) - U_BASAL;
        let cost = |u0: f64, u1: f64| -> f64 {
            let x1 = model.step_discrete(&x0, u0, preview[0]);
            let x2 = model.step_discrete(&x1, u1, preview[1]);
            let y1 = x1[state::PLASMA_GLUCOSE];
            let y2 = x2[state::PLASMA_GLUCOSE];
            params.q * (y1 * y1 + y2 * y2)
                + params.r * ((u0 - u_ss).powi(2) + (u1 - u_ss).powi(2))
                + params.terminal_penalty * y2 * y2
        };
        let lo = -U_BASAL;
        let hi = params.u_max - U_BASAL;
        let n_grid = 500usize;
        let mut best = (f64::INFINITY, 0.0f64);
        for i in 0..=n_grid {
            let u0 = lo + (hi - lo) * i as f64 / n_grid as f64;
            for j in 0..=n_grid {
                let u1 = lo + (hi - lo) * j as f64 / n_grid as f64;
                let c = cost(u0, u1);
                if c < best.0 {
                    best = (c, u0);
                }
            }
        }
        let diff = (u_abs - U_BASAL - best.1).abs();
        oks.push((
            "qp_vs_grid",
            penalty_mode && diff < 2e-3,
            format!("{diff:.2e}, mode {}", info.terminal_mode),
        ));
    }

    // (e) Every optimizer call across all six seven-day runs satisfied its
    // optimality conditions.
    {
        let mut worst = 0.0f64;
        for timed in all_runs() {
            for r in &timed.run.records {
                worst = worst.max(r.qp_kkt_residual);
            }
        }
        oks.push(("kkt_every_step", worst < 1e-6, format!("{worst:.2e}")));
    }

    // (f) Fast-path marginal likelihood vs a dense-inverse oracle.
    {
        let hp = GpHyperParams {
            signal_variance: 25.0,
            periodic_length_scale: 0.8,
            ..GpHyperParams::default()
        };
        let times: Vec<f64> = (0..96).map(|k| k as f64 * 5.0).collect();
        let omega = 2.0 * std::f64::consts::PI / DAY_MINUTES;
        let values: Vec<f64> = times
            .iter()
            .map(|&t| 4.0 * (omega * t).sin() + 1.5 * (2.0 * omega * t + 0.4).cos())
            .collect();
        let fast = gp::log_marginal_likelihood(&times, &values, &hp).unwrap();

        let n = times.len();
        let jitter = 1e-6 * hp.signal_variance;
        let mut k = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let v = gp::kernel_value(times[i] - times[j], &hp);
                k.set(i, j, v + if i == j { jitter } else { 0.0 });
            }
        }
        let (inv, log_det) = invert_logdet(&k);
        let alpha = inv.mul_vec(&values).unwrap();
        let oracle = -0.5 * dot(&values, &alpha)
            - 0.5 * log_det
            - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        let diff = (fast - oracle).abs();
        oks.push(("lml_vs_dense_inverse", diff < 1e-8, format!("{diff:.2e}")));
    }

    // (g) Noiseless two-harmonic daily signal, predicted a day past the data.
    {
        let omega = 2.0 * std::f64::consts::PI / DAY_MINUTES;
        let signal = |t: f64| (omega * t).sin() + 0.5 * (2.0 * omega * t + 0.7).sin();
        let times: Vec<f64> = (0..864).map(|k| k as f64 * 5.0).collect();
        let values: Vec<f64> = times.iter().map(|&t| signal(t)).collect();
        let fit = gp::fit_hyperparams(&times, &values, &GpHyperParams::default()).unwrap();
        let gp_model = GpModel::fit(&times, &values, fit.params).unwrap();
        let query: Vec<f64> = (0..288)
            .map(|k| 3.0 * DAY_MINUTES + 1440.0 + k as f64 * 5.0)
            .collect();
        let preds = gp_model.predict_mean(&query);
        let p2p = 3.0;
        let mut worst = 0.0f64;
        for (&t, &m) in query.iter().zip(&preds) {
            worst = worst.max((m - signal(t)).abs());
        }
        oks.push((
            "gp_day_ahead",
            worst < 0.02 * p2p,
            format!("{:.2}% of swing", 100.0 * worst / p2p),
        ));
    }

    // (h) The smoothing filter adds no phase: cross-correlation of filtered
    // vs raw sinusoid peaks at zero lag.
    {
        let raw: Vec<f64> = (0..288)
            .map(|k| (2.0 * std::f64::consts::PI * k as f64 * 5.0 / 240.0).sin())
            .collect();
        let (filtered, applied) = zero_phase_filter(&raw);
        let mut best = (0i64, f64::NEG_INFINITY);
        for lag in -20i64..=20 {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for k in 0..raw.len() as i64 {
                let j = k + lag;
                if j < 0 || j >= raw.len() as i64 {
                    continue;
                }
                a.push(filtered[k as usize]);
                b.push(raw[j as usize]);
            }
            let c = pearson(&a, &b);
            if c > best.1 {
                best = (lag, c);
            }
        }
        oks.push((
            "filter_zero_lag",
            applied && best.0 == 0,
            format!("peak at lag {}", best.0),
        ));
    }

    // (i) Hold-equivalent discretization vs the closed-form scalar answer,
    // for a decaying and a growing pole.
    {
        let mut worst = 0.0f64;
        for (a, b) in [(-0.23, 1.7), (0.31, -0.6)] {
            let am = Matrix::from_rows(&[vec![a]]).unwrap();
            let bm = Matrix::from_rows(&[vec![b]]).unwrap();
            let (ad, bd) = zoh_discretize(&am, &bm, 5.0).unwrap();
            let ad_true = (a * 5.0_f64).exp();
            let bd_true = (ad_true - 1.0) / a * b;
            worst = worst.max((ad.get(0, 0) - ad_true).abs());
            worst = worst.max((bd.get(0, 0) - bd_true).abs());
        }
        oks.push(("zoh_scalar", worst < 1e-10, format!("{worst:.2e}")));
    }

    let pass = oks.iter().all(|(_, ok, _)| *ok);
    let details = oks
        .iter()
        .map(|(name, ok, d)| format!("{name}={d}{}", if *ok { "" } else { " [FAIL]" }))
        .collect::<Vec<_>>()
        .join(", ");
    check(5, "exactness suites", pass, &details);
}

#[test]
fn accept_6_refit_cadence_robustness() {
    let every = every_sample_gp();
    let six_hourly = fasting_gp();
    let se = compute_statistics(&every.run.records, ACTIVATION);
    let ss = compute_statistics(&six_hourly.run.records, ACTIVATION);
    let mean_diff = (se.mean - ss.mean).abs();
    let tight_diff = (se.pct_in_80_140 - ss.pct_in_80_140).abs();
    let details = format!(
        "mean diff {:.2} mg/dL ({} vs {} refits), tight diff {:.2} points",
        mean_diff, every.run.refit_count, six_hourly.run.refit_count, tight_diff
    );
    check(
        6,
        "refit cadence robustness",
        mean_diff < 1.0 && tight_diff < 1.0,
        &details,
    );
}
