//! Closed-loop experiment driver.
//!
//! Wires plant, estimator, disturbance learner and controller into the
//! five-minute sampling loop, runs named scenarios, and turns the resulting
//! trace into zone statistics or CSV. The per-step order is fixed: measure,
//! filter update, residual bookkeeping, disturbance preview, control solve,
//! record, then filter prediction and plant integration into the next
//! interval.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::error::Result;
use crate::estimator::Ukf;
use crate::gp::DAY_MINUTES;
use crate::learner::{compute_residual, DisturbanceLearner};
use crate::model::{IsProfile, ModelSet, StateVector, STATE_DIM};
use crate::mpc::{MpcController, TerminalMode};
use crate::plant::Plant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    /// Constrained MPC alone; the disturbance preview stays zero.
    Mpc,
    /// MPC fed by the learned circadian disturbance preview.
    GpMpc,
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ControllerKind::Mpc => write!(f, "mpc"),
            ControllerKind::GpMpc => write!(f, "gp-mpc"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    /// No carbohydrate intake for the whole run.
    Fasting,
    /// One announced 50 g meal at 07:00 every day.
    AnnouncedMeals,
    /// The announced pattern with the fifth day's meal not eaten (and not
    /// announced).
    SkippedMeal,
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScenarioKind::Fasting => write!(f, "fasting"),
            ScenarioKind::AnnouncedMeals => write!(f, "announced"),
            ScenarioKind::SkippedMeal => write!(f, "skipped"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MealEvent {
    /// Minutes from the start of the run.
    pub time: f64,
    pub grams: f64,
    /// Announced meals are injected into the estimator's gut state at their
    /// start; unannounced meals hit only the plant.
    pub announced: bool,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub duration_days: f64,
    pub meals: Vec<MealEvent>,
    /// True insulin-sensitivity profile driving the plant.
    pub profile: IsProfile,
    pub controller: ControllerKind,
}

/// Daily meal time for the standard scenarios [minutes into the day].
pub const MEAL_MINUTE: f64 = 420.0;
/// Carbohydrate size of the standard meals [g].
pub const MEAL_GRAMS: f64 = 50.0;
/// Day (zero-based) whose meal the skipped scenario removes.
pub const SKIPPED_DAY: usize = 4;

pub fn make_scenario(kind: ScenarioKind, controller: ControllerKind) -> Scenario {
    scenario_with_duration(kind, controller, 7.0)
}

/// The standard scenario stretched or shortened to `duration_days`: one
/// announced meal per covered day (minus the skipped one), same naming.
pub fn scenario_with_duration(
    kind: ScenarioKind,
    controller: ControllerKind,
    duration_days: f64,
) -> Scenario {
    let days = duration_days.ceil().max(0.0) as usize;
    let meals = match kind {
        ScenarioKind::Fasting => Vec::new(),
        ScenarioKind::AnnouncedMeals | ScenarioKind::SkippedMeal => (0..days)
            .filter(|&day| kind != ScenarioKind::SkippedMeal || day != SKIPPED_DAY)
            .map(|day| MealEvent {
                time: day as f64 * DAY_MINUTES + MEAL_MINUTE,
                grams: MEAL_GRAMS,
                announced: true,
            })
            .filter(|meal| meal.time < duration_days * DAY_MINUTES)
            .collect(),
    };
    Scenario {
        name: format!("{kind}-{controller}"),
        duration_days,
        meals,
        profile: IsProfile::default(),
        controller,
    }
}

/// One control interval of the trace. Residual columns describe the interval
/// that ended at `t` and are zero on the first step; the prediction column
/// is the learner's disturbance estimate for the interval starting at `t`.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: f64,
    pub bg_true: f64,
    pub bg_meas: f64,
    /// Absolute insulin command applied over [t, t+ts).
    pub u_applied: f64,
    pub k_is_true: f64,
    pub u_kis_raw: f64,
    pub u_kis_filtered: f64,
    pub u_kis_predicted: f64,
    /// State estimate after the measurement update at `t`.
    pub x_hat: [f64; STATE_DIM],
    pub qp_status: &'static str,
    pub qp_kkt_residual: f64,
    pub qp_active_set_size: usize,
    pub qp_terminal_mode: &'static str,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub scenario: Scenario,
    pub records: Vec<StepRecord>,
    /// True plant state at each record time.
    pub plant_states: Vec<StateVector>,
    /// Learner disturbance prediction a full horizon ahead of each step
    /// (zero while the learner is inactive).
    pub preview_ahead: Vec<f64>,
    /// Hyperparameter refits performed by the learner.
    pub refit_count: usize,
}

pub fn run_closed_loop(scenario: &Scenario, config: &SimConfig) -> Result<RunOutput> {
    config.validate()?;
    let model = ModelSet::default_model();
    let mut plant = Plant::new(
        &model,
        scenario.profile.clone(),
        config.i_mi_basal,
        config.meal_gain,
    );
    // The learner reads the circadian model error out of the state estimate,
    // which needs the disturbance-shaped process noise of `config.ukf`; the
    // plain-MPC baseline has no learner and runs its conventional filter.
    let ukf_config = match scenario.controller {
        ControllerKind::GpMpc => &config.ukf,
        ControllerKind::Mpc => &config.baseline_ukf,
    };
    let mut ukf = Ukf::new(&model, ukf_config)?;
    let mpc = MpcController::new(&model, config.mpc.clone())?;
    let mut learner_config = config.learner.clone();
    learner_config.build_models = scenario.controller == ControllerKind::GpMpc;
    let mut learner = DisturbanceLearner::new(learner_config, config.gp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let steps = (scenario.duration_days * DAY_MINUTES / model.ts).round() as usize;
    let horizon = config.mpc.horizon;
    let mut records = Vec::with_capacity(steps);
    let mut plant_states = Vec::with_capacity(steps);
    let mut preview_ahead = Vec::with_capacity(steps);
    // Posterior state, applied input and announced gut mass of the previous
    // interval, for the one-step-lagged residual.
    let mut prev: Option<(StateVector, f64, f64)> = None;

    for _ in 0..steps {
        let t = plant.time();
        let bg_true = plant.bg_true();
        let bg_meas = plant.measure(config.noise_sd, &mut rng);
        ukf.update(bg_meas)?;
        let posterior = *ukf.state();

        let mut u_kis_raw = 0.0;
        let mut u_kis_filtered = 0.0;
        if let Some((x_prev, u_prev, meal_prev)) = prev {
            u_kis_raw = compute_residual(&model, &x_prev, &posterior, u_prev, meal_prev);
            learner.push(t - model.ts, u_kis_raw)?;
            u_kis_filtered = learner.last_filtered().unwrap_or(0.0);
        }

        // Stage disturbances for [t, t+ts), ..., plus one horizon-ahead
        // point kept for diagnostics.
        let query: Vec<f64> = (0..=horizon).map(|j| t + j as f64 * model.ts).collect();
        let preview = learner.preview(&query);
        let (u_abs, info) = mpc.mpc_step(&posterior, &preview[..horizon])?;
        let u_dev = u_abs - model.u_basal;

        records.push(StepRecord {
            t,
            bg_true,
            bg_meas,
            u_applied: u_abs,
            k_is_true: scenario.profile.value_at(t),
            u_kis_raw,
            u_kis_filtered,
            u_kis_predicted: preview[0],
            x_hat: posterior,
            qp_status: "optimal",
            qp_kkt_residual: info.kkt_residual,
            qp_active_set_size: info.active_bounds,
            qp_terminal_mode: match info.terminal_mode {
                TerminalMode::Equality => "equality",
                TerminalMode::Penalty => "penalty",
            },
        });
        plant_states.push(*plant.state());
        preview_ahead.push(preview[horizon]);

        let interval_end = t + model.ts;
        let plant_meals: Vec<(f64, f64)> = scenario
            .meals
            .iter()
            .filter(|m| m.time >= t && m.time < interval_end)
            .map(|m| (m.time, m.grams))
            .collect();
        let announced_mass: f64 = scenario
            .meals
            .iter()
            .filter(|m| m.announced && m.time >= t && m.time < interval_end)
            .map(|m| config.meal_gain * m.grams)
            .sum();

        ukf.predict(u_dev, announced_mass)?;
        plant.step(u_dev, &plant_meals)?;
        prev = Some((posterior, u_dev, announced_mass));
    }

    Ok(RunOutput {
        scenario: scenario.clone(),
        records,
        plant_states,
        preview_ahead,
        refit_count: learner.refit_count(),
    })
}

/// Glycemic summary of a trace segment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZoneStatistics {
    /// Samples included (those with t >= the cutoff).
    pub samples: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub sd: f64,
    pub pct_below_70: f64,
    pub pct_in_70_180: f64,
    pub pct_in_80_140: f64,
    pub pct_above_180: f64,
    /// Mean glucose over the 07:00 samples of the included days.
    pub bg_at_0700: f64,
}

pub fn compute_statistics(records: &[StepRecord], from_t: f64) -> ZoneStatistics {
    statistics_from_series(records.iter().map(|r| (r.t, r.bg_true)), from_t)
}

/// Same summary from bare (time, glucose) pairs, for re-deriving statistics
/// out of an exported trace.
pub fn statistics_from_series<I>(series: I, from_t: f64) -> ZoneStatistics
where
    I: IntoIterator<Item = (f64, f64)>,
{
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut below_70 = 0usize;
    let mut in_70_180 = 0usize;
    let mut in_80_140 = 0usize;
    let mut above_180 = 0usize;
    let mut morning_sum = 0.0;
    let mut morning_n = 0usize;
    for (t, bg) in series {
        if t < from_t {
            continue;
        }
        n += 1;
        sum += bg;
        sum_sq += bg * bg;
        if bg < 70.0 {
            below_70 += 1;
        }
        if (70.0..=180.0).contains(&bg) {
            in_70_180 += 1;
        }
        if (80.0..=140.0).contains(&bg) {
            in_80_140 += 1;
        }
        if bg > 180.0 {
            above_180 += 1;
        }
        if t.rem_euclid(DAY_MINUTES) == MEAL_MINUTE {
            morning_sum += bg;
            morning_n += 1;
        }
    }
    let mean = if n > 0 { sum / n as f64 } else { f64::NAN };
    let variance = if n > 0 {
        (sum_sq / n as f64 - mean * mean).max(0.0)
    } else {
        f64::NAN
    };
    let pct = |c: usize| {
        if n > 0 {
            100.0 * c as f64 / n as f64
        } else {
            f64::NAN
        }
    };
    ZoneStatistics {
        samples: n,
        mean,
        sd: variance.sqrt(),
        pct_below_70: pct(below_70),
        pct_in_70_180: pct(in_70_180),
        pct_in_80_140: pct(in_80_140),
        pct_above_180: pct(above_180),
        bg_at_0700: if morning_n > 0 {
            morning_sum / morning_n as f64
        } else {
            f64::NAN
        },
    }
}

pub const CSV_HEADER: &str = "t,bg_true,bg_meas,u_applied,k_is_true,u_kis_raw,u_kis_filtered,\
u_kis_predicted,x_hat_1,x_hat_2,x_hat_3,x_hat_4,x_hat_5,x_hat_6,x_hat_7,x_hat_8,x_hat_9,\
x_hat_10,x_hat_11,x_hat_12,qp_status,qp_kkt_residual,qp_active_set_size,qp_terminal_mode";

/// Render a trace as CSV (LF line endings, full-precision floats).
pub fn csv_string(records: &[StepRecord]) -> String {
    use std::fmt::Write;
    let mut out = String::with_capacity(64 + records.len() * 512);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        write!(
            out,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.t,
            r.bg_true,
            r.bg_meas,
            r.u_applied,
            r.k_is_true,
            r.u_kis_raw,
            r.u_kis_filtered,
            r.u_kis_predicted
        )
        .expect("string write");
        for v in r.x_hat.iter() {
            write!(out, ",{v:.16e}").expect("string write");
        }
        write!(
            out,
            ",{},{:.16e},{},{}",
            r.qp_status, r.qp_kkt_residual, r.qp_active_set_size, r.qp_terminal_mode
        )
        .expect("string write");
        out.push('\n');
    }
    out
}
