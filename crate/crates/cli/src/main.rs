//! Command-line front end: runs closed-loop scenarios, writes CSV traces and
//! JSON summaries, recomputes summaries from saved traces, and performs the
//! operating-point calibrations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gpmpc_core::config::SimConfig;
use gpmpc_core::harness::{
    compute_statistics, csv_string, run_closed_loop, scenario_with_duration,
    statistics_from_series, ControllerKind, ScenarioKind, ZoneStatistics,
};
use gpmpc_core::model::U_BASAL;
use gpmpc_core::plant::{basal_interstitial_insulin, calibrate_meal_gain};

#[derive(Parser)]
#[command(
    name = "gpmpc",
    version,
    about = "Closed-loop glucose control simulator with an online-learned circadian disturbance model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario (or all six) and write CSV traces plus JSON summaries.
    Simulate(SimulateArgs),
    /// Compute operating-point calibrations and write them as a config fragment.
    Calibrate(CalibrateArgs),
    /// Recompute the JSON summary from a previously written CSV trace.
    Stats(StatsArgs),
}

#[derive(Copy, Clone, ValueEnum)]
enum ScenarioArg {
    Fasting,
    Announced,
    Skipped,
}

impl From<ScenarioArg> for ScenarioKind {
    fn from(value: ScenarioArg) -> ScenarioKind {
        match value {
            ScenarioArg::Fasting => ScenarioKind::Fasting,
            ScenarioArg::Announced => ScenarioKind::AnnouncedMeals,
            ScenarioArg::Skipped => ScenarioKind::SkippedMeal,
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum ControllerArg {
    Mpc,
    GpMpc,
}

impl From<ControllerArg> for ControllerKind {
    fn from(value: ControllerArg) -> ControllerKind {
        match value {
            ControllerArg::Mpc => ControllerKind::Mpc,
            ControllerArg::GpMpc => ControllerKind::GpMpc,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario to run.
    #[arg(long, value_enum, required_unless_present = "all", conflicts_with = "all")]
    scenario: Option<ScenarioArg>,
    /// Controller to run it with.
    #[arg(
        long,
        value_enum,
        required_unless_present = "all",
        conflicts_with = "all"
    )]
    controller: Option<ControllerArg>,
    /// Run every scenario/controller combination (six runs, one per core).
    #[arg(long)]
    all: bool,
    /// TOML configuration file; defaults apply to every omitted field.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the CSV and JSON files.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Override the configuration's measurement-noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Score summaries from this time onward [min].
    #[arg(long, default_value_t = 0.0)]
    from: f64,
}

#[derive(Args)]
struct CalibrateArgs {
    /// File the calibration fragment is written to.
    #[arg(long, default_value = "calibration.toml")]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    /// CSV trace written by `simulate`.
    csv: PathBuf,
    /// Score the summary from this time onward [min].
    #[arg(long, default_value_t = 0.0)]
    from: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Calibrate(args) => cmd_calibrate(&args),
        Command::Stats(args) => cmd_stats(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<SimConfig, String> {
    let mut config = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| format!("reading config {}: {e}", p.display()))?;
            toml::from_str::<SimConfig>(&text)
                .map_err(|e| format!("parsing config {}: {e}", p.display()))?
        }
        None => SimConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate().map_err(|e| format!("invalid config: {e}"))?;
    Ok(config)
}

const TABLE_HEADER: &str = "scenario   controller  mean    sd     %<70   %70-180  %80-140  %>180  bg@07:00";

fn table_row(scenario: &str, controller: &str, s: &ZoneStatistics) -> String {
    format!(
        "{scenario:<10} {controller:<11} {:<7.1} {:<6.2} {:<6.2} {:<8.2} {:<8.2} {:<6.2} {:.1}",
        s.mean, s.sd, s.pct_below_70, s.pct_in_70_180, s.pct_in_80_140, s.pct_above_180, s.bg_at_0700
    )
}

fn run_and_save(
    kind: ScenarioKind,
    controller: ControllerKind,
    config: &SimConfig,
    out_dir: &Path,
    from: f64,
) -> Result<String, String> {
    let scenario = scenario_with_duration(kind, controller, config.duration_days);
    let output = run_closed_loop(&scenario, config).map_err(|e| format!("{}: {e}", scenario.name))?;
    let stats = compute_statistics(&output.records, from);

    let csv_path = out_dir.join(format!("{}.csv", scenario.name));
    fs::write(&csv_path, csv_string(&output.records))
        .map_err(|e| format!("writing {}: {e}", csv_path.display()))?;
    let json_path = out_dir.join(format!("{}.json", scenario.name));
    let json = serde_json::to_string_pretty(&stats).expect("statistics serialize");
    fs::write(&json_path, json).map_err(|e| format!("writing {}: {e}", json_path.display()))?;

    Ok(table_row(
        &kind.to_string(),
        &controller.to_string(),
        &stats,
    ))
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), String> {
    let config = load_config(args.config.as_deref(), args.seed)?;
    fs::create_dir_all(&args.out)
        .map_err(|e| format!("creating {}: {e}", args.out.display()))?;

    let pairs: Vec<(ScenarioKind, ControllerKind)> = if args.all {
        let kinds = [
            ScenarioKind::Fasting,
            ScenarioKind::AnnouncedMeals,
            ScenarioKind::SkippedMeal,
        ];
        let controllers = [ControllerKind::Mpc, ControllerKind::GpMpc];
        kinds
            .iter()
            .flat_map(|&k| controllers.iter().map(move |&c| (k, c)))
            .collect()
    } else {
        // clap guarantees both flags are present when --all is absent.
        vec![(
            args.scenario.expect("scenario flag").into(),
            args.controller.expect("controller flag").into(),
        )]
    };

    // Each run owns its plant, filter and learner; fanning out is safe and
    // the join preserves the fixed report order.
    let rows: Vec<Result<String, String>> = std::thread::scope(|scope| {
        let handles: Vec<_> = pairs
            .iter()
            .map(|&(kind, controller)| {
                let config = &config;
                let out_dir = args.out.as_path();
                let from = args.from;
                scope.spawn(move || run_and_save(kind, controller, config, out_dir, from))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });

    println!("{TABLE_HEADER}");
    for row in rows {
        println!("{}", row?);
    }
    Ok(())
}

/// The calibration fragment mirrors `SimConfig` field names so it can be
/// pasted or merged into a full configuration file.
#[derive(serde::Serialize, serde::Deserialize)]
struct CalibrationFragment {
    i_mi_basal: f64,
    meal_gain: f64,
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<(), String> {
    let i_mi_basal =
        basal_interstitial_insulin(U_BASAL).map_err(|e| format!("insulin steady state: {e}"))?;
    // 50 g of carbohydrate peaking 70 mg/dL above baseline (180 total).
    let meal_gain =
        calibrate_meal_gain(70.0, 50.0).map_err(|e| format!("meal-gain sweep: {e}"))?;

    let fragment = CalibrationFragment {
        i_mi_basal,
        meal_gain,
    };
    let text = toml::to_string(&fragment).expect("fragment serialize");
    fs::write(&args.out, &text).map_err(|e| format!("writing {}: {e}", args.out.display()))?;
    println!("i_mi_basal = {i_mi_basal:.12} mU/L");
    println!("meal_gain  = {meal_gain:.12} mg/min per gram");
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_stats(args: &StatsArgs) -> Result<(), String> {
    let text = fs::read_to_string(&args.csv)
        .map_err(|e| format!("reading {}: {e}", args.csv.display()))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty CSV")?;
    let columns: Vec<&str> = header.split(',').collect();
    let t_col = columns
        .iter()
        .position(|&c| c == "t")
        .ok_or("CSV has no 't' column")?;
    let bg_col = columns
        .iter()
        .position(|&c| c == "bg_true")
        .ok_or("CSV has no 'bg_true' column")?;

    let mut series = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let parse = |col: usize, name: &str| -> Result<f64, String> {
            fields
                .get(col)
                .ok_or_else(|| format!("row {}: missing {name}", i + 2))?
                .parse::<f64>()
                .map_err(|e| format!("row {}: bad {name}: {e}", i + 2))
        };
        series.push((parse(t_col, "t")?, parse(bg_col, "bg_true")?));
    }

    let stats = statistics_from_series(series, args.from);
    println!(
        "{}",
        serde_json::to_string_pretty(&stats).expect("statistics serialize")
    );
    Ok(())
}
