use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nnident::experiments::{
    calibrate_nu0, compare_controllers, run_scenario, ExperimentConfig, Scenario, ScenarioReport, SummaryReport,
    SweepParam, OUTPUT_ROOT_ENV,
};
use nnident::Error;

/// Online identification of manipulator dynamics with parallel neural
/// networks.
#[derive(Debug, Parser)]
#[command(name = "nnident", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the scenario named in the config file.
    Run {
        config: PathBuf,
        /// Output directory, overriding the config and the output root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one identification per value of a hyperparameter.
    Sweep {
        config: PathBuf,
        #[arg(long, default_value = "alpha")]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare PD-only and inverse-dynamics control from warm-started networks.
    Compare {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the dead-zone bound from a frozen pre-fitted run.
    #[command(name = "calibrate-nu0")]
    CalibrateNu0 {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| {
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
        cfg.resolve_output_dir(root.as_deref())
    })
}

fn print_summary(label: &str, s: &SummaryReport) {
    let fmt_opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "{label}: e1 rms {:.4} -> {:.4} (x{:.2}), late sup|e_mod| {:.4} (bound {:.4}), dV<0 {}, tracking rms {:?}",
        s.first_window_rms_e1,
        s.last_window_rms_e1,
        s.e1_reduction,
        s.sup_e_mod_late,
        s.operating_bound,
        fmt_opt(s.dv_negative_fraction),
        s.tracking_rms.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
    );
    if let Some(r) = &s.recovery {
        println!(
            "{label}: recovery |M^-M| {:.4} -> {:.4}, |C^-C| {:.4} -> {:.4}, |G^-G| {:.4} -> {:.4}",
            r.initial.mass, r.last.mass, r.initial.coriolis, r.last.coriolis, r.initial.gravity, r.last.gravity
        );
    }
}

fn print_report(report: &ScenarioReport) {
    match report {
        ScenarioReport::Identification(s) => print_summary("identification", s),
        ScenarioReport::AlphaSweep(s) => {
            for r in &s.rows {
                println!(
                    "{} = {}: time to threshold {}, weight variation {:.4}, late sup|e_mod| {:.4}",
                    s.param.name(),
                    r.value,
                    r.time_to_threshold.map_or("never".to_string(), |t| format!("{t:.3} s")),
                    r.weight_total_variation,
                    r.sup_e_mod_late
                );
            }
            println!(
                "time to threshold non-increasing: {}, weight variation non-decreasing: {}",
                s.time_to_threshold_non_increasing, s.weight_variation_non_decreasing
            );
        }
        ScenarioReport::DeadzoneAblation(a) => {
            println!(
                "late weight variance: dead zone {:.6e}, no dead zone {:.6e}",
                a.dead_zone.late_weight_variance, a.no_dead_zone.late_weight_variance
            );
        }
        ScenarioReport::Compare(c) => {
            print_summary("pd", &c.pd);
            print_summary("nnidc", &c.nnidc);
            println!(
                "effort total variation: pd {:.4}, nnidc {:.4}; nnidc tracks better on gravity-loaded joints: {}",
                c.pd.effort_total_variation, c.nnidc.effort_total_variation, c.nnidc_tracks_better
            );
        }
        ScenarioReport::FirstOrderDemo(f) => println!(
            "pole: true {:.4}, estimated {:.4}, relative error {:.3}%",
            f.true_pole,
            f.estimated_pole,
            100.0 * f.relative_error
        ),
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, Error> {
    ExperimentConfig::load(path)
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = load(&config)?;
            let dir = output_dir(&cfg, out);
            let report = run_scenario(&cfg, &dir)?;
            print_report(&report);
            println!("artifacts written to {}", dir.display());
        }
        Command::Sweep { config, param, values, out } => {
            let mut cfg = load(&config)?;
            cfg.scenario = Scenario::AlphaSweep;
            cfg.sweep.param = param;
            if !values.is_empty() {
                cfg.sweep.values = values;
            }
            cfg.validate()?;
            let dir = output_dir(&cfg, out);
            print_report(&run_scenario(&cfg, &dir)?);
            println!("artifacts written to {}", dir.display());
        }
        Command::Compare { config, out } => {
            let mut cfg = load(&config)?;
            cfg.scenario = Scenario::Compare;
            let dir = output_dir(&cfg, out);
            print_report(&ScenarioReport::Compare(compare_controllers(&cfg, &dir)?));
            println!("artifacts written to {}", dir.display());
        }
        Command::CalibrateNu0 { config, out } => {
            let cfg = load(&config)?;
            let dir = output_dir(&cfg, out);
            let cal = calibrate_nu0(&cfg, &dir)?;
            println!("nu0 = {} (95th percentile of {} samples)", nnident::fmt_f64(cal.nu0), cal.samples);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Divergence { .. } => 3,
                _ => 1,
            })
        }
    }
}
