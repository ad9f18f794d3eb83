//! Subcommand dispatch: simulate, montecarlo, certify-gains,
//! observer-bound, certify-bounds. Exit codes: 0 success, 1 validation
//! failure, 2 runtime divergence, 3 bound or certification violation.

use crate::agents::certify_bounds;
use crate::config::{self, ConfigError, ModeSpec, ScenarioSpec};
use crate::controller::{check_gains, GainLedger};
use crate::observer::observer_constants;
use crate::sim::{
    self, monte_carlo, run_closed_loop, McOptions, SettlingReport, SimError,
};
use clap::{Args, Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_DIVERGENCE: i32 = 2;
pub const EXIT_BOUND_VIOLATION: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "lagsync",
    about = "Distributed fixed-time observer and synchronization controller testbench",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// scenario file path or bundled name (paper_example, mc_sweep)
    #[arg(long)]
    scenario: String,
    /// output directory for reports and data files
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// override the scenario seed
    #[arg(long)]
    seed: Option<u64>,
    /// override the controller/observer mode
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ModeSpec>,
    /// accept gains that fail their selection inequalities
    #[arg(long)]
    allow_uncertified: bool,
    /// override the integrator step (seconds)
    #[arg(long, value_name = "step")]
    h: Option<f64>,
}

fn parse_mode(s: &str) -> Result<ModeSpec, String> {
    match s {
        "fixed" => Ok(ModeSpec::Fixed),
        "finite" => Ok(ModeSpec::Finite),
        other => Err(format!("unknown mode `{other}` (expected fixed|finite)")),
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Integrate the closed loop and write trajectory + settling report
    Simulate {
        #[command(flatten)]
        common: Common,
        /// also emit a gnuplot script for the error panels
        #[arg(long)]
        plot: bool,
    },
    /// Sweep initial observer-error magnitudes and report settling
    Montecarlo {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        /// log-uniform scale range, formatted lo:hi
        #[arg(long, default_value = "1e-2:1e2", value_parser = parse_range)]
        scale: (f64, f64),
        /// integrate only the observer subsystem (exact for observer metrics)
        #[arg(long)]
        observer_only: bool,
    },
    /// Evaluate the gain-selection inequalities for the scenario's gains
    CertifyGains {
        #[command(flatten)]
        common: Common,
        /// also run the full selection procedure at this margin and
        /// report the resulting certified ledger
        #[arg(long)]
        margin: Option<f64>,
    },
    /// Print the observer settling-bound constants as JSON
    ObserverBound {
        #[command(flatten)]
        common: Common,
    },
    /// Check the inertia/Coriolis/gravity envelope over the sampling grid
    CertifyBounds {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| format!("expected lo:hi, got `{s}`"))?;
    let lo: f64 = lo.parse().map_err(|e| format!("bad lower bound: {e}"))?;
    let hi: f64 = hi.parse().map_err(|e| format!("bad upper bound: {e}"))?;
    if !(lo > 0.0 && hi >= lo) {
        return Err("need 0 < lo <= hi".into());
    }
    Ok((lo, hi))
}

/// Entry point shared by the binary and the integration tests.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through this path too
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

fn exit_code_for(err: &CliError) -> i32 {
    match err {
        CliError::Config(ConfigError::Uncertified(_)) => EXIT_BOUND_VIOLATION,
        CliError::Config(_) => EXIT_VALIDATION,
        CliError::Sim(SimError::Divergence { .. }) | CliError::Sim(SimError::NonFiniteState { .. }) => {
            EXIT_DIVERGENCE
        }
        CliError::Sim(SimError::McRun { source, .. }) => match source.as_ref() {
            SimError::Divergence { .. } | SimError::NonFiniteState { .. } => EXIT_DIVERGENCE,
            _ => EXIT_VALIDATION,
        },
        CliError::Sim(_) => EXIT_VALIDATION,
        CliError::Io(_) => EXIT_VALIDATION,
    }
}

fn load_spec(common: &Common) -> Result<ScenarioSpec, CliError> {
    let mut spec = config::load_scenario(&common.scenario)?;
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    if let Some(mode) = common.mode {
        spec.controller.mode = mode;
    }
    if common.allow_uncertified {
        spec.controller.allow_uncertified = true;
    }
    if let Some(h) = common.h {
        spec.integrator.step = h;
    }
    Ok(spec)
}

fn ensure_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).expect("serializable"))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Simulate { common, plot } => {
            let spec = load_spec(&common)?;
            let scn = spec.build()?;
            ensure_out(&common.out)?;
            let traj = run_closed_loop(&scn)?;
            let report = SettlingReport::from_run(&scn, &traj)?;

            let csv_path = common.out.join("trajectory.csv");
            let mut csv = Vec::new();
            sim::write_trajectory_csv(&traj, &mut csv)?;
            fs::write(&csv_path, csv)?;
            println!("wrote {}", csv_path.display());
            write_json(&common.out, "report.json", &report)?;
            if plot {
                let mut gp = Vec::new();
                sim::write_plot_script(&report, "trajectory.csv", &mut gp)?;
                fs::write(common.out.join("plot.gp"), gp)?;
                println!("wrote {}", common.out.join("plot.gp").display());
            }

            if !report.d_verified {
                println!(
                    "note: supplied D override gives min-eig {:.6} < 2; reported, not adjusted",
                    report.d_min_eig
                );
            }
            for (i, (obs, trk)) in report.t_obs.iter().zip(&report.t_trk).enumerate() {
                println!(
                    "agent {}: observer settled {} tracking settled {}",
                    i + 1,
                    fmt_opt(obs),
                    fmt_opt(trk)
                );
            }
            println!(
                "observer bound {:.6e} s, bound_respected = {}",
                report.t1_star, report.bound_respected
            );
            Ok(if report.bound_respected {
                EXIT_OK
            } else {
                EXIT_BOUND_VIOLATION
            })
        }
        Command::Montecarlo {
            common,
            runs,
            scale,
            observer_only,
        } => {
            let spec = load_spec(&common)?;
            let scn = spec.build()?;
            ensure_out(&common.out)?;
            let report = monte_carlo(
                &scn,
                &McOptions {
                    runs,
                    scale_range: scale,
                    observer_only,
                },
            )?;
            write_json(&common.out, "mc_report.json", &report)?;
            println!(
                "{} runs, {} bound violations, settling min/median/max = {} / {} / {}",
                report.runs.len(),
                report.violations,
                fmt_opt(&report.settling_min),
                fmt_opt(&report.settling_median),
                fmt_opt(&report.settling_max),
            );
            if let Some(rho) = report.spearman_scale_settling {
                println!("spearman(scale, settling) = {rho:.4}");
            }
            Ok(if report.violations == 0 {
                EXIT_OK
            } else {
                EXIT_BOUND_VIOLATION
            })
        }
        Command::CertifyGains { common, margin } => {
            let spec = load_spec(&common)?;
            // evaluate the inequalities directly; build() would reject
            // uncertified gains before we could report them
            let mode = spec.controller.mode;
            let ledger: GainLedger = match mode {
                ModeSpec::Fixed => check_gains(
                    spec.controller.alpha,
                    spec.controller.beta,
                    spec.controller.gamma1,
                    spec.controller.gamma2,
                    spec.controller.k1,
                    spec.controller.k2,
                )
                .map_err(|e| ConfigError::Validation {
                    key: "controller".into(),
                    constraint: e.to_string(),
                })?,
                ModeSpec::Finite => {
                    let slacks = crate::controller::finite_time_gain_slacks(
                        spec.controller.alpha,
                        spec.controller.gamma1,
                        spec.controller.k1,
                    )
                    .map_err(|e| ConfigError::Validation {
                        key: "controller".into(),
                        constraint: e.to_string(),
                    })?;
                    let mut ledger = check_gains(
                        spec.controller.alpha,
                        spec.controller.beta,
                        spec.controller.gamma1,
                        0.0,
                        spec.controller.k1,
                        0.0,
                    )
                    .map_err(|e| ConfigError::Validation {
                        key: "controller".into(),
                        constraint: e.to_string(),
                    })?;
                    ledger.slacks = slacks;
                    ledger.certified = slacks.all_positive();
                    ledger
                }
            };
            ensure_out(&common.out)?;
            write_json(&common.out, "gain_ledger.json", &ledger)?;
            println!(
                "gamma slacks: {:+.4e} {:+.4e}; k slacks: {:+.4e} {:+.4e}; certified = {}",
                ledger.slacks.gamma1,
                ledger.slacks.gamma2,
                ledger.slacks.k1,
                ledger.slacks.k2,
                ledger.certified
            );
            if let Some(margin) = margin {
                let built = crate::controller::build_ledger(
                    spec.controller.alpha,
                    spec.controller.beta,
                    margin,
                )
                .map_err(|e| ConfigError::Validation {
                    key: "controller".into(),
                    constraint: e.to_string(),
                })?;
                write_json(&common.out, "gain_ledger_built.json", &built)?;
                println!(
                    "selection procedure at margin {margin}: gamma = ({:.4}, {:.4}), k = ({:.4}, {:.4})",
                    built.gamma1, built.gamma2, built.k1, built.k2
                );
            }
            Ok(if ledger.certified {
                EXIT_OK
            } else {
                EXIT_BOUND_VIOLATION
            })
        }
        Command::ObserverBound { common } => {
            let spec = load_spec(&common)?;
            let scn = spec.build()?;
            ensure_out(&common.out)?;
            let constants = observer_constants(
                &scn.obs_gains,
                &scn.bundle.d,
                &scn.leader.s,
                scn.leader.state_dim(),
                scn.graph.n_followers(),
            )
            .map_err(|e| ConfigError::Validation {
                key: "observer".into(),
                constraint: e.to_string(),
            })?;
            write_json(&common.out, "observer_bound.json", &constants)?;
            println!(
                "c_hat = ({:.6e}, {:.6e}, {:.6e}), T1* = {:.6e} s",
                constants.c_hat1, constants.c_hat2, constants.c_hat3, constants.t1_star
            );
            Ok(EXIT_OK)
        }
        Command::CertifyBounds { common } => {
            let spec = load_spec(&common)?;
            let scn = spec.build()?;
            ensure_out(&common.out)?;
            let grid = spec.dynamics.grid.unwrap_or_default();
            match certify_bounds(
                &spec.dynamics.theta_ranges,
                spec.dynamics.gravity,
                &scn.law.rc.bounds,
                &grid,
            ) {
                Ok(cert) => {
                    write_json(&common.out, "bounds_certificate.json", &cert)?;
                    println!(
                        "envelope holds: {} samples, worst margin {:.6}",
                        cert.samples_checked, cert.max_violation
                    );
                    Ok(EXIT_OK)
                }
                Err(err) => {
                    #[derive(serde::Serialize)]
                    struct Violation {
                        passed: bool,
                        detail: String,
                    }
                    write_json(
                        &common.out,
                        "bounds_certificate.json",
                        &Violation {
                            passed: false,
                            detail: err.to_string(),
                        },
                    )?;
                    eprintln!("envelope violated: {err}");
                    Ok(EXIT_BOUND_VIOLATION)
                }
            }
        }
    }
}

fn fmt_opt(t: &Option<f64>) -> String {
    match t {
        Some(v) => format!("{v:.4} s"),
        None => "never".to_string(),
    }
}
