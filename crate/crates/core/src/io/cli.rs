//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 when the data or configuration cannot be
//! processed, 2 on usage errors (bad arguments, missing inputs).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use super::records::{
    delta_phase_series, delta_plot_csv, fmt_sig, range_csv, range_series, read_records,
    records_to_string, StabilityTable,
};
use super::scenario::{load_run_config, load_scenario, run_config_to_toml, RunConfig};
use super::tags::{read_tags, write_tags};
use super::write_text_atomic;
use crate::simulate::{simulate, SimulateOptions};
use crate::stability::classify_mdev_slope;
use crate::sync::{car_sweep, run_stationary_sync, LinkStreams, SyncMode};
use crate::tracking::{fit_history_csv, run_tracked_sync, CoarseScanConfig};
use crate::units::{Channel, TagStream};

pub const ALICE_TAGS: &str = "alice.tags";
pub const BOB_TAGS: &str = "bob.tags";
pub const RUN_CONFIG: &str = "run.toml";
pub const TRUTH: &str = "truth.json";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Domain(m) => m,
        }
    }
}

fn domain(e: impl std::fmt::Display) -> CliError {
    CliError::Domain(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "qtt",
    version,
    about = "Two-way quantum time transfer simulator and analysis"
)]
pub struct Cli {
    /// Master seed; replaces every seed in the scenario, and seeds injected noise.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Also write per-figure data files into this directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub plot_data: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Sync,
    Drift,
}

impl From<Mode> for SyncMode {
    fn from(m: Mode) -> SyncMode {
        match m {
            Mode::Sync => SyncMode::Synchronized,
            Mode::Drift => SyncMode::Drifting,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario file (or a bundled scenario name) into a run directory.
    Simulate {
        scenario: PathBuf,
        #[arg(short, long, value_name = "DIR")]
        output: PathBuf,
    },
    /// Stationary two-way synchronization of a run directory.
    Sync {
        dir: PathBuf,
        #[arg(long, value_enum, default_value = "sync")]
        mode: Mode,
        /// Records file; defaults to `records_<mode>.csv` in the run directory.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Orbit-tracked synchronization of a pass.
    Track {
        dir: PathBuf,
        #[arg(long, value_enum, default_value = "sync")]
        mode: Mode,
        /// Records file; defaults to `track_records_<mode>.csv` in the run directory.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Allan, modified Allan and time deviation of a records file's δ series.
    Stability {
        records: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Coincidence-to-accidental ratio and lock rate against added background.
    Car {
        dir: PathBuf,
        /// Comma-separated background rates per detector, counts/s.
        #[arg(long, value_delimiter = ',', required = true)]
        sweep: Vec<f64>,
        /// Acquisitions evaluated per rate.
        #[arg(long, default_value_t = 20)]
        acquisitions: usize,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Range and range residual series from a records file.
    Range {
        records: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

/// Parses `args` and runs; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    if let Some(dir) = &cli.plot_data {
        fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
    }
    match &cli.command {
        Command::Simulate { scenario, output } => cmd_simulate(cli, scenario, output),
        Command::Sync { dir, mode, output } => cmd_sync(cli, dir, *mode, output.as_deref()),
        Command::Track { dir, mode, output } => cmd_track(cli, dir, *mode, output.as_deref()),
        Command::Stability { records, output } => cmd_stability(cli, records, output.as_deref()),
        Command::Car {
            dir,
            sweep,
            acquisitions,
            output,
        } => cmd_car(cli, dir, sweep, *acquisitions, output.as_deref()),
        Command::Range { records, output } => cmd_range(cli, records, output.as_deref()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_text_atomic(path, text).map_err(|e| domain(format!("{}: {e}", path.display())))
}

/// Writes to `path`, or to stdout without one.
fn emit(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn plot(cli: &Cli, name: &str, text: &str) -> Result<(), CliError> {
    match &cli.plot_data {
        Some(dir) => write_text(&dir.join(name), text),
        None => Ok(()),
    }
}

fn cmd_simulate(cli: &Cli, scenario: &Path, out: &Path) -> Result<(), CliError> {
    let mut sc = load_scenario(scenario).map_err(|e| match e {
        super::scenario::ScenarioError::Io { .. } => CliError::Usage(e.to_string()),
        other => domain(other),
    })?;
    if let Some(seed) = cli.seed {
        sc.reseed(seed);
    }
    fs::create_dir_all(out).map_err(|e| CliError::Usage(format!("{}: {e}", out.display())))?;
    info!("simulating {} for {} s", sc.label, sc.duration);
    let sim = simulate(&sc, SimulateOptions::default()).map_err(domain)?;
    let s = &sim.streams;
    write_tags(&out.join(ALICE_TAGS), &[&s.alice_local, &s.alice_receive]).map_err(domain)?;
    write_tags(&out.join(BOB_TAGS), &[&s.bob_local, &s.bob_receive]).map_err(domain)?;
    write_text(&out.join(RUN_CONFIG), &run_config_to_toml(&sc.run_config()))?;
    let truth = serde_json::to_string_pretty(&sim.truth).map_err(domain)? + "\n";
    write_text(&out.join(TRUTH), &truth)?;
    eprintln!(
        "{}: {} + {} tags at Alice, {} + {} at Bob",
        out.display(),
        s.alice_local.len(),
        s.alice_receive.len(),
        s.bob_local.len(),
        s.bob_receive.len()
    );
    Ok(())
}

/// Reads the measurement side of a run directory: tags and run config.
pub fn load_run(dir: &Path) -> Result<(LinkStreams, RunConfig), CliError> {
    let need = |name: &str| {
        let p = dir.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::Usage(format!(
                "{}: not a run directory (missing {name})",
                dir.display()
            )))
        }
    };
    let (alice, bob, cfg) = (need(ALICE_TAGS)?, need(BOB_TAGS)?, need(RUN_CONFIG)?);
    let cfg = load_run_config(&cfg).map_err(domain)?;
    let mut per: [Option<TagStream>; 4] = Default::default();
    for path in [alice, bob] {
        for s in read_tags(&path).map_err(|e| domain(format!("{}: {e}", path.display())))? {
            let k = s.channel().id() as usize;
            per[k] = Some(s);
        }
    }
    let [al, ar, bl, br] = per;
    let take = |s: Option<TagStream>, ch: Channel| s.unwrap_or_else(|| TagStream::empty(ch));
    let streams = LinkStreams::new(
        take(al, Channel::AliceLocal),
        take(ar, Channel::AliceReceive),
        take(bl, Channel::BobLocal),
        take(br, Channel::BobReceive),
    )
    .map_err(domain)?;
    Ok((streams, cfg))
}

fn cmd_sync(cli: &Cli, dir: &Path, mode: Mode, out: Option<&Path>) -> Result<(), CliError> {
    let (streams, cfg) = load_run(dir)?;
    let mode = SyncMode::from(mode);
    let records = run_stationary_sync(&streams, &cfg.acquisition, mode).map_err(domain)?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join(format!("records_{}.csv", mode.name())));
    write_text(&path, &records_to_string(&records))?;
    plot(cli, "fig2c.csv", &delta_plot_csv(&records))?;
    let found = records.iter().filter(|r| r.found()).count();
    eprintln!(
        "{}: {} records, {found} found",
        path.display(),
        records.len()
    );
    Ok(())
}

fn cmd_track(cli: &Cli, dir: &Path, mode: Mode, out: Option<&Path>) -> Result<(), CliError> {
    let (streams, cfg) = load_run(dir)?;
    let pass = cfg
        .pass
        .as_ref()
        .ok_or_else(|| CliError::Domain("scenario has no orbit".into()))?;
    let scan = match &cfg.tracking {
        Some(t) => t.to_config().map_err(domain)?,
        None => CoarseScanConfig::default(),
    };
    let a0 = 0.5 * (scan.a_range.0 + scan.a_range.1);
    let th0 = 0.5 * (scan.theta_range.0 + scan.theta_range.1);
    let template = pass.orbit(a0, th0, cfg.duration, cfg.constants);
    let mode = SyncMode::from(mode);
    info!(
        "coarse scan over {} cells",
        scan.a_values().len() * scan.theta_values().len()
    );
    let run =
        run_tracked_sync(&streams, &cfg.acquisition, &scan, &template, mode).map_err(domain)?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join(format!("track_records_{}.csv", mode.name())));
    write_text(&path, &records_to_string(&run.records))?;
    let grid = run.scan.to_csv();
    write_text(&dir.join("coarse_grid.csv"), &grid)?;
    write_text(&dir.join("fit_history.csv"), &fit_history_csv(&run.history))?;
    plot(cli, "coarse_grid.csv", &grid)?;
    plot(
        cli,
        "fig3.csv",
        &range_csv(&range_series(&run.records, cfg.constants.c, None)),
    )?;
    let best = run.scan.best_cell();
    eprintln!(
        "coarse best cell: {:.0} m, {:.2} deg; {} cells locked",
        best.a,
        best.theta.to_degrees(),
        run.scan.locked_cells()
    );
    for st in &run.final_states {
        eprintln!(
            "{:?}: altitude {:.1} m, inclination {:.5} deg, drift {}",
            st.direction,
            st.a_fit,
            st.theta_fit.to_degrees(),
            fmt_sig(st.m)
        );
    }
    eprintln!("{}: {} records", path.display(), run.records.len());
    Ok(())
}

fn load_records(path: &Path) -> Result<Vec<crate::sync::SyncRecord>, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("{}: no such file", path.display())));
    }
    read_records(path).map_err(|e| domain(format!("{}: {e}", path.display())))
}

fn cmd_stability(cli: &Cli, records: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let recs = load_records(records)?;
    let series = delta_phase_series(&recs).map_err(domain)?;
    let table = StabilityTable::compute(&series).map_err(domain)?;
    let csv = table.to_csv();
    emit(out, &csv)?;
    plot(cli, "fig2e.csv", &csv)?;
    let hi = table.rows.last().map_or(0.0, |r| r.tau);
    if let Ok((adev, mdev, tdev)) = table.slopes((series.tau0(), hi)) {
        eprintln!(
            "slopes: adev {adev:.3}, mdev {mdev:.3}, tdev {tdev:.3} ({})",
            classify_mdev_slope(mdev).name()
        );
    }
    Ok(())
}

fn cmd_car(
    cli: &Cli,
    dir: &Path,
    rates: &[f64],
    acquisitions: usize,
    out: Option<&Path>,
) -> Result<(), CliError> {
    if acquisitions == 0 {
        return Err(CliError::Usage("--acquisitions must be at least 1".into()));
    }
    let (streams, cfg) = load_run(dir)?;
    let points = car_sweep(
        &streams,
        &cfg.acquisition,
        rates,
        acquisitions,
        cli.seed.unwrap_or(0),
    )
    .map_err(domain)?;
    let mut csv = String::from("background_rate_cps,trials,found_fraction,car,peak_height\n");
    for p in &points {
        csv.push_str(&format!(
            "{},{},{:.4},{},{}\n",
            fmt_sig(p.background_rate),
            p.trials,
            p.found_fraction,
            fmt_sig(p.car_mean),
            fmt_sig(p.peak_mean)
        ));
    }
    emit(out, &csv)?;
    plot(cli, "fig2b.csv", &csv)
}

fn cmd_range(cli: &Cli, records: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let recs = load_records(records)?;
    let c = crate::units::PhysicalConstants::default().c;
    let pts = range_series(&recs, c, None);
    if pts.is_empty() {
        return Err(CliError::Domain("no found records".into()));
    }
    let csv = range_csv(&pts);
    emit(out, &csv)?;
    plot(cli, "fig3.csv", &csv)
}
