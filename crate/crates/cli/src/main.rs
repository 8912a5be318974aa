//! `dpc`: data collection, checks, closed-loop runs and sweeps from a JSON
//! config.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dpc_core::controllers::ControllerKind;
use dpc_core::harness::{
    check_config, collect_all, compare_runs, figure_panels, run_closed_loop, RunConfig, RunRecord, SweepConfig,
};

#[derive(Parser)]
#[command(name = "dpc", version, about = "Data-driven predictive control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the first seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// gdpc-shift, gdpc-spc, deepc or spc.
    #[arg(long)]
    controller: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the excitation experiments and write both data sets.
    Collect(Common),
    /// Report length and rank conditions; nonzero exit on failure.
    Check(Common),
    /// One closed loop: record.csv and summary.csv.
    Run(Common),
    /// Monte-Carlo sweep over arms and seeds: runs.csv and summary.csv.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Use seeds 1..=n.
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Split a record.csv into one CSV per figure panel.
    PlotData {
        #[arg(long)]
        record: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))
}

fn load_run(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_json(&read_text(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(name) = &common.controller {
        cfg.controller = ControllerKind::from_name(name)?;
    }
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn first_seed(cfg: &RunConfig) -> u64 {
    cfg.seeds.first().copied().unwrap_or(1)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn collect(common: &Common) -> Result<()> {
    let cfg = load_run(common)?;
    let seed = first_seed(&cfg);
    let data = collect_all(&cfg, seed)?;
    for (name, set) in [
        ("predictor_data.csv", &data.predictor),
        ("hankel_data.csv", &data.hankel),
    ] {
        if let Some(d) = set {
            d.write_csv(create(&common.out, name)?)?;
            println!("{}: {} samples", common.out.join(name).display(), d.len());
        }
    }
    Ok(())
}

/// Returns false when a check fails.
fn check(common: &Common) -> Result<bool> {
    let cfg = load_run(common)?;
    let report = check_config(&cfg, first_seed(&cfg))?;
    for item in &report.items {
        println!(
            "{:<28} {:>6} >= {:<6} {}",
            item.name,
            item.value,
            item.bound,
            if item.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(bad) = report.first_failure() {
        eprintln!("check failed: {}: {} < {}", bad.name, bad.value, bad.bound);
        return Ok(false);
    }
    Ok(true)
}

fn run(common: &Common) -> Result<()> {
    let cfg = load_run(common)?;
    let seed = first_seed(&cfg);
    let rec = run_closed_loop(&cfg, seed)?;
    rec.write_csv(create(&common.out, "record.csv")?)?;
    rec.summary.write_csv(create(&common.out, "summary.csv")?)?;
    let s = &rec.summary;
    println!(
        "{} seed {}: J = {:.6}, J_u = {:.6}, converged = {}, final error = {:.3e}, mean solve = {:.3} ms",
        s.controller.name(),
        s.seed,
        s.j,
        s.j_u,
        s.converged,
        s.final_error,
        s.mean_solve_ms
    );
    Ok(())
}

type Arms = Vec<(String, RunConfig)>;

/// A file with `arms` is a sweep; a plain run config sweeps the controllers.
fn load_sweep(common: &Common, seeds: Option<u64>) -> Result<(Arms, Vec<u64>)> {
    let text = match &common.config {
        Some(p) => read_text(p)?,
        None => "{}".to_string(),
    };
    let value: serde_json::Value = serde_json::from_str(&text).context("config is not valid JSON")?;
    let (mut arms, cfg_seeds) = if value.get("arms").is_some() {
        let sweep = SweepConfig::from_json(&text)?;
        let arms = sweep.resolve()?;
        let seeds = sweep.seeds.clone().unwrap_or_else(|| arms[0].1.seeds.clone());
        (arms, seeds)
    } else {
        let base = RunConfig::from_json(&text)?;
        let kinds = match &common.controller {
            Some(name) => vec![ControllerKind::from_name(name)?],
            None => ControllerKind::ALL.to_vec(),
        };
        let seeds = base.seeds.clone();
        let arms = kinds
            .into_iter()
            .map(|k| {
                (
                    k.name().to_string(),
                    RunConfig {
                        controller: k,
                        ..base.clone()
                    },
                )
            })
            .collect();
        (arms, seeds)
    };
    if let Some(name) = &common.controller {
        let kind = ControllerKind::from_name(name)?;
        for (_, cfg) in &mut arms {
            cfg.controller = kind;
        }
    }
    for (name, cfg) in &arms {
        cfg.validate().with_context(|| format!("arm {name:?}"))?;
    }
    let seeds = match (seeds, common.seed) {
        (Some(0), _) => bail!("--seeds must be at least 1"),
        (Some(n), _) => (1..=n).collect(),
        (None, Some(s)) => vec![s],
        (None, None) => cfg_seeds,
    };
    if seeds.is_empty() {
        bail!("seeds: at least one seed is required");
    }
    Ok((arms, seeds))
}

fn compare(common: &Common, seeds: Option<u64>) -> Result<()> {
    let (arms, seeds) = load_sweep(common, seeds)?;
    let table = compare_runs(&arms, &seeds);
    table.write_runs_csv(create(&common.out, "runs.csv")?)?;
    table.write_summary_csv(create(&common.out, "summary.csv")?)?;
    println!(
        "{:<16} {:>5} {:>6} {:>14} {:>14} {:>10}",
        "config", "runs", "failed", "median J", "IQR J", "solve ms"
    );
    for a in &table.aggregates {
        println!(
            "{:<16} {:>5} {:>6} {:>14.4} {:>14.4} {:>10.3}",
            a.config, a.runs, a.failed, a.median_j, a.iqr_j, a.mean_solve_ms
        );
    }
    for r in table.rows.iter().filter(|r| !r.ok) {
        eprintln!("{} seed {}: {}", r.config, r.seed, r.error.as_deref().unwrap_or(""));
    }
    Ok(())
}

fn plot_data(record: &Path, out: &Path) -> Result<()> {
    let f = File::open(record).with_context(|| format!("opening {}", record.display()))?;
    let (n_u, n_y, rows) = RunRecord::read_rows(f)?;
    for panel in figure_panels(n_u, n_y, &rows) {
        let name = format!("{}.csv", panel.name);
        panel.write_csv(create(out, &name)?)?;
        println!("{}", out.join(name).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Collect(c) => collect(c).map(|_| true),
        Command::Check(c) => check(c),
        Command::Run(c) => run(c).map(|_| true),
        Command::Compare { common, seeds } => compare(common, *seeds).map(|_| true),
        Command::PlotData { record, out } => plot_data(record, out).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
