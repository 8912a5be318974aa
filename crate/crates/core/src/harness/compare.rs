use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::run::run_closed_loop;
use crate::error::Result;
use crate::sim::fmt_f64;

/// One (config, seed) cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub config: String,
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub j: f64,
    pub j_u: f64,
    pub mean_solve_ms: f64,
}

/// Median and interquartile range of the successful cells of one config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareAggregate {
    pub config: String,
    pub runs: usize,
    pub failed: usize,
    pub median_j: f64,
    pub iqr_j: f64,
    pub median_j_u: f64,
    pub iqr_j_u: f64,
    pub mean_solve_ms: f64,
    pub median_solve_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub rows: Vec<CompareRow>,
    pub aggregates: Vec<CompareAggregate>,
}

/// Linear-interpolation quantile of sorted data; NaN when empty.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn aggregate(config: &str, rows: &[CompareRow]) -> CompareAggregate {
    let ok: Vec<&CompareRow> = rows.iter().filter(|r| r.ok).collect();
    let j = sorted(ok.iter().map(|r| r.j).collect());
    let j_u = sorted(ok.iter().map(|r| r.j_u).collect());
    let t = sorted(ok.iter().map(|r| r.mean_solve_ms).collect());
    CompareAggregate {
        config: config.to_string(),
        runs: ok.len(),
        failed: rows.len() - ok.len(),
        median_j: quantile(&j, 0.5),
        iqr_j: quantile(&j, 0.75) - quantile(&j, 0.25),
        median_j_u: quantile(&j_u, 0.5),
        iqr_j_u: quantile(&j_u, 0.75) - quantile(&j_u, 0.25),
        mean_solve_ms: if t.is_empty() {
            f64::NAN
        } else {
            t.iter().sum::<f64>() / t.len() as f64
        },
        median_solve_ms: quantile(&t, 0.5),
    }
}

/// Run every (config, seed) cell, in parallel; failures become rows.
pub fn compare_runs(configs: &[(String, RunConfig)], seeds: &[u64]) -> CompareTable {
    let cells: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let mut rows: Vec<(usize, CompareRow)> = cells
        .par_iter()
        .map(|&(c, seed)| {
            let (name, cfg) = &configs[c];
            let row = match run_closed_loop(cfg, seed) {
                Ok(rec) => CompareRow {
                    config: name.clone(),
                    seed,
                    ok: true,
                    error: None,
                    j: rec.summary.j,
                    j_u: rec.summary.j_u,
                    mean_solve_ms: rec.summary.mean_solve_ms,
                },
                Err(e) => CompareRow {
                    config: name.clone(),
                    seed,
                    ok: false,
                    error: Some(e.to_string()),
                    j: f64::NAN,
                    j_u: f64::NAN,
                    mean_solve_ms: f64::NAN,
                },
            };
            (c, row)
        })
        .collect();
    rows.sort_by_key(|(c, r)| (*c, r.seed));
    let aggregates = configs
        .iter()
        .enumerate()
        .map(|(c, (name, _))| {
            let mine: Vec<CompareRow> = rows.iter().filter(|(i, _)| *i == c).map(|(_, r)| r.clone()).collect();
            aggregate(name, &mine)
        })
        .collect();
    CompareTable {
        rows: rows.into_iter().map(|(_, r)| r).collect(),
        aggregates,
    }
}

impl CompareTable {
    pub fn aggregate(&self, config: &str) -> Option<&CompareAggregate> {
        self.aggregates.iter().find(|a| a.config == config)
    }

    /// `config,seed,ok,J,J_u,mean_solve_ms,error`.
    pub fn write_runs_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["config", "seed", "ok", "J", "J_u", "mean_solve_ms", "error"])?;
        for r in &self.rows {
            w.write_record([
                r.config.clone(),
                r.seed.to_string(),
                r.ok.to_string(),
                fmt_f64(r.j),
                fmt_f64(r.j_u),
                fmt_f64(r.mean_solve_ms),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "config",
            "runs",
            "failed",
            "median_J",
            "iqr_J",
            "median_J_u",
            "iqr_J_u",
            "mean_solve_ms",
            "median_solve_ms",
        ])?;
        for a in &self.aggregates {
            w.write_record([
                a.config.clone(),
                a.runs.to_string(),
                a.failed.to_string(),
                fmt_f64(a.median_j),
                fmt_f64(a.iqr_j),
                fmt_f64(a.median_j_u),
                fmt_f64(a.iqr_j_u),
                fmt_f64(a.mean_solve_ms),
                fmt_f64(a.median_solve_ms),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
