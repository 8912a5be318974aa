//! Browser bindings: run a closed loop or a data check from a JSON config and
//! hand the result back as JSON.

use dpc_core::harness::{check_config, run_closed_loop, CheckReport, RunConfig, RunSummary};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Longest loop accepted from the page; keeps the tab responsive.
pub const MAX_STEPS: usize = 2000;

#[derive(Debug, Serialize)]
pub struct Trace {
    pub k: Vec<usize>,
    pub y: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub r_y: Vec<Vec<f64>>,
    pub u_g_norm: Vec<f64>,
    pub terminal_ok: Vec<bool>,
    pub summary: RunSummary,
}

fn parse(config_json: &str) -> Result<RunConfig, String> {
    let cfg = if config_json.trim().is_empty() {
        RunConfig::default()
    } else {
        RunConfig::from_json(config_json).map_err(|e| e.to_string())?
    };
    cfg.validate().map_err(|e| e.to_string())?;
    if cfg.t_max > MAX_STEPS {
        return Err(format!("t_max: at most {MAX_STEPS} in the browser"));
    }
    Ok(cfg)
}

pub fn default_config_json() -> String {
    RunConfig {
        t_max: 200,
        ..RunConfig::default()
    }
    .to_json()
}

pub fn check_json(config_json: &str, seed: u64) -> Result<String, String> {
    let cfg = parse(config_json)?;
    let report: CheckReport = check_config(&cfg, seed).map_err(|e| e.to_string())?;
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

pub fn simulate_trace(config_json: &str, seed: u64) -> Result<Trace, String> {
    let cfg = parse(config_json)?;
    let rec = run_closed_loop(&cfg, seed).map_err(|e| e.to_string())?;
    let rows = &rec.rows;
    Ok(Trace {
        k: rows.iter().map(|r| r.k).collect(),
        y: rows.iter().map(|r| r.y.clone()).collect(),
        u: rows.iter().map(|r| r.u.clone()).collect(),
        r_y: rows.iter().map(|r| r.r_y.clone()).collect(),
        u_g_norm: rows.iter().map(|r| r.u_g_norm).collect(),
        terminal_ok: rows.iter().map(|r| r.terminal_ok).collect(),
        summary: rec.summary,
    })
}

pub fn simulate_json(config_json: &str, seed: u64) -> Result<String, String> {
    let trace = simulate_trace(config_json, seed)?;
    serde_json::to_string(&trace).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = defaultConfig)]
pub fn default_config() -> String {
    default_config_json()
}

/// Length and rank report for the data the config would record.
#[wasm_bindgen]
pub fn check(config_json: &str, seed: u32) -> Result<String, JsError> {
    check_json(config_json, seed.into()).map_err(|e| JsError::new(&e))
}

/// Closed-loop trajectories and summary metrics.
#[wasm_bindgen]
pub fn simulate(config_json: &str, seed: u32) -> Result<String, JsError> {
    simulate_json(config_json, seed.into()).map_err(|e| JsError::new(&e))
}
