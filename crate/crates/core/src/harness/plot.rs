//! Reshape a run record into one table per figure panel.

use std::io::Write;

use super::run::StepRow;
use crate::error::Result;
use crate::sim::fmt_f64;

/// A figure panel: column names and rows, first column `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub name: &'static str,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Panel {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.columns)?;
        for r in &self.rows {
            w.write_record(r.iter().enumerate().map(|(i, v)| {
                if i == 0 {
                    format!("{}", *v as usize)
                } else {
                    fmt_f64(*v)
                }
            }))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Outputs with references, applied inputs, and the optimised correction.
pub fn figure_panels(n_u: usize, n_y: usize, rows: &[StepRow]) -> Vec<Panel> {
    let k = |r: &StepRow| r.k as f64;
    let mut out_cols = vec!["k".to_string()];
    out_cols.extend((1..=n_y).map(|i| format!("y{i}")));
    out_cols.extend((1..=n_y).map(|i| format!("r_y{i}")));
    let mut in_cols = vec!["k".to_string()];
    in_cols.extend((1..=n_u).map(|i| format!("u{i}")));
    let mut ug_cols = vec!["k".to_string()];
    ug_cols.extend((1..=n_u).map(|i| format!("u_g{i}")));
    ug_cols.push("u_g_norm".into());
    vec![
        Panel {
            name: "outputs",
            columns: out_cols,
            rows: rows
                .iter()
                .map(|r| {
                    std::iter::once(k(r))
                        .chain(r.y.iter().copied())
                        .chain(r.r_y.iter().copied())
                        .collect()
                })
                .collect(),
        },
        Panel {
            name: "inputs",
            columns: in_cols,
            rows: rows
                .iter()
                .map(|r| std::iter::once(k(r)).chain(r.u.iter().copied()).collect())
                .collect(),
        },
        Panel {
            name: "u_g",
            columns: ug_cols,
            rows: rows
                .iter()
                .map(|r| {
                    std::iter::once(k(r))
                        .chain(r.u_g.iter().copied())
                        .chain(std::iter::once(r.u_g_norm))
                        .collect()
                })
                .collect(),
        },
    ]
}
