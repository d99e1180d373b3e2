//! Grid sweeps and their CSV report.
//!
//! The report starts with `# key: value` comment lines, then a header row and
//! one row per grid point. Points whose run failed keep their row with
//! `status = failed` and the error text.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TriggerHistogram;
use crate::controller::Mode;
use crate::error::{Error, Result};
use crate::files::write_file;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub mode: Vec<Mode>,
    pub k: Vec<usize>,
    pub s: Vec<usize>,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub mode: Mode,
    pub k: usize,
    pub s: usize,
    pub beta: f64,
    pub alpha: f64,
}

impl Grid {
    /// Cartesian product, `alpha` varying fastest.
    pub fn points(&self) -> Result<Vec<GridPoint>> {
        for (name, len) in [
            ("mode", self.mode.len()),
            ("k", self.k.len()),
            ("s", self.s.len()),
            ("beta", self.beta.len()),
            ("alpha", self.alpha.len()),
        ] {
            if len == 0 {
                return Err(Error::Precondition(format!(
                    "sweep grid has no {name} values"
                )));
            }
        }
        let mut out = Vec::new();
        for &mode in &self.mode {
            for &k in &self.k {
                for &s in &self.s {
                    for &beta in &self.beta {
                        for &alpha in &self.alpha {
                            out.push(GridPoint {
                                mode,
                                k,
                                s,
                                beta,
                                alpha,
                            });
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub mc1: Option<f64>,
    pub mc2: Option<f64>,
    pub mc3: Option<f64>,
    pub desired_rate: Option<f64>,
    pub trigger_rate: f64,
    pub mean_trigger_position: Option<f64>,
    pub mean_regenerated_tokens: f64,
    pub histogram: TriggerHistogram,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub point: GridPoint,
    pub result: std::result::Result<PointMetrics, String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub header: Vec<(String, String)>,
    pub rows: Vec<ReportRow>,
}

const COLUMNS: [&str; 17] = [
    "mode",
    "k",
    "s",
    "beta",
    "alpha",
    "status",
    "mc1",
    "mc2",
    "mc3",
    "desired_rate",
    "trigger_rate",
    "mean_trigger_position",
    "mean_regenerated_tokens",
    "triggers_0_10",
    "triggers_10_20",
    "triggers_20_plus",
    "error",
];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for (k, v) in &self.header {
            let v = v.replace('\n', " ");
            out.extend_from_slice(format!("# {k}: {v}\n").as_bytes());
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(COLUMNS)?;
        for row in &self.rows {
            let p = &row.point;
            let mut rec = vec![
                p.mode.to_string(),
                p.k.to_string(),
                p.s.to_string(),
                p.beta.to_string(),
                p.alpha.to_string(),
            ];
            match &row.result {
                Ok(m) => rec.extend([
                    "ok".to_string(),
                    opt(m.mc1),
                    opt(m.mc2),
                    opt(m.mc3),
                    opt(m.desired_rate),
                    m.trigger_rate.to_string(),
                    opt(m.mean_trigger_position),
                    m.mean_regenerated_tokens.to_string(),
                    m.histogram.early.to_string(),
                    m.histogram.middle.to_string(),
                    m.histogram.late.to_string(),
                    String::new(),
                ]),
                Err(e) => {
                    rec.push("failed".into());
                    rec.extend(std::iter::repeat_n(String::new(), 10));
                    rec.push(e.clone());
                }
            }
            w.write_record(&rec)?;
        }
        w.into_inner()
            .map_err(|e| Error::Stream(std::io::Error::other(e.to_string())))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_csv()?)
    }
}

/// Run `run` at every grid point. Failures are recorded, not propagated.
pub fn sweep<F>(grid: &Grid, header: Vec<(String, String)>, run: F) -> Result<EvalReport>
where
    F: Fn(&GridPoint) -> Result<PointMetrics> + Sync,
{
    let rows = grid
        .points()?
        .into_par_iter()
        .map(|point| ReportRow {
            point,
            result: run(&point).map_err(|e| e.to_string()),
        })
        .collect();
    Ok(EvalReport { header, rows })
}
