//! Result rows and the CSV table format.
//!
//! The header line is fixed, floats are written with 17 significant digits
//! so a re-parse reproduces every bit, and `wall_seconds` is the only
//! column allowed to differ between identical runs.

use crate::checkpoint::format_f64;
use crate::config::Variant;
use crate::{CliError, CliResult};
use ncal_core::eval::MetricsRecord;
use std::path::Path;

pub const CSV_HEADER: &str = "run_id,seed,variant,shots,alpha,lambda,tau,n_iters,test_voxel_mse,voxel_corr_mean,emb_cosine_mean,fwd_acc,bwd_acc,two_way_acc,wall_seconds";

/// One completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub run_id: String,
    pub seed: u64,
    pub variant: Variant,
    pub shots: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub tau: f64,
    pub n_iters: usize,
    pub metrics: MetricsRecord,
    pub wall_seconds: f64,
}

impl ResultRow {
    pub fn to_csv_line(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.seed,
            self.variant,
            self.shots,
            format_f64(self.alpha),
            format_f64(self.lambda),
            format_f64(self.tau),
            self.n_iters,
            format_f64(m.test_voxel_mse),
            format_f64(m.voxel_corr_mean),
            format_f64(m.emb_cosine_mean),
            format_f64(m.fwd_acc),
            format_f64(m.bwd_acc),
            format_f64(m.two_way_acc),
            format_f64(self.wall_seconds),
        )
    }

    pub fn from_csv_line(line: &str) -> CliResult<ResultRow> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 15 {
            return Err(CliError::Io(format!(
                "result row has {} fields, expected 15",
                fields.len()
            )));
        }
        let pf = |i: usize| -> CliResult<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| CliError::Io(format!("bad float '{}' in column {i}", fields[i])))
        };
        Ok(ResultRow {
            run_id: fields[0].to_string(),
            seed: fields[1]
                .parse()
                .map_err(|_| CliError::Io(format!("bad seed '{}'", fields[1])))?,
            variant: Variant::parse(fields[2])
                .ok_or_else(|| CliError::Io(format!("bad variant '{}'", fields[2])))?,
            shots: fields[3]
                .parse()
                .map_err(|_| CliError::Io(format!("bad shots '{}'", fields[3])))?,
            alpha: pf(4)?,
            lambda: pf(5)?,
            tau: pf(6)?,
            n_iters: fields[7]
                .parse()
                .map_err(|_| CliError::Io(format!("bad n_iters '{}'", fields[7])))?,
            metrics: MetricsRecord {
                test_voxel_mse: pf(8)?,
                voxel_corr_mean: pf(9)?,
                emb_cosine_mean: pf(10)?,
                fwd_acc: pf(11)?,
                bwd_acc: pf(12)?,
                two_way_acc: pf(13)?,
            },
            wall_seconds: pf(14)?,
        })
    }
}

/// Writes the fixed header plus one line per row.
pub fn write_results(rows: &[ResultRow], path: &Path) -> CliResult<()> {
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.to_csv_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Reads a results file written by [`write_results`].
pub fn read_results(path: &Path) -> CliResult<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(CliError::Io(format!(
                "unexpected results header: {other:?}"
            )))
        }
    }
    lines.map(ResultRow::from_csv_line).collect()
}
