use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EvalReport, RecallCell};
use crate::error::{Error, Result};
use crate::model::write_atomic;

/// Paths written by [`emit_report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFiles {
    /// `k,d,recall`
    pub recall: PathBuf,
    /// Mean error run length per (d, K criterion).
    pub run_lengths: PathBuf,
    /// `query_id,true_e,true_n,correct@<d>...`, timestamp order.
    pub trajectory: PathBuf,
    /// `d,recall@<k>...`
    pub curve: PathBuf,
    /// `floor,k,d,queries,recall` with an empty recall for empty floors.
    pub altitude: PathBuf,
    /// `perturbation,level,mean,std,runs`
    pub sweep: PathBuf,
    /// The whole report as JSON.
    pub report: PathBuf,
}

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn s(v: impl ToString) -> String {
    v.to_string()
}

pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<ReportFiles> {
    std::fs::create_dir_all(out_dir)?;
    let files = ReportFiles {
        recall: out_dir.join("recall.csv"),
        run_lengths: out_dir.join("run_lengths.json"),
        trajectory: out_dir.join("trajectory.csv"),
        curve: out_dir.join("recall_curve.csv"),
        altitude: out_dir.join("altitude.csv"),
        sweep: out_dir.join("sweep.csv"),
        report: out_dir.join("report.json"),
    };

    let recall = csv_bytes(
        &[s("k"), s("d"), s("recall")],
        report.recall.iter().map(|c| vec![s(c.k), s(c.d), s(c.recall)]),
    )?;
    write_atomic(&files.recall, &recall)?;

    write_atomic(&files.run_lengths, &serde_json::to_vec_pretty(&report.run_lengths)?)?;

    let mut header = vec![s("query_id"), s("true_e"), s("true_n")];
    header.extend(report.thresholds.iter().map(|d| format!("correct@{d}")));
    let traj = csv_bytes(
        &header,
        report.trajectory.iter().map(|r| {
            let mut row = vec![r.query_id.clone(), s(r.true_e), s(r.true_n)];
            row.extend(r.correct.iter().map(|&c| s(u8::from(c))));
            row
        }),
    )?;
    write_atomic(&files.trajectory, &traj)?;

    let mut header = vec![s("d")];
    header.extend(report.ks.iter().map(|k| format!("recall@{k}")));
    let curve = csv_bytes(
        &header,
        report.curve.iter().map(|p| {
            let mut row = vec![s(p.d)];
            row.extend(p.recall.iter().map(s));
            row
        }),
    )?;
    write_atomic(&files.curve, &curve)?;

    let altitude = csv_bytes(
        &[s("floor"), s("k"), s("d"), s("queries"), s("recall")],
        report.altitude.iter().map(|a| {
            vec![s(a.floor), s(a.k), s(a.d), s(a.queries), a.recall.map(s).unwrap_or_default()]
        }),
    )?;
    write_atomic(&files.altitude, &altitude)?;

    let sweep = csv_bytes(
        &[s("perturbation"), s("level"), s("mean"), s("std"), s("runs")],
        report.sweeps.iter().map(|r| {
            let kind = serde_json::to_value(r.perturbation)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            let runs: Vec<String> = r.runs.iter().map(s).collect();
            vec![kind, s(r.level), s(r.mean), s(r.std), runs.join(";")]
        }),
    )?;
    write_atomic(&files.sweep, &sweep)?;

    write_atomic(&files.report, &serde_json::to_vec_pretty(report)?)?;
    Ok(files)
}

/// Parses a `recall.csv` written by [`emit_report`].
pub fn read_recall_csv(path: &Path) -> Result<Vec<RecallCell>> {
    let mut out = Vec::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        out.push(row?);
    }
    Ok(out)
}
