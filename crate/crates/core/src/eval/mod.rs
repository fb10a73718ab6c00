//! Recall@K at distance thresholds, error run lengths, altitude filtering,
//! restricted-radius retrieval and perturbation sweeps.

mod report;
mod sweep;

pub use report::{emit_report, read_recall_csv, ReportFiles};
pub use sweep::{color_jitter, perturb_tile, perturbation_sweep, Perturbation, SweepRow};

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::Point;
use crate::retrieval::{rank_filtered, EmbeddingIndex, Metric, RetrievalResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryGroundTruth {
    pub query_id: String,
    pub true_position: Point,
    /// Meters above ground.
    pub altitude: f64,
    /// Seconds.
    pub timestamp: f64,
}

#[derive(Serialize, Deserialize)]
struct TruthRow {
    query_id: String,
    true_e: f64,
    true_n: f64,
    altitude: f64,
    timestamp: f64,
}

pub fn write_truth_csv(path: &Path, truth: &[QueryGroundTruth]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for t in truth {
        w.serialize(TruthRow {
            query_id: t.query_id.clone(),
            true_e: t.true_position.e,
            true_n: t.true_position.n,
            altitude: t.altitude,
            timestamp: t.timestamp,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `query_id,true_e,true_n,altitude,timestamp` rows.
pub fn read_truth_csv(path: &Path) -> Result<Vec<QueryGroundTruth>> {
    let mut out = Vec::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        let r: TruthRow = row?;
        out.push(QueryGroundTruth {
            query_id: r.query_id,
            true_position: Point::new(r.true_e, r.true_n),
            altitude: r.altitude,
            timestamp: r.timestamp,
        });
    }
    Ok(out)
}

fn truth_map<'a>(results: &[RetrievalResult], truth: &'a [QueryGroundTruth]) -> Result<Vec<&'a QueryGroundTruth>> {
    let by_id: HashMap<&str, &QueryGroundTruth> = truth.iter().map(|t| (t.query_id.as_str(), t)).collect();
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        match by_id.get(r.query_id.as_str()) {
            Some(t) => out.push(*t),
            None => missing.push(r.query_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingGroundTruth(missing));
    }
    Ok(out)
}

/// Whether any of the first `k` ranked tiles lies within `d` meters of the
/// truth. A result shorter than `k` uses what it has; an empty one fails.
fn hit(r: &RetrievalResult, truth: &QueryGroundTruth, index: &EmbeddingIndex, k: usize, d: f64) -> Result<bool> {
    for &(tile_id, _) in r.ranked.iter().take(k) {
        let c = index
            .center_of(tile_id)
            .ok_or_else(|| Error::invalid(format!("query {} ranks tile {tile_id}, not in the index", r.query_id)))?;
        if c.distance(&truth.true_position) <= d {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Per-query correctness under the top-`k`-within-`d` criterion, in
/// `results` order.
pub fn correctness(
    results: &[RetrievalResult],
    truth: &[QueryGroundTruth],
    index: &EmbeddingIndex,
    k: usize,
    d: f64,
) -> Result<Vec<bool>> {
    if k == 0 {
        return Err(Error::invalid("K must be >= 1"));
    }
    let t = truth_map(results, truth)?;
    results.iter().zip(t).map(|(r, t)| hit(r, t, index, k, d)).collect()
}

/// Percentage of queries with at least one of the top `k` tiles within `d`
/// meters of ground truth.
pub fn recall_at_k(
    results: &[RetrievalResult],
    truth: &[QueryGroundTruth],
    index: &EmbeddingIndex,
    k: usize,
    d: f64,
) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::invalid("no results to score"));
    }
    let ok = correctness(results, truth, index, k, d)?;
    Ok(100.0 * ok.iter().filter(|&&b| b).count() as f64 / ok.len() as f64)
}

/// Mean length of maximal runs of `false`; 0 when there are none. The
/// sequence is taken as gapless.
pub fn error_run_lengths(correct: &[bool]) -> Result<f64> {
    if correct.is_empty() {
        return Err(Error::invalid("empty correctness sequence"));
    }
    let mut runs = Vec::new();
    let mut cur = 0usize;
    for &c in correct {
        if c {
            if cur > 0 {
                runs.push(cur);
            }
            cur = 0;
        } else {
            cur += 1;
        }
    }
    if cur > 0 {
        runs.push(cur);
    }
    if runs.is_empty() {
        return Ok(0.0);
    }
    Ok(runs.iter().sum::<usize>() as f64 / runs.len() as f64)
}

/// Correctness ordered by ground-truth timestamp (stable for equal stamps).
pub fn correctness_by_time(
    results: &[RetrievalResult],
    truth: &[QueryGroundTruth],
    index: &EmbeddingIndex,
    k: usize,
    d: f64,
) -> Result<Vec<bool>> {
    let ok = correctness(results, truth, index, k, d)?;
    let t = truth_map(results, truth)?;
    let mut order: Vec<usize> = (0..ok.len()).collect();
    order.sort_by(|&a, &b| t[a].timestamp.total_cmp(&t[b].timestamp));
    Ok(order.into_iter().map(|i| ok[i]).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AltitudeRecall {
    pub floor: f64,
    pub k: usize,
    pub d: f64,
    /// Queries at or above the floor.
    pub queries: usize,
    /// `None` when the floor excludes every query.
    pub recall: Option<f64>,
}

/// Recall restricted to queries flown at or above each floor.
pub fn altitude_filtered_recall(
    results: &[RetrievalResult],
    truth: &[QueryGroundTruth],
    index: &EmbeddingIndex,
    floors: &[f64],
    k: usize,
    d: f64,
) -> Result<Vec<AltitudeRecall>> {
    let t = truth_map(results, truth)?;
    floors
        .iter()
        .map(|&floor| {
            let keep: Vec<RetrievalResult> = results
                .iter()
                .zip(&t)
                .filter(|(_, t)| t.altitude >= floor)
                .map(|(r, _)| r.clone())
                .collect();
            let recall = if keep.is_empty() {
                None
            } else {
                Some(recall_at_k(&keep, truth, index, k, d)?)
            };
            Ok(AltitudeRecall {
                floor,
                k,
                d,
                queries: keep.len(),
                recall,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Meters.
    pub thresholds: Vec<f64>,
    /// K values used as the run-length correctness criterion.
    pub run_length_ks: Vec<usize>,
    pub altitude_floors: Vec<f64>,
    /// Thresholds of the recall-versus-distance curve.
    pub curve: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10],
            thresholds: vec![100.0, 150.0, 250.0, 500.0],
            run_length_ks: vec![1, 5],
            altitude_floors: vec![300.0, 400.0, 450.0, 500.0],
            curve: (1..=50).map(|i| f64::from(i) * 10.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallCell {
    pub k: usize,
    pub d: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLengthCell {
    pub k: usize,
    pub d: f64,
    pub mean_run: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub query_id: String,
    pub true_e: f64,
    pub true_n: f64,
    /// Top-1 correctness at each report threshold, in threshold order.
    pub correct: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub d: f64,
    /// Recall at each report K, in K order.
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    pub ks: Vec<usize>,
    pub thresholds: Vec<f64>,
    pub recall: Vec<RecallCell>,
    pub run_lengths: Vec<RunLengthCell>,
    pub altitude: Vec<AltitudeRecall>,
    pub sweeps: Vec<SweepRow>,
    /// Rows in timestamp order.
    pub trajectory: Vec<TrajectoryRow>,
    pub curve: Vec<CurvePoint>,
}

impl EvalReport {
    pub fn recall(&self, k: usize, d: f64) -> Option<f64> {
        self.recall.iter().find(|c| c.k == k && c.d == d).map(|c| c.recall)
    }

    /// Whether every recall value is in `[0, 100]` and non-decreasing in both
    /// K and d.
    pub fn is_monotone(&self) -> bool {
        let in_range = self.recall.iter().all(|c| (0.0..=100.0).contains(&c.recall));
        let ordered = self.recall.iter().all(|a| {
            self.recall
                .iter()
                .all(|b| !(a.k <= b.k && a.d <= b.d) || a.recall <= b.recall)
        });
        in_range
            && ordered
            && self.curve.windows(2).all(|w| w[0].recall.iter().zip(&w[1].recall).all(|(x, y)| x <= y))
    }
}

/// Full report of one localization run.
pub fn evaluate(
    results: &[RetrievalResult],
    truth: &[QueryGroundTruth],
    index: &EmbeddingIndex,
    config: &EvalConfig,
) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(Error::invalid("no results to score"));
    }
    let t = truth_map(results, truth)?;
    let mut recall = Vec::new();
    for &k in &config.ks {
        for &d in &config.thresholds {
            recall.push(RecallCell {
                k,
                d,
                recall: recall_at_k(results, truth, index, k, d)?,
            });
        }
    }
    let mut run_lengths = Vec::new();
    for &d in &config.thresholds {
        for &k in &config.run_length_ks {
            run_lengths.push(RunLengthCell {
                k,
                d,
                mean_run: error_run_lengths(&correctness_by_time(results, truth, index, k, d)?)?,
            });
        }
    }
    let mut altitude = Vec::new();
    for &k in &config.ks {
        for &d in &config.thresholds {
            altitude.extend(altitude_filtered_recall(results, truth, index, &config.altitude_floors, k, d)?);
        }
    }
    let per_d: Vec<Vec<bool>> = config
        .thresholds
        .iter()
        .map(|&d| correctness(results, truth, index, 1, d))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..results.len()).collect();
    order.sort_by(|&a, &b| t[a].timestamp.total_cmp(&t[b].timestamp));
    let trajectory = order
        .into_iter()
        .map(|i| TrajectoryRow {
            query_id: results[i].query_id.clone(),
            true_e: t[i].true_position.e,
            true_n: t[i].true_position.n,
            correct: per_d.iter().map(|c| c[i]).collect(),
        })
        .collect();
    let curve = config
        .curve
        .iter()
        .map(|&d| {
            Ok(CurvePoint {
                d,
                recall: config
                    .ks
                    .iter()
                    .map(|&k| recall_at_k(results, truth, index, k, d))
                    .collect::<Result<_>>()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        queries: results.len(),
        ks: config.ks.clone(),
        thresholds: config.thresholds.clone(),
        recall,
        run_lengths,
        altitude,
        sweeps: Vec::new(),
        trajectory,
        curve,
    })
}

/// Re-ranks each query against only the tiles within `radius` meters of its
/// ground truth, then evaluates. A query with no candidate is logged and
/// scored as a failure.
pub fn restricted_radius_eval(
    queries: &[(String, Vec<f32>)],
    truth: &[QueryGroundTruth],
    index: &EmbeddingIndex,
    radius: f64,
    metric: Metric,
    config: &EvalConfig,
) -> Result<(Vec<RetrievalResult>, EvalReport)> {
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("radius must be > 0, got {radius}")));
    }
    let by_id: HashMap<&str, &QueryGroundTruth> = truth.iter().map(|t| (t.query_id.as_str(), t)).collect();
    let missing: Vec<String> = queries
        .iter()
        .filter(|q| !by_id.contains_key(q.0.as_str()))
        .map(|q| q.0.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingGroundTruth(missing));
    }
    let top_k = config.ks.iter().copied().max().unwrap_or(1);
    let results = queries
        .iter()
        .map(|(id, v)| {
            let p = by_id[id.as_str()].true_position;
            let r = rank_filtered(id, v, index, top_k, metric, |rec| rec.center.distance(&p) <= radius)?;
            if r.ranked.is_empty() {
                log::warn!("query {id}: no reference tile within {radius} m");
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&results, truth, index, config)?;
    Ok((results, report))
}
