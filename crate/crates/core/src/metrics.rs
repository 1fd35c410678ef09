//! Run traces and the evaluation quantities derived from them: smoothed
//! samples-to-threshold, area under the accuracy curve, and multi-seed
//! aggregation.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("trace needs at least {need} records, has {have}")]
    TooFewRecords { need: usize, have: usize },
    #[error("traces disagree on {0}; cannot aggregate")]
    CellMismatch(String),
    #[error("trace invariant violated: {0}")]
    Invariant(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which run a trace belongs to: method, sweep cell, adaptation settings, seed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceKey {
    pub method: String,
    pub features: u32,
    pub depth: u32,
    pub k_adapt: u32,
    /// "first", "second", or "-" for methods without a meta-gradient.
    pub order: String,
    pub seed: u64,
}

impl TraceKey {
    /// Cell identity ignoring the seed.
    pub fn cell(&self) -> (String, u32, u32, u32, String) {
        (self.method.clone(), self.features, self.depth, self.k_adapt, self.order.clone())
    }
}

/// One evaluation point in a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub episode: u64,
    pub cum_samples: u64,
    pub support_loss: f64,
    pub query_loss: f64,
    pub query_acc: f64,
}

/// Parameter vector captured during a run, for geometry analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot {
    pub episode: u64,
    pub theta: Vec<f64>,
}

/// Time series of per-episode (or per-step) results plus optional parameter
/// snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub key: TraceKey,
    pub records: Vec<TraceRecord>,
    pub snapshots: Vec<ParamSnapshot>,
}

impl RunTrace {
    pub fn new(key: TraceKey) -> Self {
        RunTrace { key, records: Vec::new(), snapshots: Vec::new() }
    }

    /// Episode indices strictly increasing, samples nondecreasing,
    /// accuracies in [0, 1].
    pub fn check_invariants(&self) -> Result<(), MetricsError> {
        for pair in self.records.windows(2) {
            if pair[1].episode <= pair[0].episode {
                return Err(MetricsError::Invariant(format!(
                    "episode {} follows {}",
                    pair[1].episode, pair[0].episode
                )));
            }
            if pair[1].cum_samples < pair[0].cum_samples {
                return Err(MetricsError::Invariant("cumulative samples decreased".into()));
            }
        }
        for r in &self.records {
            if !(0.0..=1.0).contains(&r.query_acc) {
                return Err(MetricsError::Invariant(format!(
                    "accuracy {} outside [0, 1]",
                    r.query_acc
                )));
            }
        }
        Ok(())
    }
}

/// Width of the moving average applied before threshold crossing.
pub const SMOOTHING_WINDOW: usize = 5;

/// Result of a threshold query; never encoded as a number when unmet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdCrossing {
    Reached { samples: u64 },
    NotReached,
}

impl fmt::Display for ThresholdCrossing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdCrossing::Reached { samples } => write!(f, "{samples}"),
            ThresholdCrossing::NotReached => write!(f, "NotReached"),
        }
    }
}

/// Cumulative samples at the first record whose window-5 moving-average query
/// accuracy reaches `threshold`; the window is seeded with whatever prefix is
/// available.
pub fn samples_to_threshold(trace: &RunTrace, threshold: f64) -> ThresholdCrossing {
    assert!(threshold > 0.0 && threshold < 1.0, "threshold must be in (0, 1)");
    for (i, r) in trace.records.iter().enumerate() {
        let lo = (i + 1).saturating_sub(SMOOTHING_WINDOW);
        let window = &trace.records[lo..=i];
        let mean = window.iter().map(|w| w.query_acc).sum::<f64>() / window.len() as f64;
        if mean >= threshold {
            return ThresholdCrossing::Reached { samples: r.cum_samples };
        }
    }
    ThresholdCrossing::NotReached
}

/// Trapezoidal area under query accuracy vs normalized progress (episode
/// index min-max scaled to [0, 1]).
pub fn auc(trace: &RunTrace) -> Result<f64, MetricsError> {
    let n = trace.records.len();
    if n < 2 {
        return Err(MetricsError::TooFewRecords { need: 2, have: n });
    }
    let first = trace.records[0].episode as f64;
    let last = trace.records[n - 1].episode as f64;
    let span = last - first;
    if span <= 0.0 {
        return Err(MetricsError::Invariant("trace spans zero episodes".into()));
    }
    let mut area = 0.0;
    for pair in trace.records.windows(2) {
        let x0 = (pair[0].episode as f64 - first) / span;
        let x1 = (pair[1].episode as f64 - first) / span;
        area += (x1 - x0) * (pair[0].query_acc + pair[1].query_acc) / 2.0;
    }
    Ok(area)
}

/// Multi-seed aggregate of one sweep cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: String,
    pub features: u32,
    pub depth: u32,
    pub k_adapt: u32,
    pub order: String,
    pub seeds: Vec<u64>,
    /// Pointwise mean accuracy curve with standard errors.
    pub episodes: Vec<u64>,
    pub mean_acc: Vec<f64>,
    pub stderr_acc: Vec<f64>,
    pub final_acc_mean: f64,
    pub final_acc_stderr: f64,
    pub per_seed_final_acc: Vec<f64>,
    pub auc_mean: f64,
    pub per_seed_auc: Vec<f64>,
    pub threshold: f64,
    /// Per-seed crossing; unmet seeds stay sentinels, never numbers.
    pub per_seed_samples_to_threshold: Vec<ThresholdCrossing>,
    pub reached_count: usize,
    /// Mean samples over the seeds that reached the threshold, if any.
    pub mean_samples_when_reached: Option<f64>,
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Pointwise mean and standard error across seeds of one cell; grids must be
/// aligned record-for-record.
pub fn aggregate(traces: &[RunTrace], threshold: f64) -> Result<CellSummary, MetricsError> {
    let first = traces.first().ok_or(MetricsError::TooFewRecords { need: 1, have: 0 })?;
    let cell = first.key.cell();
    for t in traces {
        if t.key.cell() != cell {
            return Err(MetricsError::CellMismatch("method/cell fields".into()));
        }
        if t.records.len() != first.records.len() {
            return Err(MetricsError::CellMismatch("record counts".into()));
        }
        for (a, b) in t.records.iter().zip(first.records.iter()) {
            if a.episode != b.episode {
                return Err(MetricsError::CellMismatch("episode grids".into()));
            }
        }
        if t.records.len() < 2 {
            return Err(MetricsError::TooFewRecords { need: 2, have: t.records.len() });
        }
    }

    let n_records = first.records.len();
    let mut episodes = Vec::with_capacity(n_records);
    let mut mean_acc = Vec::with_capacity(n_records);
    let mut stderr_acc = Vec::with_capacity(n_records);
    for i in 0..n_records {
        let col: Vec<f64> = traces.iter().map(|t| t.records[i].query_acc).collect();
        let (m, se) = mean_and_stderr(&col);
        episodes.push(first.records[i].episode);
        mean_acc.push(m);
        stderr_acc.push(se);
    }

    let per_seed_final_acc: Vec<f64> =
        traces.iter().map(|t| t.records.last().expect("nonempty").query_acc).collect();
    let (final_acc_mean, final_acc_stderr) = mean_and_stderr(&per_seed_final_acc);
    let per_seed_auc: Vec<f64> = traces.iter().map(auc).collect::<Result<_, _>>()?;
    let (auc_mean, _) = mean_and_stderr(&per_seed_auc);
    let per_seed_samples: Vec<ThresholdCrossing> =
        traces.iter().map(|t| samples_to_threshold(t, threshold)).collect();
    let reached: Vec<f64> = per_seed_samples
        .iter()
        .filter_map(|c| match c {
            ThresholdCrossing::Reached { samples } => Some(*samples as f64),
            ThresholdCrossing::NotReached => None,
        })
        .collect();

    Ok(CellSummary {
        method: first.key.method.clone(),
        features: first.key.features,
        depth: first.key.depth,
        k_adapt: first.key.k_adapt,
        order: first.key.order.clone(),
        seeds: traces.iter().map(|t| t.key.seed).collect(),
        episodes,
        mean_acc,
        stderr_acc,
        final_acc_mean,
        final_acc_stderr,
        per_seed_final_acc,
        auc_mean,
        per_seed_auc,
        threshold,
        reached_count: reached.len(),
        mean_samples_when_reached: if reached.is_empty() {
            None
        } else {
            Some(reached.iter().sum::<f64>() / reached.len() as f64)
        },
        per_seed_samples_to_threshold: per_seed_samples,
    })
}

const CSV_HEADER: [&str; 11] = [
    "method",
    "f",
    "d",
    "k",
    "order",
    "seed",
    "episode",
    "cum_samples",
    "support_loss",
    "query_loss",
    "query_acc",
];

/// Writes a trace as CSV (snapshots are stored separately).
pub fn write_trace_csv<W: Write>(w: W, trace: &RunTrace) -> Result<(), MetricsError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in &trace.records {
        out.write_record(&[
            trace.key.method.clone(),
            trace.key.features.to_string(),
            trace.key.depth.to_string(),
            trace.key.k_adapt.to_string(),
            trace.key.order.clone(),
            trace.key.seed.to_string(),
            r.episode.to_string(),
            r.cum_samples.to_string(),
            r.support_loss.to_string(),
            r.query_loss.to_string(),
            r.query_acc.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Reads traces from CSV, splitting rows by key; row order within a trace is
/// preserved.
pub fn read_traces_csv<R: Read>(r: R) -> Result<Vec<RunTrace>, MetricsError> {
    let mut reader = csv::Reader::from_reader(r);
    let mut traces: Vec<RunTrace> = Vec::new();
    for row in reader.records() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or_default().to_string();
        let num = |i: usize| -> Result<f64, MetricsError> {
            row.get(i)
                .unwrap_or_default()
                .parse()
                .map_err(|_| MetricsError::Invariant(format!("bad number in column {i}")))
        };
        let int = |i: usize| -> Result<u64, MetricsError> {
            row.get(i)
                .unwrap_or_default()
                .parse()
                .map_err(|_| MetricsError::Invariant(format!("bad integer in column {i}")))
        };
        let key = TraceKey {
            method: field(0),
            features: int(1)? as u32,
            depth: int(2)? as u32,
            k_adapt: int(3)? as u32,
            order: field(4),
            seed: int(5)?,
        };
        let record = TraceRecord {
            episode: int(6)?,
            cum_samples: int(7)?,
            support_loss: num(8)?,
            query_loss: num(9)?,
            query_acc: num(10)?,
        };
        match traces.iter_mut().find(|t| t.key == key) {
            Some(t) => t.records.push(record),
            None => {
                let mut t = RunTrace::new(key);
                t.records.push(record);
                traces.push(t);
            }
        }
    }
    Ok(traces)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key() -> TraceKey {
        TraceKey {
            method: "metasgd".into(),
            features: 8,
            depth: 3,
            k_adapt: 1,
            order: "first".into(),
            seed: 0,
        }
    }

    fn trace_from_accs(accs: &[f64], samples_per_record: u64) -> RunTrace {
        let mut t = RunTrace::new(key());
        for (i, acc) in accs.iter().enumerate() {
            t.records.push(TraceRecord {
                episode: (i + 1) as u64,
                cum_samples: (i + 1) as u64 * samples_per_record,
                support_loss: 0.5,
                query_loss: 0.5,
                query_acc: *acc,
            });
        }
        t
    }

    #[test]
    fn threshold_reached_on_first_record_with_prefix_window() {
        let t = trace_from_accs(&[0.9; 10], 10);
        assert_eq!(samples_to_threshold(&t, 0.6), ThresholdCrossing::Reached { samples: 10 });
    }

    #[test]
    fn chance_trace_never_reaches() {
        let t = trace_from_accs(&[0.5; 50], 10);
        assert_eq!(samples_to_threshold(&t, 0.6), ThresholdCrossing::NotReached);
        assert_eq!(samples_to_threshold(&t, 0.6).to_string(), "NotReached");
    }

    #[test]
    fn smoothing_delays_single_spikes() {
        // One spike at record 3 must not trigger the window-5 average.
        let mut accs = vec![0.0; 20];
        accs[2] = 1.0;
        let t = trace_from_accs(&accs, 10);
        assert_eq!(samples_to_threshold(&t, 0.6), ThresholdCrossing::NotReached);
    }

    #[test]
    fn auc_of_constant_is_the_constant() {
        let t = trace_from_accs(&[0.7; 30], 10);
        assert!((auc(&t).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn auc_of_linear_ramp_is_half() {
        let accs: Vec<f64> = (0..101).map(|i| i as f64 / 100.0).collect();
        let t = trace_from_accs(&accs, 10);
        assert!((auc(&t).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auc_needs_two_records() {
        let t = trace_from_accs(&[0.5], 10);
        assert!(matches!(auc(&t), Err(MetricsError::TooFewRecords { .. })));
    }

    #[test]
    fn aggregate_single_seed_echoes_trace() {
        let t = trace_from_accs(&[0.4, 0.6, 0.8], 10);
        let s = aggregate(std::slice::from_ref(&t), 0.6).unwrap();
        assert_eq!(s.mean_acc, vec![0.4, 0.6, 0.8]);
        assert!(s.stderr_acc.iter().all(|e| *e == 0.0));
        assert_eq!(s.final_acc_mean, 0.8);
        assert_eq!(s.per_seed_auc, vec![auc(&t).unwrap()]);
    }

    #[test]
    fn aggregate_identical_seeds_have_zero_stderr() {
        let mut traces = Vec::new();
        for seed in 0..5 {
            let mut t = trace_from_accs(&[0.4, 0.5, 0.9, 0.9], 10);
            t.key.seed = seed;
            traces.push(t);
        }
        let s = aggregate(&traces, 0.6).unwrap();
        assert!(s.stderr_acc.iter().all(|e| *e == 0.0));
        assert_eq!(s.final_acc_stderr, 0.0);
        assert_eq!(s.reached_count, 5);
    }

    #[test]
    fn aggregate_rejects_mismatched_cells() {
        let a = trace_from_accs(&[0.5, 0.5], 10);
        let mut b = trace_from_accs(&[0.5, 0.5], 10);
        b.key.features = 16;
        assert!(matches!(aggregate(&[a, b], 0.6), Err(MetricsError::CellMismatch(_))));
    }

    #[test]
    fn not_reached_is_never_averaged() {
        let good = trace_from_accs(&[0.9; 10], 10);
        let mut bad = trace_from_accs(&[0.5; 10], 10);
        bad.key.seed = 1;
        let s = aggregate(&[good, bad], 0.6).unwrap();
        assert_eq!(s.reached_count, 1);
        assert_eq!(s.mean_samples_when_reached, Some(10.0));
        assert_eq!(s.per_seed_samples_to_threshold[1], ThresholdCrossing::NotReached);
    }

    #[test]
    fn csv_round_trips() {
        let t = trace_from_accs(&[0.25, 0.5, 0.75], 30);
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &t).unwrap();
        let back = read_traces_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].key, t.key);
        assert_eq!(back[0].records, t.records);
    }

    #[test]
    fn invariant_checker_flags_regressions() {
        let mut t = trace_from_accs(&[0.5, 0.6], 10);
        t.records[1].episode = 1;
        assert!(t.check_invariants().is_err());
        let mut t = trace_from_accs(&[0.5, 0.6], 10);
        t.records[1].query_acc = 1.5;
        assert!(t.check_invariants().is_err());
        assert!(trace_from_accs(&[0.5, 0.6], 10).check_invariants().is_ok());
    }
}
