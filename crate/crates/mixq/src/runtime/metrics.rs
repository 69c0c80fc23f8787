//! Line-delimited run metrics: one JSON object per line, append-only.

use std::io::Write;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

/// One metrics line. Fields not applicable to a role are null.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRecord {
    pub wall_ms: u64,
    pub frames: u64,
    pub learner_steps: u64,
    pub role: String,
    pub episode_return: Option<f64>,
    pub mixture: Option<usize>,
    pub mean_lambda: Option<f64>,
    pub masked_frac: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub env: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub frames_budget: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub best_eval_return: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub frames_to_threshold: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spi_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub solved: Option<bool>,
}

impl MetricRecord {
    pub fn blank(role: &str) -> Self {
        MetricRecord {
            wall_ms: 0,
            frames: 0,
            learner_steps: 0,
            role: role.to_string(),
            episode_return: None,
            mixture: None,
            mean_lambda: None,
            masked_frac: None,
            env: None,
            seed: None,
            frames_budget: None,
            best_eval_return: None,
            frames_to_threshold: None,
            auc: None,
            spi_ratio: None,
            solved: None,
        }
    }
}

/// Aggregated outcome of a run, kept in memory and appended to the metrics
/// stream as the final `summary` record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub frames: u64,
    pub learner_steps: u64,
    pub episodes: u64,
    pub best_eval_return: Option<f64>,
    pub frames_to_threshold: Option<u64>,
    /// Trapezoidal area under the evaluator return curve over the frame
    /// budget, unnormalized.
    pub auc: Option<f64>,
    pub spi_ratio: f64,
    pub solved: bool,
}

/// Thread-safe append-only record sink.
pub struct MetricsSink {
    records: Mutex<Vec<MetricRecord>>,
    /// When false (deterministic mode), wall_ms is recorded as zero so the
    /// emitted stream is byte-identical across runs.
    wall_clock: bool,
    start: std::time::Instant,
}

impl MetricsSink {
    pub fn new(wall_clock: bool) -> Self {
        MetricsSink {
            records: Mutex::new(Vec::new()),
            wall_clock,
            start: std::time::Instant::now(),
        }
    }

    pub fn wall_ms(&self) -> u64 {
        if self.wall_clock {
            self.start.elapsed().as_millis() as u64
        } else {
            0
        }
    }

    pub fn push(&self, mut rec: MetricRecord) {
        rec.wall_ms = self.wall_ms();
        self.records.lock().unwrap().push(rec);
    }

    pub fn snapshot(&self) -> Vec<MetricRecord> {
        self.records.lock().unwrap().clone()
    }

    pub fn write_ndjson(&self, mut w: impl Write) -> std::io::Result<()> {
        for rec in self.records.lock().unwrap().iter() {
            serde_json::to_writer(&mut w, rec)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// In-memory metrics of one run: the record stream plus aggregate traces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<MetricRecord>,
    pub mixture_counts: Vec<u64>,
    pub sigma_trace: Vec<Vec<f64>>,
    pub summary: RunSummary,
}

impl RunMetrics {
    /// Evaluator return curve as (frames, return) points in frame order.
    pub fn eval_curve(&self) -> Vec<(u64, f64)> {
        let mut pts: Vec<(u64, f64)> = self
            .records
            .iter()
            .filter(|r| r.role == "evaluator")
            .filter_map(|r| r.episode_return.map(|x| (r.frames, x)))
            .collect();
        pts.sort_by_key(|p| p.0);
        pts
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec).expect("serializable"));
            out.push('\n');
        }
        out
    }
}

/// Trapezoidal area under a piecewise-linear curve over `[0, budget]`,
/// extending the first and last observed values to the edges.
pub fn trapezoid_auc(points: &[(u64, f64)], budget: u64) -> Option<f64> {
    if points.is_empty() || budget == 0 {
        return None;
    }
    let mut auc = 0.0;
    let mut prev = (0u64, points[0].1);
    for &(x, y) in points {
        let x = x.min(budget);
        auc += (x - prev.0) as f64 * (prev.1 + y) / 2.0;
        prev = (x, y);
        if x >= budget {
            return Some(auc);
        }
    }
    auc += (budget - prev.0) as f64 * prev.1;
    Some(auc)
}
