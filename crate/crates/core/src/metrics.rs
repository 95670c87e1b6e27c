//! Latency statistics and the per-sample time-series format.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{RttSample, SampleClass};

/// Bins per decade of the latency histogram.
pub const BINS_PER_DECADE: usize = 10;
/// Decades covered between 1 µs and 10 s.
pub const DECADES: usize = 7;
/// Underflow (0 µs), 70 log-spaced bins, overflow (≥ 10 s).
pub const HISTOGRAM_BINS: usize = BINS_PER_DECADE * DECADES + 2;

pub const TIMESERIES_HEADER: [&str; 4] = ["seq", "t1_ns", "rtt_us", "class"];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("time-series I/O: {0}")]
    Csv(#[from] csv::Error),
    #[error("time-series line {line}: {message}")]
    Format { line: u64, message: String },
}

/// Lower edges in whole microseconds of the log-spaced bins: bin `k`
/// holds `edge[k] <= rtt < edge[k + 1]`.
fn log_edges() -> [u64; BINS_PER_DECADE * DECADES + 1] {
    let mut edges = [0u64; BINS_PER_DECADE * DECADES + 1];
    for (k, e) in edges.iter_mut().enumerate() {
        let x = 10f64.powf(k as f64 / BINS_PER_DECADE as f64);
        // Exact powers of ten must not be pushed up by rounding noise.
        *e = if (x - x.round()).abs() < 1e-6 { x.round() as u64 } else { x.ceil() as u64 };
    }
    edges
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
}

impl Default for Histogram {
    fn default() -> Self {
        Self { counts: vec![0; HISTOGRAM_BINS] }
    }
}

impl Histogram {
    pub fn bin_of(rtt_us: u64) -> usize {
        if rtt_us == 0 {
            return 0;
        }
        let edges = log_edges();
        if rtt_us >= edges[edges.len() - 1] {
            return HISTOGRAM_BINS - 1;
        }
        // Last edge <= rtt.
        edges.partition_point(|&e| e <= rtt_us)
    }

    /// `[lo, hi)` in microseconds; the overflow bin has no upper bound.
    pub fn bin_range(bin: usize) -> (u64, Option<u64>) {
        let edges = log_edges();
        match bin {
            0 => (0, Some(1)),
            b if b == HISTOGRAM_BINS - 1 => (edges[edges.len() - 1], None),
            b => (edges[b - 1], Some(edges[b])),
        }
    }

    pub fn record(&mut self, rtt_us: u64) {
        self.counts[Self::bin_of(rtt_us)] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LatencyStats {
    pub min_us: Option<u64>,
    /// Rounded half-up.
    pub avg_us: Option<u64>,
    pub max_us: Option<u64>,
    /// Nearest-rank percentiles over replied samples.
    pub p99_us: Option<u64>,
    pub p999_us: Option<u64>,
    pub missed: u64,
    pub lost: u64,
    pub total: u64,
    pub histogram: Histogram,
}

fn nearest_rank(sorted: &[u64], num: u64, den: u64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len() as u64;
    let rank = (num * n).div_ceil(den).max(1);
    Some(sorted[(rank - 1) as usize])
}

/// Aggregates samples. LOST samples count toward `lost` and `total` only.
pub fn compute_stats(samples: &[RttSample]) -> LatencyStats {
    let mut stats = LatencyStats { total: samples.len() as u64, ..Default::default() };
    let mut rtts: Vec<u64> = Vec::with_capacity(samples.len());
    for s in samples {
        match s.class {
            SampleClass::Lost => stats.lost += 1,
            SampleClass::MissedDeadline => stats.missed += 1,
            SampleClass::Ok => {}
        }
        if let Some(rtt) = s.rtt_us {
            rtts.push(rtt);
            stats.histogram.record(rtt);
        }
    }
    if rtts.is_empty() {
        return stats;
    }
    rtts.sort_unstable();
    let n = rtts.len() as u128;
    let sum: u128 = rtts.iter().map(|&r| r as u128).sum();
    stats.min_us = rtts.first().copied();
    stats.max_us = rtts.last().copied();
    stats.avg_us = Some(((2 * sum + n) / (2 * n)) as u64);
    stats.p99_us = nearest_rank(&rtts, 99, 100);
    stats.p999_us = nearest_rank(&rtts, 999, 1000);
    stats
}

/// Writes the header and one row per sample. Returns the number of sample
/// rows written.
pub fn export_timeseries<W: Write>(samples: &[RttSample], sink: W) -> Result<usize, MetricsError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(sink);
    w.write_record(TIMESERIES_HEADER)?;
    let mut rtt = String::new();
    for s in samples {
        rtt.clear();
        if let Some(r) = s.rtt_us {
            rtt.push_str(&r.to_string());
        }
        w.write_record([s.seq.to_string().as_str(), s.t1_ns.to_string().as_str(), &rtt, s.class.as_str()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(samples.len())
}

#[derive(Debug, Deserialize)]
struct Row {
    seq: u64,
    t1_ns: u64,
    rtt_us: Option<u64>,
    class: String,
}

/// Reads a time-series back. `t2_ns` is reconstructed at microsecond
/// resolution, which is all the file keeps.
pub fn import_timeseries<R: Read>(source: R) -> Result<Vec<RttSample>, MetricsError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let header = r.headers()?.clone();
    if header.iter().ne(TIMESERIES_HEADER) {
        return Err(MetricsError::Format { line: 1, message: format!("unexpected header {:?}", header.as_slice()) });
    }
    let mut out = Vec::new();
    for rec in r.deserialize::<Row>() {
        let row = rec?;
        let line = out.len() as u64 + 2;
        let fail = |message: String| MetricsError::Format { line, message };
        let class: SampleClass = row.class.parse().map_err(fail)?;
        if (class == SampleClass::Lost) != row.rtt_us.is_none() {
            return Err(fail(format!("class {class} inconsistent with rtt {:?}", row.rtt_us)));
        }
        if row.seq != out.len() as u64 {
            return Err(fail(format!("seq {} out of order", row.seq)));
        }
        out.push(RttSample {
            seq: row.seq,
            t1_ns: row.t1_ns,
            t2_ns: row.rtt_us.map(|r| row.t1_ns + r * 1000),
            rtt_us: row.rtt_us,
            class,
        });
    }
    Ok(out)
}
