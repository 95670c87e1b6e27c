//! Markdown result tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::metrics::LatencyStats;

pub const TABLE_HEADER: &str = "Min(us) | Avg(us) | Max(us) | Missed deadlines | Message loss";
const TABLE_RULE: &str = "--- | --- | --- | --- | ---";

/// The parts of a stored run the report needs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default)]
    pub rt_verified: bool,
    pub stats: LatencyStats,
}

fn opt(v: Option<u64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

/// One table row: `min | avg | max | missed/total | lost/total`.
pub fn table_row(s: &LatencyStats) -> String {
    format!(
        "{} | {} | {} | {}/{} | {}/{}",
        opt(s.min_us),
        opt(s.avg_us),
        opt(s.max_us),
        s.missed,
        s.total,
        s.lost,
        s.total
    )
}

/// One table per experiment id, in order of first appearance, with one
/// row per run. Output depends only on the input.
pub fn render_report(results: &[RunSummary]) -> String {
    let mut ids: Vec<&str> = Vec::new();
    for r in results {
        if !ids.contains(&r.id.as_str()) {
            ids.push(&r.id);
        }
    }
    let mut out = String::from("# Round-trip latency\n");
    for id in ids {
        let runs: Vec<&RunSummary> = results.iter().filter(|r| r.id == id).collect();
        let _ = write!(out, "\n## {id}\n\n");
        if let Some(d) = runs.iter().find_map(|r| r.description.as_deref()) {
            let _ = write!(out, "{d}\n\n");
        }
        let _ = writeln!(out, "{TABLE_HEADER}");
        let _ = writeln!(out, "{TABLE_RULE}");
        for r in &runs {
            let _ = writeln!(out, "{}", table_row(&r.stats));
        }
        out.push('\n');
        for (i, r) in runs.iter().enumerate() {
            let rt = if r.rt_verified { "RT verified" } else { "not RT" };
            let _ = writeln!(
                out,
                "- run {}: {rt}; p99 {} us, p99.9 {} us",
                i + 1,
                opt(r.stats.p99_us),
                opt(r.stats.p999_us)
            );
        }
    }
    out
}
