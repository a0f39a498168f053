//! `profile`: summarizes a memory.csv without training.

use std::fmt::Write as _;
use std::path::Path;

use memdfa_core::ledger::MemoryTimeline;

use crate::CliError;

const LEVELS: &[u8] = b" .:-=+*#%@";

/// One character per column; each column shows the largest value in its
/// share of `values`, scaled against the overall maximum.
pub fn sparkline(values: &[u64], width: usize) -> String {
    if values.is_empty() || width == 0 {
        return String::new();
    }
    let max = values.iter().copied().max().unwrap_or(0);
    let cols = width.min(values.len());
    (0..cols)
        .map(|c| {
            let lo = c * values.len() / cols;
            let hi = ((c + 1) * values.len() / cols).max(lo + 1);
            let v = values[lo..hi].iter().copied().max().unwrap_or(0);
            let level = if max == 0 {
                0
            } else {
                ((v as u128 * (LEVELS.len() - 1) as u128).div_ceil(max as u128)) as usize
            };
            LEVELS[level] as char
        })
        .collect()
}

pub fn report(tl: &MemoryTimeline, with_sparkline: bool) -> String {
    let mut out = String::new();
    let peak = tl.peak_live_bytes(None).expect("unfiltered peak");
    let _ = writeln!(out, "events                 {}", tl.len());
    let _ = writeln!(out, "baseline bytes         {}", tl.baseline_bytes);
    let _ = writeln!(out, "peak live bytes        {peak}");
    let _ = writeln!(out, "peak activation bytes  {}", tl.activation_peak());
    let _ = writeln!(out, "{:<16} {:>8} {:>16} {:>18}", "phase", "events", "peak_live_bytes", "mean_live_bytes");
    for p in tl.phase_summary() {
        let _ = writeln!(
            out,
            "{:<16} {:>8} {:>16} {:>18.1}",
            p.phase.as_str(),
            p.events,
            p.peak_live_bytes,
            p.mean_live_bytes
        );
    }
    if with_sparkline {
        let _ = writeln!(out, "live      |{}|", sparkline(&tl.live_curve(), 72));
        let _ = writeln!(out, "activation|{}|", sparkline(&tl.activation_curve(), 72));
    }
    out
}

pub fn cmd_profile(path: &Path, with_sparkline: bool) -> Result<String, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let tl = MemoryTimeline::parse_csv(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(report(&tl, with_sparkline))
}
