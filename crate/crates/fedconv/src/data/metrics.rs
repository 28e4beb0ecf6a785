//! Metrics emission: JSON (full fidelity) and CSV (summary columns).

use crate::error::{Error, Result};
use crate::report::RoundReport;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricsFormat {
    Json,
    Csv,
}

/// Fixed CSV column order.
pub const CSV_HEADER: &str = "round,global_accuracy,global_loss,mean_client_accuracy";

/// Write reports to `path`. JSON is an array of round objects; CSV carries
/// the documented header plus one row per round.
pub fn emit_metrics(reports: &[RoundReport], path: &Path, format: MetricsFormat) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Usage("no reports to emit".into()));
    }
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    match format {
        MetricsFormat::Json => {
            let body = serde_json::to_string_pretty(reports)
                .map_err(|e| Error::Format(e.to_string()))?;
            w.write_all(body.as_bytes())?;
            w.write_all(b"\n")?;
        }
        MetricsFormat::Csv => {
            writeln!(w, "{CSV_HEADER}")?;
            for r in reports {
                writeln!(
                    w,
                    "{},{},{},{}",
                    r.round, r.global_accuracy, r.global_loss, r.mean_client_accuracy
                )?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reports(n: usize) -> Vec<RoundReport> {
        (0..n)
            .map(|i| RoundReport {
                round: i + 1,
                global_accuracy: 0.5 + i as f64 * 0.01,
                global_loss: 1.0 / (i + 1) as f64,
                client_accuracies: vec![0.4, 0.6],
                mean_client_accuracy: 0.5,
                weight_vectors: vec![vec![1.0, 0.9]],
                elapsed_seconds: 12.5,
            })
            .collect()
    }

    #[test]
    fn csv_has_header_plus_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        emit_metrics(&reports(3), &path, MetricsFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("1,"));
    }

    #[test]
    fn json_roundtrip_recovers_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let rs = reports(2);
        emit_metrics(&rs, &path, MetricsFormat::Json).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let parsed: Vec<RoundReport> = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].global_accuracy, rs[0].global_accuracy);
        assert_eq!(parsed[1].weight_vectors, rs[1].weight_vectors);
        // timing is not serialized
        assert_eq!(parsed[0].elapsed_seconds, 0.0);
        assert!(!text.contains("elapsed_seconds"));
    }

    #[test]
    fn empty_reports_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        assert!(emit_metrics(&[], &path, MetricsFormat::Json).is_err());
    }
}
