//! Per-round metrics as JSON lines and a per-round summary across seeds.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::al_loop::RoundRecord;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Append records to a JSON-lines file.
pub fn append_jsonl(path: &Path, records: &[RoundRecord]) -> Result<(), MetricsError> {
    let mut out = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|source| MetricsError::Json { line: 0, source })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RoundRecord>, MetricsError> {
    let mut records = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|source| MetricsError::Json { line: i + 1, source })?);
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub round: usize,
    pub labeled_fraction: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

/// Mean and sample standard deviation of accuracy per round across runs.
pub fn summarize(records: &[RoundRecord]) -> Vec<SummaryRow> {
    let rounds = records.iter().map(|r| r.round).max().map_or(0, |m| m + 1);
    (0..rounds)
        .filter_map(|round| {
            let at: Vec<&RoundRecord> = records.iter().filter(|r| r.round == round).collect();
            if at.is_empty() {
                return None;
            }
            let n = at.len() as f64;
            let mean = at.iter().map(|r| r.accuracy).sum::<f64>() / n;
            let std = if at.len() > 1 {
                (at.iter().map(|r| (r.accuracy - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            Some(SummaryRow {
                round,
                labeled_fraction: at.iter().map(|r| r.labeled_fraction).sum::<f64>() / n,
                accuracy_mean: mean,
                accuracy_std: std,
            })
        })
        .collect()
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<(), MetricsError> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::Strategy;

    fn record(round: usize, seed: u64, accuracy: f64) -> RoundRecord {
        RoundRecord {
            round,
            labeled: 200 + 100 * round,
            labeled_fraction: (200 + 100 * round) as f64 / 1000.0,
            accuracy,
            score_mean: Some(0.25),
            score_max: None,
            train_seconds: 1.5,
            select_seconds: 0.1,
            seed,
            strategy: Strategy::Vr,
            selected: vec![1, 2],
        }
    }

    #[test]
    fn jsonl_round_trip_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let a = vec![record(0, 0, 0.1 + 0.2), record(1, 0, 1.0 / 3.0)];
        append_jsonl(&path, &a[..1]).unwrap();
        append_jsonl(&path, &a[1..]).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), a);
        std::fs::write(&path, "{}\n").unwrap();
        assert!(matches!(read_jsonl(&path), Err(MetricsError::Json { line: 1, .. })));
    }

    #[test]
    fn summary_statistics() {
        let records = vec![record(0, 0, 0.8), record(0, 1, 0.9), record(0, 2, 1.0), record(1, 0, 0.5)];
        let rows = summarize(&records);
        assert_eq!(rows.len(), 2);
        assert!((rows[0].accuracy_mean - 0.9).abs() < 1e-12);
        assert!((rows[0].accuracy_std - 0.1).abs() < 1e-12);
        assert_eq!(rows[1].accuracy_std, 0.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        write_summary_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("round,labeled_fraction,accuracy_mean,accuracy_std\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
