//! Append-only CSV metrics sink: `run_id,section,step,loss,accuracy,wall_ms`.

use std::io::Write;
use std::path::Path;

use crate::distill::TrainRecord;
use crate::error::{DcqError, Result};

const HEADER: &str = "run_id,section,step,loss,accuracy,wall_ms";

/// Appends records to the CSV at `path`, writing the header only when the
/// file is new or empty.
pub fn write_metrics(path: &Path, run_id: &str, records: &[TrainRecord]) -> Result<()> {
    let needs_header = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file =
        std::io::BufWriter::new(std::fs::OpenOptions::new().create(true).append(true).open(path)?);
    if needs_header {
        writeln!(file, "{HEADER}")?;
    }
    for r in records {
        let acc = r.accuracy.map_or(String::new(), |a| a.to_string());
        writeln!(file, "{run_id},{},{},{},{acc},{}", r.section, r.step, r.loss, r.wall_ms)?;
    }
    file.flush()?;
    Ok(())
}

/// Parses a metrics CSV back into `(run_id, record)` rows.
pub fn read_metrics(path: &Path) -> Result<Vec<(String, TrainRecord)>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HEADER => {}
        other => return Err(DcqError::Format(format!("bad metrics header: {other:?}"))),
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(DcqError::Format(format!(
                "metrics line {}: expected 6 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let parse_err = |what: &str| DcqError::Format(format!("metrics line {}: bad {what}", lineno + 2));
        rows.push((
            fields[0].to_string(),
            TrainRecord {
                section: fields[1].parse().map_err(|_| parse_err("section"))?,
                step: fields[2].parse().map_err(|_| parse_err("step"))?,
                loss: fields[3].parse().map_err(|_| parse_err("loss"))?,
                accuracy: if fields[4].is_empty() {
                    None
                } else {
                    Some(fields[4].parse().map_err(|_| parse_err("accuracy"))?)
                },
                wall_ms: fields[5].parse().map_err(|_| parse_err("wall_ms"))?,
            },
        ));
    }
    Ok(rows)
}
