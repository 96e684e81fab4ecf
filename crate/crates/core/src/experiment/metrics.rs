//! Per-epoch metrics CSV.

use std::io::Write;
use std::path::Path;

use crate::binarize::BinarizationState;
use crate::error::{Error, Result};
use crate::schedule::MetricsRecord;

pub const CSV_HEADER: &str = "epoch,train_error,val_error,test_error,lr,binarized_layers";

pub fn csv_row(r: &MetricsRecord) -> String {
    format!("{},{},{},{},{},{}", r.epoch, r.train_error, r.val_error, r.test_error, r.lr, r.state.bitstring())
}

pub fn write_csv(out: &mut impl Write, records: &[MetricsRecord]) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{}", csv_row(r))?;
    }
    Ok(())
}

/// One parsed CSV row. Wall time and loss are not part of the file.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub epoch: usize,
    pub train_error: f64,
    pub val_error: f64,
    pub test_error: f64,
    pub lr: f64,
    pub state: BinarizationState,
}

pub fn parse_csv(text: &str, path: &Path) -> Result<Vec<CsvRow>> {
    let bad = |line: usize, reason: String| Error::Parse { path: path.to_path_buf(), reason: format!("line {line}: {reason}") };
    let mut lines = text.lines();
    match lines.next() {
        Some(CSV_HEADER) => {}
        other => return Err(bad(1, format!("expected header `{CSV_HEADER}`, found {other:?}"))),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(bad(i + 2, format!("{} fields instead of 6", fields.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(i + 2, format!("`{s}`: {e}")));
            Ok(CsvRow {
                epoch: fields[0].parse().map_err(|e| bad(i + 2, format!("epoch `{}`: {e}", fields[0])))?,
                train_error: num(fields[1])?,
                val_error: num(fields[2])?,
                test_error: num(fields[3])?,
                lr: num(fields[4])?,
                state: BinarizationState::parse_bitstring(fields[5]).map_err(|e| bad(i + 2, e.to_string()))?,
            })
        })
        .collect()
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    parse_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_round_trip() {
        let rec = MetricsRecord {
            epoch: 151,
            train_error: 0.01,
            val_error: 0.02,
            test_error: 0.0215,
            state: BinarizationState::parse_bitstring("110").unwrap(),
            lr: 1e-3,
            train_loss: 0.1,
            wall_time: 3.0,
        };
        let mut buf = Vec::new();
        write_csv(&mut buf, std::slice::from_ref(&rec)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "epoch,train_error,val_error,test_error,lr,binarized_layers");
        assert_eq!(text.lines().nth(1).unwrap(), "151,0.01,0.02,0.0215,0.001,110");
        let rows = parse_csv(&text, Path::new("m.csv")).unwrap();
        assert_eq!(rows[0].state, rec.state);
        assert_eq!(rows[0].test_error, rec.test_error);
    }

    #[test]
    fn malformed_rows_name_their_line() {
        let err = parse_csv(&format!("{CSV_HEADER}\n1,0,0,0,0.1,1\n2,0,x,0,0.1,1\n"), Path::new("m.csv")).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert!(parse_csv("epoch\n", Path::new("m.csv")).is_err());
    }
}
