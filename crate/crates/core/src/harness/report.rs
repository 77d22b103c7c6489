//! Per-cell summaries and long-format plot data from a sweep.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::HarnessError;
use crate::eval::{SweepCell, SweepResult};

/// `series,fraction,error_mean,error_std`, one row per cell, where error is
/// one minus MAP.
pub fn write_plot_data<W: Write>(
    cells: &[SweepCell],
    mut out: W,
    comment: Option<&str>,
) -> Result<(), HarnessError> {
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["series", "fraction", "error_mean", "error_std"])?;
    for c in cells {
        w.write_record([
            c.feature_set.clone(),
            c.fraction.to_string(),
            c.error_mean().to_string(),
            c.map_std.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `fraction,feature_set,runs,map_mean,map_std,error_mean`.
pub fn write_cells<W: Write>(
    cells: &[SweepCell],
    mut out: W,
    comment: Option<&str>,
) -> Result<(), HarnessError> {
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "fraction",
        "feature_set",
        "runs",
        "map_mean",
        "map_std",
        "error_mean",
    ])?;
    for c in cells {
        w.write_record([
            c.fraction.to_string(),
            c.feature_set.clone(),
            c.runs.to_string(),
            c.map_mean.to_string(),
            c.map_std.to_string(),
            c.error_mean().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Write `cells.csv` and `plot_data.csv` into `dir`; returns both paths.
pub fn emit_report(
    result: &SweepResult,
    dir: &Path,
    comment: Option<&str>,
) -> Result<(PathBuf, PathBuf), HarnessError> {
    std::fs::create_dir_all(dir)?;
    let cells = result.cells();
    let cells_path = dir.join("cells.csv");
    let plot_path = dir.join("plot_data.csv");
    write_cells(&cells, BufWriter::new(File::create(&cells_path)?), comment)?;
    write_plot_data(&cells, BufWriter::new(File::create(&plot_path)?), comment)?;
    Ok((cells_path, plot_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::SweepRecord;

    fn result(fractions: &[f64], series: &[&str]) -> SweepResult {
        let mut records = Vec::new();
        for &f in fractions {
            for s in series {
                for k in 0..3 {
                    records.push(SweepRecord {
                        fraction: f,
                        feature_set: s.to_string(),
                        seed: k,
                        map: 0.5 + 0.1 * k as f64 + f / 10.0,
                        per_class_ap: vec![Some(0.5)],
                    });
                }
            }
        }
        SweepResult {
            classes: 1,
            records,
        }
    }

    #[test]
    fn plot_rows_per_cell() {
        let fr = [0.01, 0.02, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0];
        let r = result(&fr, &["keypoints", "keypoints+treba"]);
        let dir = tempfile::tempdir().unwrap();
        let (_, plot) = emit_report(&r, dir.path(), Some("tag")).unwrap();
        let mut rd = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(plot)
            .unwrap();
        let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
        assert_eq!(rows.len(), 16);
        for (row, cell) in rows.iter().zip(r.cells()) {
            let err: f64 = row[2].parse().unwrap();
            assert_eq!(err, 1.0 - cell.map_mean);
            assert_eq!(&row[0], cell.feature_set.as_str());
        }
    }
}
