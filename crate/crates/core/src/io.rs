//! CSV formats: simulated trajectories, observation streams and per-step
//! estimation records.
//!
//! Trajectory files have header `t,r,x_1..x_dx,y_1..y_dy` and one row per
//! time step starting at `t = 0`; the `t = 0` row leaves the `y` cells
//! empty. Record files have header `t,<params>,xhat_*,p_mode_*`. Lines
//! starting with `#` are comments.

use std::io::{BufRead, BufReader, Read, Write};

use crate::em::StepRecord;
use crate::error::{Error, Result};
use crate::simulate::Trajectory;

/// Writes `traj`; `labels[k]` is the label printed for zero-based mode `k`.
pub fn write_trajectory<W: Write>(traj: &Trajectory, labels: &[i64], mut w: W) -> Result<()> {
    let dx = traj.x.first().map_or(0, Vec::len);
    let dy = traj.y.first().map_or(0, Vec::len);
    let mut header = vec!["t".to_string(), "r".to_string()];
    header.extend((1..=dx).map(|i| format!("x_{i}")));
    header.extend((1..=dy).map(|i| format!("y_{i}")));
    writeln!(w, "{}", header.join(","))?;
    for (t, (x, r)) in traj.x.iter().zip(&traj.r).enumerate() {
        let label = labels.get(r.index()).copied().unwrap_or(r.get() as i64);
        let mut line = format!("{t},{label}");
        for v in x {
            line.push_str(&format!(",{v}"));
        }
        match t.checked_sub(1).and_then(|i| traj.y.get(i)) {
            Some(y) => y.iter().for_each(|v| line.push_str(&format!(",{v}"))),
            None => (0..dy).for_each(|_| line.push(',')),
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Streams observation vectors out of any CSV with `y_1..y_dy` columns.
/// Rows whose `y` cells are all empty (the `t = 0` row of a trajectory
/// file) are skipped.
pub struct ObservationReader<R: Read> {
    records: csv::StringRecordsIntoIter<R>,
    columns: Vec<usize>,
}

impl<R: Read> ObservationReader<R> {
    pub fn new(reader: R, meas_dim: usize) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(|e| csv_error(e, 1))?.clone();
        let mut columns = Vec::with_capacity(meas_dim);
        for i in 1..=meas_dim {
            let name = format!("y_{i}");
            let idx = header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Parse { line: 1, message: format!("missing column {name}") })?;
            columns.push(idx);
        }
        if header.iter().any(|h| h == format!("y_{}", meas_dim + 1)) {
            return Err(Error::Parse { line: 1, message: format!("more than {meas_dim} observation columns") });
        }
        Ok(Self { records: rdr.into_records(), columns })
    }
}

fn csv_error(e: csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line());
    Error::Parse { line, message: e.to_string() }
}

impl<R: Read> Iterator for ObservationReader<R> {
    type Item = Result<Vec<f64>>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let record = match self.records.next()? {
                Ok(r) => r,
                Err(e) => return Some(Err(csv_error(e, 0))),
            };
            let line = record.position().map_or(0, |p| p.line());
            let cells: Vec<&str> = self.columns.iter().map(|&i| record.get(i).unwrap_or("")).collect();
            if cells.iter().all(|c| c.is_empty()) {
                continue;
            }
            let parsed = cells
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    c.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::Parse { line, message: format!("y_{}: invalid number {c:?}", i + 1) })
                })
                .collect();
            return Some(parsed);
        }
    }
}

/// Writes per-step records as they arrive.
pub struct RecordWriter<W: Write> {
    out: W,
    columns: usize,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(mut out: W, header: &[String]) -> Result<Self> {
        writeln!(out, "{}", header.join(","))?;
        Ok(Self { out, columns: header.len() })
    }

    pub fn write(&mut self, record: &StepRecord) -> Result<()> {
        let mut line = record.t.to_string();
        let mut n = 1;
        for v in record.values() {
            line.push_str(&format!(",{v}"));
            n += 1;
        }
        if n != self.columns {
            return Err(Error::Dimension(format!("record has {n} columns, header has {}", self.columns)));
        }
        writeln!(self.out, "{line}")?;
        Ok(())
    }

    /// Appends a `# ...` comment line.
    pub fn comment(&mut self, text: &str) -> Result<()> {
        writeln!(self.out, "# {text}")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Fully parsed record file: header plus numeric rows, comments dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl RecordTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

pub fn read_record_table<R: Read>(reader: R) -> Result<RecordTable> {
    let mut lines = BufReader::new(reader).lines();
    let mut header = None;
    let mut rows = Vec::new();
    let mut line_no = 0u64;
    while let Some(line) = lines.next().transpose()? {
        line_no += 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        match &header {
            None => header = Some(cells.iter().map(|s| s.to_string()).collect::<Vec<_>>()),
            Some(h) => {
                if cells.len() != h.len() {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("expected {} fields, found {}", h.len(), cells.len()),
                    });
                }
                let row = cells
                    .iter()
                    .map(|c| {
                        c.parse::<f64>()
                            .map_err(|_| Error::Parse { line: line_no, message: format!("invalid number {c:?}") })
                    })
                    .collect::<Result<Vec<_>>>()?;
                rows.push(row);
            }
        }
    }
    let header = header.ok_or_else(|| Error::Parse { line: line_no, message: "missing header".into() })?;
    Ok(RecordTable { header, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModeId;

    fn tiny() -> Trajectory {
        Trajectory {
            x: vec![vec![0.0], vec![1.5], vec![-2.25]],
            r: vec![ModeId::from_index(0), ModeId::from_index(1), ModeId::from_index(0)],
            y: vec![vec![0.1], vec![3.0e-7]],
            seed: 3,
        }
    }

    #[test]
    fn trajectory_layout() {
        let mut buf = Vec::new();
        write_trajectory(&tiny(), &[0, 1], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines, ["t,r,x_1,y_1", "0,0,0,", "1,1,1.5,0.1", "2,0,-2.25,0.0000003"]);
    }

    #[test]
    fn observations_round_trip() {
        let mut buf = Vec::new();
        write_trajectory(&tiny(), &[1, 2], &mut buf).unwrap();
        let ys: Vec<Vec<f64>> = ObservationReader::new(buf.as_slice(), 1).unwrap().map(|r| r.unwrap()).collect();
        assert_eq!(ys, tiny().y);
    }

    #[test]
    fn truncated_line_names_line() {
        let text = "t,r,x_1,y_1\n0,1,0,\n1,1,0.5,0.2\n2,1,0.7\n";
        let results: Vec<_> = ObservationReader::new(text.as_bytes(), 1).unwrap().collect();
        assert!(results[0].is_ok());
        match &results[1] {
            Err(Error::Parse { line, .. }) => assert_eq!(*line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_number_and_missing_column() {
        let text = "y_1\n0.5\nabc\n";
        let results: Vec<_> = ObservationReader::new(text.as_bytes(), 1).unwrap().collect();
        assert!(matches!(results[1], Err(Error::Parse { line: 3, .. })));
        assert!(matches!(ObservationReader::new("t,x_1\n".as_bytes(), 1), Err(Error::Parse { line: 1, .. })));
        assert!(ObservationReader::new("y_1,y_2\n".as_bytes(), 1).is_err());
    }

    #[test]
    fn record_table_skips_comments() {
        let mut w = RecordWriter::new(Vec::new(), &["t".into(), "a".into()]).unwrap();
        w.write(&StepRecord { t: 1, params: vec![0.5], state_mean: vec![], mode_marginal: vec![] }).unwrap();
        w.comment("collapsed at t=2").unwrap();
        let bytes = w.finish().unwrap();
        let table = read_record_table(bytes.as_slice()).unwrap();
        assert_eq!(table.header, ["t", "a"]);
        assert_eq!(table.rows, vec![vec![1.0, 0.5]]);
        let mut bad = RecordWriter::new(Vec::new(), &["t".into()]).unwrap();
        assert!(bad.write(&StepRecord { t: 1, params: vec![0.5], state_mean: vec![], mode_marginal: vec![] }).is_err());
    }
}
