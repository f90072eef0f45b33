//! CSV ingestion and export of velocity and power series.
//!
//! Velocity files are wide: `t,vx_1,vy_1,...,vx_N,vy_N`. Power files are
//! `t,power_kw`. Lines starting with `#` are comments. The `t` column must
//! run 0,1,2,... without holes. Floats are written in shortest round-trip
//! form so a write/read cycle is bit-exact.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use num_complex::Complex64;

use super::{PowerSeries, VelocityField};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct VelocityIngest {
    /// Reject the file unless it carries exactly this many turbines.
    pub expected_turbines: Option<usize>,
    /// Accept empty or NaN cells and flag the whole step as a gap.
    pub allow_gaps: bool,
    /// Sampling interval in seconds; the default is ten minutes.
    pub sample_interval: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct PowerIngest {
    pub expected_len: Option<usize>,
    pub allow_gaps: bool,
}

enum Cell {
    Value(f64),
    Missing,
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(file))
}

fn csv_err(path: &Path, err: csv::Error) -> Error {
    let line = err.position().map_or(0, |p| p.line());
    match err.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        kind => parse_err(path, line, format!("{kind:?}")),
    }
}

fn parse_cell(path: &Path, line: u64, column: &str, raw: &str) -> Result<Cell> {
    if raw.is_empty() || raw.eq_ignore_ascii_case("nan") {
        return Ok(Cell::Missing);
    }
    raw.parse::<f64>()
        .map(Cell::Value)
        .map_err(|_| parse_err(path, line, format!("column {column}: cannot parse {raw:?} as a number")))
}

fn check_step(path: &Path, line: u64, raw: &str, expected: usize) -> Result<()> {
    let t: usize = raw
        .parse()
        .map_err(|_| parse_err(path, line, format!("column t: cannot parse {raw:?} as a step index")))?;
    if t != expected {
        return Err(parse_err(
            path,
            line,
            format!("step index {t} out of sequence, expected {expected}"),
        ));
    }
    Ok(())
}

/// Reads a wide-format velocity CSV.
pub fn load_velocity_field(path: impl AsRef<Path>, opts: &VelocityIngest) -> Result<VelocityField> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let header_line = rdr.position().line();
    let cols: Vec<&str> = header.iter().collect();
    if cols.first() != Some(&"t") || cols.len() < 3 || !(cols.len() - 1).is_multiple_of(2) {
        return Err(Error::Schema(format!(
            "{}: header must be t,vx_1,vy_1,...,vx_N,vy_N",
            path.display()
        )));
    }
    let n_turbines = (cols.len() - 1) / 2;
    for n in 0..n_turbines {
        let (vx, vy) = (format!("vx_{}", n + 1), format!("vy_{}", n + 1));
        if cols[1 + 2 * n] != vx || cols[2 + 2 * n] != vy {
            return Err(Error::Schema(format!(
                "{}: header column {} must be {vx},{vy}",
                path.display(),
                2 + 2 * n
            )));
        }
    }
    if let Some(expected) = opts.expected_turbines {
        if expected != n_turbines {
            return Err(Error::Schema(format!(
                "{}: header declares {n_turbines} turbines, expected {expected}",
                path.display()
            )));
        }
    }

    let mut rows: Vec<Vec<Complex64>> = vec![Vec::new(); n_turbines];
    let mut gaps = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut step = 0usize;
    while rdr.read_record(&mut record).map_err(|e| csv_err(path, e))? {
        let line = record.position().map_or(header_line, |p| p.line());
        if record.len() != cols.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", cols.len(), record.len()),
            ));
        }
        check_step(path, line, &record[0], step)?;
        let mut gap = false;
        for (n, row) in rows.iter_mut().enumerate() {
            let mut comp = [0.0; 2];
            for (c, slot) in comp.iter_mut().enumerate() {
                let col = 1 + 2 * n + c;
                match parse_cell(path, line, cols[col], &record[col])? {
                    Cell::Value(v) if v.is_finite() => *slot = v,
                    Cell::Value(_) => {
                        return Err(Error::Validation(format!(
                            "{}: non-finite velocity at turbine {}, step {step}",
                            path.display(),
                            n + 1
                        )))
                    }
                    Cell::Missing if opts.allow_gaps => gap = true,
                    Cell::Missing => {
                        return Err(Error::Validation(format!(
                            "{}: missing or NaN velocity at turbine {}, step {step} (column {}, line {line})",
                            path.display(),
                            n + 1,
                            cols[col]
                        )))
                    }
                }
            }
            row.push(Complex64::new(comp[0], comp[1]));
        }
        gaps.push(gap);
        step += 1;
    }

    let n_steps = step;
    let gaps = gaps.iter().any(|&g| g).then_some(gaps);
    let field = VelocityField::with_gaps(
        n_turbines,
        n_steps,
        rows.into_iter().flatten().collect(),
        gaps,
    )?;
    Ok(match opts.sample_interval {
        Some(s) => field.with_sample_interval(s),
        None => field,
    })
}

/// Reads a `t,power_kw` CSV.
pub fn load_power_series(path: impl AsRef<Path>, opts: &PowerIngest) -> Result<PowerSeries> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["t", "power_kw"] {
        return Err(Error::Schema(format!(
            "{}: header must be t,power_kw",
            path.display()
        )));
    }
    let mut values = Vec::new();
    let mut gaps = Vec::new();
    let mut record = csv::StringRecord::new();
    while rdr.read_record(&mut record).map_err(|e| csv_err(path, e))? {
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 2 {
            return Err(parse_err(path, line, format!("expected 2 fields, found {}", record.len())));
        }
        let step = values.len();
        check_step(path, line, &record[0], step)?;
        match parse_cell(path, line, "power_kw", &record[1])? {
            Cell::Value(v) => {
                if !v.is_finite() {
                    return Err(Error::Validation(format!(
                        "{}: non-finite power at step {step}",
                        path.display()
                    )));
                }
                if v < 0.0 {
                    return Err(Error::Validation(format!(
                        "{}: negative power {v} at step {step} (line {line})",
                        path.display()
                    )));
                }
                values.push(v);
                gaps.push(false);
            }
            Cell::Missing if opts.allow_gaps => {
                values.push(0.0);
                gaps.push(true);
            }
            Cell::Missing => {
                return Err(Error::Validation(format!(
                    "{}: missing or NaN power at step {step} (line {line})",
                    path.display()
                )))
            }
        }
    }
    if let Some(expected) = opts.expected_len {
        if expected != values.len() {
            return Err(Error::Schema(format!(
                "{}: {} power samples, expected {expected}",
                path.display(),
                values.len()
            )));
        }
    }
    let gaps = gaps.iter().any(|&g| g).then_some(gaps);
    PowerSeries::with_gaps(values, gaps)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn write_velocity_field(path: impl AsRef<Path>, field: &VelocityField) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = create(path)?;
    let n_turbines = field.n_turbines();
    writeln!(
        w,
        "# horizontal velocity [m/s], {n_turbines} turbines, {} steps, interval {} s",
        field.n_steps(),
        field.sample_interval()
    )
    .map_err(io)?;
    let mut header = String::from("t");
    for n in 1..=n_turbines {
        header.push_str(&format!(",vx_{n},vy_{n}"));
    }
    writeln!(w, "{header}").map_err(io)?;
    let mut line = String::new();
    for t in 0..field.n_steps() {
        line.clear();
        line.push_str(&t.to_string());
        for n in 0..n_turbines {
            if field.is_gap(t) {
                line.push_str(",,");
            } else {
                let v = field.get(n, t);
                line.push_str(&format!(",{},{}", v.re, v.im));
            }
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_power_series(path: impl AsRef<Path>, power: &PowerSeries) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = create(path)?;
    writeln!(w, "# total farm power [kW], {} steps", power.len()).map_err(io)?;
    writeln!(w, "t,power_kw").map_err(io)?;
    for (t, p) in power.values().iter().enumerate() {
        if power.is_gap(t) {
            writeln!(w, "{t},").map_err(io)?;
        } else {
            writeln!(w, "{t},{p}").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn constant_field_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "v.csv", "t,vx_1,vy_1,vx_2,vy_2\n0,1,0,1,0\n1,1,0,1,0\n2,1,0,1,0\n");
        let f = load_velocity_field(&p, &VelocityIngest::default()).unwrap();
        assert_eq!((f.n_turbines(), f.n_steps()), (2, 3));
        assert!(f.values().iter().all(|v| *v == Complex64::new(1.0, 0.0)));
    }

    #[test]
    fn nan_cell_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "v.csv", "t,vx_1,vy_1,vx_2,vy_2\n0,1,0,1,0\n1,1,0,NaN,0\n2,1,0,1,0\n");
        let err = load_velocity_field(&p, &VelocityIngest::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        let msg = err.to_string();
        assert!(msg.contains("turbine 2, step 1") && msg.contains("vx_2"), "{msg}");
    }

    #[test]
    fn gaps_flagged_when_allowed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "v.csv", "t,vx_1,vy_1\n0,1,0\n1,,\n2,3,0\n");
        let opts = VelocityIngest {
            allow_gaps: true,
            ..Default::default()
        };
        let f = load_velocity_field(&p, &opts).unwrap();
        assert_eq!(f.gap_mask(), Some(&[false, true, false][..]));
        assert_eq!(f.turbine_mean(0), Complex64::new(2.0, 0.0));
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "v.csv", "# comment\nt,vx_1,vy_1\n0,1,0\n1,abc,0\n");
        match load_velocity_field(&p, &VelocityIngest::default()).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 4, "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn turbine_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "v.csv", "t,vx_1,vy_1\n0,1,0\n1,1,0\n");
        let opts = VelocityIngest {
            expected_turbines: Some(3),
            ..Default::default()
        };
        assert!(matches!(load_velocity_field(&p, &opts), Err(Error::Schema(_))));
    }

    #[test]
    fn non_consecutive_steps_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "p.csv", "t,power_kw\n0,1\n2,1\n");
        assert!(matches!(
            load_power_series(&p, &PowerIngest::default()),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn power_loads_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "p.csv", "t,power_kw\n0,0.0\n1,5.0\n2,10.0\n");
        let s = load_power_series(&p, &PowerIngest::default()).unwrap();
        assert_eq!(s.values(), &[0.0, 5.0, 10.0]);

        let bad = write(&dir, "bad.csv", "t,power_kw\n0,1.0\n1,-1.0\n");
        assert!(matches!(
            load_power_series(&bad, &PowerIngest::default()),
            Err(Error::Validation(_))
        ));

        let opts = PowerIngest {
            expected_len: Some(4),
            ..Default::default()
        };
        assert!(matches!(load_power_series(&p, &opts), Err(Error::Schema(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_power_series("/nonexistent/p.csv", &PowerIngest::default()),
            Err(Error::Io { .. })
        ));
    }
}
