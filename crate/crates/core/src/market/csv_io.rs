use std::io::Read;
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::DMatrix;

use crate::error::{MmvError, Result};

/// A table whose first column is an ISO date and whose remaining columns are
/// decimal values.
#[derive(Debug, Clone, PartialEq)]
pub struct DatedSeries {
    pub columns: Vec<String>,
    pub dates: Vec<NaiveDate>,
    /// One row per date.
    pub rows: Vec<Vec<f64>>,
}

impl DatedSeries {
    pub fn from_reader<R: Read>(reader: R, name: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() < 2 {
            return Err(MmvError::Calibration(format!(
                "{name}: expected a date column followed by at least one value column"
            )));
        }
        let columns: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut dates = Vec::new();
        let mut rows = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            if record.len() != headers.len() {
                return Err(MmvError::Calibration(format!(
                    "{name} line {line}: expected {} fields, found {}",
                    headers.len(),
                    record.len()
                )));
            }
            let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d").map_err(|e| {
                MmvError::Calibration(format!("{name} line {line}: bad date '{}': {e}", &record[0]))
            })?;
            if dates.last().is_some_and(|d| *d >= date) {
                return Err(MmvError::Calibration(format!(
                    "{name} line {line}: dates must be strictly increasing ({date})"
                )));
            }
            let values = record
                .iter()
                .skip(1)
                .zip(&columns)
                .map(|(field, col)| {
                    field
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| {
                            MmvError::Calibration(format!(
                                "{name} line {line}: column '{col}' value '{field}' is not a finite number"
                            ))
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            dates.push(date);
            rows.push(values);
        }
        if rows.is_empty() {
            return Err(MmvError::Calibration(format!("{name}: no data rows")));
        }
        Ok(Self {
            columns,
            dates,
            rows,
        })
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), self.columns.len(), |i, j| self.rows[i][j])
    }
}

/// Reads a dated CSV file (header row, ISO date first column).
pub fn read_dated_csv(path: impl AsRef<Path>) -> Result<DatedSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    DatedSeries::from_reader(file, &path.display().to_string())
}

/// Joins returns and factors on date. Both tables must cover exactly the
/// same dates; the first date present in only one of them is reported.
pub fn align_on_dates(
    returns: &DatedSeries,
    factors: &DatedSeries,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    for (i, (a, b)) in returns.dates.iter().zip(&factors.dates).enumerate() {
        if a != b {
            let first = a.min(b);
            let side = if a < b { "returns" } else { "factors" };
            return Err(MmvError::Calibration(format!(
                "unmatched date {first} (present only in {side}, row {})",
                i + 1
            )));
        }
    }
    let (nr, nf) = (returns.dates.len(), factors.dates.len());
    if nr != nf {
        let (date, side) = if nr > nf {
            (returns.dates[nf], "returns")
        } else {
            (factors.dates[nr], "factors")
        };
        return Err(MmvError::Calibration(format!(
            "unmatched date {date} (present only in {side})"
        )));
    }
    Ok((returns.to_matrix(), factors.to_matrix()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_aligns() {
        let r = DatedSeries::from_reader(
            "date,a,b\n2020-01-31,0.01,0.02\n2020-02-29,-0.01,0.03\n".as_bytes(),
            "r",
        )
        .unwrap();
        let f = DatedSeries::from_reader("date,m\n2020-01-31,0.5\n2020-02-29,0.1\n".as_bytes(), "f")
            .unwrap();
        let (rm, fm) = align_on_dates(&r, &f).unwrap();
        assert_eq!(rm.shape(), (2, 2));
        assert_eq!(fm[(1, 0)], 0.1);
    }

    #[test]
    fn bad_value_reports_line() {
        let err = DatedSeries::from_reader("date,a\n2020-01-31,0.01\n2020-02-29,x\n".as_bytes(), "r")
            .unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn unmatched_date_is_named() {
        let r = DatedSeries::from_reader("date,a\n2020-01-31,0.01\n2020-02-29,0.0\n".as_bytes(), "r")
            .unwrap();
        let f = DatedSeries::from_reader("date,m\n2020-01-31,0.5\n2020-03-31,0.1\n".as_bytes(), "f")
            .unwrap();
        let err = align_on_dates(&r, &f).unwrap_err();
        assert!(err.to_string().contains("2020-02-29"), "{err}");
    }
}
