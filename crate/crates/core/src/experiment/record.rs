//! Record rows and their CSV encoding.

use std::io::{self, Write};

/// Significant digits in emitted decimals.
pub const SIGNIFICANT_DIGITS: usize = 12;

/// Decimal text with [`SIGNIFICANT_DIGITS`] significant digits.
///
/// Magnitudes in `[1e-5, 1e15)` are written positionally, others in
/// scientific notation; trailing zeros are dropped. Non-finite input has no
/// decimal form and returns `None`.
pub fn format_decimal(x: f64) -> Option<String> {
    if !x.is_finite() {
        return None;
    }
    if x == 0.0 {
        return Some("0".into());
    }
    let sci = format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("exponent is an integer");
    if (-5..15).contains(&exp) {
        let decimals = (SIGNIFICANT_DIGITS as i32 - 1 - exp).max(0) as usize;
        Some(trim_zeros(format!("{x:.decimals$}")))
    } else {
        Some(format!("{}e{exp}", trim_zeros(mantissa.to_string())))
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    let t = s.trim_end_matches('0').trim_end_matches('.');
    if t == "-0" { "0".into() } else { t.to_string() }
}

/// One row: run id, seed, step and the kind's metric values.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: usize,
    pub seed: u64,
    pub step: u64,
    pub metrics: Vec<f64>,
}

/// Records of one experiment, in `(run, step)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordTable {
    pub metric_columns: Vec<&'static str>,
    pub rows: Vec<RunRecord>,
}

impl RecordTable {
    pub fn header(&self) -> Vec<&'static str> {
        let mut h = vec!["run_id", "seed", "step"];
        h.extend(&self.metric_columns);
        h
    }

    /// Writes the header and all rows; fails on a non-finite metric.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{}", self.header().join(","))?;
        for row in &self.rows {
            if row.metrics.len() != self.metric_columns.len() {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("row has {} metrics for {} columns", row.metrics.len(), self.metric_columns.len()),
                ));
            }
            write!(out, "{},{},{}", row.run_id, row.seed, row.step)?;
            for (value, column) in row.metrics.iter().zip(&self.metric_columns) {
                let text = format_decimal(*value).ok_or_else(|| {
                    io::Error::new(
                        io::ErrorKind::InvalidData,
                        format!("{column} = {value} at run {} step {} is not finite", row.run_id, row.step),
                    )
                })?;
                write!(out, ",{text}")?;
            }
            writeln!(out)?;
        }
        out.flush()
    }
}
