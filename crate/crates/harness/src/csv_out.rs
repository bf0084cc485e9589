//! CSV emission with fixed schemas.

use std::io::Write;

use zsq_core::dynamics::DriftRow;
use zsq_core::learner::DiagnosticRecord;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
    Missing,
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Missing, Cell::Float)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn format_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => format_float(*v),
            Cell::Text(s) => s.clone(),
            Cell::Missing => String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schema {
    pub name: &'static str,
    pub columns: &'static [&'static str],
}

pub const DIAGNOSTICS: Schema = Schema {
    name: "diagnostics",
    columns: &["t", "k", "L_v", "L_sum", "L_theta", "L_w", "nash_gap", "td_norm_1", "td_norm_2"],
};

pub const DRIFT: Schema = Schema {
    name: "drift",
    columns: &["k", "V_k", "V_{k+1}", "bound", "slack", "noise_x_norm", "noise_y_norm"],
};

pub const DRIFT_SUMMARY: Schema = Schema {
    name: "drift_summary",
    columns: &["trial", "rows", "cols", "steps", "satisfied", "min_slack", "update_bound"],
};

pub const VALUES: Schema = Schema {
    name: "values",
    columns: &["state", "v_1", "v_2"],
};

pub const VI_LOG: Schema = Schema {
    name: "vi_log",
    columns: &["player", "iteration", "residual"],
};

pub const GAP: Schema = Schema {
    name: "gap",
    columns: &["gap_1", "gap_2", "total"],
};

pub const DIAGNOSE: Schema = Schema {
    name: "diagnose",
    columns: &["quantity", "player", "value"],
};

pub const STATIONARY: Schema = Schema {
    name: "stationary",
    columns: &["state", "probability"],
};

/// A row type with a fixed schema.
pub trait CsvRecord {
    fn schema() -> Schema;
    fn cells(&self) -> Vec<Cell>;
}

impl CsvRecord for DiagnosticRecord {
    fn schema() -> Schema {
        DIAGNOSTICS
    }

    fn cells(&self) -> Vec<Cell> {
        vec![
            self.t.into(),
            self.k.into(),
            self.l_v.into(),
            self.l_sum.into(),
            self.l_theta.into(),
            self.l_w.into(),
            self.nash_gap.into(),
            self.td_norm[0].into(),
            self.td_norm[1].into(),
        ]
    }
}

impl CsvRecord for DriftRow {
    fn schema() -> Schema {
        DRIFT
    }

    fn cells(&self) -> Vec<Cell> {
        vec![
            self.k.into(),
            self.v_k.into(),
            self.v_next.into(),
            self.bound.into(),
            self.slack.into(),
            self.noise_x_norm.into(),
            self.noise_y_norm.into(),
        ]
    }
}

/// Writes the header of `schema` and then every row. A row whose width
/// differs from the schema is a configuration error.
pub fn emit_csv<W: Write>(schema: &Schema, rows: impl IntoIterator<Item = Vec<Cell>>, out: W) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    writer.write_record(schema.columns)?;
    for (i, row) in rows.into_iter().enumerate() {
        if row.len() != schema.columns.len() {
            return Err(HarnessError::config(format!(
                "row {} has {} fields but schema `{}` has {} columns",
                i + 1,
                row.len(),
                schema.name,
                schema.columns.len()
            )));
        }
        writer.write_record(row.iter().map(Cell::render))?;
    }
    writer.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// `emit_csv` for a typed record stream that must carry `schema`.
pub fn emit_records<'a, R: CsvRecord + 'a, W: Write>(
    schema: &Schema,
    records: impl IntoIterator<Item = &'a R>,
    out: W,
) -> Result<()> {
    if R::schema() != *schema {
        return Err(HarnessError::config(format!(
            "records of schema `{}` cannot be written as `{}`",
            R::schema().name,
            schema.name
        )));
    }
    emit_csv(schema, records.into_iter().map(CsvRecord::cells), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn render(schema: &Schema, rows: Vec<Vec<Cell>>) -> Result<String> {
        let mut buf = Vec::new();
        emit_csv(schema, rows, &mut buf)?;
        Ok(String::from_utf8(buf).unwrap())
    }

    #[test]
    fn empty_stream_is_header_only() {
        assert_eq!(render(&GAP, vec![]).unwrap(), "gap_1,gap_2,total\n");
    }

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, 0.0] {
            let s = format_float(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
            let mantissa = s.split('e').next().unwrap().trim_start_matches('-');
            assert_eq!(mantissa.chars().filter(char::is_ascii_digit).count(), 17);
        }
    }

    #[test]
    fn missing_values_are_empty_fields() {
        let out = render(&GAP, vec![vec![Cell::Missing, 1.0.into(), Cell::Missing]]).unwrap();
        assert_eq!(out.lines().nth(1), Some(",1.0000000000000000e0,"));
    }

    #[test]
    fn wrong_width_is_a_config_error() {
        let err = render(&GAP, vec![vec![1.0.into()]]).unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)));
    }

    #[test]
    fn wrong_schema_is_a_config_error() {
        let rows: Vec<DriftRow> = Vec::new();
        let err = emit_records(&DIAGNOSTICS, &rows, Vec::new()).unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)));
    }

    #[test]
    fn diagnostic_record_matches_its_schema() {
        let rec = DiagnosticRecord {
            t: 3,
            k: 10,
            l_v: Some(0.5),
            l_sum: None,
            l_theta: None,
            l_w: None,
            nash_gap: Some(0.25),
            td_norm: [1.0, 2.0],
        };
        let mut buf = Vec::new();
        emit_records(&DIAGNOSTICS, [&rec], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().nth(1).unwrap(),
            "3,10,5.0000000000000000e-1,,,,2.5000000000000000e-1,1.0000000000000000e0,2.0000000000000000e0"
        );
    }
}
