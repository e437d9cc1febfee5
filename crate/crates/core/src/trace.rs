//! Per-iteration loss trace shared by both optimization stages.

use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub t: f64,
    /// Mean-square guidance gradient per view, keyed by view tag.
    pub view_magnitudes: Vec<(String, f64)>,
    /// Geometric loss in Stage I, smoothness loss in Stage II.
    pub regularizer: f64,
}

impl TraceRow {
    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.regularizer.is_finite() && self.view_magnitudes.iter().all(|(_, v)| v.is_finite())
    }

    pub fn magnitude(&self, view: &str) -> Option<f64> {
        self.view_magnitudes.iter().find(|(k, _)| k == view).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace {
    pub view_columns: Vec<String>,
    pub regularizer_column: String,
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn new(view_columns: Vec<String>, regularizer_column: impl Into<String>) -> Self {
        Self {
            view_columns,
            regularizer_column: regularizer_column.into(),
            rows: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: TraceRow) {
        self.rows.push(row);
    }

    /// CSV with header `iter,t,<views…>,<regularizer>`. Views absent from a
    /// row (an unsampled top view) leave an empty cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,t");
        for c in &self.view_columns {
            out.push(',');
            out.push_str(c);
        }
        let _ = writeln!(out, ",{}", self.regularizer_column);
        for row in &self.rows {
            let _ = write!(out, "{},{:e}", row.iter, row.t);
            for c in &self.view_columns {
                match row.magnitude(c) {
                    Some(v) => {
                        let _ = write!(out, ",{v:e}");
                    }
                    None => out.push(','),
                }
            }
            let _ = writeln!(out, ",{:e}", row.regularizer);
        }
        out
    }
}
