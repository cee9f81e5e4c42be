//! CSV and plot-series output with fixed number formatting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const REPORT_VERSION: u32 = 1;

/// Fixed-precision float for CSV cells so reruns produce identical bytes.
pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        let s = format!("{v:.9}");
        // avoid "-0.000000000"
        if s.trim_start_matches('-').trim_start_matches(['0', '.']).is_empty() {
            s.trim_start_matches('-').to_string()
        } else {
            s
        }
    }
}

pub fn write_csv<I>(path: impl AsRef<Path>, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// One named curve with optional error bars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub y_err: Vec<f64>,
}

impl PlotSeries {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), x: Vec::new(), y: Vec::new(), y_err: Vec::new() }
    }

    pub fn push(&mut self, x: f64, y: f64, err: f64) {
        self.x.push(x);
        self.y.push(y);
        self.y_err.push(err);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub version: u32,
    pub series: Vec<PlotSeries>,
}

impl PlotData {
    pub fn new(series: Vec<PlotSeries>) -> Self {
        Self { version: REPORT_VERSION, series }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Writes `series` as a plot-data JSON document.
pub fn emit_plot_data(series: &[PlotSeries], path: impl AsRef<Path>) -> Result<()> {
    PlotData::new(series.to_vec()).save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting_is_fixed() {
        assert_eq!(fmt_float(0.5), "0.500000000");
        assert_eq!(fmt_float(-1e-12), "0.000000000");
        assert_eq!(fmt_float(-2.0), "-2.000000000");
        assert_eq!(fmt_float(f64::NAN), "nan");
        assert_eq!(fmt_float(f64::INFINITY), "inf");
    }

    #[test]
    fn empty_plot_data_is_valid_json() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.json");
        emit_plot_data(&[], &p).unwrap();
        let back = PlotData::load(&p).unwrap();
        assert!(back.series.is_empty());
    }
}
