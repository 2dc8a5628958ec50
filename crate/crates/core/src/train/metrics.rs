//! Per-epoch metric records and their CSV form.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,split,metric,value";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<Record>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, epoch: usize, split: &str, metric: &str, value: f64) -> &Record {
        self.records.push(Record {
            epoch,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        });
        self.records.last().unwrap()
    }

    pub fn extend(&mut self, other: MetricsLog) {
        self.records.extend(other.records);
    }

    /// Values of one `(split, metric)` series in epoch order.
    pub fn series(&self, split: &str, metric: &str) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| (r.epoch, r.value))
            .collect()
    }

    pub fn last(&self, split: &str, metric: &str) -> Option<f64> {
        self.series(split, metric).last().map(|&(_, v)| v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.split, r.metric, format_g6(r.value));
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(Error::Data("metrics file lacks the expected header".into()));
        }
        let mut log = Self::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || Error::Data(format!("metrics line {}: `{line}`", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            let [epoch, split, metric, value] = f[..] else { return Err(bad()) };
            log.push(
                epoch.parse().map_err(|_| bad())?,
                split,
                metric,
                value.parse().map_err(|_| bad())?,
            );
        }
        Ok(log)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// `printf("%g")`: six significant digits, trailing zeros removed,
/// exponent form outside `[1e-4, 1e6)`.
pub fn format_g6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
