//! Minute-bar market data: loading, validation, summary statistics and a
//! synthetic generator.
//!
//! The on-disk format is a CSV with the exact header
//! `timestamp,open,high,low,close,volume,num_ticks`, timestamps in UTC
//! ISO-8601 (`YYYY-MM-DDTHH:MM:SS`, minute resolution). Prices must be
//! positive, `low <= min(open, close) <= max(open, close) <= high`, and
//! timestamps strictly increasing. Zero-volume / zero-tick bars are valid
//! and kept; downstream features define neutral treatments for them.

mod synth;

pub use synth::{synthesize_bars, GeneratorConfig, SessionTemplate};

use std::io::{Read, Write};
use std::path::Path;

use chrono::{NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Timestamp format used by the bar CSV files.
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

const CSV_HEADER: [&str; 7] = [
    "timestamp",
    "open",
    "high",
    "low",
    "close",
    "volume",
    "num_ticks",
];

/// One minute OHLCV record with tick count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    /// UTC timestamp at minute resolution.
    pub timestamp: NaiveDateTime,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    /// Shares traded during the minute. May be zero.
    pub volume: u64,
    /// Trade count during the minute. May be zero.
    pub num_ticks: u64,
}

impl Bar {
    /// Checks the OHLC invariants; `row` is only used for error reporting.
    pub fn validate(&self, row: Option<u64>) -> Result<()> {
        let err = |msg: String| Error::Validation { row, msg };
        if !(self.open > 0.0 && self.high > 0.0 && self.low > 0.0 && self.close > 0.0) {
            return Err(err(format!(
                "prices must be positive (O={} H={} L={} C={})",
                self.open, self.high, self.low, self.close
            )));
        }
        for v in [self.open, self.high, self.low, self.close] {
            if !v.is_finite() {
                return Err(err("non-finite price".into()));
            }
        }
        if self.low > self.high {
            return Err(err(format!("low {} > high {}", self.low, self.high)));
        }
        if self.low > self.open.min(self.close) {
            return Err(err(format!(
                "low {} above min(open, close) = {}",
                self.low,
                self.open.min(self.close)
            )));
        }
        if self.high < self.open.max(self.close) {
            return Err(err(format!(
                "high {} below max(open, close) = {}",
                self.high,
                self.open.max(self.close)
            )));
        }
        Ok(())
    }

    /// `(high - low) / close`, the per-bar spread stand-in.
    pub fn spread_proxy(&self) -> f64 {
        (self.high - self.low) / self.close
    }
}

/// A validated, time-ordered series of bars for one symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarSeries {
    pub symbol: String,
    bars: Vec<Bar>,
}

impl BarSeries {
    /// Builds a series, enforcing non-emptiness, per-bar invariants and
    /// strictly increasing timestamps.
    pub fn new(symbol: impl Into<String>, bars: Vec<Bar>) -> Result<Self> {
        if bars.is_empty() {
            return Err(Error::EmptyInput("bar series has no rows".into()));
        }
        for (i, bar) in bars.iter().enumerate() {
            bar.validate(Some(i as u64 + 1))?;
        }
        for (i, pair) in bars.windows(2).enumerate() {
            if pair[1].timestamp <= pair[0].timestamp {
                return Err(Error::Validation {
                    row: Some(i as u64 + 2),
                    msg: format!(
                        "timestamps must be strictly increasing ({} then {})",
                        pair[0].timestamp.format(TIMESTAMP_FORMAT),
                        pair[1].timestamp.format(TIMESTAMP_FORMAT)
                    ),
                });
            }
        }
        Ok(Self {
            symbol: symbol.into(),
            bars,
        })
    }

    pub fn bars(&self) -> &[Bar] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    /// Close-to-close log returns, `returns()[i] = ln(C[i+1] / C[i])`.
    pub fn log_returns(&self) -> Vec<f64> {
        self.bars
            .windows(2)
            .map(|w| (w[1].close / w[0].close).ln())
            .collect()
    }

    /// Writes the series in the canonical CSV format.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(CSV_HEADER)?;
        for bar in &self.bars {
            out.write_record(&[
                bar.timestamp.format(TIMESTAMP_FORMAT).to_string(),
                format_f64(bar.open),
                format_f64(bar.high),
                format_f64(bar.low),
                format_f64(bar.close),
                bar.volume.to_string(),
                bar.num_ticks.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let line = match e.position() {
            Some(pos) => pos.line(),
            None => 0,
        };
        Error::Parse {
            line,
            msg: e.to_string(),
        }
    }
}

/// Shortest decimal representation that round-trips exactly through `parse`.
fn format_f64(v: f64) -> String {
    let mut buf = ryu_format(v);
    // Keep integral values readable ("600" not "600.0" is ambiguous for
    // humans; retain the trailing ".0" the formatter gives us).
    if !buf.contains('.') && !buf.contains('e') && !buf.contains("inf") && !buf.contains("NaN") {
        buf.push_str(".0");
    }
    buf
}

fn ryu_format(v: f64) -> String {
    format!("{v}")
}

/// Parses and validates bars from a CSV reader.
///
/// Rows failing the `Bar` invariants or the strict time ordering are
/// rejected with the offending line number (header is line 1).
pub fn load_bars<R: Read>(reader: R, symbol: &str) -> Result<BarSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let headers = rdr.headers()?.clone();
    if headers.len() != CSV_HEADER.len()
        || headers.iter().zip(CSV_HEADER.iter()).any(|(a, b)| a != *b)
    {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "expected header `{}`, got `{}`",
                CSV_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    let mut bars = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let bar = parse_bar(&record, line)?;
        bar.validate(Some(line))?;
        if let Some(prev) = bars.last() {
            let prev: &Bar = prev;
            if bar.timestamp <= prev.timestamp {
                return Err(Error::Validation {
                    row: Some(line),
                    msg: format!(
                        "timestamp {} not strictly after previous {}",
                        bar.timestamp.format(TIMESTAMP_FORMAT),
                        prev.timestamp.format(TIMESTAMP_FORMAT)
                    ),
                });
            }
        }
        bars.push(bar);
    }

    if bars.is_empty() {
        return Err(Error::EmptyInput("CSV contains no data rows".into()));
    }
    BarSeries::new(symbol, bars)
}

/// File-path convenience wrapper around [`load_bars`].
pub fn load_bars_path(path: impl AsRef<Path>, symbol: &str) -> Result<BarSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| {
        Error::MissingArtifact(format!("cannot open bar file {}: {e}", path.display()))
    })?;
    load_bars(std::io::BufReader::new(file), symbol)
}

fn parse_bar(record: &csv::StringRecord, line: u64) -> Result<Bar> {
    if record.len() != CSV_HEADER.len() {
        return Err(Error::Parse {
            line,
            msg: format!("expected {} fields, got {}", CSV_HEADER.len(), record.len()),
        });
    }
    let field = |i: usize| record.get(i).unwrap_or("");
    let timestamp = NaiveDateTime::parse_from_str(field(0), TIMESTAMP_FORMAT).map_err(|e| {
        Error::Parse {
            line,
            msg: format!("bad timestamp `{}`: {e}", field(0)),
        }
    })?;
    let num = |i: usize| -> Result<f64> {
        field(i).parse::<f64>().map_err(|e| Error::Parse {
            line,
            msg: format!("bad number `{}` in column {}: {e}", field(i), CSV_HEADER[i]),
        })
    };
    let int = |i: usize| -> Result<u64> {
        field(i).parse::<u64>().map_err(|e| Error::Parse {
            line,
            msg: format!(
                "bad non-negative integer `{}` in column {}: {e}",
                field(i),
                CSV_HEADER[i]
            ),
        })
    };
    Ok(Bar {
        timestamp,
        open: num(1)?,
        high: num(2)?,
        low: num(3)?,
        close: num(4)?,
        volume: int(5)?,
        num_ticks: int(6)?,
    })
}

// ── Summary statistics ──────────────────────────────────────────────────

/// Location and dispersion of one variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableStats {
    pub mean: f64,
    /// Sample standard deviation (n-1 denominator); 0 for fewer than 2 values.
    pub std: f64,
    pub min: f64,
    pub p25: f64,
    pub p75: f64,
    pub max: f64,
}

/// [`VariableStats`] plus higher moments, used for log returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogReturnStats {
    #[serde(flatten)]
    pub stats: VariableStats,
    /// `None` when the return variance is zero (moments undefined).
    pub skewness: Option<f64>,
    /// Kurtosis minus 3; `None` when the return variance is zero.
    pub excess_kurtosis: Option<f64>,
}

/// Per-variable summary of a bar series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub symbol: String,
    pub n_bars: usize,
    pub close: VariableStats,
    pub volume: VariableStats,
    pub log_returns: LogReturnStats,
    pub spread_proxy: VariableStats,
    pub num_ticks: VariableStats,
}

/// Options controlling [`summarize_with`].
#[derive(Debug, Clone, Copy)]
pub struct SummaryOptions {
    /// When false, log returns spanning a calendar-date change are dropped.
    pub include_cross_session_returns: bool,
}

impl Default for SummaryOptions {
    fn default() -> Self {
        Self {
            include_cross_session_returns: true,
        }
    }
}

/// Summarizes with default options (cross-session returns included).
pub fn summarize(series: &BarSeries) -> Result<SummaryStats> {
    summarize_with(series, SummaryOptions::default())
}

pub fn summarize_with(series: &BarSeries, opts: SummaryOptions) -> Result<SummaryStats> {
    if series.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: series.len(),
        });
    }
    let bars = series.bars();
    let closes: Vec<f64> = bars.iter().map(|b| b.close).collect();
    let volumes: Vec<f64> = bars.iter().map(|b| b.volume as f64).collect();
    let spreads: Vec<f64> = bars.iter().map(Bar::spread_proxy).collect();
    let ticks: Vec<f64> = bars.iter().map(|b| b.num_ticks as f64).collect();

    let mut returns = Vec::with_capacity(bars.len() - 1);
    for w in bars.windows(2) {
        let cross_session = w[0].timestamp.date() != w[1].timestamp.date();
        if cross_session && !opts.include_cross_session_returns {
            continue;
        }
        returns.push((w[1].close / w[0].close).ln());
    }
    if returns.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }

    let ret_stats = variable_stats(&returns);
    let (skewness, excess_kurtosis) = higher_moments(&returns);

    Ok(SummaryStats {
        symbol: series.symbol.clone(),
        n_bars: series.len(),
        close: variable_stats(&closes),
        volume: variable_stats(&volumes),
        log_returns: LogReturnStats {
            stats: ret_stats,
            skewness,
            excess_kurtosis,
        },
        spread_proxy: variable_stats(&spreads),
        num_ticks: variable_stats(&ticks),
    })
}

fn variable_stats(values: &[f64]) -> VariableStats {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    VariableStats {
        mean,
        std,
        min: sorted[0],
        p25: percentile(&sorted, 0.25),
        p75: percentile(&sorted, 0.75),
        max: sorted[n - 1],
    }
}

/// Linear-interpolation percentile on an already sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Population skewness and excess kurtosis; `None` when variance is zero.
fn higher_moments(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if m2 <= 0.0 {
        return (None, None);
    }
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    (Some(m3 / m2.powf(1.5)), Some(m4 / (m2 * m2) - 3.0))
}

/// Minute of day, used by the intraday profile report.
pub fn minute_of_day(ts: NaiveDateTime) -> u32 {
    ts.hour() * 60 + ts.minute()
}
