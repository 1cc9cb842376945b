//! The 17-column microstructure feature matrix.
//!
//! Column order is contractual — model files, importances and the feature
//! CSV all depend on it:
//!
//! | # | name | definition (row at bar `t`) |
//! |---|------|------------------------------|
//! | 0–4 | `returns_lag_1..5` | `ln(C_{t-j+1} / C_{t-j})` for lag `j` |
//! | 5 | `spread_proxy` | `(H_t - L_t) / C_t` |
//! | 6 | `spread_lag_1` | spread proxy of bar `t-1` |
//! | 7 | `spread_change` | `spread_proxy - spread_lag_1` |
//! | 8 | `volume_ratio` | `V_t / V_{t-1}` (1.0 when `V_{t-1} = 0`) |
//! | 9 | `volume_relative` | `V_t / mean(V_{t-4..t})` (1.0 when the mean is 0) |
//! | 10 | `tick_intensity` | `ticks_t / mean(ticks_{t-4..t})` (1.0 when the mean is 0) |
//! | 11 | `realized_vol_5m` | sample std of the last 5 log returns |
//! | 12 | `price_range_norm` | `(max H - min L)_{t-4..t} / C_t` |
//! | 13 | `ofi` | trailing signed-volume sum, see [`order_flow_imbalance`] |
//! | 14 | `hour` | 0–23 |
//! | 15 | `minute` | 0–59 |
//! | 16 | `session_indicator` | 2 = first 30 min, 1 = last 30 min, 0 = midday |
//!
//! The label at row `t` is 1 when `ln(C_{t+1}/C_t) > 0`, 0 when negative;
//! rows whose next return is exactly zero are dropped (no direction to
//! learn). The first [`WARMUP`] bars carry undefined rolling windows and
//! produce no rows, so a series of `n` bars yields
//! `n - WARMUP - 1 - (zero-return rows)` rows. No feature looks at data
//! past bar `t`.

use std::io::Write;
use std::path::Path;

use chrono::{NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::{minute_of_day, Bar, BarSeries};

/// Number of predictor columns.
pub const N_FEATURES: usize = 17;

/// Bars consumed by rolling windows before the first feature row.
pub const WARMUP: usize = 5;

/// Canonical column order.
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "returns_lag_1",
    "returns_lag_2",
    "returns_lag_3",
    "returns_lag_4",
    "returns_lag_5",
    "spread_proxy",
    "spread_lag_1",
    "spread_change",
    "volume_ratio",
    "volume_relative",
    "tick_intensity",
    "realized_vol_5m",
    "price_range_norm",
    "ofi",
    "hour",
    "minute",
    "session_indicator",
];

/// Named column indices into [`FeatureRow::predictors`].
pub mod col {
    pub const RETURNS_LAG_1: usize = 0;
    pub const SPREAD_PROXY: usize = 5;
    pub const SPREAD_LAG_1: usize = 6;
    pub const SPREAD_CHANGE: usize = 7;
    pub const VOLUME_RATIO: usize = 8;
    pub const VOLUME_RELATIVE: usize = 9;
    pub const TICK_INTENSITY: usize = 10;
    pub const REALIZED_VOL_5M: usize = 11;
    pub const PRICE_RANGE_NORM: usize = 12;
    pub const OFI: usize = 13;
    pub const HOUR: usize = 14;
    pub const MINUTE: usize = 15;
    pub const SESSION_INDICATOR: usize = 16;
}

/// Session-indicator encodings.
pub const SESSION_OPEN_30MIN: f64 = 2.0;
pub const SESSION_CLOSE_30MIN: f64 = 1.0;
pub const SESSION_MIDDAY: f64 = 0.0;

/// One labelled observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub timestamp: NaiveDateTime,
    pub predictors: [f64; N_FEATURES],
    /// 1 for an up next move, 0 for down. Zero moves never reach a row.
    pub label: u8,
    /// The signed next-step log return the label was derived from.
    pub next_return: f64,
}

/// Ordered collection of feature rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: Vec<FeatureRow>,
    feature_names: Vec<String>,
}

impl FeatureMatrix {
    /// Assembles a matrix from pre-built rows (used by tests and tooling;
    /// [`build_features`] is the production path).
    pub fn from_rows(rows: Vec<FeatureRow>) -> Self {
        Self {
            rows,
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn rows(&self) -> &[FeatureRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn labels(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.label).collect()
    }

    /// Next-step log returns aligned with the rows.
    pub fn next_returns(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.next_return).collect()
    }

    /// Chronological sub-matrix over `range` (used by walk-forward CV).
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            rows: self.rows[range].to_vec(),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Writes the audit CSV: 17 feature columns plus `label`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = FEATURE_NAMES.to_vec();
        header.push("label");
        out.write_record(&header)?;
        for row in &self.rows {
            let mut rec: Vec<String> = row.predictors.iter().map(|v| format!("{v}")).collect();
            rec.push(row.label.to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// `(high - low) / close` with the domain guard the raw [`Bar`] accessor
/// does not have.
pub fn spread_proxy(bar: &Bar) -> Result<f64> {
    if !(bar.close > 0.0) {
        return Err(Error::Domain(format!(
            "spread proxy needs a positive close (got {})",
            bar.close
        )));
    }
    Ok((bar.high - bar.low) / bar.close)
}

/// Trailing signed-volume sum per bar.
///
/// `OFI_t = sum over the last `window` bars of sign(r_i) * V_i`, where
/// `r_i` is the return into bar `i` and `sign(0) = 0`. Entries are `None`
/// while the window is not yet fully defined (`t < window`).
pub fn order_flow_imbalance(series: &BarSeries, window: usize) -> Result<Vec<Option<f64>>> {
    if window == 0 {
        return Err(Error::Config("OFI window must be >= 1".into()));
    }
    let bars = series.bars();
    let n = bars.len();
    let mut out = vec![None; n];
    if n < 2 {
        return Ok(out);
    }
    let signed: Vec<f64> = (1..n)
        .map(|i| {
            let r = (bars[i].close / bars[i - 1].close).ln();
            let sign = if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            };
            sign * bars[i].volume as f64
        })
        .collect();
    for t in window..n {
        // Bars t-window+1 ..= t, i.e. signed[t-window .. t].
        out[t] = Some(signed[t - window..t].iter().sum());
    }
    Ok(out)
}

/// Builds the full 17-column matrix with labels.
pub fn build_features(series: &BarSeries) -> Result<FeatureMatrix> {
    let n = series.len();
    if n < WARMUP + 2 {
        return Err(Error::InsufficientData {
            needed: WARMUP + 2,
            got: n,
        });
    }
    let bars = series.bars();
    let returns: Vec<f64> = series.log_returns(); // returns[i] = ln(C[i+1]/C[i])
    let ofi = order_flow_imbalance(series, WARMUP)?;

    let mut rows = Vec::with_capacity(n - WARMUP - 1);
    for t in WARMUP..n - 1 {
        let next_return = returns[t];
        if next_return == 0.0 {
            continue; // no direction, no label
        }
        let mut x = [0.0f64; N_FEATURES];
        for lag in 1..=5usize {
            x[lag - 1] = returns[t - lag];
        }
        let sp_t = spread_proxy(&bars[t])?;
        let sp_prev = spread_proxy(&bars[t - 1])?;
        x[col::SPREAD_PROXY] = sp_t;
        x[col::SPREAD_LAG_1] = sp_prev;
        x[col::SPREAD_CHANGE] = sp_t - sp_prev;
        x[col::VOLUME_RATIO] = ratio_or_neutral(bars[t].volume as f64, bars[t - 1].volume as f64);
        let ma_vol = trailing_mean(bars, t, |b| b.volume as f64);
        x[col::VOLUME_RELATIVE] = ratio_or_neutral(bars[t].volume as f64, ma_vol);
        let ma_ticks = trailing_mean(bars, t, |b| b.num_ticks as f64);
        x[col::TICK_INTENSITY] = ratio_or_neutral(bars[t].num_ticks as f64, ma_ticks);
        x[col::REALIZED_VOL_5M] = sample_std(&returns[t - WARMUP..t]);
        let hi = bars[t - WARMUP + 1..=t]
            .iter()
            .map(|b| b.high)
            .fold(f64::MIN, f64::max);
        let lo = bars[t - WARMUP + 1..=t]
            .iter()
            .map(|b| b.low)
            .fold(f64::MAX, f64::min);
        x[col::PRICE_RANGE_NORM] = (hi - lo) / bars[t].close;
        x[col::OFI] = ofi[t].expect("OFI defined past warmup");
        x[col::HOUR] = bars[t].timestamp.hour() as f64;
        x[col::MINUTE] = bars[t].timestamp.minute() as f64;
        x[col::SESSION_INDICATOR] = session_indicator(bars[t].timestamp);

        rows.push(FeatureRow {
            timestamp: bars[t].timestamp,
            predictors: x,
            label: u8::from(next_return > 0.0),
            next_return,
        });
    }

    Ok(FeatureMatrix::from_rows(rows))
}

fn ratio_or_neutral(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

fn trailing_mean(bars: &[Bar], t: usize, f: impl Fn(&Bar) -> f64) -> f64 {
    let window = &bars[t - WARMUP + 1..=t];
    window.iter().map(&f).sum::<f64>() / window.len() as f64
}

fn sample_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1.0)).sqrt()
}

/// 2 in the first 30 session minutes, 1 in the last 30, 0 otherwise.
/// Session bounds follow the US equity template (09:30–16:00).
fn session_indicator(ts: NaiveDateTime) -> f64 {
    let m = minute_of_day(ts);
    if (570..600).contains(&m) {
        SESSION_OPEN_30MIN
    } else if (930..960).contains(&m) {
        SESSION_CLOSE_30MIN
    } else {
        SESSION_MIDDAY
    }
}
