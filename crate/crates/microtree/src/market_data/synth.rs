//! Synthetic minute-bar generator.
//!
//! Produces series with the stylized facts the rest of the pipeline feeds
//! on: a U-shaped intraday volume profile, fat-tailed returns (normal
//! mixture), occasional zero-activity minutes, and — crucially — a planted
//! relation between trailing order-flow imbalance and the sign of the next
//! minute's return, so a classifier has something real to learn.
//!
//! The planted signal: after each bar, the trailing 5-bar signed-volume sum
//! is standardized to `h ∈ [-3, 3]`; the next return is drawn as
//! `drift + vol * (s*h + sqrt(1-s^2)*z)` with `s = ofi_signal_strength`.
//! At `s = 0` returns are independent of order flow; at `s = 0.8` the sign
//! rule `up iff h > 0` is right about 79% of the time.

use std::collections::VecDeque;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::{Bar, BarSeries};
use crate::error::{Error, Result};

/// Trading-session layout of the generated timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionTemplate {
    /// 390-minute sessions (09:30–16:00), weekdays only.
    UsEquity,
    /// One bar per minute around the clock; no volume U-shape.
    Continuous,
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_bars: usize,
    pub base_price: f64,
    /// Per-minute log-return standard deviation.
    pub minute_vol: f64,
    /// Per-minute log drift. Zero keeps up/down labels balanced.
    pub drift_per_minute: f64,
    /// Correlation strength in [0, 1) between trailing OFI and next return.
    pub ofi_signal_strength: f64,
    /// Volume multiplier at session open/close relative to midday.
    pub u_shape_amplitude: f64,
    pub session: SessionTemplate,
    /// Mean minute volume (shares) at midday.
    pub base_volume: f64,
    /// Mean minute tick count at midday.
    pub base_ticks: f64,
    /// Probability of a zero-volume, zero-tick, flat minute.
    pub quiet_minute_prob: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_bars: 50_000,
            base_price: 600.0,
            minute_vol: 8.0e-4,
            drift_per_minute: 0.0,
            ofi_signal_strength: 0.5,
            u_shape_amplitude: 1.5,
            session: SessionTemplate::UsEquity,
            base_volume: 100_000.0,
            base_ticks: 250.0,
            quiet_minute_prob: 0.002,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_bars < 100 {
            return Err(Error::Config(format!(
                "n_bars must be >= 100 (got {})",
                self.n_bars
            )));
        }
        if !(self.minute_vol > 0.0) {
            return Err(Error::Config(format!(
                "minute_vol must be positive (got {})",
                self.minute_vol
            )));
        }
        if !(self.base_price > 0.0) {
            return Err(Error::Config(format!(
                "base_price must be positive (got {})",
                self.base_price
            )));
        }
        if !(0.0..1.0).contains(&self.ofi_signal_strength) {
            return Err(Error::Config(format!(
                "ofi_signal_strength must lie in [0, 1) (got {})",
                self.ofi_signal_strength
            )));
        }
        if self.u_shape_amplitude < 0.0 {
            return Err(Error::Config("u_shape_amplitude must be >= 0".into()));
        }
        if !(self.base_volume > 0.0) || !(self.base_ticks > 0.0) {
            return Err(Error::Config("base_volume and base_ticks must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.quiet_minute_prob) {
            return Err(Error::Config("quiet_minute_prob must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

const OFI_WINDOW: usize = 5;
const US_SESSION_MINUTES: u32 = 390;
const VOLUME_LOG_SD: f64 = 0.9;
const TICKS_LOG_SD: f64 = 0.8;
const RANGE_NOISE_FRAC: f64 = 0.3;
const FAT_TAIL_PROB: f64 = 0.05;
const FAT_TAIL_SCALE: f64 = 3.0;
const OVERNIGHT_VOL_MULT: f64 = 3.0;

/// Deterministically generates a bar series from `(config, seed)`.
pub fn synthesize_bars(config: &GeneratorConfig, seed: u64) -> Result<BarSeries> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let s = config.ofi_signal_strength;
    let noise_w = (1.0 - s * s).sqrt();
    // Second moment of a minute's volume given its U-shape factor,
    // used to standardize the trailing signed-volume sum.
    let vol_second_moment = |mean: f64| -> f64 {
        (1.0 - config.quiet_minute_prob) * mean * mean * (VOLUME_LOG_SD * VOLUME_LOG_SD).exp()
    };

    let mut clock = SessionClock::new(config.session);
    let mut bars: Vec<Bar> = Vec::with_capacity(config.n_bars);
    let mut prev_close = config.base_price;
    let mut signed_volume: VecDeque<f64> = VecDeque::with_capacity(OFI_WINDOW);
    let mut expected_sq: VecDeque<f64> = VecDeque::with_capacity(OFI_WINDOW);
    let mut h = 0.0;

    for i in 0..config.n_bars {
        let (timestamp, minute_in_session, session_start) = clock.next_minute();
        let ushape = match config.session {
            SessionTemplate::UsEquity => {
                let x = minute_in_session as f64 / (US_SESSION_MINUTES - 1) as f64;
                1.0 + config.u_shape_amplitude * (2.0 * x - 1.0).powi(2)
            }
            SessionTemplate::Continuous => 1.0,
        };

        let quiet = rng.gen::<f64>() < config.quiet_minute_prob;
        let gap = if session_start && i > 0 && config.session == SessionTemplate::UsEquity {
            OVERNIGHT_VOL_MULT * config.minute_vol * randn(&mut rng)
        } else {
            0.0
        };
        let body = if i == 0 || quiet {
            0.0
        } else {
            config.drift_per_minute
                + config.minute_vol * (s * h + noise_w * fat_tailed(&mut rng))
        };

        let open = prev_close * gap.exp();
        let close = open * body.exp();
        let (high, low) = if quiet {
            (open.max(close), open.min(close))
        } else {
            let eta_h = RANGE_NOISE_FRAC * config.minute_vol * randn(&mut rng).abs();
            let eta_l = RANGE_NOISE_FRAC * config.minute_vol * randn(&mut rng).abs();
            (open.max(close) * (1.0 + eta_h), open.min(close) * (1.0 - eta_l))
        };
        let mean_volume = config.base_volume * ushape;
        let (volume, num_ticks) = if quiet {
            (0u64, 0u64)
        } else {
            let v = mean_volume
                * (VOLUME_LOG_SD * randn(&mut rng) - 0.5 * VOLUME_LOG_SD * VOLUME_LOG_SD).exp();
            let t = config.base_ticks
                * ushape
                * (TICKS_LOG_SD * randn(&mut rng) - 0.5 * TICKS_LOG_SD * TICKS_LOG_SD).exp();
            (v.round().max(0.0) as u64, t.round().max(0.0) as u64)
        };

        bars.push(Bar {
            timestamp,
            open,
            high,
            low,
            close,
            volume,
            num_ticks,
        });

        // Update the trailing OFI state from the realized bar, exactly as a
        // consumer of the series would compute it.
        let r_cc = (close / prev_close).ln();
        let sign = if r_cc > 0.0 {
            1.0
        } else if r_cc < 0.0 {
            -1.0
        } else {
            0.0
        };
        signed_volume.push_back(sign * volume as f64);
        expected_sq.push_back(vol_second_moment(mean_volume));
        if signed_volume.len() > OFI_WINDOW {
            signed_volume.pop_front();
            expected_sq.pop_front();
        }
        let ofi: f64 = signed_volume.iter().sum();
        let scale = expected_sq.iter().sum::<f64>().sqrt();
        h = if scale > 0.0 {
            (ofi / scale).clamp(-3.0, 3.0)
        } else {
            0.0
        };
        prev_close = close;
    }

    BarSeries::new(format!("SYN-{seed}"), bars)
}

/// Standard normal via Box–Muller (two uniforms per draw).
fn randn<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Unit-variance normal mixture with excess kurtosis ≈ 4.7.
fn fat_tailed<R: Rng>(rng: &mut R) -> f64 {
    let norm = (1.0 - FAT_TAIL_PROB + FAT_TAIL_PROB * FAT_TAIL_SCALE * FAT_TAIL_SCALE).sqrt();
    let z = randn(rng);
    if rng.gen::<f64>() < FAT_TAIL_PROB {
        FAT_TAIL_SCALE * z / norm
    } else {
        z / norm
    }
}

/// Iterator over session timestamps.
struct SessionClock {
    template: SessionTemplate,
    date: NaiveDate,
    minute: u32,
    started: bool,
}

impl SessionClock {
    fn new(template: SessionTemplate) -> Self {
        Self {
            template,
            date: NaiveDate::from_ymd_opt(2024, 1, 2).expect("static date"),
            minute: 0,
            started: false,
        }
    }

    /// Returns `(timestamp, minute_in_session, is_session_start)`.
    fn next_minute(&mut self) -> (NaiveDateTime, u32, bool) {
        match self.template {
            SessionTemplate::UsEquity => {
                if self.started && self.minute + 1 >= US_SESSION_MINUTES {
                    self.minute = 0;
                    self.date = next_weekday(self.date);
                } else if self.started {
                    self.minute += 1;
                }
                self.started = true;
                let ts = self
                    .date
                    .and_hms_opt(9, 30, 0)
                    .expect("static time")
                    + Duration::minutes(self.minute as i64);
                (ts, self.minute, self.minute == 0)
            }
            SessionTemplate::Continuous => {
                if self.started {
                    self.minute += 1;
                }
                self.started = true;
                let ts = self.date.and_hms_opt(0, 0, 0).expect("static time")
                    + Duration::minutes(self.minute as i64);
                (ts, self.minute, self.minute == 0)
            }
        }
    }
}

fn next_weekday(date: NaiveDate) -> NaiveDate {
    let mut d = date + Duration::days(1);
    while matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
        d += Duration::days(1);
    }
    d
}
