//! Time-series ingestion, log-returns at arbitrary lags, and the logarithmic
//! scale map.
//!
//! Durations are integer seconds throughout so that lag arithmetic is exact;
//! the scale variable `tau` is real-valued. Returns at a lag `dt` live on the
//! logarithmic scale `tau = log2(dt0 / dt)`: large `tau` means short lags.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default reference lag, in trading days.
pub const DEFAULT_DT0_DAYS: f64 = 32.0;

/// Default trading-day length in minutes for mixed-resolution datasets.
///
/// Recovered from the scale convention this toolkit adopts: a one-minute lag
/// sits at `tau = 14.75` below the 32-day reference lag, which implies
/// `2^14.75 / 32 ≈ 861.08` minutes per trading day. The value is rounded to a
/// whole minute so that day-denominated lags stay exact in integer seconds.
/// It is a dataset convention, not a market-calendar assumption, and is
/// configurable wherever a [`ScaleMap`] is built.
pub const DEFAULT_MINUTES_PER_DAY: f64 = 861.0;

#[derive(Debug, Error)]
pub enum SeriesError {
    #[error("series is empty or too short (need at least {needed} samples, got {got})")]
    TooShort { needed: usize, got: usize },
    #[error("timestamps are not strictly increasing at row {row}")]
    NonMonotonicTimestamps { row: usize },
    #[error("non-positive value {value} at row {row} (log-returns require positive inputs)")]
    NonPositiveValue { row: usize, value: f64 },
    #[error("malformed row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("csv read error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("sampling interval must be positive, got {0}")]
    NonPositiveSamplingInterval(i64),
    #[error("lag {lag_secs}s is not a positive multiple of the sampling interval {interval_secs}s")]
    LagNotMultiple { lag_secs: i64, interval_secs: i64 },
    #[error("lag {lag_secs}s exceeds the series span of {span_secs}s: no return pairs exist")]
    LagExceedsSpan { lag_secs: i64, span_secs: i64 },
    #[error("reference standard deviation must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("reference lag must be positive, got {0}")]
    NonPositiveReferenceLag(i64),
}

/// A strictly increasing, strictly positive scalar series (prices or any
/// positive observable) with a nominal sampling interval in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    timestamps: Vec<i64>,
    values: Vec<f64>,
    sampling_interval: i64,
    metadata: String,
}

impl PriceSeries {
    pub fn new(
        timestamps: Vec<i64>,
        values: Vec<f64>,
        sampling_interval: i64,
        metadata: impl Into<String>,
    ) -> Result<Self, SeriesError> {
        if timestamps.len() != values.len() || timestamps.len() < 2 {
            return Err(SeriesError::TooShort {
                needed: 2,
                got: timestamps.len().min(values.len()),
            });
        }
        if sampling_interval <= 0 {
            return Err(SeriesError::NonPositiveSamplingInterval(sampling_interval));
        }
        for (i, w) in timestamps.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(SeriesError::NonMonotonicTimestamps { row: i + 2 });
            }
        }
        for (i, &v) in values.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(SeriesError::NonPositiveValue { row: i + 1, value: v });
            }
        }
        Ok(Self {
            timestamps,
            values,
            sampling_interval,
            metadata: metadata.into(),
        })
    }

    /// Parse a two-column `timestamp,value` CSV. Timestamps are either integer
    /// epoch seconds or ISO-8601 (auto-detected); a header row is optional.
    /// Malformed rows abort the parse with their 1-based line number.
    pub fn from_csv_reader<R: Read>(reader: R, metadata: &str) -> Result<Self, SeriesError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);

        let mut timestamps = Vec::new();
        let mut values = Vec::new();
        let mut first_data_row_seen = false;

        for (idx, record) in rdr.records().enumerate() {
            let row = idx + 1;
            let record = record?;
            if record.iter().all(|f| f.is_empty()) {
                continue;
            }
            if record.len() < 2 {
                return Err(SeriesError::MalformedRow {
                    row,
                    reason: format!("expected 2 columns, got {}", record.len()),
                });
            }
            let ts_field = &record[0];
            let val_field = &record[1];
            let parsed_ts = parse_timestamp(ts_field);
            let parsed_val = val_field.parse::<f64>();
            if !first_data_row_seen && (parsed_ts.is_none() || parsed_val.is_err()) {
                // Tolerate a single header row.
                first_data_row_seen = true;
                continue;
            }
            first_data_row_seen = true;
            let ts = parsed_ts.ok_or_else(|| SeriesError::MalformedRow {
                row,
                reason: format!("unparseable timestamp {ts_field:?}"),
            })?;
            let value = parsed_val.map_err(|_| SeriesError::MalformedRow {
                row,
                reason: format!("unparseable value {val_field:?}"),
            })?;
            if !(value > 0.0) || !value.is_finite() {
                return Err(SeriesError::NonPositiveValue { row, value });
            }
            if let Some(&prev) = timestamps.last() {
                if ts <= prev {
                    return Err(SeriesError::NonMonotonicTimestamps { row });
                }
            }
            timestamps.push(ts);
            values.push(value);
        }

        if timestamps.len() < 2 {
            return Err(SeriesError::TooShort {
                needed: 2,
                got: timestamps.len(),
            });
        }
        let interval = timestamps
            .windows(2)
            .map(|w| w[1] - w[0])
            .min()
            .expect("len >= 2");
        Self::new(timestamps, values, interval, metadata)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self, SeriesError> {
        let meta = path.as_ref().display().to_string();
        let file = std::fs::File::open(path.as_ref())?;
        Self::from_csv_reader(std::io::BufReader::new(file), &meta)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sampling_interval(&self) -> i64 {
        self.sampling_interval
    }

    pub fn metadata(&self) -> &str {
        &self.metadata
    }

    pub fn span_secs(&self) -> i64 {
        self.timestamps[self.timestamps.len() - 1] - self.timestamps[0]
    }

    /// Log-returns at `lag_secs` with the default gap tolerance of twice the
    /// lag: pairs whose index window straddles a larger jump between
    /// consecutive samples are dropped, so calendar holes in tick data do not
    /// produce spurious returns.
    pub fn log_returns(&self, lag_secs: i64) -> Result<ReturnSeries, SeriesError> {
        self.log_returns_with_gap_tolerance(lag_secs, 2 * lag_secs)
    }

    /// Log-returns at `lag_secs`, dropping pairs that straddle any
    /// consecutive-sample gap larger than `gap_tolerance_secs`.
    pub fn log_returns_with_gap_tolerance(
        &self,
        lag_secs: i64,
        gap_tolerance_secs: i64,
    ) -> Result<ReturnSeries, SeriesError> {
        if lag_secs <= 0 || lag_secs % self.sampling_interval != 0 {
            return Err(SeriesError::LagNotMultiple {
                lag_secs,
                interval_secs: self.sampling_interval,
            });
        }
        let lag_samples = (lag_secs / self.sampling_interval) as usize;
        if lag_samples >= self.len() {
            return Err(SeriesError::LagExceedsSpan {
                lag_secs,
                span_secs: self.span_secs(),
            });
        }

        // Sorted positions k where the jump t[k+1]-t[k] exceeds tolerance.
        let gap_positions: Vec<usize> = self
            .timestamps
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[1] - w[0] > gap_tolerance_secs)
            .map(|(k, _)| k)
            .collect();

        let n_pairs = self.len() - lag_samples;
        let mut start_times = Vec::with_capacity(n_pairs);
        let mut returns = Vec::with_capacity(n_pairs);
        for i in 0..n_pairs {
            let j = i + lag_samples;
            // Pair (i, j) straddles gap k iff i <= k < j.
            let straddles = match gap_positions.binary_search(&i) {
                Ok(_) => true,
                Err(pos) => gap_positions.get(pos).is_some_and(|&k| k < j),
            };
            if straddles {
                continue;
            }
            start_times.push(self.timestamps[i]);
            returns.push((self.values[j] / self.values[i]).ln());
        }

        Ok(ReturnSeries {
            lag_secs,
            start_times,
            returns,
            sigma_ref: None,
            normalized: false,
        })
    }
}

fn parse_timestamp(field: &str) -> Option<i64> {
    if let Ok(epoch) = field.parse::<i64>() {
        return Some(epoch);
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(field) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(naive) = chrono::NaiveDateTime::parse_from_str(field, fmt) {
            return Some(naive.and_utc().timestamp());
        }
    }
    if let Ok(date) = chrono::NaiveDate::parse_from_str(field, "%Y-%m-%d") {
        return Some(date.and_hms_opt(0, 0, 0)?.and_utc().timestamp());
    }
    None
}

/// Log-returns at a fixed lag, tagged with the initial timestamp of each pair
/// so that returns at different lags can be joined on their starting instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnSeries {
    pub lag_secs: i64,
    pub start_times: Vec<i64>,
    pub returns: Vec<f64>,
    /// Standard deviation at the reference lag used for normalization.
    pub sigma_ref: Option<f64>,
    pub normalized: bool,
}

impl ReturnSeries {
    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }

    /// Sample standard deviation (ddof = 1).
    pub fn sample_std(&self) -> f64 {
        let n = self.returns.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.returns.iter().sum::<f64>() / n as f64;
        let ss: f64 = self.returns.iter().map(|r| (r - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    }

    /// Divide every return by `sigma_ref` and mark the series normalized.
    pub fn normalize(&self, sigma_ref: f64) -> Result<ReturnSeries, SeriesError> {
        if !(sigma_ref > 0.0) || !sigma_ref.is_finite() {
            return Err(SeriesError::NonPositiveSigma(sigma_ref));
        }
        Ok(ReturnSeries {
            lag_secs: self.lag_secs,
            start_times: self.start_times.clone(),
            returns: self.returns.iter().map(|r| r / sigma_ref).collect(),
            sigma_ref: Some(sigma_ref),
            normalized: true,
        })
    }
}

/// Maps lag durations to the logarithmic scale `tau = log2(dt0 / dt)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleMap {
    /// Reference lag in seconds; `tau(dt0) = 0` exactly.
    pub dt0_secs: i64,
    /// Trading-day length used when day-denominated lags are converted.
    pub minutes_per_day: f64,
}

impl Default for ScaleMap {
    fn default() -> Self {
        Self::from_trading_days(DEFAULT_DT0_DAYS, DEFAULT_MINUTES_PER_DAY)
            .expect("default scale map is valid")
    }
}

impl ScaleMap {
    pub fn new(dt0_secs: i64, minutes_per_day: f64) -> Result<Self, SeriesError> {
        if dt0_secs <= 0 {
            return Err(SeriesError::NonPositiveReferenceLag(dt0_secs));
        }
        Ok(Self {
            dt0_secs,
            minutes_per_day,
        })
    }

    /// Reference lag of `days` trading days of `minutes_per_day` minutes.
    pub fn from_trading_days(days: f64, minutes_per_day: f64) -> Result<Self, SeriesError> {
        let secs = (days * minutes_per_day * 60.0).round() as i64;
        Self::new(secs, minutes_per_day)
    }

    pub fn days_to_secs(&self, days: f64) -> i64 {
        (days * self.minutes_per_day * 60.0).round() as i64
    }

    pub fn tau_of_lag(&self, lag_secs: i64) -> f64 {
        debug_assert!(lag_secs > 0);
        (self.dt0_secs as f64 / lag_secs as f64).log2()
    }

    /// Inverse of [`Self::tau_of_lag`], in (fractional) seconds.
    pub fn lag_of_tau(&self, tau: f64) -> f64 {
        self.dt0_secs as f64 * (-tau).exp2()
    }

    /// Nearest positive multiple of `interval_secs` to the exact lag at `tau`.
    pub fn lag_of_tau_snapped(&self, tau: f64, interval_secs: i64) -> i64 {
        let exact = self.lag_of_tau(tau);
        let k = (exact / interval_secs as f64).round().max(1.0) as i64;
        k * interval_secs
    }
}
