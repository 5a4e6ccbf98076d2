//! Per-ticker technical indicators computed from OHLCV bars.
//!
//! All indicators are causal (the value at `t` depends only on bars up to
//! `t`) and use prefix statistics during warm-up instead of NaN padding, so a
//! downstream sliding window never sees an undefined cell. Division-by-zero
//! conventions: RSI → 50, CCI → 0, DX → 0.

use chrono::{Datelike, NaiveDate};

use crate::error::{Error, Result};

/// One ticker's daily bar history.
#[derive(Debug, Clone)]
pub struct BarSeries {
    pub ticker: String,
    pub dates: Vec<NaiveDate>,
    pub open: Vec<f64>,
    pub high: Vec<f64>,
    pub low: Vec<f64>,
    pub close: Vec<f64>,
    pub volume: Vec<f64>,
}

impl BarSeries {
    /// Validates lengths, bar consistency (low ≤ open,close ≤ high),
    /// positive prices, non-negative volume and strictly increasing dates.
    pub fn new(
        ticker: impl Into<String>,
        dates: Vec<NaiveDate>,
        open: Vec<f64>,
        high: Vec<f64>,
        low: Vec<f64>,
        close: Vec<f64>,
        volume: Vec<f64>,
    ) -> Result<Self> {
        let ticker = ticker.into();
        let n = dates.len();
        for (name, len) in [
            ("open", open.len()),
            ("high", high.len()),
            ("low", low.len()),
            ("close", close.len()),
            ("volume", volume.len()),
        ] {
            if len != n {
                return Err(Error::data(
                    &ticker,
                    format!("{name} has {len} rows but dates has {n}"),
                ));
            }
        }
        for i in 0..n {
            if i > 0 && dates[i] <= dates[i - 1] {
                return Err(Error::data_row(
                    &ticker,
                    i,
                    format!("dates not strictly increasing: {} after {}", dates[i], dates[i - 1]),
                ));
            }
            if !(open[i] > 0.0 && high[i] > 0.0 && low[i] > 0.0 && close[i] > 0.0) {
                return Err(Error::data_row(&ticker, i, "non-positive price"));
            }
            if low[i] > open[i] || low[i] > close[i] || high[i] < open[i] || high[i] < close[i] {
                return Err(Error::data_row(
                    &ticker,
                    i,
                    format!(
                        "bar violates low <= open,close <= high: o={} h={} l={} c={}",
                        open[i], high[i], low[i], close[i]
                    ),
                ));
            }
            if volume[i] < 0.0 || !volume[i].is_finite() {
                return Err(Error::data_row(&ticker, i, "negative or non-finite volume"));
            }
        }
        Ok(BarSeries {
            ticker,
            dates,
            open,
            high,
            low,
            close,
            volume,
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }
}

/// Indicator parameters; defaults follow the feature table (30-day oscillator
/// periods, 30/60-day SMAs) with industry-standard MACD and Bollinger values
/// where no period is given.
#[derive(Debug, Clone)]
pub struct IndicatorConfig {
    pub rsi_period: usize,
    pub cci_period: usize,
    pub dx_period: usize,
    pub sma_periods: [usize; 2],
    pub macd_fast: usize,
    pub macd_slow: usize,
    pub macd_signal: usize,
    pub boll_period: usize,
    pub boll_k: f64,
    pub turbulence_lookback: usize,
}

impl Default for IndicatorConfig {
    fn default() -> Self {
        IndicatorConfig {
            rsi_period: 30,
            cci_period: 30,
            dx_period: 30,
            sma_periods: [30, 60],
            macd_fast: 12,
            macd_slow: 26,
            macd_signal: 9,
            boll_period: 20,
            boll_k: 2.0,
            turbulence_lookback: 252,
        }
    }
}

fn require_non_empty(op: &'static str, xs: &[f64]) -> Result<()> {
    if xs.is_empty() {
        Err(Error::InvalidArgument {
            op,
            reason: "empty input series".into(),
        })
    } else {
        Ok(())
    }
}

/// Simple moving average; the first n−1 outputs average the available prefix.
pub fn sma(close: &[f64], n: usize) -> Result<Vec<f64>> {
    require_non_empty("sma", close)?;
    if n == 0 {
        return Err(Error::InvalidArgument {
            op: "sma",
            reason: "period must be >= 1".into(),
        });
    }
    let mut out = Vec::with_capacity(close.len());
    for t in 0..close.len() {
        let start = (t + 1).saturating_sub(n);
        let window = &close[start..=t];
        out.push(window.iter().sum::<f64>() / window.len() as f64);
    }
    Ok(out)
}

/// Exponential moving average with smoothing factor 2/(n+1), seeded with the
/// first value.
pub fn ema(close: &[f64], n: usize) -> Result<Vec<f64>> {
    require_non_empty("ema", close)?;
    if n == 0 {
        return Err(Error::InvalidArgument {
            op: "ema",
            reason: "period must be >= 1".into(),
        });
    }
    let alpha = 2.0 / (n as f64 + 1.0);
    let mut out = Vec::with_capacity(close.len());
    out.push(close[0]);
    for t in 1..close.len() {
        out.push(alpha * close[t] + (1.0 - alpha) * out[t - 1]);
    }
    Ok(out)
}

/// MACD line: EMA(fast) − EMA(slow).
pub fn macd(close: &[f64], cfg: &IndicatorConfig) -> Result<Vec<f64>> {
    let fast = ema(close, cfg.macd_fast)?;
    let slow = ema(close, cfg.macd_slow)?;
    Ok(fast.iter().zip(&slow).map(|(f, s)| f - s).collect())
}

/// Bollinger bands: rolling mean ± k · rolling population std, prefix warm-up.
pub fn bollinger(close: &[f64], cfg: &IndicatorConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    require_non_empty("bollinger", close)?;
    let n = cfg.boll_period;
    let mut upper = Vec::with_capacity(close.len());
    let mut lower = Vec::with_capacity(close.len());
    for t in 0..close.len() {
        let start = (t + 1).saturating_sub(n);
        let window = &close[start..=t];
        let mean = window.iter().sum::<f64>() / window.len() as f64;
        let var =
            window.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / window.len() as f64;
        let sd = var.sqrt();
        upper.push(mean + cfg.boll_k * sd);
        lower.push(mean - cfg.boll_k * sd);
    }
    Ok((upper, lower))
}

/// Wilder smoothing with prefix warm-up: prefix means until `n` samples have
/// arrived, then `s_t = (s_{t-1}·(n−1) + u_t)/n`.
fn wilder(u: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(u.len());
    let mut prefix_sum = 0.0;
    for (t, &v) in u.iter().enumerate() {
        if t < n {
            prefix_sum += v;
            out.push(prefix_sum / (t + 1) as f64);
        } else {
            let prev = out[t - 1];
            out.push((prev * (n as f64 - 1.0) + v) / n as f64);
        }
    }
    out
}

/// Relative strength index in [0, 100]. All-gain windows read 100, all-loss
/// windows 0, and the 0/0 case (flat prices) reads 50.
pub fn rsi(close: &[f64], n: usize) -> Result<Vec<f64>> {
    if close.len() < 2 {
        return Err(Error::InvalidArgument {
            op: "rsi",
            reason: format!("need at least 2 bars, got {}", close.len()),
        });
    }
    let diffs: Vec<f64> = close.windows(2).map(|w| w[1] - w[0]).collect();
    let gains: Vec<f64> = diffs.iter().map(|&d| d.max(0.0)).collect();
    let losses: Vec<f64> = diffs.iter().map(|&d| (-d).max(0.0)).collect();
    let avg_gain = wilder(&gains, n);
    let avg_loss = wilder(&losses, n);
    let mut out = Vec::with_capacity(close.len());
    out.push(50.0);
    for t in 1..close.len() {
        let (g, l) = (avg_gain[t - 1], avg_loss[t - 1]);
        out.push(if g == 0.0 && l == 0.0 {
            50.0
        } else if l == 0.0 {
            100.0
        } else if g == 0.0 {
            0.0
        } else {
            100.0 - 100.0 / (1.0 + g / l)
        });
    }
    Ok(out)
}

/// Commodity channel index: deviation of the typical price from its rolling
/// mean in units of 0.015 · mean absolute deviation. Zero deviation reads 0.
pub fn cci(high: &[f64], low: &[f64], close: &[f64], n: usize) -> Result<Vec<f64>> {
    require_non_empty("cci", close)?;
    let tp: Vec<f64> = (0..close.len())
        .map(|i| (high[i] + low[i] + close[i]) / 3.0)
        .collect();
    let mut out = Vec::with_capacity(tp.len());
    for t in 0..tp.len() {
        let start = (t + 1).saturating_sub(n);
        let window = &tp[start..=t];
        let mean = window.iter().sum::<f64>() / window.len() as f64;
        let mad = window.iter().map(|x| (x - mean).abs()).sum::<f64>() / window.len() as f64;
        if mad == 0.0 {
            out.push(0.0);
        } else {
            out.push((tp[t] - mean) / (0.015 * mad));
        }
    }
    Ok(out)
}

/// Directional movement index in [0, 100] from Wilder-smoothed directional
/// movement and true range. 0/0 reads 0.
pub fn dx(high: &[f64], low: &[f64], close: &[f64], n: usize) -> Result<Vec<f64>> {
    if close.len() < 2 {
        return Err(Error::InvalidArgument {
            op: "dx",
            reason: format!("need at least 2 bars, got {}", close.len()),
        });
    }
    let t_len = close.len() - 1;
    let mut plus_dm = Vec::with_capacity(t_len);
    let mut minus_dm = Vec::with_capacity(t_len);
    let mut tr = Vec::with_capacity(t_len);
    for t in 1..close.len() {
        let up = high[t] - high[t - 1];
        let down = low[t - 1] - low[t];
        plus_dm.push(if up > down && up > 0.0 { up } else { 0.0 });
        minus_dm.push(if down > up && down > 0.0 { down } else { 0.0 });
        let range = (high[t] - low[t])
            .max((high[t] - close[t - 1]).abs())
            .max((low[t] - close[t - 1]).abs());
        tr.push(range);
    }
    let s_plus = wilder(&plus_dm, n);
    let s_minus = wilder(&minus_dm, n);
    let s_tr = wilder(&tr, n);
    let mut out = Vec::with_capacity(close.len());
    out.push(0.0);
    for t in 0..t_len {
        let (pdi, mdi) = if s_tr[t] == 0.0 {
            (0.0, 0.0)
        } else {
            (100.0 * s_plus[t] / s_tr[t], 100.0 * s_minus[t] / s_tr[t])
        };
        let denom = pdi + mdi;
        out.push(if denom == 0.0 {
            0.0
        } else {
            100.0 * (pdi - mdi).abs() / denom
        });
    }
    Ok(out)
}

/// Ridge used inside the turbulence pseudo-inverse.
const TURBULENCE_RIDGE: f64 = 1e-8;

/// Market turbulence: rolling Mahalanobis distance of each day's cross-ticker
/// return vector from the trailing `lookback`-day distribution. Warm-up days
/// (fewer than `lookback` prior rows) and degenerate windows read 0.
///
/// `panel` is one row per date, one column per ticker, of daily returns.
pub fn turbulence(panel: &[Vec<f64>], lookback: usize) -> Result<Vec<f64>> {
    if panel.is_empty() {
        return Err(Error::InvalidArgument {
            op: "turbulence",
            reason: "empty return panel".into(),
        });
    }
    let k = panel[0].len();
    if k < 2 {
        return Err(Error::InvalidArgument {
            op: "turbulence",
            reason: format!("need at least 2 tickers, got {k}"),
        });
    }
    if panel.len() <= lookback {
        return Err(Error::InvalidArgument {
            op: "turbulence",
            reason: format!(
                "need more dates ({}) than the lookback ({lookback})",
                panel.len()
            ),
        });
    }
    if panel.iter().any(|row| row.len() != k) {
        return Err(Error::InvalidArgument {
            op: "turbulence",
            reason: "ragged return panel".into(),
        });
    }
    let mut out = vec![0.0; panel.len()];
    for t in lookback..panel.len() {
        let window = &panel[t - lookback..t];
        if window.iter().all(|row| row == &window[0]) {
            continue; // degenerate window: no distribution to measure against
        }
        let l = window.len() as f64;
        let mut mean = vec![0.0; k];
        for row in window {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= l;
        }
        // population covariance of the trailing window
        let mut cov = vec![0.0; k * k];
        for row in window {
            for i in 0..k {
                let di = row[i] - mean[i];
                for j in 0..k {
                    cov[i * k + j] += di * (row[j] - mean[j]);
                }
            }
        }
        for c in &mut cov {
            *c /= l;
        }
        for i in 0..k {
            cov[i * k + i] += TURBULENCE_RIDGE;
        }
        let dev: Vec<f64> = (0..k).map(|i| panel[t][i] - mean[i]).collect();
        let x = solve(&mut cov, dev.clone(), k);
        let mut d = 0.0;
        for i in 0..k {
            d += dev[i] * x[i];
        }
        out[t] = d.max(0.0);
    }
    Ok(out)
}

/// Gaussian elimination with partial pivoting on a k×k system (destroys `a`).
fn solve(a: &mut [f64], mut b: Vec<f64>, k: usize) -> Vec<f64> {
    for col in 0..k {
        let mut pivot = col;
        for row in col + 1..k {
            if a[row * k + col].abs() > a[pivot * k + col].abs() {
                pivot = row;
            }
        }
        if pivot != col {
            for j in 0..k {
                a.swap(col * k + j, pivot * k + j);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * k + col];
        for row in col + 1..k {
            let factor = a[row * k + col] / diag;
            for j in col..k {
                a[row * k + j] -= factor * a[col * k + j];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; k];
    for col in (0..k).rev() {
        let mut s = b[col];
        for j in col + 1..k {
            s -= a[col * k + j] * x[j];
        }
        x[col] = s / a[col * k + col];
    }
    x
}

/// Weekday index with Monday = 0.
pub fn day_of_week(date: NaiveDate) -> u32 {
    date.weekday().num_days_from_monday()
}
