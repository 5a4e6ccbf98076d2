//! Bar ingestion, synthetic markets, calendar alignment, and assembly of the
//! ordered daily feature frame consumed by the trading environment.
//!
//! Frame layout: one balance column first, then one contiguous block per
//! ticker holding its market features in a fixed order followed by a holdings
//! column. Balance and holdings are reserved (zero) at build time; the
//! environment fills them per episode.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, Weekday};

use crate::error::{Error, Result};
use crate::indicators::{
    bollinger, cci, day_of_week, dx, macd, rsi, sma, turbulence, BarSeries, IndicatorConfig,
};
use crate::par;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Market features available per ticker, in frame/block order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarketFeature {
    Open,
    High,
    Low,
    Close,
    Volume,
    Day,
    Macd,
    BollUb,
    BollLb,
    Rsi,
    Cci,
    Dx,
    CloseSmaShort,
    CloseSmaLong,
    Vix,
    Turbulence,
}

impl MarketFeature {
    pub const ALL: [MarketFeature; 16] = [
        MarketFeature::Open,
        MarketFeature::High,
        MarketFeature::Low,
        MarketFeature::Close,
        MarketFeature::Volume,
        MarketFeature::Day,
        MarketFeature::Macd,
        MarketFeature::BollUb,
        MarketFeature::BollLb,
        MarketFeature::Rsi,
        MarketFeature::Cci,
        MarketFeature::Dx,
        MarketFeature::CloseSmaShort,
        MarketFeature::CloseSmaLong,
        MarketFeature::Vix,
        MarketFeature::Turbulence,
    ];

    /// Column-name suffix; period-dependent names include the configured
    /// period so two frames with different configs cannot be confused.
    pub fn column_suffix(&self, cfg: &IndicatorConfig) -> String {
        match self {
            MarketFeature::Open => "open".into(),
            MarketFeature::High => "high".into(),
            MarketFeature::Low => "low".into(),
            MarketFeature::Close => "close".into(),
            MarketFeature::Volume => "volume".into(),
            MarketFeature::Day => "day".into(),
            MarketFeature::Macd => "macd".into(),
            MarketFeature::BollUb => "boll_ub".into(),
            MarketFeature::BollLb => "boll_lb".into(),
            MarketFeature::Rsi => format!("rsi_{}", cfg.rsi_period),
            MarketFeature::Cci => format!("cci_{}", cfg.cci_period),
            MarketFeature::Dx => format!("dx_{}", cfg.dx_period),
            MarketFeature::CloseSmaShort => format!("close_{}_sma", cfg.sma_periods[0]),
            MarketFeature::CloseSmaLong => format!("close_{}_sma", cfg.sma_periods[1]),
            MarketFeature::Vix => "vix".into(),
            MarketFeature::Turbulence => "turbulence".into(),
        }
    }

    pub fn parse(name: &str) -> Result<MarketFeature> {
        Ok(match name {
            "open" => MarketFeature::Open,
            "high" => MarketFeature::High,
            "low" => MarketFeature::Low,
            "close" => MarketFeature::Close,
            "volume" => MarketFeature::Volume,
            "day" => MarketFeature::Day,
            "macd" => MarketFeature::Macd,
            "boll_ub" => MarketFeature::BollUb,
            "boll_lb" => MarketFeature::BollLb,
            "rsi" => MarketFeature::Rsi,
            "cci" => MarketFeature::Cci,
            "dx" => MarketFeature::Dx,
            "close_sma_short" => MarketFeature::CloseSmaShort,
            "close_sma_long" => MarketFeature::CloseSmaLong,
            "vix" => MarketFeature::Vix,
            "turbulence" => MarketFeature::Turbulence,
            other => return Err(Error::Config(format!("unknown market feature {other:?}"))),
        })
    }
}

/// Frame assembly parameters.
#[derive(Debug, Clone)]
pub struct FrameConfig {
    pub indicators: IndicatorConfig,
    /// Market features per ticker, in block order. Must contain `Close`.
    pub features: Vec<MarketFeature>,
    /// Raw volumes are divided by this before entering the frame.
    pub volume_scale: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig {
            indicators: IndicatorConfig::default(),
            features: MarketFeature::ALL.to_vec(),
            volume_scale: 1e6,
        }
    }
}

/// Date-aligned matrix of engineered features: balance column first, then a
/// contiguous `(features + holdings)` block per ticker.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    dates: Vec<NaiveDate>,
    tickers: Vec<String>,
    columns: Vec<String>,
    data: Vec<f64>,
    features_per_ticker: usize,
}

impl FeatureFrame {
    pub fn n_rows(&self) -> usize {
        self.dates.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn features_per_ticker(&self) -> usize {
        self.features_per_ticker
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.n_cols();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn value(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.n_cols() + c]
    }

    pub const BALANCE_COLUMN: usize = 0;

    fn block_width(&self) -> usize {
        self.features_per_ticker + 1
    }

    pub fn ticker_block_start(&self, ticker_idx: usize) -> usize {
        1 + ticker_idx * self.block_width()
    }

    pub fn holdings_column(&self, ticker_idx: usize) -> usize {
        self.ticker_block_start(ticker_idx) + self.features_per_ticker
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Column index of a ticker's close price; the build step guarantees the
    /// feature exists.
    pub fn close_column(&self, ticker_idx: usize) -> Result<usize> {
        let ticker = &self.tickers[ticker_idx];
        self.column_index(&format!("{ticker}_close"))
            .ok_or_else(|| Error::data("frame", format!("no close column for {ticker}")))
    }

    pub fn close(&self, row: usize, ticker_idx: usize) -> Result<f64> {
        Ok(self.value(row, self.close_column(ticker_idx)?))
    }

    /// Sub-frame of rows `[r0, r1)`.
    fn slice_rows(&self, r0: usize, r1: usize) -> FeatureFrame {
        let w = self.n_cols();
        FeatureFrame {
            dates: self.dates[r0..r1].to_vec(),
            tickers: self.tickers.clone(),
            columns: self.columns.clone(),
            data: self.data[r0 * w..r1 * w].to_vec(),
            features_per_ticker: self.features_per_ticker,
        }
    }

    /// Delimited-text export (bit-exact float round trip via shortest
    /// representation).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(
            out,
            "# finppo-frame tickers={} features_per_ticker={}",
            self.tickers.join(","),
            self.features_per_ticker
        )
        .unwrap();
        writeln!(out, "date,{}", self.columns.join(",")).unwrap();
        for (r, date) in self.dates.iter().enumerate() {
            out.push_str(&date.format("%Y-%m-%d").to_string());
            for v in self.row(r) {
                write!(out, ",{v:?}").unwrap();
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<FeatureFrame> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let name = path.display().to_string();
        let mut lines = text.lines();
        let meta = lines
            .next()
            .ok_or_else(|| Error::data(&name, "empty frame file"))?;
        let meta = meta
            .strip_prefix("# finppo-frame ")
            .ok_or_else(|| Error::data(&name, "missing frame metadata line"))?;
        let mut tickers = Vec::new();
        let mut features_per_ticker = 0usize;
        for field in meta.split_whitespace() {
            if let Some(ts) = field.strip_prefix("tickers=") {
                tickers = ts.split(',').map(str::to_string).collect();
            } else if let Some(f) = field.strip_prefix("features_per_ticker=") {
                features_per_ticker = f
                    .parse()
                    .map_err(|_| Error::data(&name, "bad features_per_ticker"))?;
            }
        }
        let header = lines
            .next()
            .ok_or_else(|| Error::data(&name, "missing column header"))?;
        let columns: Vec<String> = header
            .split(',')
            .skip(1) // date
            .map(str::to_string)
            .collect();
        if columns.len() != 1 + tickers.len() * (features_per_ticker + 1) {
            return Err(Error::data(&name, "column count does not match metadata"));
        }
        let mut dates = Vec::new();
        let mut data = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let date_str = fields
                .next()
                .ok_or_else(|| Error::data_row(&name, i, "missing date"))?;
            dates.push(parse_date(date_str).map_err(|_| {
                Error::data_row(&name, i, format!("unparseable date {date_str:?}"))
            })?);
            let mut count = 0;
            for f in fields {
                let v: f64 = f
                    .parse()
                    .map_err(|_| Error::data_row(&name, i, format!("unparseable value {f:?}")))?;
                data.push(v);
                count += 1;
            }
            if count != columns.len() {
                return Err(Error::data_row(
                    &name,
                    i,
                    format!("expected {} values, found {count}", columns.len()),
                ));
            }
        }
        Ok(FeatureFrame {
            dates,
            tickers,
            columns,
            data,
            features_per_ticker,
        })
    }
}

/// A fixed-length window of frame rows ending at `end_date`.
#[derive(Debug, Clone)]
pub struct WindowView {
    pub matrix: Tensor,
    pub end_date: NaiveDate,
}

/// Train/eval date ranges; both intervals are closed and the train range must
/// end before the eval range begins.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub train_start: NaiveDate,
    pub train_end: NaiveDate,
    pub eval_start: NaiveDate,
    pub eval_end: NaiveDate,
}

pub fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| Error::InvalidArgument {
        op: "parse_date",
        reason: format!("{s:?}: {e}"),
    })
}

/// Parse one bar file (header `date,open,high,low,close,volume`) into a
/// validated, date-sorted series. Errors cite the 0-based data row.
pub fn load_bars(path: &Path, ticker: &str) -> Result<BarSeries> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let name = format!("{} ({ticker})", path.display());
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::data(&name, "empty bar file"))?;
    if header.trim() != "date,open,high,low,close,volume" {
        return Err(Error::data(
            &name,
            format!("unexpected header {header:?}, want date,open,high,low,close,volume"),
        ));
    }
    let mut rows: Vec<(NaiveDate, [f64; 5])> = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::data_row(
                &name,
                i,
                format!("expected 6 fields, found {}", fields.len()),
            ));
        }
        let date = parse_date(fields[0])
            .map_err(|_| Error::data_row(&name, i, format!("unparseable date {:?}", fields[0])))?;
        let mut vals = [0.0; 5];
        for (j, f) in fields[1..].iter().enumerate() {
            vals[j] = f.trim().parse().map_err(|_| {
                Error::data_row(&name, i, format!("unparseable number {f:?}"))
            })?;
        }
        rows.push((date, vals));
    }
    rows.sort_by_key(|(d, _)| *d);
    let dates: Vec<NaiveDate> = rows.iter().map(|(d, _)| *d).collect();
    let col = |j: usize| rows.iter().map(|(_, v)| v[j]).collect::<Vec<f64>>();
    let series = BarSeries::new(ticker, dates, col(0), col(1), col(2), col(3), col(4))?;
    Ok(series)
}

/// Write a series in the `load_bars` format; the round trip is bit-exact.
pub fn save_bars(path: &Path, series: &BarSeries) -> Result<()> {
    let mut out = String::from("date,open,high,low,close,volume\n");
    for i in 0..series.len() {
        writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?}",
            series.dates[i].format("%Y-%m-%d"),
            series.open[i],
            series.high[i],
            series.low[i],
            series.close[i],
            series.volume[i]
        )
        .unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Synthetic market parameters. Closes follow a geometric Brownian path
/// (`c_t = c_{t-1} · exp(drift + volatility · z)`); opens carry the previous
/// close, highs/lows add one-sided noise, volumes are lognormal around
/// `base_volume`. Dates are business days from `start_date`.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_tickers: usize,
    pub n_days: usize,
    pub seed: u64,
    pub drift: f64,
    pub volatility: f64,
    pub start_price: f64,
    pub start_date: NaiveDate,
    pub base_volume: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_tickers: 2,
            n_days: 500,
            seed: 0,
            drift: 0.0005,
            volatility: 0.01,
            start_price: 100.0,
            start_date: NaiveDate::from_ymd_opt(2015, 5, 5).unwrap(),
            base_volume: 1e7,
        }
    }
}

fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut dates = Vec::with_capacity(n);
    let mut d = start;
    while dates.len() < n {
        if d.weekday() != Weekday::Sat && d.weekday() != Weekday::Sun {
            dates.push(d);
        }
        d += Duration::days(1);
    }
    dates
}

/// Generate `n_tickers` deterministic synthetic series. Each ticker draws
/// from its own derived stream (four normals per day: close, high, low,
/// volume), so the output is independent of evaluation order.
pub fn synth_market(cfg: &SynthConfig) -> Result<Vec<BarSeries>> {
    if cfg.n_days == 0 {
        return Err(Error::InvalidArgument {
            op: "synth_market",
            reason: "n_days must be >= 1".into(),
        });
    }
    if cfg.n_tickers == 0 {
        return Err(Error::InvalidArgument {
            op: "synth_market",
            reason: "n_tickers must be >= 1".into(),
        });
    }
    let dates = business_days(cfg.start_date, cfg.n_days);
    let base = Rng::new(cfg.seed);
    let series: Vec<Result<BarSeries>> = par::map_indexed(cfg.n_tickers, |idx| {
        let mut rng = base.derive(idx as u64);
        let ticker = format!("SYN{idx:02}");
        let mut open = Vec::with_capacity(cfg.n_days);
        let mut high = Vec::with_capacity(cfg.n_days);
        let mut low = Vec::with_capacity(cfg.n_days);
        let mut close = Vec::with_capacity(cfg.n_days);
        let mut volume = Vec::with_capacity(cfg.n_days);
        let mut prev_close = cfg.start_price;
        for day in 0..cfg.n_days {
            let z_close = rng.normal();
            let z_high = rng.normal();
            let z_low = rng.normal();
            let z_vol = rng.normal();
            let c = if day == 0 {
                cfg.start_price * (cfg.drift + cfg.volatility * z_close).exp()
            } else {
                prev_close * (cfg.drift + cfg.volatility * z_close).exp()
            };
            let o = prev_close;
            let h = o.max(c) * (1.0 + 0.5 * cfg.volatility * z_high.abs());
            let l = o.min(c) * (1.0 - 0.5 * cfg.volatility * z_low.abs());
            open.push(o);
            high.push(h);
            low.push(l);
            close.push(c);
            volume.push((cfg.base_volume * (0.3 * z_vol).exp()).round());
            prev_close = c;
        }
        BarSeries::new(ticker, dates.clone(), open, high, low, close, volume)
    });
    series.into_iter().collect()
}

/// Restrict every series to the intersection of their trading dates.
pub fn align_calendar(series_list: Vec<BarSeries>) -> Result<Vec<BarSeries>> {
    if series_list.is_empty() {
        return Err(Error::InvalidArgument {
            op: "align_calendar",
            reason: "need at least one series".into(),
        });
    }
    let mut common: BTreeSet<NaiveDate> = series_list[0].dates.iter().copied().collect();
    for s in &series_list[1..] {
        let these: BTreeSet<NaiveDate> = s.dates.iter().copied().collect();
        common = common.intersection(&these).copied().collect();
    }
    if common.is_empty() {
        return Err(Error::data(
            "align_calendar",
            "series share no trading dates",
        ));
    }
    series_list
        .into_iter()
        .map(|s| {
            let keep: Vec<usize> = (0..s.len())
                .filter(|&i| common.contains(&s.dates[i]))
                .collect();
            let pick = |v: &[f64]| keep.iter().map(|&i| v[i]).collect::<Vec<f64>>();
            BarSeries::new(
                s.ticker.clone(),
                keep.iter().map(|&i| s.dates[i]).collect(),
                pick(&s.open),
                pick(&s.high),
                pick(&s.low),
                pick(&s.close),
                pick(&s.volume),
            )
        })
        .collect()
}

/// Assemble the daily feature frame for a set of calendar-aligned series.
///
/// `vix` supplies the market-wide volatility column, matched by date and
/// replicated into every ticker block; without it the column reads zero.
pub fn build_feature_frame(
    series: &[BarSeries],
    vix: Option<&BarSeries>,
    cfg: &FrameConfig,
) -> Result<FeatureFrame> {
    if series.is_empty() {
        return Err(Error::InvalidArgument {
            op: "build_feature_frame",
            reason: "need at least one ticker".into(),
        });
    }
    if !cfg.features.contains(&MarketFeature::Close) {
        return Err(Error::Config(
            "feature selection must include close (the environment trades at close)".into(),
        ));
    }
    let dates = &series[0].dates;
    for s in series {
        if &s.dates != dates {
            return Err(Error::data(
                &s.ticker,
                "calendars not aligned; run align_calendar first",
            ));
        }
    }
    let n_rows = dates.len();
    if n_rows == 0 {
        return Err(Error::InvalidArgument {
            op: "build_feature_frame",
            reason: "empty series".into(),
        });
    }

    // market-wide columns shared by every ticker block
    let day_col: Vec<f64> = dates.iter().map(|&d| day_of_week(d) as f64).collect();
    let vix_col: Vec<f64> = match vix {
        Some(v) => {
            let mut out = Vec::with_capacity(n_rows);
            for d in dates {
                let idx = v.dates.iter().position(|vd| vd == d).ok_or_else(|| {
                    Error::data("vix", format!("no vix value for trading date {d}"))
                })?;
                out.push(v.close[idx]);
            }
            out
        }
        None => vec![0.0; n_rows],
    };
    let turb_col: Vec<f64> = if cfg.features.contains(&MarketFeature::Turbulence)
        && series.len() >= 2
        && n_rows > cfg.indicators.turbulence_lookback + 1
    {
        let panel: Vec<Vec<f64>> = (1..n_rows)
            .map(|t| {
                series
                    .iter()
                    .map(|s| s.close[t] / s.close[t - 1] - 1.0)
                    .collect()
            })
            .collect();
        let turb = turbulence(&panel, cfg.indicators.turbulence_lookback)?;
        let mut out = vec![0.0];
        out.extend(turb);
        out
    } else {
        vec![0.0; n_rows]
    };

    // per-ticker indicator columns, one independent computation per ticker
    let per_ticker: Vec<Result<Vec<Vec<f64>>>> = par::map_indexed(series.len(), |i| {
        ticker_feature_columns(&series[i], cfg, &day_col, &vix_col, &turb_col)
    });

    let n_features = cfg.features.len();
    let block = n_features + 1;
    let n_cols = 1 + series.len() * block;
    let mut columns = Vec::with_capacity(n_cols);
    columns.push("balance".to_string());
    for s in series {
        for f in &cfg.features {
            columns.push(format!("{}_{}", s.ticker, f.column_suffix(&cfg.indicators)));
        }
        columns.push(format!("{}_holdings", s.ticker));
    }

    let mut data = vec![0.0; n_rows * n_cols];
    for (ti, cols) in per_ticker.into_iter().enumerate() {
        let cols = cols?;
        let base = 1 + ti * block;
        for (fi, col) in cols.iter().enumerate() {
            for (r, &v) in col.iter().enumerate() {
                data[r * n_cols + base + fi] = v;
            }
        }
    }

    let frame = FeatureFrame {
        dates: dates.clone(),
        tickers: series.iter().map(|s| s.ticker.clone()).collect(),
        columns,
        data,
        features_per_ticker: n_features,
    };
    for v in &frame.data {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "feature frame".into(),
            });
        }
    }
    Ok(frame)
}

fn ticker_feature_columns(
    s: &BarSeries,
    cfg: &FrameConfig,
    day_col: &[f64],
    vix_col: &[f64],
    turb_col: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let ind = &cfg.indicators;
    let mut out = Vec::with_capacity(cfg.features.len());
    for f in &cfg.features {
        let col = match f {
            MarketFeature::Open => s.open.clone(),
            MarketFeature::High => s.high.clone(),
            MarketFeature::Low => s.low.clone(),
            MarketFeature::Close => s.close.clone(),
            MarketFeature::Volume => s.volume.iter().map(|v| v / cfg.volume_scale).collect(),
            MarketFeature::Day => day_col.to_vec(),
            MarketFeature::Macd => macd(&s.close, ind)?,
            MarketFeature::BollUb => bollinger(&s.close, ind)?.0,
            MarketFeature::BollLb => bollinger(&s.close, ind)?.1,
            MarketFeature::Rsi => rsi(&s.close, ind.rsi_period)?,
            MarketFeature::Cci => cci(&s.high, &s.low, &s.close, ind.cci_period)?,
            MarketFeature::Dx => dx(&s.high, &s.low, &s.close, ind.dx_period)?,
            MarketFeature::CloseSmaShort => sma(&s.close, ind.sma_periods[0])?,
            MarketFeature::CloseSmaLong => sma(&s.close, ind.sma_periods[1])?,
            MarketFeature::Vix => vix_col.to_vec(),
            MarketFeature::Turbulence => turb_col.to_vec(),
        };
        out.push(col);
    }
    Ok(out)
}

/// Split a frame into train and eval sub-frames on closed date intervals.
pub fn split(frame: &FeatureFrame, spec: &SplitSpec) -> Result<(FeatureFrame, FeatureFrame)> {
    if spec.train_end >= spec.eval_start {
        return Err(Error::InvalidArgument {
            op: "split",
            reason: format!(
                "train_end {} must precede eval_start {}",
                spec.train_end, spec.eval_start
            ),
        });
    }
    if spec.train_start > spec.train_end || spec.eval_start > spec.eval_end {
        return Err(Error::InvalidArgument {
            op: "split",
            reason: "ranges must be non-empty".into(),
        });
    }
    let first = *frame.dates.first().ok_or_else(|| Error::InvalidArgument {
        op: "split",
        reason: "empty frame".into(),
    })?;
    let last = *frame.dates.last().unwrap();
    if spec.train_start < first || spec.eval_end > last {
        return Err(Error::InvalidArgument {
            op: "split",
            reason: format!(
                "spec [{}..{}] outside frame [{first}..{last}]",
                spec.train_start, spec.eval_end
            ),
        });
    }
    let rows_in = |lo: NaiveDate, hi: NaiveDate| -> (usize, usize) {
        let start = frame.dates.partition_point(|&d| d < lo);
        let end = frame.dates.partition_point(|&d| d <= hi);
        (start, end)
    };
    let (t0, t1) = rows_in(spec.train_start, spec.train_end);
    let (e0, e1) = rows_in(spec.eval_start, spec.eval_end);
    if t0 == t1 {
        return Err(Error::InvalidArgument {
            op: "split",
            reason: "train range selects no rows".into(),
        });
    }
    if e0 == e1 {
        return Err(Error::InvalidArgument {
            op: "split",
            reason: "eval range selects no rows".into(),
        });
    }
    Ok((frame.slice_rows(t0, t1), frame.slice_rows(e0, e1)))
}

/// The `window`-row matrix ending at row `t`. For `t < window − 1` the
/// earliest row is repeated to pad the top, so every index from 0 on has a
/// full window.
pub fn window_at(frame: &FeatureFrame, t: usize, window: usize) -> Result<WindowView> {
    if frame.n_rows() == 0 {
        return Err(Error::InvalidArgument {
            op: "window_at",
            reason: "empty frame".into(),
        });
    }
    if t >= frame.n_rows() {
        return Err(Error::InvalidArgument {
            op: "window_at",
            reason: format!("t = {t} outside frame of {} rows", frame.n_rows()),
        });
    }
    let w = frame.n_cols();
    let mut data = Vec::with_capacity(window * w);
    for i in 0..window {
        let want = t as i64 - (window as i64 - 1) + i as i64;
        let row = want.max(0) as usize;
        data.extend_from_slice(frame.row(row));
    }
    Ok(WindowView {
        matrix: Tensor::new(vec![window, w], data)?,
        end_date: frame.dates[t],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn synth(n_tickers: usize, n_days: usize, seed: u64) -> Vec<BarSeries> {
        synth_market(&SynthConfig {
            n_tickers,
            n_days,
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn synth_zero_vol_zero_drift_is_constant() {
        let series = synth_market(&SynthConfig {
            n_tickers: 1,
            n_days: 10,
            drift: 0.0,
            volatility: 0.0,
            ..SynthConfig::default()
        })
        .unwrap();
        let s = &series[0];
        assert!(s.close.iter().all(|&c| c == 100.0));
        assert!(s.high.iter().all(|&h| h == 100.0));
        assert!(s.low.iter().all(|&l| l == 100.0));
    }

    #[test]
    fn synth_same_seed_is_bitwise_identical() {
        let a = synth(3, 50, 9);
        let b = synth(3, 50, 9);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.close, y.close);
            assert_eq!(x.volume, y.volume);
        }
    }

    #[test]
    fn synth_gbm_terminal_ratio() {
        let mut within = 0;
        for seed in 0..100 {
            let series = synth_market(&SynthConfig {
                n_tickers: 1,
                n_days: 500,
                seed,
                drift: 0.001,
                volatility: 0.005,
                ..SynthConfig::default()
            })
            .unwrap();
            let s = &series[0];
            let ratio = s.close[499] / s.close[0];
            if ratio >= 0.25f64.exp() && ratio <= 0.75f64.exp() {
                within += 1;
            }
        }
        assert!(within >= 95, "only {within}/100 seeds in band");
    }

    #[test]
    fn bars_round_trip() {
        let dir = tempdir().unwrap();
        let series = synth(1, 30, 4).remove(0);
        let path = dir.path().join("syn00.csv");
        save_bars(&path, &series).unwrap();
        let loaded = load_bars(&path, &series.ticker).unwrap();
        assert_eq!(loaded.dates, series.dates);
        assert_eq!(loaded.open, series.open);
        assert_eq!(loaded.high, series.high);
        assert_eq!(loaded.low, series.low);
        assert_eq!(loaded.close, series.close);
        assert_eq!(loaded.volume, series.volume);
    }

    #[test]
    fn load_bars_reports_bad_row() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "date,open,high,low,close,volume\n2020-01-01,10,11,9,10.5,100\n2020-01-02,10,9,9.5,9.6,100\n",
        )
        .unwrap();
        let err = load_bars(&path, "BAD").unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn align_calendar_drops_missing_dates() {
        let mut series = synth(2, 10, 1);
        // remove one date from the second series
        let s = &mut series[1];
        s.dates.remove(4);
        s.open.remove(4);
        s.high.remove(4);
        s.low.remove(4);
        s.close.remove(4);
        s.volume.remove(4);
        let aligned = align_calendar(series).unwrap();
        assert_eq!(aligned[0].len(), 9);
        assert_eq!(aligned[0].dates, aligned[1].dates);
    }

    #[test]
    fn align_calendar_identical_is_noop_and_disjoint_errors() {
        let series = synth(2, 10, 1);
        let aligned = align_calendar(series.clone()).unwrap();
        assert_eq!(aligned[0].dates, series[0].dates);

        let mut b = synth(1, 10, 2).remove(0);
        b.dates = business_days(NaiveDate::from_ymd_opt(1990, 1, 1).unwrap(), 10);
        let err = align_calendar(vec![series[0].clone(), b]).unwrap_err();
        assert!(err.to_string().contains("no trading dates"));
    }

    #[test]
    fn frame_column_counts() {
        let cfg = FrameConfig::default();
        let series = synth(2, 80, 3);
        let frame = build_feature_frame(&series, None, &cfg).unwrap();
        assert_eq!(frame.n_cols(), 1 + 2 * 17);
        assert_eq!(frame.n_rows(), 80);

        let series29 = synth(29, 70, 3);
        let frame29 = build_feature_frame(&series29, None, &cfg).unwrap();
        assert_eq!(frame29.n_cols(), 1 + 29 * 17);
    }

    #[test]
    fn frame_block_layout_is_uniform() {
        let cfg = FrameConfig::default();
        let series = synth(3, 40, 5);
        let frame = build_feature_frame(&series, None, &cfg).unwrap();
        let block = frame.features_per_ticker() + 1;
        for (i, s) in series.iter().enumerate() {
            let start = frame.ticker_block_start(i);
            assert_eq!(
                frame.columns()[start],
                format!("{}_open", s.ticker),
                "block start for ticker {i}"
            );
            assert_eq!(
                frame.columns()[start + block - 1],
                format!("{}_holdings", s.ticker)
            );
            // suffix pattern identical across tickers
            let suffixes: Vec<&str> = frame.columns()[start..start + block]
                .iter()
                .map(|c| c.split_once('_').unwrap().1)
                .collect();
            let first_start = frame.ticker_block_start(0);
            let first: Vec<&str> = frame.columns()[first_start..first_start + block]
                .iter()
                .map(|c| c.split_once('_').unwrap().1)
                .collect();
            assert_eq!(suffixes, first);
        }
    }

    #[test]
    fn frame_has_no_nan() {
        let cfg = FrameConfig::default();
        let series = synth(2, 120, 8);
        let frame = build_feature_frame(&series, None, &cfg).unwrap();
        assert!(frame.row(0).iter().all(|v| v.is_finite()));
        assert!(frame
            .data
            .iter()
            .all(|v| v.is_finite()));
    }

    #[test]
    fn frame_save_load_round_trip() {
        let dir = tempdir().unwrap();
        let cfg = FrameConfig::default();
        let series = synth(2, 50, 6);
        let frame = build_feature_frame(&series, None, &cfg).unwrap();
        let path = dir.path().join("frame.csv");
        frame.save(&path).unwrap();
        let loaded = FeatureFrame::load(&path).unwrap();
        assert_eq!(loaded, frame);
    }

    #[test]
    fn vix_replicated_per_ticker() {
        let cfg = FrameConfig::default();
        let series = synth(2, 30, 7);
        let mut vix = synth(1, 30, 99).remove(0);
        vix.ticker = "VIX".into();
        let frame = build_feature_frame(&series, Some(&vix), &cfg).unwrap();
        let c0 = frame.column_index("SYN00_vix").unwrap();
        let c1 = frame.column_index("SYN01_vix").unwrap();
        for r in 0..frame.n_rows() {
            assert_eq!(frame.value(r, c0), vix.close[r]);
            assert_eq!(frame.value(r, c0), frame.value(r, c1));
        }
    }

    #[test]
    fn split_lengths_and_boundary() {
        let cfg = FrameConfig::default();
        let series = synth(2, 100, 2);
        let frame = build_feature_frame(&series, None, &cfg).unwrap();
        let spec = SplitSpec {
            train_start: frame.dates()[0],
            train_end: frame.dates()[79],
            eval_start: frame.dates()[80],
            eval_end: frame.dates()[99],
        };
        let (train, eval) = split(&frame, &spec).unwrap();
        assert_eq!(train.n_rows(), 80);
        assert_eq!(eval.n_rows(), 20);
        // closed interval: the boundary day belongs to train
        assert_eq!(*train.dates().last().unwrap(), frame.dates()[79]);
    }

    #[test]
    fn split_rejects_empty_eval_and_out_of_range() {
        let cfg = FrameConfig::default();
        let series = synth(2, 50, 2);
        let frame = build_feature_frame(&series, None, &cfg).unwrap();
        let last = *frame.dates().last().unwrap();
        let spec = SplitSpec {
            train_start: frame.dates()[0],
            train_end: last,
            eval_start: last + Duration::days(1),
            eval_end: last + Duration::days(10),
        };
        assert!(split(&frame, &spec).is_err());
    }

    #[test]
    fn window_padding_and_alignment() {
        let cfg = FrameConfig::default();
        let series = synth(2, 100, 11);
        let frame = build_feature_frame(&series, None, &cfg).unwrap();

        let w0 = window_at(&frame, 0, 90).unwrap();
        assert_eq!(w0.matrix.shape(), &[90, frame.n_cols()]);
        for r in 0..90 {
            assert_eq!(
                &w0.matrix.data()[r * frame.n_cols()..(r + 1) * frame.n_cols()],
                frame.row(0)
            );
        }

        let w = window_at(&frame, 95, 90).unwrap();
        for (i, want_row) in (6..=95).enumerate() {
            assert_eq!(
                &w.matrix.data()[i * frame.n_cols()..(i + 1) * frame.n_cols()],
                frame.row(want_row)
            );
        }
        // last window row equals frame row t
        let wl = window_at(&frame, 42, 90).unwrap();
        assert_eq!(
            &wl.matrix.data()[89 * frame.n_cols()..],
            frame.row(42)
        );
        // every index is a valid window position
        for t in 0..frame.n_rows() {
            assert!(window_at(&frame, t, 90).is_ok());
        }
        assert!(window_at(&frame, 100, 90).is_err());
    }

    #[test]
    fn frame_build_is_deterministic() {
        let cfg = FrameConfig::default();
        let series = synth(3, 60, 21);
        let a = build_feature_frame(&series, None, &cfg).unwrap();
        let b = build_feature_frame(&series, None, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
