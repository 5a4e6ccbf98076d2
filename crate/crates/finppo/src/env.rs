//! The market MDP: portfolio accounting, action execution, reward emission,
//! observation construction.
//!
//! One step executes the action at the current day's closes (sells before
//! buys, both clipped so balance and holdings never go negative), advances
//! the day, and pays `reward_scale · (v_{t+1} − v_t)` where `v` is the
//! pre-trade portfolio value at each day's closes. With zero transaction cost
//! the per-episode rewards telescope to `reward_scale · (v_T − v_0)`.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::data::{window_at, FeatureFrame};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct EnvConfig {
    /// Maximum shares tradable per ticker per step; actions in [−1, 1] scale
    /// to share counts through it.
    pub hmax: u64,
    pub initial_balance: f64,
    /// Fraction of trade notional charged on both buys and sells.
    pub cost_rate: f64,
    pub reward_scale: f64,
    /// Rows per observation window.
    pub window: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            hmax: 1000,
            initial_balance: 1_000_000.0,
            cost_rate: 0.0,
            reward_scale: 1e-4,
            window: 90,
        }
    }
}

impl EnvConfig {
    fn validate(&self) -> Result<()> {
        if self.hmax < 1 {
            return Err(Error::InvalidArgument {
                op: "EnvConfig",
                reason: "hmax must be >= 1".into(),
            });
        }
        if !(self.initial_balance > 0.0) {
            return Err(Error::InvalidArgument {
                op: "EnvConfig",
                reason: "initial_balance must be positive".into(),
            });
        }
        if !(0.0..1.0).contains(&self.cost_rate) {
            return Err(Error::InvalidArgument {
                op: "EnvConfig",
                reason: "cost_rate must be in [0, 1)".into(),
            });
        }
        if self.window == 0 {
            return Err(Error::InvalidArgument {
                op: "EnvConfig",
                reason: "window must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// Account snapshot at the start of a day (before that day's trades).
#[derive(Debug, Clone)]
pub struct AccountRecord {
    pub balance: f64,
    pub holdings: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct EnvState {
    pub day: usize,
    pub start_day: usize,
    pub balance: f64,
    pub holdings: Vec<u64>,
    /// One record per elapsed day, index 0 = `start_day`.
    pub account_history: Vec<AccountRecord>,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct StepInfo {
    pub raw_reward: f64,
    pub portfolio_value: f64,
    pub trades: usize,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub observation: Tensor,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Sliding-window trading environment over a prebuilt feature frame.
#[derive(Debug, Clone)]
pub struct TradingEnv {
    config: EnvConfig,
    frame: Arc<FeatureFrame>,
    close_cols: Vec<usize>,
    state: EnvState,
}

impl TradingEnv {
    pub fn new(frame: Arc<FeatureFrame>, config: EnvConfig) -> Result<Self> {
        config.validate()?;
        if frame.n_rows() < 2 {
            return Err(Error::InvalidArgument {
                op: "TradingEnv",
                reason: format!("frame has {} rows, need at least 2", frame.n_rows()),
            });
        }
        let close_cols: Vec<usize> = (0..frame.tickers().len())
            .map(|i| frame.close_column(i))
            .collect::<Result<_>>()?;
        let n = frame.tickers().len();
        let mut env = TradingEnv {
            config,
            frame,
            close_cols,
            state: EnvState {
                day: 0,
                start_day: 0,
                balance: 0.0,
                holdings: vec![0; n],
                account_history: Vec::new(),
                done: false,
            },
        };
        env.reset(0)?;
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn frame(&self) -> &FeatureFrame {
        &self.frame
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn action_dim(&self) -> usize {
        self.close_cols.len()
    }

    /// Steps remaining until the frame end when starting at `start_day`.
    pub fn episode_len(&self, start_day: usize) -> usize {
        self.frame.n_rows() - 1 - start_day
    }

    fn close(&self, day: usize, ticker: usize) -> f64 {
        self.frame.value(day, self.close_cols[ticker])
    }

    /// Balance plus holdings at the current day's closes.
    pub fn portfolio_value(&self) -> f64 {
        let mut v = self.state.balance;
        for (j, &h) in self.state.holdings.iter().enumerate() {
            v += h as f64 * self.close(self.state.day, j);
        }
        v
    }

    pub fn reset(&mut self, start_day: usize) -> Result<Tensor> {
        if start_day >= self.frame.n_rows() {
            return Err(Error::InvalidArgument {
                op: "env_reset",
                reason: format!(
                    "start_day {start_day} outside frame of {} rows",
                    self.frame.n_rows()
                ),
            });
        }
        let n = self.close_cols.len();
        self.state = EnvState {
            day: start_day,
            start_day,
            balance: self.config.initial_balance,
            holdings: vec![0; n],
            account_history: vec![AccountRecord {
                balance: self.config.initial_balance,
                holdings: vec![0; n],
            }],
            done: start_day == self.frame.n_rows() - 1,
        };
        self.observe()
    }

    /// Execute `action` (one entry per ticker in [−1, 1]; values outside the
    /// box are clamped), advance one day, and emit the scaled reward.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.state.done {
            return Err(Error::InvalidArgument {
                op: "env_step",
                reason: "episode is done; call reset".into(),
            });
        }
        let n = self.close_cols.len();
        if action.len() != n {
            return Err(Error::ShapeMismatch {
                op: "env_step",
                lhs: vec![action.len()],
                rhs: vec![n],
            });
        }
        if action.iter().any(|a| a.is_nan()) {
            return Err(Error::NonFinite {
                context: "environment action".into(),
            });
        }

        let day = self.state.day;
        let value_before = self.portfolio_value();

        // round(action · hmax), ties away from zero
        let shares: Vec<i64> = action
            .iter()
            .map(|a| (a.clamp(-1.0, 1.0) * self.config.hmax as f64).round() as i64)
            .collect();

        let mut trades = 0usize;
        // sells first to free cash, clipped to current holdings
        for j in 0..n {
            if shares[j] < 0 {
                let qty = ((-shares[j]) as u64).min(self.state.holdings[j]);
                if qty > 0 {
                    let price = self.close(day, j);
                    self.state.balance += qty as f64 * price * (1.0 - self.config.cost_rate);
                    self.state.holdings[j] -= qty;
                    trades += 1;
                }
            }
        }
        // then buys, clipped to what the balance affords at cost-adjusted price
        for j in 0..n {
            if shares[j] > 0 {
                let price = self.close(day, j) * (1.0 + self.config.cost_rate);
                let afford = (self.state.balance / price).floor() as i64;
                let mut qty = shares[j].min(afford).max(0) as u64;
                while qty > 0 && qty as f64 * price > self.state.balance {
                    qty -= 1; // guard against float rounding in the afford estimate
                }
                if qty > 0 {
                    self.state.balance -= qty as f64 * price;
                    self.state.holdings[j] += qty;
                    trades += 1;
                }
            }
        }
        debug_assert!(self.state.balance >= 0.0);

        self.state.day += 1;
        self.state.account_history.push(AccountRecord {
            balance: self.state.balance,
            holdings: self.state.holdings.clone(),
        });
        self.state.done = self.state.day == self.frame.n_rows() - 1;

        let value_after = self.portfolio_value();
        let raw_reward = value_after - value_before;
        let reward = self.config.reward_scale * raw_reward;
        if !reward.is_finite() {
            return Err(Error::NonFinite {
                context: "environment reward".into(),
            });
        }

        Ok(StepResult {
            observation: self.observe()?,
            reward,
            done: self.state.done,
            info: StepInfo {
                raw_reward,
                portfolio_value: value_after,
                trades,
            },
        })
    }

    /// The window matrix ending at the current day, with the balance column
    /// (normalized by the initial balance) and per-ticker holdings columns
    /// filled from the account history. Window rows before the episode start
    /// carry the initial values.
    pub fn observe(&self) -> Result<Tensor> {
        let view = window_at(&self.frame, self.state.day, self.config.window)?;
        let mut obs = view.matrix;
        let w = self.frame.n_cols();
        let window = self.config.window;
        let holdings_cols: Vec<usize> = (0..self.close_cols.len())
            .map(|j| self.frame.holdings_column(j))
            .collect();
        for i in 0..window {
            let want = self.state.day as i64 - (window as i64 - 1) + i as i64;
            let row = want.max(0) as usize;
            let (balance, holdings): (f64, Option<&[u64]>) = if row >= self.state.start_day {
                let rec = &self.state.account_history[row - self.state.start_day];
                (rec.balance, Some(&rec.holdings))
            } else {
                (self.config.initial_balance, None)
            };
            let data = obs.data_mut();
            data[i * w + FeatureFrame::BALANCE_COLUMN] = balance / self.config.initial_balance;
            for (j, &col) in holdings_cols.iter().enumerate() {
                data[i * w + col] = holdings.map_or(0.0, |h| h[j] as f64);
            }
        }
        Ok(obs)
    }

    /// Account history as delimited text (debugging aid).
    pub fn history_csv(&self) -> String {
        let mut out = String::from("day,balance");
        for t in self.frame.tickers() {
            write!(out, ",{t}_holdings").unwrap();
        }
        out.push('\n');
        for (i, rec) in self.state.account_history.iter().enumerate() {
            write!(out, "{},{:?}", self.state.start_day + i, rec.balance).unwrap();
            for h in &rec.holdings {
                write!(out, ",{h}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Sum of per-step scaled rewards.
pub fn episode_return(rewards: &[f64]) -> f64 {
    rewards.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_feature_frame, FrameConfig};
    use crate::indicators::BarSeries;
    use chrono::{Datelike, NaiveDate};

    /// Frame where every price column equals the given close path.
    pub(crate) fn frame_from_closes(closes: &[Vec<f64>]) -> Arc<FeatureFrame> {
        let n_days = closes[0].len();
        let mut dates = Vec::new();
        let mut d = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        while dates.len() < n_days {
            if d.weekday() != chrono::Weekday::Sat && d.weekday() != chrono::Weekday::Sun {
                dates.push(d);
            }
            d += chrono::Duration::days(1);
        }
        let series: Vec<BarSeries> = closes
            .iter()
            .enumerate()
            .map(|(i, c)| {
                BarSeries::new(
                    format!("TK{i}"),
                    dates.clone(),
                    c.clone(),
                    c.clone(),
                    c.clone(),
                    c.clone(),
                    vec![1000.0; n_days],
                )
                .unwrap()
            })
            .collect();
        Arc::new(build_feature_frame(&series, None, &FrameConfig::default()).unwrap())
    }

    fn cfg(window: usize) -> EnvConfig {
        EnvConfig {
            window,
            ..EnvConfig::default()
        }
    }

    #[test]
    fn reset_invariants() {
        let frame = frame_from_closes(&[vec![100.0; 20]]);
        let mut env = TradingEnv::new(frame.clone(), cfg(10)).unwrap();
        let obs = env.reset(0).unwrap();
        assert_eq!(env.portfolio_value(), 1_000_000.0);
        assert_eq!(obs.shape(), &[10, frame.n_cols()]);
        let obs2 = env.reset(0).unwrap();
        assert_eq!(obs.data(), obs2.data());
        // balance column all 1.0, holdings all 0
        let bcol = FeatureFrame::BALANCE_COLUMN;
        let hcol = frame.holdings_column(0);
        for r in 0..10 {
            assert_eq!(obs.at(&[r, bcol]), 1.0);
            assert_eq!(obs.at(&[r, hcol]), 0.0);
        }
    }

    #[test]
    fn hand_accounting_example() {
        let closes = vec![vec![100.0, 101.0, 102.0]];
        let mut env = TradingEnv::new(frame_from_closes(&closes), cfg(3)).unwrap();
        env.reset(0).unwrap();
        let res = env.step(&[0.05]).unwrap();
        assert_eq!(env.state().holdings[0], 50);
        assert_eq!(env.state().balance, 995_000.0);
        assert!((res.info.raw_reward - 50.0).abs() < 1e-9);
        assert!((res.reward - 0.005).abs() < 1e-12);
        // holdings column: last row 50, the row before 0
        let hcol = env.frame().holdings_column(0);
        assert_eq!(res.observation.at(&[2, hcol]), 50.0);
        assert_eq!(res.observation.at(&[1, hcol]), 0.0);
    }

    #[test]
    fn zero_action_zero_holdings_zero_reward() {
        let closes = vec![vec![100.0, 105.0, 95.0]];
        let mut env = TradingEnv::new(frame_from_closes(&closes), cfg(2)).unwrap();
        env.reset(0).unwrap();
        let res = env.step(&[0.0]).unwrap();
        assert_eq!(res.reward, 0.0);
        assert_eq!(res.info.trades, 0);
    }

    #[test]
    fn sell_clips_to_holdings() {
        let closes = vec![vec![10.0, 10.0, 10.0]];
        let mut env = TradingEnv::new(frame_from_closes(&closes), cfg(2)).unwrap();
        env.reset(0).unwrap();
        env.step(&[0.03]).unwrap(); // buy 30
        assert_eq!(env.state().holdings[0], 30);
        env.reset(0).unwrap();
        env.step(&[0.03]).unwrap();
        let res = env.step(&[-1.0]).unwrap(); // wants to sell 1000, owns 30
        assert_eq!(env.state().holdings[0], 0);
        assert!(res.info.trades > 0);
    }

    #[test]
    fn buys_clip_to_balance() {
        let closes = vec![vec![900_000.0, 900_000.0, 900_000.0]];
        let mut env = TradingEnv::new(frame_from_closes(&closes), cfg(2)).unwrap();
        env.reset(0).unwrap();
        env.step(&[1.0]).unwrap(); // can only afford 1 share
        assert_eq!(env.state().holdings[0], 1);
        assert!(env.state().balance >= 0.0);
    }

    #[test]
    fn step_rejects_nan_and_wrong_dim() {
        let closes = vec![vec![10.0; 5], vec![20.0; 5]];
        let mut env = TradingEnv::new(frame_from_closes(&closes), cfg(2)).unwrap();
        env.reset(0).unwrap();
        assert!(env.step(&[f64::NAN, 0.0]).is_err());
        assert!(env.step(&[0.1]).is_err());
    }

    #[test]
    fn portfolio_value_cases() {
        let closes = vec![vec![50.0; 4]];
        let mut env = TradingEnv::new(frame_from_closes(&closes), cfg(2)).unwrap();
        env.reset(0).unwrap();
        assert_eq!(env.portfolio_value(), 1_000_000.0);
        env.step(&[0.01]).unwrap(); // buy 10 at 50
        // zero-cost trade at current closes conserves value
        assert_eq!(env.portfolio_value(), 1_000_000.0);
        assert_eq!(env.state().holdings[0], 10);
    }

    #[test]
    fn telescoping_identity() {
        let mut rng = crate::rng::Rng::new(77);
        let closes: Vec<Vec<f64>> = (0..2)
            .map(|_| {
                let mut c = vec![100.0];
                for _ in 0..49 {
                    let last = *c.last().unwrap();
                    c.push((last * (1.0 + 0.01 * rng.normal())).max(1.0));
                }
                c
            })
            .collect();
        let mut env = TradingEnv::new(frame_from_closes(&closes), cfg(5)).unwrap();
        env.reset(0).unwrap();
        let v0 = env.portfolio_value();
        let mut rewards = Vec::new();
        loop {
            let a = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
            let res = env.step(&a).unwrap();
            rewards.push(res.reward);
            if res.done {
                break;
            }
        }
        let v_final = env.portfolio_value();
        let total = episode_return(&rewards);
        assert!(
            (total - 1e-4 * (v_final - v0)).abs() < 1e-9,
            "telescoping violated: {total} vs {}",
            1e-4 * (v_final - v0)
        );
    }

    #[test]
    fn episode_return_cases() {
        assert_eq!(episode_return(&[]), 0.0);
        assert!((episode_return(&[0.1, -0.02]) - 0.08).abs() < 1e-15);
    }

    #[test]
    fn determinism_over_action_sequence() {
        let closes = vec![vec![10.0; 30], vec![25.0; 30]];
        let frame = frame_from_closes(&closes);
        let actions: Vec<[f64; 2]> = (0..10).map(|i| [0.1 * i as f64 - 0.5, 0.3]).collect();
        let run = |frame: &Arc<FeatureFrame>| {
            let mut env = TradingEnv::new(frame.clone(), cfg(4)).unwrap();
            env.reset(2).unwrap();
            let mut out = Vec::new();
            for a in &actions {
                let r = env.step(a).unwrap();
                out.push((r.reward, r.observation));
            }
            out
        };
        let a = run(&frame);
        let b = run(&frame);
        for ((ra, oa), (rb, ob)) in a.iter().zip(&b) {
            assert_eq!(ra, rb);
            assert_eq!(oa.data(), ob.data());
        }
    }

    #[test]
    fn market_columns_match_window_view() {
        let closes = vec![vec![10.0, 11.0, 12.0, 13.0, 14.0]];
        let frame = frame_from_closes(&closes);
        let mut env = TradingEnv::new(frame.clone(), cfg(3)).unwrap();
        env.reset(0).unwrap();
        env.step(&[0.5]).unwrap();
        let obs = env.observe().unwrap();
        let view = window_at(&frame, 1, 3).unwrap();
        let bcol = FeatureFrame::BALANCE_COLUMN;
        let hcol = frame.holdings_column(0);
        for r in 0..3 {
            for c in 0..frame.n_cols() {
                if c != bcol && c != hcol {
                    assert_eq!(obs.at(&[r, c]), view.matrix.at(&[r, c]), "row {r} col {c}");
                }
            }
        }
    }
}
