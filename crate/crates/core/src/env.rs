//! Single-asset trading environment.
//!
//! The agent holds a fixed number of shares long, short or not at all. At
//! clock index `t` it picks `a_t`; the step pays the position's profit on the
//! next price move minus the cost of changing position:
//!
//! `reward = shares * (z_{t+1} * a_t - c_t * |a_t - a_{t-1}|)`
//!
//! Summed over an episode this equals the classic trader return
//! `shares * (z_t * a_{t-1} - c * |a_t - a_{t-1}|)` summed over the same span.

use std::io::Write;
use std::ops::Range;

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{format_timestamp, AlignedSeries};
use crate::sentiment::lookback;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("segment {start}..{end} leaves {available} decision points from index {first}, need at least {needed}")]
    SeriesTooShort {
        start: usize,
        end: usize,
        first: usize,
        available: usize,
        needed: usize,
    },
    #[error("segment end {end} exceeds series length {len}")]
    SegmentOutOfBounds { end: usize, len: usize },
    #[error("step called after the episode ended")]
    StepAfterTerminal,
}

pub type Result<T, E = EnvError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Short,
    Neutral,
    Long,
}

impl Action {
    /// All actions in policy-output order.
    pub const ALL: [Action; 3] = [Action::Short, Action::Neutral, Action::Long];

    pub fn value(self) -> i8 {
        match self {
            Action::Short => -1,
            Action::Neutral => 0,
            Action::Long => 1,
        }
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.value())
    }

    /// Position of this action in a policy network's output vector.
    pub fn index(self) -> usize {
        (self.value() + 1) as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn from_value(v: i8) -> Option<Action> {
        match v {
            -1 => Some(Action::Short),
            0 => Some(Action::Neutral),
            1 => Some(Action::Long),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostMode {
    /// Cost per unit of position change is `tc_rate * price`.
    #[default]
    Proportional,
    /// Cost per unit of position change is `tc_rate` currency units.
    FixedPerUnit,
}

/// Affine normalization of the price-difference channel of the state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffScaling {
    pub mean: f64,
    pub std: f64,
}

impl DiffScaling {
    /// Mean and population std of `diffs`; `None` for fewer than two values or zero spread.
    pub fn fit(diffs: &[f64]) -> Option<Self> {
        if diffs.len() < 2 {
            return None;
        }
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
        (var > 0.0).then(|| Self { mean, std: var.sqrt() })
    }

    pub fn apply(&self, z: f64) -> f64 {
        (z - self.mean) / self.std
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Look-back length of the price-difference and hour channels.
    pub window: usize,
    /// Look-back length of the sentiment channel.
    pub sentiment_window: usize,
    /// Fixed number of shares traded.
    pub shares: f64,
    pub tc_rate: f64,
    pub cost_mode: CostMode,
    pub use_sentiment: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diff_scaling: Option<DiffScaling>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            window: 20,
            sentiment_window: 5,
            shares: 1.0,
            tc_rate: 0.0,
            cost_mode: CostMode::Proportional,
            use_sentiment: true,
            diff_scaling: None,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EnvError::InvalidConfig(m.to_string()));
        if self.window < 1 {
            return bad("window must be at least 1");
        }
        if !(self.shares.is_finite() && self.shares > 0.0) {
            return bad("shares must be positive");
        }
        if !(self.tc_rate.is_finite() && self.tc_rate >= 0.0) {
            return bad("tc_rate must be non-negative");
        }
        if let Some(s) = self.diff_scaling {
            if !(s.mean.is_finite() && s.std.is_finite() && s.std > 0.0) {
                return bad("diff scaling needs finite mean and positive std");
            }
        }
        Ok(())
    }

    pub fn sentiment_len(&self) -> usize {
        if self.use_sentiment {
            self.sentiment_window
        } else {
            0
        }
    }

    /// Flattened state length: `2w + l + 1` with sentiment, `2w + 1` without.
    pub fn state_dim(&self) -> usize {
        2 * self.window + self.sentiment_len() + 1
    }

    /// Earliest clock index with full windows. Both ablation arms share it.
    pub fn warmup(&self) -> usize {
        self.window.max(self.sentiment_window.saturating_sub(1))
    }
}

/// Observation at one clock index.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketState {
    /// `[e_t, ..., e_{t-l+1}]`, empty when sentiment is disabled.
    pub sentiment: Vec<f64>,
    /// `[z_t, ..., z_{t-w+1}]`
    pub diffs: Vec<f64>,
    /// `[tau_t, ..., tau_{t-w+1}]`
    pub hours: Vec<f64>,
    pub last_action: Action,
}

impl MarketState {
    pub fn dim(&self) -> usize {
        self.sentiment.len() + self.diffs.len() + self.hours.len() + 1
    }

    /// Network input: sentiment, then diffs, then hours, then the last action.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.sentiment);
        v.extend_from_slice(&self.diffs);
        v.extend_from_slice(&self.hours);
        v.push(self.last_action.as_f64());
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Price at the decision instant.
    pub price: f64,
    /// Price move realized by the step.
    pub diff: f64,
    pub cost_paid: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    /// `None` once the episode is over.
    pub next_state: Option<MarketState>,
    pub done: bool,
    pub info: StepInfo,
}

/// Cash and shares held, marked to market independently of the reward stream.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Ledger {
    cash: f64,
    shares: f64,
}

pub struct TradingEnv<'a> {
    series: &'a AlignedSeries,
    config: EnvConfig,
    first: usize,
    end: usize,
    t: usize,
    last_action: Action,
    done: bool,
    ledger: Ledger,
    psi: f64,
}

impl<'a> TradingEnv<'a> {
    /// Trades over `segment` of `series`. Look-back windows may reach into
    /// history before `segment.start`, never past the current clock.
    pub fn new(series: &'a AlignedSeries, segment: Range<usize>, config: EnvConfig) -> Result<Self> {
        config.validate()?;
        if segment.end > series.len() {
            return Err(EnvError::SegmentOutOfBounds {
                end: segment.end,
                len: series.len(),
            });
        }
        let first = segment.start.max(config.warmup());
        let available = segment.end.saturating_sub(first);
        // Two decisions at minimum: the first step plus one non-terminal transition.
        if available < 3 {
            return Err(EnvError::SeriesTooShort {
                start: segment.start,
                end: segment.end,
                first,
                available,
                needed: 3,
            });
        }
        let psi = config.shares * series.prices[first];
        let mut env = Self {
            series,
            config,
            first,
            end: segment.end,
            t: first,
            last_action: Action::Neutral,
            done: false,
            ledger: Ledger { cash: psi, shares: 0.0 },
            psi,
        };
        env.reset();
        Ok(env)
    }

    pub fn reset(&mut self) -> MarketState {
        self.t = self.first;
        self.last_action = Action::Neutral;
        self.done = false;
        self.ledger = Ledger {
            cash: self.psi,
            shares: 0.0,
        };
        self.observe()
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn series(&self) -> &AlignedSeries {
        self.series
    }

    /// Index of the first decision.
    pub fn first_index(&self) -> usize {
        self.first
    }

    /// Index of the last price in the segment; no decision is taken there.
    pub fn final_index(&self) -> usize {
        self.end - 1
    }

    pub fn clock(&self) -> usize {
        self.t
    }

    pub fn steps_per_episode(&self) -> usize {
        self.final_index() - self.first
    }

    /// Initial wealth: the cash needed to buy the traded shares at the first decision price.
    pub fn psi(&self) -> f64 {
        self.psi
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Cash plus marked-to-market position at the current clock.
    pub fn wealth(&self) -> f64 {
        self.ledger.cash + self.ledger.shares * self.series.prices[self.t]
    }

    pub fn state_dim(&self) -> usize {
        self.config.state_dim()
    }

    pub fn observe(&self) -> MarketState {
        let t = self.t;
        let w = self.config.window;
        let mut diffs = lookback(&self.series.diffs, t - 1, w).expect("warm-up guarantees history");
        if let Some(scaling) = self.config.diff_scaling {
            diffs.iter_mut().for_each(|z| *z = scaling.apply(*z));
        }
        let hours = lookback(&self.series.hours, t, w).expect("warm-up guarantees history");
        let sentiment = match self.config.sentiment_len() {
            0 => Vec::new(),
            l => lookback(&self.series.sentiment, t, l).expect("warm-up guarantees history"),
        };
        MarketState {
            sentiment,
            diffs,
            hours,
            last_action: self.last_action,
        }
    }

    fn unit_cost(&self, price: f64) -> f64 {
        match self.config.cost_mode {
            CostMode::Proportional => self.config.tc_rate * price,
            CostMode::FixedPerUnit => self.config.tc_rate,
        }
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome> {
        if self.done {
            return Err(EnvError::StepAfterTerminal);
        }
        let t = self.t;
        let phi = self.config.shares;
        let price = self.series.prices[t];
        let diff = self.series.diff(t + 1);
        let change = f64::from((action.value() - self.last_action.value()).abs());
        let cost = phi * self.unit_cost(price) * change;
        let reward = phi * diff * action.as_f64() - cost;

        let new_shares = phi * action.as_f64();
        self.ledger.cash -= (new_shares - self.ledger.shares) * price + cost;
        self.ledger.shares = new_shares;

        self.last_action = action;
        self.t = t + 1;
        self.done = self.t == self.final_index();
        let next_state = (!self.done).then(|| self.observe());
        Ok(StepOutcome {
            reward,
            next_state,
            done: self.done,
            info: StepInfo {
                price,
                diff,
                cost_paid: cost,
            },
        })
    }
}

/// Sum of step rewards in step order.
pub fn episode_return(rewards: &[f64]) -> f64 {
    rewards.iter().sum()
}

pub trait Policy {
    fn act(&mut self, state: &MarketState) -> Action;
}

impl<F: FnMut(&MarketState) -> Action> Policy for F {
    fn act(&mut self, state: &MarketState) -> Action {
        self(state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    BuyAndHold,
    AlwaysShort,
    AlwaysNeutral,
    Random(u64),
}

pub struct BaselinePolicy {
    kind: Baseline,
    rng: Option<ChaCha8Rng>,
}

impl BaselinePolicy {
    pub fn new(kind: Baseline) -> Self {
        let rng = match kind {
            Baseline::Random(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        Self { kind, rng }
    }
}

impl Policy for BaselinePolicy {
    fn act(&mut self, _state: &MarketState) -> Action {
        match self.kind {
            Baseline::BuyAndHold => Action::Long,
            Baseline::AlwaysShort => Action::Short,
            Baseline::AlwaysNeutral => Action::Neutral,
            Baseline::Random(_) => {
                let rng = self.rng.as_mut().expect("random baseline owns a generator");
                Action::ALL[rng.gen_range(0..3)]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStep {
    pub t: usize,
    pub timestamp: DateTime<Utc>,
    pub action: Action,
    pub reward: f64,
    pub cost: f64,
    /// Cumulative reward over initial wealth after this step.
    pub cum_return: f64,
}

/// A completed pass over a segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub steps: Vec<EpisodeStep>,
    pub psi: f64,
    /// Wealth from the cash/share ledger at the final index.
    pub final_wealth: f64,
}

impl Episode {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn total_reward(&self) -> f64 {
        episode_return(&self.rewards())
    }

    /// Total return over initial wealth.
    pub fn total_return(&self) -> f64 {
        self.total_reward() / self.psi
    }

    /// Number of position changes, including the opening trade.
    pub fn trade_count(&self) -> usize {
        let mut prev = Action::Neutral;
        self.steps
            .iter()
            .filter(|s| {
                let changed = s.action != prev;
                prev = s.action;
                changed
            })
            .count()
    }

    /// Equity curve as `t,timestamp,action,reward,cost,cum_return`.
    pub fn write_csv(&self, out: impl Write) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "timestamp", "action", "reward", "cost", "cum_return"])?;
        for s in &self.steps {
            w.write_record([
                s.t.to_string(),
                format_timestamp(&s.timestamp),
                s.action.value().to_string(),
                s.reward.to_string(),
                s.cost.to_string(),
                s.cum_return.to_string(),
            ])?;
        }
        w.flush()
    }
}

/// Runs `policy` from reset to the end of the segment.
pub fn run_episode(env: &mut TradingEnv<'_>, policy: &mut dyn Policy) -> Result<Episode> {
    let mut state = env.reset();
    let mut steps = Vec::with_capacity(env.steps_per_episode());
    let mut cum = 0.0;
    loop {
        let t = env.clock();
        let action = policy.act(&state);
        let outcome = env.step(action)?;
        cum += outcome.reward;
        steps.push(EpisodeStep {
            t,
            timestamp: env.series().timestamps[t],
            action,
            reward: outcome.reward,
            cost: outcome.info.cost_paid,
            cum_return: cum / env.psi(),
        });
        match outcome.next_state {
            Some(next) => state = next,
            None => break,
        }
    }
    Ok(Episode {
        steps,
        psi: env.psi(),
        final_wealth: env.wealth(),
    })
}

/// Buy-and-hold over `segment`: long throughout and never charged transaction costs.
pub fn buy_and_hold(series: &AlignedSeries, segment: Range<usize>, config: &EnvConfig) -> Result<Episode> {
    let config = EnvConfig {
        tc_rate: 0.0,
        ..config.clone()
    };
    let mut env = TradingEnv::new(series, segment, config)?;
    run_episode(&mut env, &mut BaselinePolicy::new(Baseline::BuyAndHold))
}
