//! Rolling-window experiments: metrics, the trial matrix and summary reports.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{self, A2cConfig, AgentError, EvalMode};
use crate::data::{coverage, AlignedSeries};
use crate::env::{buy_and_hold, DiffScaling, EnvConfig, EnvError, Episode};
use crate::nn;
use crate::sentiment::{self, CorrelationPulse};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("series of length {len} is too short for {needed} points of windows")]
    InsufficientData { len: usize, needed: usize },
    #[error("invalid window spec: {0}")]
    InvalidWindows(String),
    #[error("initial wealth must be positive, got {0}")]
    NonPositiveWealth(f64),
    #[error("total return {0} must exceed -1")]
    ReturnBelowTotalLoss(f64),
    #[error("trading days must be positive")]
    NoTradingDays,
    #[error("sharpe ratio needs at least 2 trials, got {0}")]
    TooFewTrials(usize),
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
    #[error("results file line {line}: {reason}")]
    BadResults { line: u64, reason: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSpec {
    pub train_len: usize,
    pub test_len: usize,
    pub stride: usize,
    pub count: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            train_len: 3377,
            test_len: 374,
            stride: 374,
            count: 5,
        }
    }
}

impl WindowSpec {
    pub fn span(&self) -> usize {
        self.train_len + self.test_len + (self.count.saturating_sub(1)) * self.stride
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub index: usize,
    pub train: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RollingWindows {
    pub spec: WindowSpec,
    pub windows: Vec<Window>,
}

/// Train/test splits rolled forward by `stride`, anchored so the last test range ends at `len`.
pub fn make_windows(len: usize, spec: WindowSpec) -> Result<RollingWindows> {
    if spec.count == 0 || spec.train_len == 0 || spec.test_len == 0 {
        return Err(EvalError::InvalidWindows("lengths and count must be positive".into()));
    }
    if spec.count > 1 && spec.stride < spec.test_len {
        return Err(EvalError::InvalidWindows(format!(
            "stride {} shorter than test length {} would overlap test ranges",
            spec.stride, spec.test_len
        )));
    }
    let needed = spec.span();
    if len < needed {
        return Err(EvalError::InsufficientData { len, needed });
    }
    let offset = len - needed;
    let windows = (0..spec.count)
        .map(|j| {
            let train_start = offset + j * spec.stride;
            let test_start = train_start + spec.train_len;
            Window {
                index: j,
                train: train_start..test_start,
                test: test_start..test_start + spec.test_len,
            }
        })
        .collect();
    Ok(RollingWindows { spec, windows })
}

/// Sum of rewards over initial wealth.
pub fn total_return(rewards: &[f64], psi: f64) -> Result<f64> {
    if !(psi > 0.0) {
        return Err(EvalError::NonPositiveWealth(psi));
    }
    Ok(rewards.iter().sum::<f64>() / psi)
}

/// `(1 + tr)^(365 / days) - 1`: compounds a return earned over `days` to a yearly rate.
pub fn annualized_return(tr: f64, days: usize) -> Result<f64> {
    if days == 0 {
        return Err(EvalError::NoTradingDays);
    }
    if !(tr > -1.0) {
        return Err(EvalError::ReturnBelowTotalLoss(tr));
    }
    Ok((1.0 + tr).powf(365.0 / days as f64) - 1.0)
}

/// Mean over sample standard deviation. `Ok(None)` when every value is identical.
pub fn sharpe(trs: &[f64]) -> Result<Option<f64>> {
    if trs.len() < 2 {
        return Err(EvalError::TooFewTrials(trs.len()));
    }
    if trs.iter().all(|&v| v == trs[0]) {
        return Ok(None);
    }
    let n = trs.len() as f64;
    let mean = trs.iter().sum::<f64>() / n;
    let var = trs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    Ok((std > 0.0).then(|| mean / std))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    BuyAndHold,
    NoSentiment,
    #[serde(rename = "sentarl")]
    SentArl,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::BuyAndHold, Strategy::NoSentiment, Strategy::SentArl];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::BuyAndHold => "buy-and-hold",
            Strategy::NoSentiment => "no-sentiment",
            Strategy::SentArl => "sentarl",
        }
    }

    pub fn is_learning(self) -> bool {
        !matches!(self, Strategy::BuyAndHold)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

/// Identity of one trial; also the resumability unit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialKey {
    pub asset: String,
    pub window: usize,
    pub seed: u64,
    pub tc: f64,
    pub strategy: Strategy,
}

impl TrialKey {
    fn sort_key(&self) -> (&str, usize, u64, u64, Strategy) {
        // tc values are non-negative, so their bit patterns order like the values.
        (&self.asset, self.window, self.seed, self.tc.to_bits(), self.strategy)
    }

    fn id(&self) -> (String, usize, u64, u64, Strategy) {
        (self.asset.clone(), self.window, self.seed, self.tc.to_bits(), self.strategy)
    }

    /// File-name stem for per-trial artifacts.
    pub fn stem(&self) -> String {
        format!("{}_w{}_s{}_tc{}_{}", self.asset, self.window, self.seed, self.tc, self.strategy)
    }
}

impl fmt::Display for TrialKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} window {} seed {} tc {} {}",
            self.asset, self.window, self.seed, self.tc, self.strategy
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub key: TrialKey,
    pub tr: f64,
    pub ar: f64,
    pub trade_count: usize,
    /// Cumulative return after each test step; empty for rows read back from disk.
    pub equity: Vec<f64>,
}

pub const RESULTS_HEADER: [&str; 8] = ["asset", "window", "seed", "tc", "strategy", "tr", "ar", "trade_count"];

fn result_record(r: &TrialResult) -> [String; 8] {
    [
        r.key.asset.clone(),
        r.key.window.to_string(),
        r.key.seed.to_string(),
        r.key.tc.to_string(),
        r.key.strategy.to_string(),
        r.tr.to_string(),
        r.ar.to_string(),
        r.trade_count.to_string(),
    ]
}

pub fn sort_results(results: &mut [TrialResult]) {
    results.sort_by(|a, b| a.key.sort_key().cmp(&b.key.sort_key()));
}

pub fn write_results(results: &[TrialResult], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULTS_HEADER)?;
    for r in results {
        w.write_record(result_record(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(input: impl Read) -> Result<Vec<TrialResult>> {
    let mut reader = csv::Reader::from_reader(input);
    if reader.headers()?.iter().collect::<Vec<_>>() != RESULTS_HEADER {
        return Err(EvalError::BadResults {
            line: 1,
            reason: format!("header must be {}", RESULTS_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let bad = |field: &str| EvalError::BadResults {
            line,
            reason: format!("bad {field}"),
        };
        out.push(TrialResult {
            key: TrialKey {
                asset: row[0].to_string(),
                window: row[1].parse().map_err(|_| bad("window"))?,
                seed: row[2].parse().map_err(|_| bad("seed"))?,
                tc: row[3].parse().map_err(|_| bad("tc"))?,
                strategy: row[4].parse().map_err(|_| bad("strategy"))?,
            },
            tr: row[5].parse().map_err(|_| bad("tr"))?,
            ar: row[6].parse().map_err(|_| bad("ar"))?,
            trade_count: row[7].parse().map_err(|_| bad("trade_count"))?,
            equity: Vec::new(),
        });
    }
    Ok(out)
}

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<TrialResult>> {
    read_results(File::open(path)?)
}

/// How the day count `D` of the annualized return is obtained for a test range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "days")]
pub enum DayCount {
    /// Distinct calendar dates with at least one price in the range.
    #[default]
    DistinctDates,
    /// Calendar days from the first to the last timestamp, inclusive.
    CalendarSpan,
    Fixed(usize),
}

impl DayCount {
    pub fn days(&self, series: &AlignedSeries, range: Range<usize>) -> usize {
        match *self {
            DayCount::DistinctDates => series.trading_days(range),
            DayCount::CalendarSpan => {
                let first = series.timestamps[range.start].date_naive();
                let last = series.timestamps[range.end - 1].date_naive();
                (last - first).num_days() as usize + 1
            }
            DayCount::Fixed(d) => d,
        }
    }
}

/// Everything that defines one experiment matrix apart from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatrixConfig {
    /// Base environment; `tc_rate` and `use_sentiment` are set per trial.
    pub env: EnvConfig,
    /// Base learner; `seed` is set per trial.
    pub a2c: A2cConfig,
    pub windows: WindowSpec,
    pub seeds: Vec<u64>,
    pub tc_rates: Vec<f64>,
    pub strategies: Vec<Strategy>,
    /// Z-score price differences in the state with training-range statistics.
    pub normalize_diffs: bool,
    pub day_count: DayCount,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            a2c: A2cConfig::default(),
            windows: WindowSpec::default(),
            seeds: vec![0, 1, 2, 3, 4],
            tc_rates: vec![0.0, 0.0025],
            strategies: Strategy::ALL.to_vec(),
            normalize_diffs: false,
            day_count: DayCount::DistinctDates,
        }
    }
}

impl MatrixConfig {
    /// Environment for one trial.
    pub fn trial_env(&self, series: &AlignedSeries, window: &Window, tc: f64, strategy: Strategy) -> EnvConfig {
        let diff_scaling = if self.normalize_diffs {
            // diffs[t - 1] is the move arriving at t; take moves inside the training range.
            let lo = window.train.start.max(1) - 1;
            DiffScaling::fit(&series.diffs[lo..window.train.end - 1])
        } else {
            None
        };
        EnvConfig {
            tc_rate: tc,
            use_sentiment: strategy == Strategy::SentArl,
            diff_scaling,
            ..self.env.clone()
        }
    }

    /// Trials of one learning strategy across `assets` assets.
    pub fn trials_per_strategy(&self, assets: usize) -> usize {
        assets * self.windows.count * self.seeds.len() * self.tc_rates.len()
    }

    pub fn trial_a2c(&self, seed: u64) -> A2cConfig {
        A2cConfig {
            seed,
            ..self.a2c.clone()
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub workers: usize,
    /// Skip trials already present in the results file.
    pub resume: bool,
    /// Stop after starting this many units of work; the run then reports itself incomplete.
    pub limit: Option<usize>,
    /// Directory for training logs, model checkpoints and test equity curves.
    pub artifacts: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialFailure {
    pub key: TrialKey,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct MatrixOutcome {
    /// Every result in the results file, sorted.
    pub results: Vec<TrialResult>,
    pub failures: Vec<TrialFailure>,
    /// Units of work executed in this invocation.
    pub executed: usize,
    /// Units skipped because their rows were already on disk.
    pub skipped: usize,
    pub complete: bool,
}

/// One unit of work: a learning trial, or buy-and-hold for an (asset, window).
#[derive(Debug, Clone)]
enum Unit {
    Agent { asset: usize, window: usize, seed: u64, tc: f64, strategy: Strategy },
    BuyAndHold { asset: usize, window: usize },
}

impl Unit {
    fn keys(&self, assets: &[AlignedSeries], config: &MatrixConfig) -> Vec<TrialKey> {
        match *self {
            Unit::Agent { asset, window, seed, tc, strategy } => vec![TrialKey {
                asset: assets[asset].asset.clone(),
                window,
                seed,
                tc,
                strategy,
            }],
            Unit::BuyAndHold { asset, window } => config
                .seeds
                .iter()
                .flat_map(|&seed| {
                    config.tc_rates.iter().map(move |&tc| TrialKey {
                        asset: assets[asset].asset.clone(),
                        window,
                        seed,
                        tc,
                        strategy: Strategy::BuyAndHold,
                    })
                })
                .collect(),
        }
    }
}

fn plan(assets: &[AlignedSeries], config: &MatrixConfig, windows: &[RollingWindows]) -> Vec<Unit> {
    let mut units = Vec::new();
    for (a, wins) in assets.iter().zip(windows).enumerate().map(|(i, (_, w))| (i, w)) {
        for w in &wins.windows {
            if config.strategies.contains(&Strategy::BuyAndHold) {
                units.push(Unit::BuyAndHold { asset: a, window: w.index });
            }
            for &seed in &config.seeds {
                for &tc in &config.tc_rates {
                    for &strategy in config.strategies.iter().filter(|s| s.is_learning()) {
                        units.push(Unit::Agent { asset: a, window: w.index, seed, tc, strategy });
                    }
                }
            }
        }
    }
    units
}

fn episode_result(key: TrialKey, episode: &Episode, days: usize) -> Result<TrialResult> {
    let tr = total_return(&episode.rewards(), episode.psi)?;
    Ok(TrialResult {
        key,
        tr,
        ar: annualized_return(tr, days)?,
        trade_count: episode.trade_count(),
        equity: episode.steps.iter().map(|s| s.cum_return).collect(),
    })
}

fn write_artifacts(dir: &Path, key: &TrialKey, training: &agent::Training, episode: &Episode) -> std::io::Result<()> {
    let stem = key.stem();
    for sub in ["logs", "models", "equity"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    agent::write_training_log(&training.log, BufWriter::new(File::create(dir.join("logs").join(format!("{stem}.csv")))?))?;
    fs::write(dir.join("models").join(format!("{stem}_policy.bin")), nn::to_bytes(&training.agent.policy))?;
    fs::write(dir.join("models").join(format!("{stem}_value.bin")), nn::to_bytes(&training.agent.value))?;
    episode.write_csv(BufWriter::new(File::create(dir.join("equity").join(format!("{stem}.csv")))?))
}

/// Trains on the window's training range and evaluates greedily on its test range.
pub fn run_agent_trial(
    series: &AlignedSeries,
    window: &Window,
    config: &MatrixConfig,
    key: TrialKey,
    artifacts: Option<&Path>,
) -> Result<TrialResult> {
    let env = config.trial_env(series, window, key.tc, key.strategy);
    let a2c = config.trial_a2c(key.seed);
    let training = agent::train(series, window.train.clone(), &env, &a2c)?;
    let episode = agent::evaluate(&training.agent, series, window.test.clone(), &env, EvalMode::Greedy)?;
    if let Some(dir) = artifacts {
        write_artifacts(dir, &key, &training, &episode)?;
    }
    let days = config.day_count.days(series, window.test.clone());
    episode_result(key, &episode, days)
}

fn run_unit(unit: &Unit, assets: &[AlignedSeries], windows: &[RollingWindows], config: &MatrixConfig, artifacts: Option<&Path>) -> Result<Vec<TrialResult>> {
    match *unit {
        Unit::Agent { asset, window, .. } => {
            let key = unit.keys(assets, config).remove(0);
            let w = &windows[asset].windows[window];
            Ok(vec![run_agent_trial(&assets[asset], w, config, key, artifacts)?])
        }
        Unit::BuyAndHold { asset, window } => {
            let series = &assets[asset];
            let w = &windows[asset].windows[window];
            let episode = buy_and_hold(series, w.test.clone(), &config.env)?;
            let days = config.day_count.days(series, w.test.clone());
            unit.keys(assets, config)
                .into_iter()
                .map(|key| episode_result(key, &episode, days))
                .collect()
        }
    }
}

fn append_rows(path: &Path, rows: &[TrialResult]) -> std::io::Result<()> {
    let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(RESULTS_HEADER)?;
    }
    for r in rows {
        w.write_record(result_record(r))?;
    }
    w.flush()
}

fn rewrite_sorted(path: &Path, results: &mut [TrialResult]) -> Result<()> {
    sort_results(results);
    let tmp = path.with_extension("csv.tmp");
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        write_results(results, &mut f)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs every (asset, window, seed, tc, strategy) trial, appending each
/// finished row to `results_path` as it completes.
///
/// Buy-and-hold is computed once per (asset, window) and replicated across
/// seeds and cost rates. With `resume`, rows already in the file are kept and
/// their trials skipped. A completed matrix leaves the file sorted, so reruns
/// with the same inputs produce identical bytes. Failed trials are reported
/// and left out of the file.
pub fn run_matrix(
    assets: &[AlignedSeries],
    config: &MatrixConfig,
    results_path: &Path,
    options: &RunOptions,
) -> Result<MatrixOutcome> {
    if assets.is_empty() {
        return Err(EvalError::EmptyInput("assets"));
    }
    if config.seeds.is_empty() {
        return Err(EvalError::EmptyInput("seeds"));
    }
    if config.tc_rates.is_empty() {
        return Err(EvalError::EmptyInput("tc_rates"));
    }
    if config.strategies.is_empty() {
        return Err(EvalError::EmptyInput("strategies"));
    }
    let windows = assets
        .iter()
        .map(|s| make_windows(s.len(), config.windows))
        .collect::<Result<Vec<_>>>()?;

    let mut existing = if options.resume && results_path.exists() {
        load_results(results_path)?
    } else {
        if results_path.exists() {
            fs::remove_file(results_path)?;
        }
        Vec::new()
    };
    let done: HashSet<_> = existing.iter().map(|r| r.key.id()).collect();

    let units = plan(assets, config, &windows);
    let (todo, skipped): (Vec<&Unit>, Vec<&Unit>) = units
        .iter()
        .partition(|u| u.keys(assets, config).iter().any(|k| !done.contains(&k.id())));
    log::info!("{} units planned, {} already complete", units.len(), skipped.len());

    let started = AtomicUsize::new(0);
    let collector = Mutex::new((Vec::<TrialResult>::new(), Vec::<TrialFailure>::new()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers.max(1))
        .build()
        .map_err(|e| std::io::Error::other(e))?;
    let io_error = Mutex::new(None::<std::io::Error>);
    pool.install(|| {
        todo.par_iter().for_each(|unit| {
            if let Some(limit) = options.limit {
                if started.fetch_add(1, Ordering::SeqCst) >= limit {
                    return;
                }
            }
            let outcome = run_unit(unit, assets, &windows, config, options.artifacts.as_deref());
            let mut guard = collector.lock().expect("collector poisoned");
            match outcome {
                Ok(rows) => {
                    let rows: Vec<_> = rows.into_iter().filter(|r| !done.contains(&r.key.id())).collect();
                    if let Err(e) = append_rows(results_path, &rows) {
                        io_error.lock().expect("poisoned").get_or_insert(e);
                    }
                    for r in &rows {
                        log::info!("{}: tr {:.6}", r.key, r.tr);
                    }
                    guard.0.extend(rows);
                }
                Err(e) => {
                    for key in unit.keys(assets, config) {
                        log::warn!("trial {key} failed: {e}");
                        guard.1.push(TrialFailure { key, message: e.to_string() });
                    }
                }
            }
        })
    });
    if let Some(e) = io_error.into_inner().expect("poisoned") {
        return Err(e.into());
    }
    let (fresh, mut failures) = collector.into_inner().expect("collector poisoned");
    let executed = options.limit.map_or(todo.len(), |l| l.min(todo.len()));
    let complete = executed == todo.len() && failures.is_empty();
    existing.extend(fresh);
    failures.sort_by(|a, b| a.key.sort_key().cmp(&b.key.sort_key()));
    if complete {
        rewrite_sorted(results_path, &mut existing)?;
    } else {
        sort_results(&mut existing);
    }
    Ok(MatrixOutcome {
        results: existing,
        failures,
        executed,
        skipped: skipped.len(),
        complete,
    })
}

/// Per-asset descriptors for the coverage/correlation analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct AssetMeta {
    pub asset: String,
    pub coverage: f64,
    pub pulse: CorrelationPulse,
}

impl AssetMeta {
    pub fn from_series(series: &AlignedSeries, shifts: std::ops::RangeInclusive<i32>) -> Result<Self, sentiment::SentimentError> {
        Ok(Self {
            asset: series.asset.clone(),
            coverage: coverage(series),
            pulse: sentiment::series_pulse(series, shifts)?,
        })
    }
}

pub const META_HEADER: [&str; 4] = ["asset", "coverage", "shift", "correlation"];

/// One row per (asset, shift); undefined correlations are empty cells.
pub fn write_asset_meta(meta: &[AssetMeta], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(META_HEADER)?;
    for m in meta {
        for (s, c) in m.pulse.shifts.iter().zip(&m.pulse.correlations) {
            w.write_record([m.asset.clone(), m.coverage.to_string(), s.to_string(), cell(*c)])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_asset_meta(input: impl Read) -> Result<Vec<AssetMeta>> {
    let mut reader = csv::Reader::from_reader(input);
    if reader.headers()?.iter().collect::<Vec<_>>() != META_HEADER {
        return Err(EvalError::BadResults {
            line: 1,
            reason: format!("header must be {}", META_HEADER.join(",")),
        });
    }
    let mut out: Vec<AssetMeta> = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let bad = |field: &str| EvalError::BadResults { line, reason: format!("bad {field}") };
        let coverage: f64 = row[1].parse().map_err(|_| bad("coverage"))?;
        let shift: i32 = row[2].parse().map_err(|_| bad("shift"))?;
        let corr = match &row[3] {
            "" => None,
            v => Some(v.parse().map_err(|_| bad("correlation"))?),
        };
        match out.last_mut() {
            Some(m) if m.asset == row[0] => {
                m.pulse.shifts.push(shift);
                m.pulse.correlations.push(corr);
            }
            _ => out.push(AssetMeta {
                asset: row[0].to_string(),
                coverage,
                pulse: CorrelationPulse { shifts: vec![shift], correlations: vec![corr] },
            }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverallRow {
    /// `None` for buy-and-hold, which never pays costs.
    pub tc: Option<f64>,
    pub strategy: Strategy,
    pub mean_tr: f64,
    pub mean_ar: f64,
    pub sr: Option<f64>,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssetSrRow {
    pub asset: String,
    pub tc: f64,
    pub sr: Vec<(Strategy, Option<f64>)>,
    pub best: Option<Strategy>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterRow {
    pub asset: String,
    pub tc: f64,
    pub coverage: Option<f64>,
    pub correlation: Option<f64>,
    /// Mean sentarl TR minus mean no-sentiment TR.
    pub tr_diff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub overall: Vec<OverallRow>,
    pub per_asset: Vec<AssetSrRow>,
    pub scatter: Vec<ScatterRow>,
    pub corr_shift: i32,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sharpe_or_undefined(v: &[f64]) -> Option<f64> {
    sharpe(v).ok().flatten()
}

/// Buy-and-hold rows are replicated per seed and cost rate; keep one per (asset, window).
fn unique_buy_and_hold(results: &[TrialResult]) -> Vec<&TrialResult> {
    let mut seen = BTreeSet::new();
    results
        .iter()
        .filter(|r| r.key.strategy == Strategy::BuyAndHold)
        .filter(|r| seen.insert((r.key.asset.clone(), r.key.window)))
        .collect()
}

/// Aggregates trial results into the overall table, per-asset Sharpe table
/// and per-asset coverage/correlation scatter data. AR columns average
/// per-trial ARs.
pub fn report(results: &[TrialResult], meta: &[AssetMeta], corr_shift: i32) -> Result<Report> {
    if results.is_empty() {
        return Err(EvalError::EmptyInput("results"));
    }
    let bh = unique_buy_and_hold(results);
    let tcs: BTreeSet<u64> = results
        .iter()
        .filter(|r| r.key.strategy.is_learning())
        .map(|r| r.key.tc.to_bits())
        .collect();
    let learning: BTreeSet<Strategy> = results
        .iter()
        .map(|r| r.key.strategy)
        .filter(|s| s.is_learning())
        .collect();

    let row = |tc: Option<f64>, strategy, rows: &[&TrialResult]| {
        let trs: Vec<f64> = rows.iter().map(|r| r.tr).collect();
        let ars: Vec<f64> = rows.iter().map(|r| r.ar).collect();
        OverallRow {
            tc,
            strategy,
            mean_tr: mean(&trs),
            mean_ar: mean(&ars),
            sr: sharpe_or_undefined(&trs),
            trials: rows.len(),
        }
    };

    let mut overall = Vec::new();
    if !bh.is_empty() {
        overall.push(row(None, Strategy::BuyAndHold, &bh));
    }
    for &tc_bits in &tcs {
        let tc = f64::from_bits(tc_bits);
        for &s in &learning {
            let rows: Vec<&TrialResult> = results
                .iter()
                .filter(|r| r.key.strategy == s && r.key.tc.to_bits() == tc_bits)
                .collect();
            if !rows.is_empty() {
                overall.push(row(Some(tc), s, &rows));
            }
        }
    }

    let assets: BTreeSet<&str> = results.iter().map(|r| r.key.asset.as_str()).collect();
    let mut per_asset = Vec::new();
    let mut scatter = Vec::new();
    let tc_list: Vec<u64> = if tcs.is_empty() {
        results.iter().map(|r| r.key.tc.to_bits()).collect::<BTreeSet<_>>().into_iter().collect()
    } else {
        tcs.iter().copied().collect()
    };
    for asset in &assets {
        let bh_trs: Vec<f64> = bh.iter().filter(|r| r.key.asset == *asset).map(|r| r.tr).collect();
        for &tc_bits in &tc_list {
            let tc = f64::from_bits(tc_bits);
            let trs_of = |s: Strategy| -> Vec<f64> {
                results
                    .iter()
                    .filter(|r| r.key.asset == *asset && r.key.strategy == s && r.key.tc.to_bits() == tc_bits)
                    .map(|r| r.tr)
                    .collect()
            };
            let mut sr = Vec::new();
            if !bh_trs.is_empty() {
                sr.push((Strategy::BuyAndHold, sharpe_or_undefined(&bh_trs)));
            }
            for &s in &learning {
                let trs = trs_of(s);
                if !trs.is_empty() {
                    sr.push((s, sharpe_or_undefined(&trs)));
                }
            }
            let best = sr
                .iter()
                .filter_map(|(s, v)| v.map(|v| (*s, v)))
                .fold(None, |acc: Option<(Strategy, f64)>, (s, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((s, v)),
                })
                .map(|(s, _)| s);
            per_asset.push(AssetSrRow { asset: asset.to_string(), tc, sr, best });

            let (with, without) = (trs_of(Strategy::SentArl), trs_of(Strategy::NoSentiment));
            if !with.is_empty() && !without.is_empty() {
                let m = meta.iter().find(|m| m.asset == *asset);
                scatter.push(ScatterRow {
                    asset: asset.to_string(),
                    tc,
                    coverage: m.map(|m| m.coverage),
                    correlation: m.and_then(|m| m.pulse.at(corr_shift)),
                    tr_diff: mean(&with) - mean(&without),
                });
            }
        }
    }
    Ok(Report { overall, per_asset, scatter, corr_shift })
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl Report {
    /// `tc,strategy,mean_tr,mean_ar,sr,trials`; buy-and-hold's cost column is `-`.
    pub fn write_overall(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["tc", "strategy", "mean_tr", "mean_ar", "sr", "trials"])?;
        for r in &self.overall {
            w.write_record([
                r.tc.map(|t| t.to_string()).unwrap_or_else(|| "-".into()),
                r.strategy.to_string(),
                r.mean_tr.to_string(),
                r.mean_ar.to_string(),
                cell(r.sr),
                r.trials.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `asset,tc,<strategy columns>,best`.
    pub fn write_per_asset(&self, out: impl Write) -> Result<()> {
        let strategies: BTreeSet<Strategy> = self.per_asset.iter().flat_map(|r| r.sr.iter().map(|(s, _)| *s)).collect();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["asset".to_string(), "tc".to_string()];
        header.extend(strategies.iter().map(|s| s.to_string()));
        header.push("best".into());
        w.write_record(&header)?;
        for r in &self.per_asset {
            let values: BTreeMap<Strategy, Option<f64>> = r.sr.iter().copied().collect();
            let mut rec = vec![r.asset.clone(), r.tc.to_string()];
            rec.extend(strategies.iter().map(|s| cell(values.get(s).copied().flatten())));
            rec.push(r.best.map(|b| b.to_string()).unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `asset,coverage,corr_shift<k>,tr_diff` for one cost rate.
    pub fn write_scatter(&self, tc: f64, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["asset".to_string(), "coverage".into(), format!("corr_shift{}", self.corr_shift), "tr_diff".into()])?;
        for r in self.scatter.iter().filter(|r| r.tc.to_bits() == tc.to_bits()) {
            w.write_record([r.asset.clone(), cell(r.coverage), cell(r.correlation), r.tr_diff.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `overall.csv`, `sr_by_asset.csv` and one `scatter_tc<rate>.csv` per cost rate.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let path = dir.join("overall.csv");
        self.write_overall(BufWriter::new(File::create(&path)?))?;
        written.push(path);
        let path = dir.join("sr_by_asset.csv");
        self.write_per_asset(BufWriter::new(File::create(&path)?))?;
        written.push(path);
        let tcs: BTreeSet<u64> = self.scatter.iter().map(|r| r.tc.to_bits()).collect();
        for bits in tcs {
            let tc = f64::from_bits(bits);
            let path = dir.join(format!("scatter_tc{tc}.csv"));
            self.write_scatter(tc, BufWriter::new(File::create(&path)?))?;
            written.push(path);
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Strategy;
    use proptest::prelude::*;

    #[test]
    fn default_windows_on_full_length() {
        let w = make_windows(5267, WindowSpec::default()).unwrap();
        assert_eq!(w.windows.len(), 5);
        assert_eq!(w.windows[4].test.end, 5267);
        assert_eq!(w.windows[0].train.start, 20);
        let ratio = 3377.0_f64 / (3377.0 + 374.0);
        assert!((ratio - 0.9).abs() < 0.01);
        for pair in w.windows.windows(2) {
            assert_eq!(pair[1].test.start - pair[0].test.start, 374);
        }
    }

    #[test]
    fn single_window_and_errors() {
        let spec = WindowSpec { train_len: 10, test_len: 5, stride: 5, count: 1 };
        let w = make_windows(20, spec).unwrap();
        assert_eq!(w.windows, vec![Window { index: 0, train: 5..15, test: 15..20 }]);
        assert!(matches!(make_windows(14, spec), Err(EvalError::InsufficientData { len: 14, needed: 15 })));
        let overlap = WindowSpec { stride: 2, count: 3, ..spec };
        assert!(make_windows(100, overlap).is_err());
    }

    #[test]
    fn total_return_examples() {
        assert_eq!(total_return(&[1.0, -1.0], 100.0).unwrap(), 0.0);
        assert!((total_return(&[2.0, 0.43], 100.0).unwrap() - 0.0243).abs() < 1e-15);
        assert!(matches!(total_return(&[1.0], 0.0), Err(EvalError::NonPositiveWealth(_))));
    }

    #[test]
    fn annualized_examples() {
        assert_eq!(annualized_return(0.0, 77).unwrap(), 0.0);
        assert!((annualized_return(0.0243, 77).unwrap() - 0.1203).abs() < 0.001);
        assert!((annualized_return(0.0283, 77).unwrap() - 0.1412).abs() < 0.001);
        assert!(annualized_return(-1.0, 77).is_err());
        assert!(annualized_return(0.1, 0).is_err());
    }

    #[test]
    fn sharpe_examples() {
        assert_eq!(sharpe(&[1.0, 2.0, 3.0]).unwrap(), Some(2.0));
        assert_eq!(sharpe(&[0.1, 0.1, 0.1]).unwrap(), None);
        assert!(matches!(sharpe(&[0.1]), Err(EvalError::TooFewTrials(1))));
    }

    fn result(asset: &str, window: usize, seed: u64, tc: f64, strategy: Strategy, tr: f64) -> TrialResult {
        TrialResult {
            key: TrialKey { asset: asset.into(), window, seed, tc, strategy },
            tr,
            ar: annualized_return(tr, 77).unwrap(),
            trade_count: 1,
            equity: Vec::new(),
        }
    }

    #[test]
    fn results_csv_round_trip() {
        let rows = vec![
            result("AAA", 0, 1, 0.0025, Strategy::SentArl, 0.0123456789),
            result("AAA", 0, 1, 0.0, Strategy::BuyAndHold, -0.02),
        ];
        let mut buf = Vec::new();
        write_results(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("asset,window,seed,tc,strategy,tr,ar,trade_count\n"));
        assert_eq!(read_results(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn report_single_bh_trial() {
        let rows = vec![result("AAA", 0, 0, 0.0, Strategy::BuyAndHold, 0.01)];
        let rep = report(&rows, &[], 0).unwrap();
        assert_eq!(rep.overall.len(), 1);
        assert_eq!(rep.overall[0].sr, None);
        assert_eq!(rep.overall[0].tc, None);
        assert!(report(&[], &[], 0).is_err());
    }

    #[test]
    fn report_identical_strategies_give_zero_diffs() {
        let mut rows = Vec::new();
        for asset in ["AAA", "BBB"] {
            for window in 0..3 {
                for seed in 0..2 {
                    let tr = 0.01 * (window as f64 + 1.0) - 0.003 * seed as f64;
                    rows.push(result(asset, window, seed, 0.0025, Strategy::SentArl, tr));
                    rows.push(result(asset, window, seed, 0.0025, Strategy::NoSentiment, tr));
                    rows.push(result(asset, window, seed, 0.0025, Strategy::BuyAndHold, 0.02 * window as f64));
                }
            }
        }
        let rep = report(&rows, &[], 0).unwrap();
        assert_eq!(rep.scatter.len(), 2);
        assert!(rep.scatter.iter().all(|r| r.tr_diff == 0.0));
        // BH is deduplicated to one row per (asset, window).
        assert_eq!(rep.overall[0].trials, 6);
        let row = &rep.per_asset[0];
        assert_eq!(row.sr.len(), 3);
        assert!(row.best.is_some());
    }

    #[test]
    fn report_files_written() {
        let rows = vec![
            result("AAA", 0, 0, 0.0, Strategy::SentArl, 0.5),
            result("AAA", 1, 0, 0.0, Strategy::SentArl, 0.25),
            result("AAA", 0, 0, 0.0, Strategy::NoSentiment, 0.25),
            result("AAA", 1, 0, 0.0, Strategy::NoSentiment, 0.0),
        ];
        let meta = AssetMeta {
            asset: "AAA".into(),
            coverage: 0.25,
            pulse: CorrelationPulse { shifts: vec![0], correlations: vec![Some(0.125)] },
        };
        let rep = report(&rows, &[meta], 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = rep.write_dir(dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let scatter = fs::read_to_string(dir.path().join("scatter_tc0.csv")).unwrap();
        assert_eq!(scatter, "asset,coverage,corr_shift0,tr_diff\nAAA,0.25,0.125,0.25\n");
        let per_asset = fs::read_to_string(dir.path().join("sr_by_asset.csv")).unwrap();
        assert_eq!(per_asset.lines().next().unwrap(), "asset,tc,no-sentiment,sentarl,best");
    }

    #[test]
    fn asset_meta_round_trip() {
        let meta = vec![
            AssetMeta {
                asset: "AAA".into(),
                coverage: 0.5,
                pulse: CorrelationPulse { shifts: vec![-1, 0], correlations: vec![None, Some(0.25)] },
            },
            AssetMeta {
                asset: "BBB".into(),
                coverage: 0.0,
                pulse: CorrelationPulse { shifts: vec![0], correlations: vec![Some(-0.5)] },
            },
        ];
        let mut buf = Vec::new();
        write_asset_meta(&meta, &mut buf).unwrap();
        assert_eq!(read_asset_meta(buf.as_slice()).unwrap(), meta);
    }

    proptest! {
        #[test]
        fn windows_never_look_ahead(
            train_len in 5usize..200,
            test_len in 1usize..50,
            extra_stride in 0usize..20,
            count in 1usize..6,
            slack in 0usize..100,
        ) {
            let spec = WindowSpec { train_len, test_len, stride: test_len + extra_stride, count };
            let w = make_windows(spec.span() + slack, spec).unwrap();
            prop_assert_eq!(w.windows.len(), count);
            for win in &w.windows {
                prop_assert_eq!(win.train.end, win.test.start);
                prop_assert!(win.train.end - 1 < win.test.start);
            }
            // Brute-force interval overlap check.
            for (i, a) in w.windows.iter().enumerate() {
                for b in &w.windows[i + 1..] {
                    prop_assert!(a.test.end <= b.test.start || b.test.end <= a.test.start);
                }
            }
            prop_assert_eq!(w.windows.last().unwrap().test.end, spec.span() + slack);
        }

        #[test]
        fn sharpe_scale_and_sign(trs in proptest::collection::vec(-0.5f64..0.5, 2..20), k in 0.01f64..100.0) {
            if let Some(base) = sharpe(&trs).unwrap() {
                let scaled: Vec<f64> = trs.iter().map(|v| v * k).collect();
                let s = sharpe(&scaled).unwrap().unwrap();
                prop_assert!((s - base).abs() <= 1e-12 * base.abs().max(1.0));
                let neg: Vec<f64> = trs.iter().map(|v| -v).collect();
                prop_assert!((sharpe(&neg).unwrap().unwrap() + base).abs() <= 1e-12 * base.abs().max(1.0));
            }
        }

        #[test]
        fn annualized_monotone(a in -0.9f64..2.0, b in -0.9f64..2.0, days in 1usize..400) {
            prop_assume!(a < b);
            prop_assert!(annualized_return(a, days).unwrap() <= annualized_return(b, days).unwrap());
        }
    }
}
