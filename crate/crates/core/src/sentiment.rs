//! Headline scoring, hourly grouping, gap filling and the lagged
//! sentiment/price correlation diagnostic.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{truncate_to_hour, AlignedSeries, HeadlineRecord};

#[derive(Debug, Error)]
pub enum SentimentError {
    #[error("lexicon is empty")]
    EmptyLexicon,
    #[error("lexicon line {line}: {reason}")]
    BadLexicon { line: u64, reason: String },
    #[error("cannot group an empty score set")]
    EmptyGroup,
    #[error("window of {len} ending at index {t} needs more history")]
    InsufficientHistory { t: usize, len: usize },
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("overlap at shift {shift} has {points} points, need at least 3")]
    OverlapTooShort { shift: i32, points: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SentimentError> = std::result::Result<T, E>;

/// Maps a headline to a polarity in `[-1, 1]`.
///
/// Implementations must be deterministic for a fixed configuration and callable from many threads.
pub trait SentimentScorer: Send + Sync {
    fn score(&self, headline: &str) -> f64;
}

/// Word-weight polarity lexicon.
#[derive(Debug, Clone)]
pub struct Lexicon {
    weights: HashMap<String, f64>,
}

const BUNDLED_LEXICON: &str = include_str!("../data/lexicon.csv");

impl Lexicon {
    pub fn new(weights: HashMap<String, f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(SentimentError::EmptyLexicon);
        }
        let weights = weights
            .into_iter()
            .map(|(w, v)| (w.to_lowercase(), v.clamp(-1.0, 1.0)))
            .collect();
        Ok(Self { weights })
    }

    /// The small financial polarity list shipped with the crate. A baseline, not a trained extractor.
    pub fn bundled() -> Self {
        Self::from_csv(BUNDLED_LEXICON.as_bytes()).expect("bundled lexicon is well formed")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(std::fs::File::open(path)?)
    }

    /// Parses `word,weight` rows with weights in `[-1, 1]`.
    pub fn from_csv(input: impl Read) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let headers = reader.headers().map_err(|e| SentimentError::BadLexicon {
            line: 1,
            reason: e.to_string(),
        })?;
        if headers.iter().collect::<Vec<_>>() != ["word", "weight"] {
            return Err(SentimentError::BadLexicon {
                line: 1,
                reason: "header must be word,weight".into(),
            });
        }
        let mut weights = HashMap::new();
        for row in reader.records() {
            let row = row.map_err(|e| SentimentError::BadLexicon {
                line: e.position().map(|p| p.line()).unwrap_or(0),
                reason: e.to_string(),
            })?;
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            let weight: f64 = row[1].parse().map_err(|_| SentimentError::BadLexicon {
                line,
                reason: format!("bad weight {:?}", &row[1]),
            })?;
            if !(-1.0..=1.0).contains(&weight) {
                return Err(SentimentError::BadLexicon {
                    line,
                    reason: format!("weight {weight} outside [-1, 1]"),
                });
            }
            weights.insert(row[0].to_string(), weight);
        }
        Self::new(weights)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Mean weight of the lexicon words found in `headline`, clamped to `[-1, 1]`; 0 when nothing matches.
pub fn lexicon_score(headline: &str, lexicon: &Lexicon) -> f64 {
    let (sum, hits) = headline
        .split(|c: char| !c.is_alphanumeric())
        .filter(|tok| !tok.is_empty())
        .filter_map(|tok| lexicon.weights.get(&tok.to_lowercase()))
        .fold((0.0, 0usize), |(s, n), w| (s + w, n + 1));
    if hits == 0 {
        0.0
    } else {
        (sum / hits as f64).clamp(-1.0, 1.0)
    }
}

impl SentimentScorer for Lexicon {
    fn score(&self, headline: &str) -> f64 {
        lexicon_score(headline, self)
    }
}

/// Scores every headline without a precomputed value as neutral.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeutralScorer;

impl SentimentScorer for NeutralScorer {
    fn score(&self, _headline: &str) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupingMethod {
    #[default]
    Min,
    Mean,
    Max,
}

impl GroupingMethod {
    /// Aggregates the scores of one hour.
    pub fn group(self, scores: &[f64]) -> Result<f64> {
        if scores.is_empty() {
            return Err(SentimentError::EmptyGroup);
        }
        let value = match self {
            Self::Min => scores.iter().copied().fold(f64::INFINITY, f64::min),
            Self::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Self::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
        };
        Ok(value.clamp(-1.0, 1.0))
    }
}

pub fn group_hourly(scores: &[f64], method: GroupingMethod) -> Result<f64> {
    method.group(scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FillPolicy {
    #[default]
    NeutralZero,
    ForwardFill,
}

/// Gives every hour a value; hours with news keep theirs.
pub fn fill_gaps(grouped: &[Option<f64>], policy: FillPolicy) -> Vec<f64> {
    let mut last = 0.0;
    grouped
        .iter()
        .map(|slot| match (slot, policy) {
            (Some(v), _) => {
                last = *v;
                *v
            }
            (None, FillPolicy::NeutralZero) => 0.0,
            (None, FillPolicy::ForwardFill) => last,
        })
        .collect()
}

/// Scores headlines, preferring a precomputed score over the scorer's output.
pub fn score_headlines(
    headlines: &[HeadlineRecord],
    scorer: &dyn SentimentScorer,
) -> Vec<(DateTime<Utc>, f64)> {
    headlines
        .iter()
        .map(|h| {
            let score = h.score.unwrap_or_else(|| scorer.score(&h.headline));
            (h.timestamp, score.clamp(-1.0, 1.0))
        })
        .collect()
}

/// Buckets scored headlines by truncated hour and reduces each bucket. Output is sorted by hour.
pub fn group_by_hour(
    scored: &[(DateTime<Utc>, f64)],
    method: GroupingMethod,
) -> Vec<(DateTime<Utc>, f64)> {
    let mut buckets: BTreeMap<DateTime<Utc>, Vec<f64>> = BTreeMap::new();
    for &(ts, score) in scored {
        buckets.entry(truncate_to_hour(ts)).or_default().push(score);
    }
    buckets
        .into_iter()
        .map(|(hour, scores)| (hour, method.group(&scores).expect("buckets are non-empty")))
        .collect()
}

/// `[v_t, v_{t-1}, ..., v_{t-len+1}]`, newest first.
pub fn lookback(values: &[f64], t: usize, len: usize) -> Result<Vec<f64>> {
    if t >= values.len() || t + 1 < len {
        return Err(SentimentError::InsufficientHistory { t, len });
    }
    Ok(values[t + 1 - len..=t].iter().rev().copied().collect())
}

pub fn sentiment_window(series: &AlignedSeries, t: usize, len: usize) -> Result<Vec<f64>> {
    lookback(&series.sentiment, t, len)
}

/// Population Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    if x.is_empty() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation of sentiment against shifted price differences.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationPulse {
    pub shifts: Vec<i32>,
    /// `None` marks an undefined (zero-variance) overlap.
    pub correlations: Vec<Option<f64>>,
}

pub const DEFAULT_SHIFTS: RangeInclusive<i32> = -10..=3;

impl CorrelationPulse {
    /// Shift with the largest defined correlation; earliest shift wins ties.
    pub fn peak(&self) -> Option<(i32, f64)> {
        self.shifts
            .iter()
            .zip(&self.correlations)
            .filter_map(|(&s, c)| c.map(|c| (s, c)))
            .fold(None, |best, (s, c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((s, c)),
            })
    }

    pub fn at(&self, shift: i32) -> Option<f64> {
        self.shifts
            .iter()
            .position(|&s| s == shift)
            .and_then(|i| self.correlations[i])
    }

    /// `shift,correlation` rows; undefined correlations are empty cells.
    pub fn write_csv(&self, out: impl Write) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["shift", "correlation"])?;
        for (s, c) in self.shifts.iter().zip(&self.correlations) {
            let cell = c.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([s.to_string(), cell])?;
        }
        w.flush()
    }
}

/// For each shift `k`, correlates `sentiment[t]` with `diffs[t + k]` over
/// every `t` where both exist. Negative `k` pairs sentiment with earlier price moves.
pub fn correlation_pulse(
    sentiment: &[f64],
    diffs: &[f64],
    shifts: RangeInclusive<i32>,
) -> Result<CorrelationPulse> {
    if sentiment.len() != diffs.len() {
        return Err(SentimentError::LengthMismatch(sentiment.len(), diffs.len()));
    }
    let n = sentiment.len() as i64;
    let mut out = CorrelationPulse {
        shifts: Vec::new(),
        correlations: Vec::new(),
    };
    for shift in shifts {
        let k = i64::from(shift);
        let lo = 0.max(-k);
        let hi = n.min(n - k);
        let points = (hi - lo).max(0) as usize;
        if points < 3 {
            return Err(SentimentError::OverlapTooShort { shift, points });
        }
        let (lo, hi) = (lo as usize, hi as usize);
        let e = &sentiment[lo..hi];
        let z_lo = (lo as i64 + k) as usize;
        let z = &diffs[z_lo..z_lo + points];
        out.shifts.push(shift);
        out.correlations.push(pearson(e, z));
    }
    Ok(out)
}

/// Pulse over an aligned series, pairing `e_t` with `z_t` for `t >= 1`.
pub fn series_pulse(series: &AlignedSeries, shifts: RangeInclusive<i32>) -> Result<CorrelationPulse> {
    let sentiment = series.sentiment.get(1..).unwrap_or(&[]);
    correlation_pulse(sentiment, &series.diffs, shifts)
}
