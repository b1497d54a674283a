//! Loading and aligning hourly prices and headline sentiment onto a common grid.
//!
//! The price file defines the grid: rows are treated as consecutive decision
//! instants with no resampling or gap insertion, so a price difference may
//! span an overnight or weekend closure.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime, Timelike, Utc};
use thiserror::Error;

use crate::sentiment::FillPolicy;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unexpected header {found:?}, expected {expected:?}")]
    Header { expected: String, found: String },
    #[error("malformed row at line {line}: {reason}")]
    Malformed { line: u64, reason: String },
    #[error("non-positive price at line {line}")]
    NonPositivePrice { line: u64 },
    #[error("duplicate timestamp {timestamp} at line {line}")]
    DuplicateTimestamp { line: u64, timestamp: DateTime<Utc> },
    #[error("timestamp {timestamp} at line {line} precedes the previous row")]
    NonMonotonic { line: u64, timestamp: DateTime<Utc> },
    #[error("sentiment score {score} at line {line} outside [-1, 1]")]
    ScoreOutOfRange { line: u64, score: f64 },
    #[error("need at least {needed} prices, got {got}")]
    TooFewPrices { needed: usize, got: usize },
    #[error("price series is empty")]
    EmptySeries,
    #[error("two sentiment values map to the hour {0}")]
    DuplicateSentimentSlot(DateTime<Utc>),
}

pub type Result<T, E = IngestError> = std::result::Result<T, E>;

/// One hourly close bid price.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceRecord {
    pub timestamp: DateTime<Utc>,
    pub close: f64,
}

/// One news headline, optionally carrying a precomputed sentiment score.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadlineRecord {
    pub timestamp: DateTime<Utc>,
    pub headline: String,
    pub score: Option<f64>,
}

/// Hourly price, difference, hour-of-day and sentiment channels for one asset.
///
/// All per-hour channels have length `len()`. `diffs` has one element fewer:
/// `diffs[t - 1]` is the difference between `prices[t]` and `prices[t - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSeries {
    pub asset: String,
    pub timestamps: Vec<DateTime<Utc>>,
    pub prices: Vec<f64>,
    pub diffs: Vec<f64>,
    pub hours: Vec<f64>,
    pub sentiment: Vec<f64>,
    pub has_news: Vec<bool>,
}

impl AlignedSeries {
    pub fn len(&self) -> usize {
        self.prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices.is_empty()
    }

    /// Price difference arriving at index `t`, defined for `t >= 1`.
    pub fn diff(&self, t: usize) -> f64 {
        self.diffs[t - 1]
    }

    /// Builds a series from raw channels, deriving diffs and hours.
    ///
    /// Used for synthetic data; `sentiment` and `has_news` must match `prices` in length.
    pub fn from_parts(
        asset: impl Into<String>,
        timestamps: Vec<DateTime<Utc>>,
        prices: Vec<f64>,
        sentiment: Vec<f64>,
        has_news: Vec<bool>,
    ) -> Result<Self> {
        if prices.is_empty() {
            return Err(IngestError::EmptySeries);
        }
        assert_eq!(timestamps.len(), prices.len(), "timestamp/price length mismatch");
        assert_eq!(sentiment.len(), prices.len(), "sentiment/price length mismatch");
        assert_eq!(has_news.len(), prices.len(), "has_news/price length mismatch");
        let diffs = if prices.len() >= 2 { compute_diffs(&prices)? } else { Vec::new() };
        let hours = timestamps.iter().map(hour_fraction).collect();
        Ok(Self {
            asset: asset.into(),
            timestamps,
            prices,
            diffs,
            hours,
            sentiment,
            has_news,
        })
    }

    /// Distinct calendar dates touched by indices in `range`.
    pub fn trading_days(&self, range: std::ops::Range<usize>) -> usize {
        self.timestamps[range]
            .iter()
            .map(|ts| ts.date_naive())
            .collect::<HashSet<NaiveDate>>()
            .len()
    }
}

/// Normalized hour of the day, `h / 24`.
pub fn hour_fraction(ts: &DateTime<Utc>) -> f64 {
    f64::from(ts.hour()) / 24.0
}

pub fn truncate_to_hour(ts: DateTime<Utc>) -> DateTime<Utc> {
    ts.with_minute(0)
        .and_then(|t| t.with_second(0))
        .and_then(|t| t.with_nanosecond(0))
        .expect("zeroing minutes and seconds is always valid")
}

/// Parses an ISO-8601 timestamp. Offsets are converted to UTC; naive values are taken as UTC.
pub fn parse_timestamp(raw: &str) -> Option<DateTime<Utc>> {
    let raw = raw.trim();
    if let Ok(ts) = DateTime::parse_from_rfc3339(raw) {
        return Some(ts.with_timezone(&Utc));
    }
    const NAIVE: [&str; 4] = [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ];
    NAIVE
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(raw, fmt).ok())
        .map(|naive| naive.and_utc())
}

/// Canonical timestamp rendering used by every CSV this crate writes.
pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn check_header(reader: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<()> {
    let headers = reader.headers().map_err(|e| IngestError::Malformed {
        line: 1,
        reason: e.to_string(),
    })?;
    let found: Vec<&str> = headers.iter().collect();
    if found != expected {
        return Err(IngestError::Header {
            expected: expected.join(","),
            found: found.join(","),
        });
    }
    Ok(())
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(input)
}

fn row_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

/// Loads a `timestamp,close` price file.
pub fn load_prices(path: impl AsRef<Path>) -> Result<Vec<PriceRecord>> {
    let path = path.as_ref();
    let records = parse_prices(open(path)?)?;
    log::debug!("loaded {} price rows from {}", records.len(), path.display());
    Ok(records)
}

pub fn parse_prices(input: impl Read) -> Result<Vec<PriceRecord>> {
    let mut reader = csv_reader(input);
    check_header(&mut reader, &["timestamp", "close"])?;
    let mut out: Vec<PriceRecord> = Vec::new();
    for row in reader.records() {
        let record = row.map_err(|e| IngestError::Malformed {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line = row_line(&record);
        let timestamp = parse_timestamp(&record[0]).ok_or_else(|| IngestError::Malformed {
            line,
            reason: format!("unparseable timestamp {:?}", &record[0]),
        })?;
        let timestamp = truncate_to_hour(timestamp);
        let close: f64 = record[1].parse().map_err(|_| IngestError::Malformed {
            line,
            reason: format!("unparseable close {:?}", &record[1]),
        })?;
        if !close.is_finite() {
            return Err(IngestError::Malformed {
                line,
                reason: "close is not finite".into(),
            });
        }
        if close <= 0.0 {
            return Err(IngestError::NonPositivePrice { line });
        }
        if let Some(prev) = out.last() {
            if timestamp == prev.timestamp {
                return Err(IngestError::DuplicateTimestamp { line, timestamp });
            }
            if timestamp < prev.timestamp {
                return Err(IngestError::NonMonotonic { line, timestamp });
            }
        }
        out.push(PriceRecord { timestamp, close });
    }
    Ok(out)
}

/// Loads a `timestamp,headline,score` news file. An empty score cell leaves scoring to a scorer.
pub fn load_headlines(path: impl AsRef<Path>) -> Result<Vec<HeadlineRecord>> {
    let path = path.as_ref();
    let records = parse_headlines(open(path)?)?;
    log::debug!("loaded {} headlines from {}", records.len(), path.display());
    Ok(records)
}

pub fn parse_headlines(input: impl Read) -> Result<Vec<HeadlineRecord>> {
    let mut reader = csv_reader(input);
    check_header(&mut reader, &["timestamp", "headline", "score"])?;
    let mut out = Vec::new();
    for row in reader.records() {
        let record = row.map_err(|e| IngestError::Malformed {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line = row_line(&record);
        let timestamp = parse_timestamp(&record[0]).ok_or_else(|| IngestError::Malformed {
            line,
            reason: format!("unparseable timestamp {:?}", &record[0]),
        })?;
        let score = match record[2].trim() {
            "" => None,
            raw => {
                let score: f64 = raw.parse().map_err(|_| IngestError::Malformed {
                    line,
                    reason: format!("unparseable score {raw:?}"),
                })?;
                if !(-1.0..=1.0).contains(&score) {
                    return Err(IngestError::ScoreOutOfRange { line, score });
                }
                Some(score)
            }
        };
        out.push(HeadlineRecord {
            timestamp,
            headline: record[1].to_string(),
            score,
        });
    }
    Ok(out)
}

/// Consecutive price differences; element `i` is `prices[i + 1] - prices[i]`.
pub fn compute_diffs(prices: &[f64]) -> Result<Vec<f64>> {
    if prices.len() < 2 {
        return Err(IngestError::TooFewPrices {
            needed: 2,
            got: prices.len(),
        });
    }
    Ok(prices.windows(2).map(|w| w[1] - w[0]).collect())
}

/// Places hourly sentiment onto the price grid.
///
/// `grouped` holds at most one value per hour; off-grid timestamps are
/// truncated to the containing hour and values for hours absent from the
/// price grid are dropped. Hours without news receive the fill policy's value.
pub fn align(
    asset: impl Into<String>,
    prices: &[PriceRecord],
    grouped: &[(DateTime<Utc>, f64)],
    fill: FillPolicy,
) -> Result<AlignedSeries> {
    if prices.is_empty() {
        return Err(IngestError::EmptySeries);
    }
    let mut by_hour: HashMap<DateTime<Utc>, f64> = HashMap::with_capacity(grouped.len());
    for &(ts, value) in grouped {
        let hour = truncate_to_hour(ts);
        if by_hour.insert(hour, value).is_some() {
            return Err(IngestError::DuplicateSentimentSlot(hour));
        }
    }
    let slots: Vec<Option<f64>> = prices
        .iter()
        .map(|p| by_hour.get(&p.timestamp).copied())
        .collect();
    let has_news = slots.iter().map(Option::is_some).collect();
    let sentiment = crate::sentiment::fill_gaps(&slots, fill);
    AlignedSeries::from_parts(
        asset,
        prices.iter().map(|p| p.timestamp).collect(),
        prices.iter().map(|p| p.close).collect(),
        sentiment,
        has_news,
    )
}

/// Fraction of grid hours carrying at least one headline.
pub fn coverage(series: &AlignedSeries) -> f64 {
    if series.is_empty() {
        return 0.0;
    }
    let hits = series.has_news.iter().filter(|&&b| b).count();
    hits as f64 / series.len() as f64
}

pub const CACHE_HEADER: &str = "timestamp,close,diff,tau,sentiment,has_news";

/// Writes the aligned cache CSV. The first row's `diff` cell is empty.
pub fn write_cache(series: &AlignedSeries, out: impl Write) -> std::io::Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(CACHE_HEADER.split(','))?;
    for t in 0..series.len() {
        let diff = if t == 0 { String::new() } else { series.diff(t).to_string() };
        writer.write_record([
            format_timestamp(&series.timestamps[t]),
            series.prices[t].to_string(),
            diff,
            series.hours[t].to_string(),
            series.sentiment[t].to_string(),
            u8::from(series.has_news[t]).to_string(),
        ])?;
    }
    writer.flush()
}

pub fn save_cache(series: &AlignedSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    write_cache(series, std::io::BufWriter::new(file)).map_err(io_err)
}

/// Reads a cache written by [`write_cache`]. Diffs and hours are recomputed
/// from prices and timestamps; the stored columns are informational.
pub fn read_cache(asset: impl Into<String>, input: impl Read) -> Result<AlignedSeries> {
    let mut reader = csv_reader(input);
    let expected: Vec<&str> = CACHE_HEADER.split(',').collect();
    check_header(&mut reader, &expected)?;
    let (mut timestamps, mut prices, mut sentiment, mut has_news) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for row in reader.records() {
        let record = row.map_err(|e| IngestError::Malformed {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line = row_line(&record);
        let bad = |what: &str| IngestError::Malformed {
            line,
            reason: format!("unparseable {what}"),
        };
        timestamps.push(parse_timestamp(&record[0]).ok_or_else(|| bad("timestamp"))?);
        let close: f64 = record[1].parse().map_err(|_| bad("close"))?;
        if close <= 0.0 {
            return Err(IngestError::NonPositivePrice { line });
        }
        prices.push(close);
        sentiment.push(record[4].parse().map_err(|_| bad("sentiment"))?);
        has_news.push(match &record[5] {
            "1" => true,
            "0" => false,
            _ => return Err(bad("has_news")),
        });
    }
    AlignedSeries::from_parts(asset, timestamps, prices, sentiment, has_news)
}

pub fn load_cache(asset: impl Into<String>, path: impl AsRef<Path>) -> Result<AlignedSeries> {
    read_cache(asset, open(path.as_ref())?)
}

/// Hourly UTC timestamps starting at `start`, one per step; handy for synthetic series.
pub fn hourly_grid(start: DateTime<Utc>, len: usize) -> Vec<DateTime<Utc>> {
    (0..len)
        .map(|i| start + chrono::Duration::hours(i as i64))
        .collect()
}

/// Midnight UTC on the given date.
pub fn utc_midnight(year: i32, month: u32, day: u32) -> DateTime<Utc> {
    NaiveDate::from_ymd_opt(year, month, day)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid calendar date")
        .and_utc()
}
