//! Declarative run configuration, read from TOML.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use serde::{Deserialize, Serialize};

use sentarl_core::agent::A2cConfig;
use sentarl_core::env::{CostMode, EnvConfig};
use sentarl_core::eval::{DayCount, MatrixConfig, Strategy, WindowSpec};
use sentarl_core::sentiment::{FillPolicy, GroupingMethod};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub sentiment: SentimentSection,
    #[serde(default)]
    pub env: EnvSection,
    #[serde(default)]
    pub a2c: A2cConfig,
    #[serde(default)]
    pub windows: WindowSpec,
    #[serde(default)]
    pub experiment: ExperimentSection,
    pub assets: Vec<AssetSource>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("output")
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetSource {
    pub symbol: String,
    /// `timestamp,close` CSV.
    pub prices: PathBuf,
    /// `timestamp,headline,score` CSV; the asset has no news when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub news: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    #[default]
    Lexicon,
    /// Scores every headline 0; only precomputed scores carry signal.
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SentimentSection {
    pub scorer: ScorerKind,
    /// `word,weight` CSV replacing the bundled lexicon.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    pub grouping: GroupingMethod,
    pub fill: FillPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub window: usize,
    pub sentiment_window: usize,
    pub shares: f64,
    pub tc_rates: Vec<f64>,
    pub cost_mode: CostMode,
}

impl Default for EnvSection {
    fn default() -> Self {
        let base = EnvConfig::default();
        Self {
            window: base.window,
            sentiment_window: base.sentiment_window,
            shares: base.shares,
            tc_rates: vec![0.0, 0.0025],
            cost_mode: base.cost_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
    pub normalize_diffs: bool,
    pub day_count: DayCount,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let m = MatrixConfig::default();
        Self {
            seeds: m.seeds,
            strategies: m.strategies,
            normalize_diffs: m.normalize_diffs,
            day_count: m.day_count,
        }
    }
}

impl RunConfig {
    /// Parses, resolves relative paths against the file's directory and validates.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let base = std::path::absolute(&base).context("resolving the config directory")?;
        config.resolve_paths(&base);
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(l) = self.sentiment.lexicon.as_mut() {
            fix(l);
        }
        for a in &mut self.assets {
            fix(&mut a.prices);
            if let Some(n) = a.news.as_mut() {
                fix(n);
            }
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        ensure!(!self.assets.is_empty(), "at least one [[assets]] entry is required");
        ensure!(self.workers >= 1, "workers must be at least 1");
        for (i, a) in self.assets.iter().enumerate() {
            ensure!(!a.symbol.is_empty(), "asset {i} has an empty symbol");
            ensure!(
                a.symbol.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)),
                "asset symbol {:?} may only contain letters, digits, '-', '_' and '.'",
                a.symbol
            );
            if self.assets[..i].iter().any(|b| b.symbol == a.symbol) {
                bail!("asset {} listed twice", a.symbol);
            }
            ensure!(a.prices.is_file(), "price file {} does not exist", a.prices.display());
        }
        if let Some(l) = &self.sentiment.lexicon {
            ensure!(l.is_file(), "lexicon file {} does not exist", l.display());
        }
        ensure!(!self.env.tc_rates.is_empty(), "env.tc_rates must not be empty");
        for &tc in &self.env.tc_rates {
            ensure!(tc.is_finite() && tc >= 0.0, "transaction cost rate {tc} must be non-negative");
        }
        self.env_config(0.0, true).validate()?;
        self.a2c.validate()?;
        ensure!(!self.experiment.seeds.is_empty(), "experiment.seeds must not be empty");
        ensure!(!self.experiment.strategies.is_empty(), "experiment.strategies must not be empty");
        let w = &self.windows;
        ensure!(w.count >= 1 && w.train_len >= 1 && w.test_len >= 1, "window lengths and count must be positive");
        ensure!(w.count == 1 || w.stride >= w.test_len, "windows.stride must be at least windows.test_len");
        if let DayCount::Fixed(0) = self.experiment.day_count {
            bail!("a fixed day count must be positive");
        }
        Ok(())
    }

    pub fn asset(&self, symbol: &str) -> anyhow::Result<&AssetSource> {
        self.assets
            .iter()
            .find(|a| a.symbol == symbol)
            .with_context(|| format!("asset {symbol} is not in the config"))
    }

    pub fn env_config(&self, tc_rate: f64, use_sentiment: bool) -> EnvConfig {
        EnvConfig {
            window: self.env.window,
            sentiment_window: self.env.sentiment_window,
            shares: self.env.shares,
            tc_rate,
            cost_mode: self.env.cost_mode,
            use_sentiment,
            diff_scaling: None,
        }
    }

    pub fn matrix_config(&self) -> MatrixConfig {
        MatrixConfig {
            env: self.env_config(0.0, true),
            a2c: self.a2c.clone(),
            windows: self.windows,
            seeds: self.experiment.seeds.clone(),
            tc_rates: self.env.tc_rates.clone(),
            strategies: self.experiment.strategies.clone(),
            normalize_diffs: self.experiment.normalize_diffs,
            day_count: self.experiment.day_count,
        }
    }

    pub fn cache_path(&self, symbol: &str) -> PathBuf {
        self.output_dir.join("cache").join(format!("{symbol}.csv"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "p.csv", "timestamp,close\n");
        let path = write(dir.path(), "run.toml", "[[assets]]\nsymbol = \"AAA\"\nprices = \"p.csv\"\n");
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.a2c, A2cConfig::default());
        assert_eq!(c.windows, WindowSpec::default());
        assert_eq!(c.env.tc_rates, vec![0.0, 0.0025]);
        assert_eq!(c.experiment.seeds.len(), 5);
        assert!(c.assets[0].prices.is_absolute());
        assert_eq!(c.output_dir, std::path::absolute(dir.path()).unwrap().join("output"));
    }

    #[test]
    fn echo_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "p.csv", "timestamp,close\n");
        let body = r#"
workers = 3
[[assets]]
symbol = "AAA"
prices = "p.csv"
news = "n.csv"
[env]
tc_rates = [0.0025]
cost_mode = "fixed-per-unit"
[a2c]
lr_actor = 0.0007
clip_norm = 0.5
optimizer = { kind = "rms-prop", decay = 0.99, eps = 1e-5 }
[experiment]
seeds = [1, 2]
strategies = ["sentarl", "buy-and-hold"]
day_count = { kind = "fixed", days = 77 }
"#;
        let path = write(dir.path(), "run.toml", body);
        let c = RunConfig::load(&path).unwrap();
        let echoed = write(dir.path(), "echo.toml", &c.to_toml().unwrap());
        assert_eq!(RunConfig::load(&echoed).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "p.csv", "timestamp,close\n");
        let assets = "[[assets]]\nsymbol = \"AAA\"\nprices = \"p.csv\"\n";
        for extra in ["[env]\nwindoww = 3\n", "[a2c]\ngamma = 1.5\n", "[env]\ntc_rates = [-0.1]\n", "bogus = 1\n"] {
            let path = write(dir.path(), "run.toml", &format!("{extra}{assets}"));
            assert!(RunConfig::load(&path).is_err(), "accepted {extra:?}");
        }
        let path = write(dir.path(), "run.toml", "[[assets]]\nsymbol = \"AAA\"\nprices = \"missing.csv\"\n");
        assert!(RunConfig::load(&path).is_err());
    }
}
