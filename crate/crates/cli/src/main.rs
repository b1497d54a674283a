use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use sentarl_core::data::{self, AlignedSeries};
use sentarl_core::eval::{self, AssetMeta, RunOptions, Strategy};
use sentarl_core::sentiment::{self, Lexicon, NeutralScorer, SentimentScorer, DEFAULT_SHIFTS};

mod config;

use config::{RunConfig, ScorerKind};

#[derive(Parser)]
#[command(name = "sentarl", version, about = "Sentiment-aware actor-critic trading experiments")]
struct Cli {
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Align prices and news into an hourly cache and report news coverage.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Asset to ingest; every configured asset when omitted.
        #[arg(long)]
        asset: Option<String>,
    },
    /// Correlation of sentiment with shifted price differences.
    CorrPulse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        asset: String,
        #[arg(long, default_value_t = *DEFAULT_SHIFTS.start(), allow_hyphen_values = true)]
        min_shift: i32,
        #[arg(long, default_value_t = *DEFAULT_SHIFTS.end(), allow_hyphen_values = true)]
        max_shift: i32,
    },
    /// Train and test a single trial.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        asset: String,
        #[arg(long, default_value_t = 0)]
        window: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Cost rate; the first configured rate when omitted.
        #[arg(long)]
        tc: Option<f64>,
        #[arg(long, default_value = "sentarl")]
        strategy: Strategy,
    },
    /// Run the full experiment matrix and write the summary reports.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        workers: Option<usize>,
        /// Keep finished trials from a previous run.
        #[arg(long)]
        resume: bool,
    },
    /// Re-aggregate an existing results directory.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
        corr_shift: i32,
    },
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured output directory.
    #[arg(long, env = "SENTARL_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
}

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Exit {
    Io = 1,
    Config = 2,
    Ingest = 3,
    Trials = 4,
}

struct Failure {
    exit: Exit,
    error: anyhow::Error,
}

type CmdResult = Result<(), Failure>;

trait OrExit<T> {
    fn or_exit(self, exit: Exit) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for Result<T, E> {
    fn or_exit(self, exit: Exit) -> Result<T, Failure> {
        self.map_err(|e| Failure { exit, error: e.into() })
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut config = RunConfig::load(&common.config).or_exit(Exit::Config)?;
    if let Some(dir) = &common.output_dir {
        config.output_dir = std::path::absolute(dir).or_exit(Exit::Config)?;
    }
    Ok(config)
}

fn scorer(config: &RunConfig) -> anyhow::Result<Box<dyn SentimentScorer>> {
    Ok(match (config.sentiment.scorer, &config.sentiment.lexicon) {
        (ScorerKind::Neutral, _) => Box::new(NeutralScorer),
        (ScorerKind::Lexicon, Some(path)) => Box::new(Lexicon::load(path)?),
        (ScorerKind::Lexicon, None) => Box::new(Lexicon::bundled()),
    })
}

fn ingest_asset(config: &RunConfig, symbol: &str, scorer: &dyn SentimentScorer) -> Result<f64, Failure> {
    let source = config.asset(symbol).or_exit(Exit::Config)?;
    let prices = data::load_prices(&source.prices)
        .with_context(|| format!("ingesting {}", source.prices.display()))
        .or_exit(Exit::Ingest)?;
    let headlines = match &source.news {
        Some(path) if path.is_file() => data::load_headlines(path)
            .with_context(|| format!("ingesting {}", path.display()))
            .or_exit(Exit::Ingest)?,
        Some(path) => {
            log::warn!("{symbol}: news file {} not found, treating the asset as having no news", path.display());
            Vec::new()
        }
        None => {
            log::warn!("{symbol}: no news file configured");
            Vec::new()
        }
    };
    let scored = sentiment::score_headlines(&headlines, scorer);
    let grouped = sentiment::group_by_hour(&scored, config.sentiment.grouping);
    let series = data::align(symbol, &prices, &grouped, config.sentiment.fill)
        .with_context(|| format!("aligning {symbol}"))
        .or_exit(Exit::Ingest)?;
    let path = config.cache_path(symbol);
    fs::create_dir_all(path.parent().expect("cache path has a parent")).or_exit(Exit::Io)?;
    data::save_cache(&series, &path).or_exit(Exit::Io)?;
    let coverage = data::coverage(&series);
    log::info!("{symbol}: {} hourly points, cache written to {}", series.len(), path.display());
    println!("{symbol} coverage {coverage:.6}");
    Ok(coverage)
}

fn cmd_ingest(common: &Common, asset: Option<&str>) -> CmdResult {
    let config = load_config(common)?;
    let scorer = scorer(&config).or_exit(Exit::Config)?;
    let symbols: Vec<&str> = match asset {
        Some(a) => vec![a],
        None => config.assets.iter().map(|a| a.symbol.as_str()).collect(),
    };
    for s in symbols {
        ingest_asset(&config, s, scorer.as_ref())?;
    }
    Ok(())
}

fn load_series(config: &RunConfig, symbol: &str) -> Result<AlignedSeries, Failure> {
    config.asset(symbol).or_exit(Exit::Config)?;
    let path = config.cache_path(symbol);
    if !path.is_file() {
        return Err(Failure {
            exit: Exit::Io,
            error: anyhow::anyhow!("no cache for {symbol} at {}; run `sentarl ingest` first", path.display()),
        });
    }
    data::load_cache(symbol, &path).or_exit(Exit::Ingest)
}

fn cmd_corr_pulse(common: &Common, asset: &str, min_shift: i32, max_shift: i32) -> CmdResult {
    let config = load_config(common)?;
    if min_shift > max_shift {
        return Err(Failure {
            exit: Exit::Config,
            error: anyhow::anyhow!("--min-shift {min_shift} exceeds --max-shift {max_shift}"),
        });
    }
    let series = load_series(&config, asset)?;
    let pulse = sentiment::series_pulse(&series, min_shift..=max_shift).or_exit(Exit::Ingest)?;
    let dir = config.output_dir.join("pulse");
    fs::create_dir_all(&dir).or_exit(Exit::Io)?;
    let path = dir.join(format!("{asset}.csv"));
    pulse
        .write_csv(BufWriter::new(File::create(&path).or_exit(Exit::Io)?))
        .or_exit(Exit::Io)?;
    match pulse.peak() {
        Some((shift, c)) => println!("{asset} pulse peak {c:.6} at shift {shift}"),
        None => println!("{asset} pulse undefined at every shift"),
    }
    log::info!("pulse written to {}", path.display());
    Ok(())
}

fn cmd_train(
    common: &Common,
    asset: &str,
    window: usize,
    seed: Option<u64>,
    tc: Option<f64>,
    strategy: Strategy,
) -> CmdResult {
    let config = load_config(common)?;
    let series = load_series(&config, asset)?;
    let matrix = config.matrix_config();
    let windows = eval::make_windows(series.len(), matrix.windows).or_exit(Exit::Config)?;
    let w = windows.windows.get(window).cloned().ok_or_else(|| Failure {
        exit: Exit::Config,
        error: anyhow::anyhow!("window {window} out of range, {} configured", windows.windows.len()),
    })?;
    let tc = tc.unwrap_or(config.env.tc_rates[0]);
    let seed = seed.unwrap_or(matrix.seeds[0]);
    let key = eval::TrialKey { asset: asset.to_string(), window, seed, tc, strategy };
    let dir = config.output_dir.join("train");
    let result = if strategy.is_learning() {
        eval::run_agent_trial(&series, &w, &matrix, key, Some(&dir)).or_exit(Exit::Trials)?
    } else {
        let ep = sentarl_core::env::buy_and_hold(&series, w.test.clone(), &matrix.env).or_exit(Exit::Trials)?;
        let tr = ep.total_return();
        let days = matrix.day_count.days(&series, w.test.clone());
        eval::TrialResult {
            key,
            tr,
            ar: eval::annualized_return(tr, days).or_exit(Exit::Trials)?,
            trade_count: ep.trade_count(),
            equity: Vec::new(),
        }
    };
    println!(
        "{}: test tr {:.6} ar {:.6} trades {}",
        result.key, result.tr, result.ar, result.trade_count
    );
    Ok(())
}

fn write_report(dir: &Path, results: &[eval::TrialResult], meta: &[AssetMeta], corr_shift: i32) -> CmdResult {
    let report = eval::report(results, meta, corr_shift).or_exit(Exit::Io)?;
    let files = report.write_dir(dir).or_exit(Exit::Io)?;
    for r in &report.overall {
        let tc = r.tc.map(|t| t.to_string()).unwrap_or_else(|| "-".into());
        let sr = r.sr.map(|s| format!("{s:.2}")).unwrap_or_else(|| "undefined".into());
        println!(
            "tc {tc:>6} {:<13} TR {:>7.2}% AR {:>7.2}% SR {sr} ({} trials)",
            r.strategy,
            100.0 * r.mean_tr,
            100.0 * r.mean_ar,
            r.trials
        );
    }
    for f in files {
        log::info!("wrote {}", f.display());
    }
    Ok(())
}

fn cmd_run(common: &Common, workers: Option<usize>, resume: bool) -> CmdResult {
    let mut config = load_config(common)?;
    if let Some(w) = workers {
        config.workers = w;
        config.validate().or_exit(Exit::Config)?;
    }
    let assets = config
        .assets
        .iter()
        .map(|a| load_series(&config, &a.symbol))
        .collect::<Result<Vec<_>, _>>()?;
    let out = &config.output_dir;
    fs::create_dir_all(out).or_exit(Exit::Io)?;
    fs::write(out.join("config.toml"), config.to_toml().or_exit(Exit::Config)?).or_exit(Exit::Io)?;

    let meta = assets
        .iter()
        .map(|s| AssetMeta::from_series(s, DEFAULT_SHIFTS))
        .collect::<Result<Vec<_>, _>>()
        .or_exit(Exit::Ingest)?;
    eval::write_asset_meta(&meta, BufWriter::new(File::create(out.join("assets.csv")).or_exit(Exit::Io)?))
        .or_exit(Exit::Io)?;

    let options = RunOptions {
        workers: config.workers,
        resume,
        limit: None,
        artifacts: Some(out.join("artifacts")),
    };
    let results_path = out.join("results.csv");
    let outcome = eval::run_matrix(&assets, &config.matrix_config(), &results_path, &options).map_err(|e| {
        let exit = match e {
            eval::EvalError::Io(_) | eval::EvalError::Csv(_) | eval::EvalError::BadResults { .. } => Exit::Io,
            _ => Exit::Config,
        };
        Failure { exit, error: e.into() }
    })?;
    log::info!(
        "{} units run, {} skipped, {} rows in {}",
        outcome.executed,
        outcome.skipped,
        outcome.results.len(),
        results_path.display()
    );
    if !outcome.results.is_empty() {
        write_report(&out.join("report"), &outcome.results, &meta, 0)?;
    }
    if !outcome.failures.is_empty() {
        for f in &outcome.failures {
            eprintln!("failed: {}: {}", f.key, f.message);
        }
        return Err(Failure {
            exit: Exit::Trials,
            error: anyhow::anyhow!("{} trials failed; rerun with --resume to retry them", outcome.failures.len()),
        });
    }
    Ok(())
}

fn cmd_report(results: &Path, corr_shift: i32) -> CmdResult {
    let rows = eval::load_results(results.join("results.csv"))
        .with_context(|| format!("reading results in {}", results.display()))
        .or_exit(Exit::Io)?;
    let meta_path = results.join("assets.csv");
    let meta = if meta_path.is_file() {
        eval::read_asset_meta(File::open(&meta_path).or_exit(Exit::Io)?).or_exit(Exit::Io)?
    } else {
        log::warn!("{} missing; scatter data will lack coverage and correlation", meta_path.display());
        Vec::new()
    };
    write_report(&results.join("report"), &rows, &meta, corr_shift)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let result = match &cli.command {
        Command::Ingest { common, asset } => cmd_ingest(common, asset.as_deref()),
        Command::CorrPulse { common, asset, min_shift, max_shift } => cmd_corr_pulse(common, asset, *min_shift, *max_shift),
        Command::Train { common, asset, window, seed, tc, strategy } => {
            cmd_train(common, asset, *window, *seed, *tc, *strategy)
        }
        Command::Run { common, workers, resume } => cmd_run(common, *workers, *resume),
        Command::Report { results, corr_shift } => cmd_report(results, *corr_shift),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.exit as u8)
        }
    }
}
