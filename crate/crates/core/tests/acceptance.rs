//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::f64::consts::PI;
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use sentarl_core::agent::{self, A2cAgent, A2cConfig, EvalMode, SentimentInit, Transition};
use sentarl_core::data::{hourly_grid, utc_midnight, AlignedSeries};
use sentarl_core::env::{buy_and_hold, run_episode, Action, CostMode, EnvConfig, MarketState, TradingEnv};
use sentarl_core::eval::{self, annualized_return, sharpe, MatrixConfig, RunOptions, Strategy, WindowSpec};
use sentarl_core::nn::{Activation, Dense, Mlp};
use sentarl_core::sentiment::{series_pulse, DEFAULT_SHIFTS};

// Tolerances and budgets.
const AR_TOL_PP: f64 = 0.10;
const FD_EPS: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const FD_DENOM_FLOOR: f64 = 1e-6;
const FD_NETS_PER_SHAPE: usize = 100;
const WEALTH_CASES: usize = 1000;
const WEALTH_REL_TOL: f64 = 1e-9;
const BH_TOL: f64 = 1e-12;
const REPLAY_REL_TOL: f64 = 1e-9;
const REPLAY_CASES: usize = 500;
const PULSE_TOL: f64 = 1e-9;
const LEARN_SEEDS: u64 = 5;
const LEARN_MIN_WINS: usize = 4;
const ABLATION_TOL: f64 = 1e-9;
const SR_SCALE_TOL: f64 = 1e-12;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn hourly_series(asset: &str, prices: Vec<f64>, sentiment: Vec<f64>) -> AlignedSeries {
    let n = prices.len();
    let has_news = sentiment.iter().map(|&e| e != 0.0).collect();
    AlignedSeries::from_parts(asset, hourly_grid(utc_midnight(2020, 1, 6), n), prices, sentiment, has_news)
        .expect("valid synthetic series")
}

fn random_walk(rng: &mut ChaCha8Rng, n: usize, start: f64, step: f64) -> Vec<f64> {
    let mut p = start;
    (0..n)
        .map(|_| {
            let v = p;
            p = (p + rng.gen_range(-step..step)).max(1.0);
            v
        })
        .collect()
}

fn random_sentiment(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.gen_bool(0.3) { rng.gen_range(-1.0..1.0) } else { 0.0 }).collect()
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn ar_cross_check() -> Outcome {
    // Reference (TR %, AR %) pairs over D = 77 test days.
    let table = [(2.43, 12.03), (1.98, 9.73), (2.83, 14.12), (1.41, 6.86), (1.79, 8.8)];
    let mut worst: f64 = 0.0;
    for (tr, ar) in table {
        let got = annualized_return(tr / 100.0, 77).map_err(|e| e.to_string())? * 100.0;
        let dev = (got - ar).abs();
        check(dev <= AR_TOL_PP, format!("TR {tr}% gave AR {got:.4}%, expected {ar}%"))?;
        worst = worst.max(dev);
    }
    Ok(format!("max deviation {worst:.4} pp"))
}

/// Independent forward pass for finite differences. Caches every layer's
/// input so a perturbed parameter only recomputes its own unit and the
/// layers after it.
struct Probe<'a> {
    layers: &'a [Dense],
    /// `acts[k]` is the input of layer `k`; the last entry is the output.
    acts: Vec<Vec<f64>>,
}

impl<'a> Probe<'a> {
    fn new(net: &'a Mlp, x: &[f64]) -> Self {
        let layers = net.layers();
        let mut acts = vec![x.to_vec()];
        for k in 0..layers.len() {
            let next = Self::layer(layers, k, acts.last().unwrap());
            acts.push(next);
        }
        Self { layers, acts }
    }

    fn unit(layers: &[Dense], k: usize, input: &[f64], row: &[f64], bias: f64) -> f64 {
        let mut z = bias;
        for (w, v) in row.iter().zip(input) {
            z += w * v;
        }
        if k + 1 < layers.len() {
            z.tanh()
        } else {
            z
        }
    }

    fn layer(layers: &[Dense], k: usize, input: &[f64]) -> Vec<f64> {
        let l = &layers[k];
        (0..l.outputs)
            .map(|i| Self::unit(layers, k, input, &l.weights[i * l.inputs..(i + 1) * l.inputs], l.biases[i]))
            .collect()
    }

    /// Output with parameter `index` (in flat parameter order) replaced by `value`.
    fn perturbed(&self, mut index: usize, value: f64) -> Vec<f64> {
        for (k, l) in self.layers.iter().enumerate() {
            let n = l.weights.len() + l.biases.len();
            if index >= n {
                index -= n;
                continue;
            }
            let (i, bias) = if index < l.weights.len() {
                (index / l.inputs, l.biases[index / l.inputs])
            } else {
                (index - l.weights.len(), value)
            };
            let mut row = l.weights[i * l.inputs..(i + 1) * l.inputs].to_vec();
            if index < l.weights.len() {
                row[index % l.inputs] = value;
            }
            let mut h = self.acts[k + 1].clone();
            h[i] = Self::unit(self.layers, k, &self.acts[k], &row, bias);
            for j in k + 1..self.layers.len() {
                h = Self::layer(self.layers, j, &h);
            }
            return h;
        }
        unreachable!("parameter index out of range")
    }
}

fn fd_check(net: &Mlp, x: &[f64], g: &[f64]) -> Result<f64, String> {
    let probe = Probe::new(net, x);
    let library = net.predict(x).map_err(|e| e.to_string())?;
    let own = probe.acts.last().unwrap();
    for (a, b) in library.iter().zip(own) {
        check(rel_err(*a, *b, 1e-12) <= 1e-12, format!("probe forward {b} disagrees with library {a}"))?;
    }
    let objective = |out: Vec<f64>| -> f64 { out.iter().zip(g).map(|(o, w)| o * w).sum() };
    let (_, cache) = net.forward(x).map_err(|e| e.to_string())?;
    let analytic = net.backward(&cache, g).map_err(|e| e.to_string())?.flat();
    let mut worst: f64 = 0.0;
    for (i, orig) in net.params().into_iter().enumerate() {
        let up = objective(probe.perturbed(i, orig + FD_EPS));
        let down = objective(probe.perturbed(i, orig - FD_EPS));
        let numeric = (up - down) / (2.0 * FD_EPS);
        let err = rel_err(analytic[i], numeric, FD_DENOM_FLOOR);
        if err > FD_REL_TOL {
            return Err(format!("param {i}: analytic {} vs numeric {numeric} (rel {err:.3e})", analytic[i]));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

fn gradient_check() -> Outcome {
    let env = EnvConfig::default();
    let dim = env.state_dim();
    check(dim == 46, format!("state dimension {dim}, expected 46"))?;
    let shapes = [[dim, 64, 64, 3], [dim, 64, 64, 1]];
    let mut worst: f64 = 0.0;
    for (si, shape) in shapes.iter().enumerate() {
        let results: Vec<Result<f64, String>> = (0..FD_NETS_PER_SHAPE as u64)
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 * si as u64 + k);
                let net = Mlp::new(shape, Activation::Tanh, &mut rng).map_err(|e| e.to_string())?;
                let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let g: Vec<f64> = (0..shape[3]).map(|_| rng.gen_range(-1.0..1.0)).collect();
                fd_check(&net, &x, &g)
            })
            .collect();
        for r in results {
            worst = worst.max(r.map_err(|e| format!("shape {shape:?}: {e}"))?);
        }
    }
    Ok(format!("{} nets, every parameter, max rel err {worst:.2e}", 2 * FD_NETS_PER_SHAPE))
}

fn random_case(rng: &mut ChaCha8Rng) -> (AlignedSeries, EnvConfig, Vec<Action>) {
    let n = rng.gen_range(30..200);
    let (start, step) = (rng.gen_range(5.0..500.0), rng.gen_range(0.1..5.0));
    let prices = random_walk(rng, n, start, step);
    let sentiment = random_sentiment(rng, n);
    let series = hourly_series("R", prices, sentiment);
    let config = EnvConfig {
        shares: rng.gen_range(1..20) as f64,
        tc_rate: if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..0.02) },
        cost_mode: if rng.gen_bool(0.5) { CostMode::Proportional } else { CostMode::FixedPerUnit },
        use_sentiment: rng.gen_bool(0.5),
        ..EnvConfig::default()
    };
    let actions = (0..n).map(|_| Action::ALL[rng.gen_range(0..3)]).collect();
    (series, config, actions)
}

fn play(series: &AlignedSeries, segment: std::ops::Range<usize>, config: &EnvConfig, actions: &[Action]) -> Result<(Vec<Action>, sentarl_core::env::Episode), String> {
    let mut env = TradingEnv::new(series, segment, config.clone()).map_err(|e| e.to_string())?;
    let mut taken = Vec::new();
    let mut i = 0;
    let mut policy = |_: &MarketState| {
        let a = actions[i % actions.len()];
        i += 1;
        taken.push(a);
        a
    };
    let episode = run_episode(&mut env, &mut policy).map_err(|e| e.to_string())?;
    Ok((taken, episode))
}

fn wealth_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for case in 0..WEALTH_CASES {
        let (series, config, actions) = random_case(&mut rng);
        let start = rng.gen_range(0..series.len() - 25);
        let (_, ep) = play(&series, start..series.len(), &config, &actions)?;
        let mut total = ep.psi;
        for s in &ep.steps {
            total += s.reward;
        }
        let err = rel_err(ep.final_wealth, total, ep.psi);
        check(err <= WEALTH_REL_TOL, format!("case {case}: wealth {} vs psi + rewards {total}", ep.final_wealth))?;
        worst = worst.max(err);
    }
    Ok(format!("{WEALTH_CASES} cases, max rel err {worst:.2e}"))
}

fn bh_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut series = vec![hourly_series(
        "SIN",
        (0..300).map(|t| 100.0 + 10.0 * (2.0 * PI * t as f64 / 24.0).sin()).collect(),
        vec![0.0; 300],
    )];
    for k in 0..50 {
        let n = rng.gen_range(40..400);
        let prices = random_walk(&mut rng, n, 50.0 + k as f64, 2.0);
        let sentiment = random_sentiment(&mut rng, n);
        series.push(hourly_series("R", prices, sentiment));
    }
    let mut worst: f64 = 0.0;
    for (i, s) in series.iter().enumerate() {
        let config = EnvConfig { tc_rate: 0.0, ..EnvConfig::default() };
        let (_, always_long) = play(s, 0..s.len(), &config, &[Action::Long])?;
        // Buy-and-hold ignores the configured cost rate.
        let charged = EnvConfig { tc_rate: 0.01, ..config };
        let bh = buy_and_hold(s, 0..s.len(), &charged).map_err(|e| e.to_string())?;
        let dev = (always_long.total_return() - bh.total_return()).abs();
        check(dev <= BH_TOL, format!("series {i}: always-long {} vs BH {}", always_long.total_return(), bh.total_return()))?;
        worst = worst.max(dev);
    }
    Ok(format!("{} series, max |dTR| {worst:.1e}", series.len()))
}

fn replay_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for case in 0..REPLAY_CASES {
        let (series, mut config, actions) = random_case(&mut rng);
        config.cost_mode = CostMode::FixedPerUnit;
        config.tc_rate = rng.gen_range(0.0..1.0);
        let start = rng.gen_range(0..series.len() - 25);
        let end = series.len() - rng.gen_range(0..5);
        let (taken, ep) = play(&series, start..end, &config, &actions)?;
        let got: f64 = ep.steps.iter().map(|s| s.reward).sum();

        // Literal replay over the decision clock with raw prices. Position is
        // flat before the first decision and unchanged at the final index.
        let t0 = ep.steps[0].t;
        let (phi, c, p) = (config.shares, config.tc_rate, &series.prices);
        let position = |t: usize| -> f64 {
            if t < t0 {
                0.0
            } else {
                taken[(t - t0).min(taken.len() - 1)].as_f64()
            }
        };
        let mut expected = 0.0;
        for t in t0..end {
            let z = if t == t0 { 0.0 } else { p[t] - p[t - 1] };
            let prev = if t == 0 { 0.0 } else { position(t - 1) };
            expected += phi * (z * prev - c * (position(t) - prev).abs());
        }
        let err = rel_err(got, expected, ep.psi);
        check(err <= REPLAY_REL_TOL, format!("case {case}: rewards {got} vs replay {expected}"))?;
        worst = worst.max(err);
    }
    Ok(format!("{REPLAY_CASES} episodes, max rel err {worst:.2e}"))
}

fn pulse_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 2000;
    let prices = random_walk(&mut rng, n, 100.0, 0.5);
    // e_t = z_{t-2}, scaled into the sentiment range.
    let mut sentiment = vec![0.0; n];
    for t in 3..n {
        sentiment[t] = (prices[t - 2] - prices[t - 3]) / 0.5;
    }
    let series = hourly_series("LAG", prices, sentiment);
    let pulse = series_pulse(&series, DEFAULT_SHIFTS).map_err(|e| e.to_string())?;
    check(pulse.shifts.len() == 14, format!("{} shifts, expected 14", pulse.shifts.len()))?;
    let (shift, value) = pulse.peak().ok_or("pulse undefined everywhere")?;
    check(shift == -2, format!("peak at shift {shift}"))?;
    check((value - 1.0).abs() <= PULSE_TOL, format!("peak value {value}"))?;
    Ok(format!("peak {value:.12} at shift {shift}"))
}

fn learnability() -> Outcome {
    let period = 24.0;
    let (train_len, test_len) = (24 * 20, 24 * 5);
    let n = train_len + test_len;
    let prices = (0..n).map(|t| 100.0 + 10.0 * (2.0 * PI * t as f64 / period).sin()).collect();
    let series = hourly_series("SIN", prices, vec![0.0; n]);
    let env = EnvConfig { tc_rate: 0.0, ..EnvConfig::default() };
    let bh = buy_and_hold(&series, train_len..n, &env).map_err(|e| e.to_string())?.total_return();
    let trs: Vec<Result<f64, String>> = (0..LEARN_SEEDS)
        .into_par_iter()
        .map(|seed| {
            let cfg = A2cConfig { seed, ..A2cConfig::default() };
            let trained = agent::train(&series, 0..train_len, &env, &cfg).map_err(|e| e.to_string())?;
            let ep = agent::evaluate(&trained.agent, &series, train_len..n, &env, EvalMode::Greedy).map_err(|e| e.to_string())?;
            Ok(ep.total_return())
        })
        .collect();
    let trs = trs.into_iter().collect::<Result<Vec<_>, _>>()?;
    let wins = trs.iter().filter(|&&tr| tr > bh).count();
    let detail = format!(
        "{wins}/{LEARN_SEEDS} seeds beat BH (BH TR {bh:.4}; agent TRs {})",
        trs.iter().map(|t| format!("{t:.4}")).collect::<Vec<_>>().join(", ")
    );
    check(wins >= LEARN_MIN_WINS, detail.clone())?;
    Ok(detail)
}

fn first_update(series: &AlignedSeries, env: &EnvConfig, cfg: &A2cConfig) -> Result<(usize, f64, Vec<f64>), String> {
    let mut agent = A2cAgent::new(env, cfg).map_err(|e| e.to_string())?;
    let mut environment = TradingEnv::new(series, 0..series.len(), env.clone()).map_err(|e| e.to_string())?;
    let mut rng = agent::stream(cfg.seed, 4);
    let mut state = environment.reset();
    let mut batch = Vec::new();
    while batch.len() < cfg.n_steps {
        let (action, log_prob) = agent.act_sample(&state, &mut rng).map_err(|e| e.to_string())?;
        let out = environment.step(action).map_err(|e| e.to_string())?;
        batch.push(Transition {
            state: state.flatten(),
            action,
            reward: out.reward,
            next_state: out.next_state.as_ref().map(MarketState::flatten),
            done: out.done,
            log_prob,
        });
        state = out.next_state.ok_or("episode ended before the first update")?;
    }
    let report = agent.update(&batch).map_err(|e| e.to_string())?;
    let training = agent::train(series, 0..series.len(), env, &A2cConfig { episodes: 2, ..cfg.clone() }).map_err(|e| e.to_string())?;
    let losses = training.log.iter().map(|e| e.critic_loss).collect();
    Ok((agent.input_dim(), report.critic_loss, losses))
}

fn ablation_plumbing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 200;
    let series = hourly_series("ABL", random_walk(&mut rng, n, 100.0, 1.0), vec![0.0; n]);
    let with = EnvConfig { use_sentiment: true, ..EnvConfig::default() };
    let without = EnvConfig { use_sentiment: false, ..EnvConfig::default() };
    let cfg = A2cConfig { seed: 17, sentiment_init: SentimentInit::Zero, ..A2cConfig::default() };
    let (dim_with, loss_with, log_with) = first_update(&series, &with, &cfg)?;
    let (dim_without, loss_without, log_without) = first_update(&series, &without, &cfg)?;
    check(dim_with == 46 && dim_without == 41, format!("state dims {dim_with} vs {dim_without}"))?;
    check(
        (loss_with - loss_without).abs() <= ABLATION_TOL,
        format!("first critic losses {loss_with} vs {loss_without}"),
    )?;
    for (a, b) in log_with.iter().zip(&log_without) {
        check((a - b).abs() <= ABLATION_TOL, format!("episode critic losses {a} vs {b}"))?;
    }
    Ok(format!("dims 46/41, first critic loss {loss_with:.6e} in both arms"))
}

fn matrix_series(rng: &mut ChaCha8Rng, asset: &str, n: usize) -> AlignedSeries {
    let prices = random_walk(rng, n, 100.0, 1.0);
    let sentiment = random_sentiment(rng, n);
    hourly_series(asset, prices, sentiment)
}

fn determinism_and_resume() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let assets = vec![matrix_series(&mut rng, "AAA", 300), matrix_series(&mut rng, "BBB", 320)];
    let config = MatrixConfig {
        a2c: A2cConfig { episodes: 3, hidden: vec![16, 16], ..A2cConfig::default() },
        windows: WindowSpec { train_len: 150, test_len: 48, stride: 48, count: 2 },
        seeds: vec![11, 12],
        tc_rates: vec![0.0025],
        strategies: Strategy::ALL.to_vec(),
        ..MatrixConfig::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let straight = dir.path().join("straight.csv");
    let resumed = dir.path().join("resumed.csv");
    let run = |path: &std::path::Path, options: RunOptions| eval::run_matrix(&assets, &config, path, &options).map_err(|e| e.to_string());

    let full = run(&straight, RunOptions { workers: 2, ..RunOptions::default() })?;
    check(full.complete && full.failures.is_empty(), "uninterrupted run did not complete")?;
    check(full.results.len() == 24, format!("{} rows, expected 24", full.results.len()))?;

    let partial = run(&resumed, RunOptions { workers: 3, limit: Some(7), ..RunOptions::default() })?;
    check(!partial.complete, "interrupted run reported completion")?;
    let rows_before = partial.results.len();
    let finished = run(&resumed, RunOptions { workers: 1, resume: true, ..RunOptions::default() })?;
    check(finished.complete && finished.skipped > 0, "resumed run did not pick up prior rows")?;

    let a = std::fs::read(&straight).map_err(|e| e.to_string())?;
    let b = std::fs::read(&resumed).map_err(|e| e.to_string())?;
    check(a == b, "results differ between straight and resumed runs")?;
    Ok(format!("24 rows, {rows_before} before interrupt, {} bytes identical", a.len()))
}

fn sharpe_arithmetic() -> Outcome {
    let base = sharpe(&[1.0, 2.0, 3.0]).map_err(|e| e.to_string())?;
    check(base == Some(2.0), format!("sharpe([1,2,3]) = {base:?}"))?;
    let flat = sharpe(&[0.02; 5]).map_err(|e| e.to_string())?;
    check(flat.is_none(), format!("zero-variance input gave {flat:?}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..1000 {
        let n = rng.gen_range(2..30);
        let trs: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let k = rng.gen_range(1e-3..1e3);
        let scaled: Vec<f64> = trs.iter().map(|v| v * k).collect();
        let (s, t) = (sharpe(&trs).unwrap(), sharpe(&scaled).unwrap());
        match (s, t) {
            (Some(s), Some(t)) => check(
                (s - t).abs() <= SR_SCALE_TOL * s.abs().max(1.0),
                format!("case {case}: {s} vs scaled {t}"),
            )?,
            _ => return Err(format!("case {case}: undefined sharpe on non-constant input")),
        }
    }
    Ok("sharpe([1,2,3]) = 2, scale invariant over 1000 sets, flat input undefined".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 10] = [
        ("1 annualized return cross-check", ar_cross_check, Duration::from_secs(1)),
        ("2 gradient verification", gradient_check, Duration::from_secs(30)),
        ("3 wealth accounting identity", wealth_identity, Duration::from_secs(10)),
        ("4 buy-and-hold equivalence", bh_equivalence, Duration::from_secs(10)),
        ("5 reward replay fidelity", replay_fidelity, Duration::from_secs(10)),
        ("6 correlation pulse oracle", pulse_oracle, Duration::from_secs(10)),
        ("7 learnability smoke test", learnability, Duration::from_secs(120)),
        ("8 ablation plumbing", ablation_plumbing, Duration::from_secs(10)),
        ("9 determinism and resumability", determinism_and_resume, Duration::from_secs(60)),
        ("10 sharpe arithmetic", sharpe_arithmetic, Duration::from_secs(1)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run, budget) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > budget => Err(format!("{d}; took {elapsed:.1?}, budget {budget:?}")),
            o => o,
        };
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{elapsed:.2?}]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail} [{elapsed:.2?}]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
