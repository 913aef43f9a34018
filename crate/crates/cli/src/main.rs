//! `usm`: simulation, detection, exact analysis and reproduction runner.

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use usm_core::analysis;
use usm_core::config::ExperimentConfig;
use usm_core::detect::{battery, DetectionReport};
use usm_core::engine::{couple_check, round_distribution, MinerSetup};
use usm_core::experiment::{
    mean_and_se, run_experiment, run_seeds, write_summaries_csv, write_summaries_jsonl,
};
use usm_core::markov::{self, MarkovState};
use usm_core::model::{height_states, StateSequence, View};
use usm_core::repro::{run_criterion, CRITERIA};
use usm_core::Error;

#[derive(Parser, Debug)]
#[command(name = "usm", version, about = "Selfish-mining simulation and detection experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    /// Print the complete default configuration as JSON and exit.
    #[arg(long)]
    dump_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON configuration file; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration field, e.g. `--set alpha=0.4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Base seed; run k uses base + k.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of seeds.
    #[arg(long, global = true)]
    seeds: Option<u32>,
    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv, global = true)]
    format: Format,
    /// Significance level for the detection battery.
    #[arg(long, global = true)]
    significance: Option<f64>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the configured strategy over all seeds and write one row per run.
    Simulate {
        /// Also write each run's state sequence (S/P symbols), one line per seed.
        #[arg(long)]
        states: Option<PathBuf>,
        /// Also write the first seed's view in the selected format.
        #[arg(long)]
        view: Option<PathBuf>,
    },
    /// Run the detection battery on state sequences.
    Detect {
        /// File of S/P symbol lines, one sequence per line. Without it the
        /// configured strategy is simulated and its sequences tested.
        input: Option<PathBuf>,
        /// Read the input as a serialized view (CSV, or JSONL with `--format jsonl`)
        /// and test its height states.
        #[arg(long)]
        view: bool,
    },
    /// Stationary distribution and rewards of the exact chain.
    Markov {
        /// Lead cap; overrides `markov_cap`.
        #[arg(long)]
        cap: Option<u32>,
        /// Convergence tolerance; overrides `markov_tol`.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Closed-form quantities at the configured parameters.
    Analyze,
    /// Evaluate a quantity on a parameter grid.
    Sweep(SweepArgs),
    /// Couple the configured n-player game with its two-player reduction.
    CoupleCheck,
    /// Run an acceptance criterion end to end; `all` runs every one.
    Repro {
        /// Criterion id or number.
        id: String,
    },
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(value_enum)]
    kind: SweepKind,
    #[arg(long, default_value_t = 0.36)]
    alpha_min: f64,
    #[arg(long, default_value_t = 0.40)]
    alpha_max: f64,
    #[arg(long, default_value_t = 41)]
    alpha_steps: usize,
    /// Second axis: natural pair rate for `general-condition`, target pair
    /// rate for `markov`.
    #[arg(long, default_value_t = 0.0)]
    y_min: f64,
    #[arg(long, default_value_t = 1.0)]
    y_max: f64,
    #[arg(long, default_value_t = 101)]
    y_steps: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum SweepKind {
    GeneralCondition,
    Markov,
}

/// Failure categories mapped to exit codes.
enum Failure {
    Invalid(String),
    Runtime(String),
    Criteria,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::Parameter(_)
            | Error::Validity(_)
            | Error::Singular(_)
            | Error::MalformedView(_)
            | Error::SequenceTooShort(_)
            | Error::UnsupportedStrategy(_) => Failure::Invalid(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(format!("io error: {e}"))
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Criteria) => ExitCode::from(1),
    }
}

fn run(cli: Cli) -> Outcome {
    if cli.dump_defaults {
        println!("{}", ExperimentConfig::default().to_json_pretty());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Failure::Invalid("no subcommand given; see --help".into()));
    };
    let common = cli.common;
    if let Command::Repro { id } = &command {
        return repro(id, &common);
    }
    let config = load_config(&common)?;
    match command {
        Command::Simulate { states, view } => simulate(&config, &common, states.as_deref(), view.as_deref()),
        Command::Detect { input, view } => detect(&config, &common, input.as_deref(), view),
        Command::Markov { cap, tol } => markov_cmd(&config, &common, cap, tol),
        Command::Analyze => analyze(&config, &common),
        Command::Sweep(args) => sweep(&args, &config, &common),
        Command::CoupleCheck => couple(&config, &common),
        Command::Repro { .. } => unreachable!(),
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut value = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Invalid(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str::<serde_json::Value>(&text)
                .map_err(|e| Failure::Invalid(format!("config error: {e}")))?
        }
        None => serde_json::json!({}),
    };
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Failure::Invalid("config must be a JSON object".into()))?;
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Invalid(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        let parsed = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.into()));
        obj.insert(k.to_string(), parsed);
    }
    if let Some(s) = common.seed {
        obj.insert("base_seed".into(), s.into());
    }
    if let Some(n) = common.seeds {
        obj.insert("num_seeds".into(), n.into());
    }
    if let Some(a) = common.significance {
        obj.insert("significance".into(), a.into());
    }
    let config = ExperimentConfig::from_json(&value.to_string())?;
    config.validate()?;
    Ok(config)
}

fn output(common: &Common) -> io::Result<Box<dyn Write>> {
    Ok(match &common.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// Writes `rows` in the selected format.
fn emit<T: Serialize>(rows: &[T], common: &Common) -> Outcome {
    let mut w = output(common)?;
    match common.format {
        Format::Csv => {
            let mut wr = csv::Writer::from_writer(&mut w);
            for r in rows {
                wr.serialize(r).map_err(|e| Failure::Runtime(e.to_string()))?;
            }
            wr.flush()?;
        }
        Format::Jsonl => {
            for r in rows {
                serde_json::to_writer(&mut w, r).map_err(|e| Failure::Runtime(e.to_string()))?;
                writeln!(w)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn simulate(
    config: &ExperimentConfig,
    common: &Common,
    states: Option<&Path>,
    view: Option<&Path>,
) -> Outcome {
    let (rows, production) = run_experiment(config)?;
    {
        let w = output(common)?;
        match common.format {
            Format::Csv => write_summaries_csv(&rows, w)?,
            Format::Jsonl => write_summaries_jsonl(&rows, w)?,
        }
    }
    if let Some(path) = states {
        let lines = run_seeds(config, &config.seeds(), |_, r| Ok(r.states.to_symbols()))?;
        let mut w = BufWriter::new(File::create(path)?);
        for l in lines {
            writeln!(w, "{l}")?;
        }
        w.flush()?;
    }
    if let Some(path) = view {
        let v = run_seeds(config, &[config.base_seed], |_, r| Ok(r.view.clone()))?.remove(0);
        let w = BufWriter::new(File::create(path)?);
        match common.format {
            Format::Csv => v.write_csv(w)?,
            Format::Jsonl => v.write_jsonl(w)?,
        }
    }
    let rewards: Vec<f64> = rows.iter().map(|r| r.reward).collect();
    let pairs: Vec<f64> = rows.iter().map(|r| r.pair_rate).collect();
    let (rm, rse) = mean_and_se(&rewards);
    let (pm, pse) = mean_and_se(&pairs);
    eprintln!(
        "{} seeds x {} heights, strategy {}, alpha {:.6}",
        rows.len(),
        config.horizon_heights,
        config.strategy,
        config.effective_alpha()?
    );
    eprintln!("  reward     {rm:.6} (se {rse:.2e})");
    eprintln!("  pair rate  {pm:.6} (se {pse:.2e})");
    eprintln!(
        "  production deviation {:.1} (3-sigma bound {:.1}): {}",
        production.deviation,
        production.bound,
        if production.ok() { "ok" } else { "VIOLATED" }
    );
    if !production.ok() {
        return Err(Failure::Runtime("attacker production outside its 3-sigma bound".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct DetectRow {
    sequence: String,
    heights: usize,
    test: String,
    statistic: f64,
    df: f64,
    p_value: f64,
    verdict: String,
    note: String,
}

fn detection_rows(label: &str, d: &DetectionReport) -> Vec<DetectRow> {
    let heights = d.beta.heights;
    let mut rows: Vec<DetectRow> = d
        .tests
        .iter()
        .map(|t| DetectRow {
            sequence: label.into(),
            heights,
            test: t.name.clone(),
            statistic: t.statistic,
            df: t.df,
            p_value: t.p_value,
            verdict: format!("{:?}", t.verdict).to_lowercase(),
            note: t.note.clone().unwrap_or_default(),
        })
        .collect();
    rows.push(DetectRow {
        sequence: label.into(),
        heights,
        test: "combined".into(),
        statistic: d.beta.estimate,
        df: 0.0,
        p_value: d.combined_p,
        verdict: format!("{:?}", d.verdict).to_lowercase(),
        note: format!("beta estimate in [{:.6}, {:.6}]", d.beta.lower, d.beta.upper),
    });
    rows
}

fn detect(config: &ExperimentConfig, common: &Common, input: Option<&Path>, view: bool) -> Outcome {
    let alpha = config.significance;
    let reports: Vec<(String, DetectionReport)> = match input {
        Some(path) if view => {
            let f = io::BufReader::new(File::open(path)?);
            let v = match common.format {
                Format::Csv => View::read_csv(f)?,
                Format::Jsonl => View::read_jsonl(f)?,
            };
            let states = height_states(&v, v.max_height())?;
            vec![("1".to_string(), battery(&states, alpha)?)]
        }
        None if view => return Err(Failure::Invalid("--view needs an input file".into())),
        Some(path) => {
            let mut text = String::new();
            let mut f: Box<dyn Read> = if path == Path::new("-") {
                Box::new(io::stdin())
            } else {
                Box::new(File::open(path)?)
            };
            f.read_to_string(&mut text)?;
            let seqs: Vec<StateSequence> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| StateSequence::parse(l.trim()))
                .collect::<std::result::Result<_, _>>()?;
            if seqs.is_empty() {
                return Err(Failure::Invalid("no sequences in input".into()));
            }
            seqs.par_iter()
                .enumerate()
                .map(|(k, s)| Ok(((k + 1).to_string(), battery(s, alpha)?)))
                .collect::<std::result::Result<_, Error>>()?
        }
        None => run_seeds(config, &config.seeds(), |seed, r| {
            let mut d = battery(&r.states, alpha)?;
            d.belief_epsilon = r.report.belief_epsilon;
            Ok((seed.to_string(), d))
        })?,
    };
    let rows: Vec<DetectRow> = reports.iter().flat_map(|(l, d)| detection_rows(l, d)).collect();
    emit(&rows, common)?;
    let rejected = reports
        .iter()
        .filter(|(_, d)| d.verdict == usm_core::detect::Verdict::Reject)
        .count();
    eprintln!(
        "{rejected} of {} sequences rejected at significance {alpha}",
        reports.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct StateRow {
    state: String,
    kind: &'static str,
    pairs: u32,
    probability: f64,
}

#[derive(Serialize)]
struct QuantityRow {
    quantity: String,
    value: f64,
}

fn quantity(name: &str, value: f64) -> QuantityRow {
    QuantityRow {
        quantity: name.into(),
        value,
    }
}

fn markov_cmd(config: &ExperimentConfig, common: &Common, cap: Option<u32>, tol: Option<f64>) -> Outcome {
    let alpha = config.effective_alpha()?;
    let beta = config.beta()?;
    let cap = cap.unwrap_or(config.markov_cap);
    let tol = tol.unwrap_or(config.markov_tol);
    let (chain, dist, r) = markov::solve(alpha, beta, config.gamma, cap, tol)?;
    let rows: Vec<StateRow> = chain
        .states()
        .into_iter()
        .zip(&dist.probabilities)
        .map(|(s, &p)| {
            let (kind, pairs) = match s {
                MarkovState::Zero => ("zero", 0),
                MarkovState::Settled(i) => ("settled", i),
                MarkovState::PairOnTop(i) => ("pair_on_top", i),
                MarkovState::Undecided(i) => ("undecided", i),
            };
            StateRow {
                state: format!("{s:?}"),
                kind,
                pairs,
                probability: p,
            }
        })
        .collect();
    emit(&rows, common)?;
    let summary = [
        quantity("block_ratio", r.block_ratio),
        quantity("pair_counting", r.pair_counting),
        quantity("solo_pair", r.solo_pair),
        quantity("max_disagreement", r.max_disagreement()),
        quantity("pair_rate", chain.pair_rate(&dist)),
        quantity("tail_mass", chain.tail_mass(&dist)),
        quantity("residual", dist.residual),
    ];
    let mut wr = csv::Writer::from_writer(io::stderr());
    for q in &summary {
        wr.serialize(q).map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

fn analyze(config: &ExperimentConfig, common: &Common) -> Outcome {
    let dist = config.distribution()?;
    let alpha = config.effective_alpha()?;
    let beta = config.beta()?;
    let bp = dist.beta_prime;
    let mut rows = vec![
        quantity("alpha", alpha),
        quantity("alpha_prime", dist.alpha_prime),
        quantity("beta_prime", bp),
        quantity("beta", beta),
        quantity("alpha_star", analysis::alpha_star()),
        quantity("main_threshold", analysis::main_threshold(beta)?),
        quantity("sm_threshold", analysis::sm_threshold(config.gamma)?),
    ];
    let optional = [
        ("warmup_reward", analysis::warmup_reward(alpha, beta)),
        ("solo_pair_lower_bound", analysis::solo_pair_lower_bound(alpha, beta)),
        ("honest_reward_general", analysis::honest_reward_general(alpha, bp)),
        ("honest_share_exact", analysis::honest_share_exact(alpha, bp)),
        ("general_condition", analysis::general_condition(alpha, bp)),
        ("general_condition_exact", analysis::general_condition_exact(alpha, bp)),
    ];
    for (name, v) in optional {
        match v {
            Ok(v) => rows.push(quantity(name, v)),
            Err(e) => eprintln!("{name}: {e}"),
        }
    }
    if let Ok(x) = analysis::honest_reward_general(alpha, bp) {
        if let Ok(v) = analysis::short_sm_expected_reward(alpha, bp, x) {
            rows.push(quantity("short_sm_episode_value", v));
        }
    }
    emit(&rows, common)
}

fn grid(lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>, Failure> {
    if steps == 0 || !(lo <= hi) {
        return Err(Failure::Invalid(format!("bad grid [{lo}, {hi}] with {steps} steps")));
    }
    if steps == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..steps)
        .map(|k| lo + (hi - lo) * k as f64 / (steps - 1) as f64)
        .collect())
}

#[derive(Serialize)]
struct ConditionRow {
    alpha: f64,
    beta_prime: f64,
    value: Option<f64>,
    exact: Option<f64>,
    sign: &'static str,
}

#[derive(Serialize)]
struct ChainRow {
    alpha: f64,
    beta: f64,
    gamma: f64,
    block_ratio: Option<f64>,
    pair_counting: Option<f64>,
    solo_pair: Option<f64>,
    tail_mass: Option<f64>,
    note: String,
}

fn sign(v: Option<f64>) -> &'static str {
    match v {
        Some(v) if v > 0.0 => "positive",
        Some(v) if v < 0.0 => "negative",
        Some(_) => "zero",
        None => "undefined",
    }
}

fn sweep(args: &SweepArgs, config: &ExperimentConfig, common: &Common) -> Outcome {
    let alphas = grid(args.alpha_min, args.alpha_max, args.alpha_steps)?;
    let ys = grid(args.y_min, args.y_max, args.y_steps)?;
    let points: Vec<(f64, f64)> = alphas
        .iter()
        .flat_map(|&a| ys.iter().map(move |&y| (a, y)))
        .collect();
    match args.kind {
        SweepKind::GeneralCondition => {
            let rows: Vec<ConditionRow> = points
                .par_iter()
                .map(|&(a, b)| {
                    let value = analysis::general_condition(a, b).ok();
                    ConditionRow {
                        alpha: a,
                        beta_prime: b,
                        value,
                        exact: analysis::general_condition_exact(a, b).ok(),
                        sign: sign(value),
                    }
                })
                .collect();
            emit(&rows, common)
        }
        SweepKind::Markov => {
            let (cap, tol) = (config.markov_cap, config.markov_tol);
            let rows: Vec<ChainRow> = points
                .par_iter()
                .map(|&(a, b)| match markov::solve(a, b, config.gamma, cap, tol) {
                    Ok((chain, dist, r)) => ChainRow {
                        alpha: a,
                        beta: b,
                        gamma: config.gamma,
                        block_ratio: Some(r.block_ratio),
                        pair_counting: Some(r.pair_counting),
                        solo_pair: Some(r.solo_pair),
                        tail_mass: Some(chain.tail_mass(&dist)),
                        note: String::new(),
                    },
                    Err(e) => ChainRow {
                        alpha: a,
                        beta: b,
                        gamma: config.gamma,
                        block_ratio: None,
                        pair_counting: None,
                        solo_pair: None,
                        tail_mass: None,
                        note: e.to_string(),
                    },
                })
                .collect();
            emit(&rows, common)
        }
    }
}

fn couple(config: &ExperimentConfig, common: &Common) -> Outcome {
    let Some(hashrates) = &config.hashrates else {
        return Err(Failure::Invalid("couple-check needs `hashrates` in the config".into()));
    };
    let n_player = config.game_params(0)?;
    let mut two = n_player.clone();
    two.setup = MinerSetup::TwoPlayer {
        dist: round_distribution(hashrates, config.latency)?,
    };
    let report = couple_check(&n_player, &two, &config.seeds(), || {
        config.make_strategy().expect("validated strategy")
    })?;
    emit(&report.seeds, common)?;
    let ok = report.seeds.iter().filter(|s| s.isomorphic && s.rewards_equal).count();
    eprintln!("{ok} of {} seeds coupled exactly", report.seeds.len());
    if !report.all_equal() {
        return Err(Failure::Runtime("coupled games diverged".into()));
    }
    Ok(())
}

fn repro(id: &str, common: &Common) -> Outcome {
    let ids: Vec<String> = if id == "all" {
        CRITERIA.iter().map(|c| c.1.to_string()).collect()
    } else {
        vec![id.to_string()]
    };
    let mut reports = Vec::new();
    for id in &ids {
        let r = run_criterion(id)?;
        println!("{}", r.render());
        reports.push(r);
    }
    if let Some(path) = &common.out {
        let text = serde_json::to_string_pretty(&reports).map_err(|e| Failure::Runtime(e.to_string()))?;
        std::fs::write(path, text)?;
    }
    if reports.iter().all(|r| r.passed()) {
        Ok(())
    } else {
        Err(Failure::Criteria)
    }
}
