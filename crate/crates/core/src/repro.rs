//! One-command reproduction of each acceptance criterion. Every criterion
//! returns its measurements as named checks; a criterion passes when all of
//! its checks do.

use crate::analysis::{
    alpha_star, alpha_star_polynomial, condition_with_charge, general_condition,
    general_condition_exact, honest_reward_general, main_threshold, short_sm_expected_reward,
    sm_threshold,
};
use crate::config::ExperimentConfig;
use crate::detect::{battery, Verdict};
use crate::engine::{couple_check, round_distribution, GameParams, MinerSetup, Tiebreak};
use crate::error::{Error, Result};
use crate::experiment::{mean_and_se, run_seeds, ProductionCheck};
use crate::markov;
use crate::strategies::{ClassicSm, Honest, Strategy};
use rand::{Rng, SeedableRng};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use std::collections::BTreeMap;

/// Tolerances and run sizes used by the criteria.
pub mod tol {
    pub const SIGMAS: f64 = 3.0;
    pub const CI_LEVEL: f64 = 0.99;
    pub const REJECTION_RATE_LOW: f64 = 0.01;
    pub const REJECTION_RATE_HIGH: f64 = 0.09;
    pub const NULL_SIGNIFICANCE: f64 = 0.05;
    pub const BELIEF_EPSILON: f64 = 1e-9;
    pub const DETECT_P: f64 = 0.01;
    pub const DETECT_MIN_SEEDS: usize = 99;
    pub const CHAIN_AGREEMENT: f64 = 1e-8;
    pub const ALPHA_STAR: f64 = 0.3586;
    pub const ALPHA_STAR_DIGITS: f64 = 5e-5;
    pub const QUARTIC_RESIDUAL: f64 = 1e-9;
    pub const MAIN_THRESHOLD: f64 = 1e-9;
    pub const SIGN_CHANGE: f64 = 1e-6;
    pub const RESTATEMENT: f64 = 1e-9;
    pub const GRID_POINTS: usize = 201;
    pub const MARKOV_CAP: u32 = 100;
}

/// Criteria in order: number, repro id, one-line description.
pub const CRITERIA: [(u8, &str, &str); 9] = [
    (1, "warmup-reward", "warmup strategy earns alpha + alpha*beta at pair rate beta"),
    (2, "undetectable", "detection tests hold their nominal size on labeled strategies"),
    (3, "classic-detectable", "battery rejects strong and classic selfish mining"),
    (4, "main-profitability", "labeled strategy profits above its threshold and not below"),
    (5, "markov-agreement", "chain rewards agree with each other and with simulation"),
    (6, "thresholds", "closed-form thresholds and the behavioral selfish-mining threshold"),
    (7, "general-condition", "natural-pair profitability condition and short selfish mining"),
    (8, "reduction", "n-player game couples exactly with its two-player reduction"),
    (9, "conservation", "per-height block counts, broadcast order and production rate"),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionReport {
    pub number: u8,
    pub id: String,
    pub checks: Vec<Check>,
}

impl CriterionReport {
    fn new(number: u8) -> Self {
        CriterionReport {
            number,
            id: CRITERIA[number as usize - 1].1.into(),
            checks: Vec::new(),
        }
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn summary_line(&self) -> String {
        let failed: Vec<&str> = self
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        let status = if failed.is_empty() { "PASS" } else { "FAIL" };
        let mut line = format!("criterion {} {}: {status}", self.number, self.id);
        if !failed.is_empty() {
            line.push_str(&format!(" (failed: {})", failed.join(", ")));
        }
        line
    }

    pub fn render(&self) -> String {
        let mut s = self.summary_line();
        for c in &self.checks {
            let mark = if c.passed { "ok" } else { "FAILED" };
            s.push_str(&format!("\n  [{mark}] {}: {}", c.name, c.detail));
        }
        s
    }
}

/// Runs the criterion with the given repro id or number.
pub fn run_criterion(id: &str) -> Result<CriterionReport> {
    let number = CRITERIA
        .iter()
        .find(|(n, name, _)| *name == id || n.to_string() == id)
        .map(|c| c.0)
        .ok_or_else(|| {
            let ids: Vec<&str> = CRITERIA.iter().map(|c| c.1).collect();
            Error::Config(format!("unknown criterion {id:?}; expected one of {}", ids.join(", ")))
        })?;
    match number {
        1 => warmup_reward(),
        2 => undetectable(),
        3 => classic_detectable(),
        4 => main_profitability(),
        5 => markov_agreement(),
        6 => thresholds(),
        7 => general_condition_check(),
        8 => reduction(),
        _ => conservation(),
    }
}

fn base_seed(criterion: u8) -> u64 {
    1000 * criterion as u64
}

fn two_player(alpha: f64, strategy: &str, beta: f64, tiebreak: Tiebreak) -> ExperimentConfig {
    ExperimentConfig {
        alpha,
        strategy: strategy.into(),
        beta_target: beta,
        tiebreak,
        ..Default::default()
    }
}

fn with_natural_pairs(mut c: ExperimentConfig, beta_prime: f64) -> ExperimentConfig {
    c.alpha_prime = Some(c.alpha * (1.0 + beta_prime) - beta_prime);
    c.beta_prime = Some(beta_prime);
    c
}

/// Per-seed rewards and pair rates.
fn rewards_and_pair_rates(c: &ExperimentConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows = run_seeds(c, &c.seeds(), |_, r| Ok((r.reward(), r.pair_rate())))?;
    Ok(rows.into_iter().unzip())
}

fn within_sigmas(value: f64, target: f64, se: f64) -> bool {
    (value - target).abs() <= tol::SIGMAS * se
}

fn ci_quantile() -> f64 {
    Normal::standard().inverse_cdf(0.5 + tol::CI_LEVEL / 2.0)
}

fn warmup_reward() -> Result<CriterionReport> {
    let mut rep = CriterionReport::new(1);
    let (alpha, beta) = (0.3, 0.25);
    let mut c = two_player(alpha, "usm_warmup", beta, Tiebreak::FavorAttacker);
    c.horizon_heights = 1_000_000;
    c.num_seeds = 20;
    c.base_seed = base_seed(1);
    let (rewards, pairs) = rewards_and_pair_rates(&c)?;
    let target = alpha + alpha * beta;
    let (m, se) = mean_and_se(&rewards);
    rep.check(
        "reward",
        within_sigmas(m, target, se),
        format!("mean {m:.6} se {se:.2e} target {target}"),
    );
    let (m, se) = mean_and_se(&pairs);
    rep.check(
        "pair_rate",
        within_sigmas(m, beta, se),
        format!("mean {m:.6} se {se:.2e} target {beta}"),
    );
    Ok(rep)
}

fn undetectable() -> Result<CriterionReport> {
    let mut rep = CriterionReport::new(2);
    let cases = [
        ("usm_warmup", two_player(0.4, "usm_warmup", 0.3, Tiebreak::FavorAttacker)),
        ("usm_main", two_player(0.42, "usm_main", 0.1, Tiebreak::AgainstAttacker)),
        (
            "usm_general",
            with_natural_pairs(two_player(0.45, "usm_general", 0.07, Tiebreak::AgainstAttacker), 0.05),
        ),
    ];
    for (name, mut c) in cases {
        c.horizon_heights = 1_000_000;
        c.num_seeds = 100;
        c.base_seed = base_seed(2);
        let rows = run_seeds(&c, &c.seeds(), |_, r| {
            let d = battery(&r.states, tol::NULL_SIGNIFICANCE)?;
            Ok((d, r.report.belief_epsilon))
        })?;
        let n = rows.len() as f64;
        let mut rejections: BTreeMap<String, (u32, u32)> = BTreeMap::new();
        let mut combined = 0;
        let mut epsilon: f64 = 0.0;
        for (d, eps) in &rows {
            for t in &d.tests {
                let e = rejections.entry(t.name.clone()).or_default();
                e.0 += (t.verdict == Verdict::Reject) as u32;
                e.1 += (t.verdict == Verdict::Inconclusive) as u32;
            }
            combined += (d.verdict == Verdict::Reject) as u32;
            epsilon = epsilon.max(eps.unwrap_or(0.0));
        }
        for (test, (rejected, inconclusive)) in rejections {
            let rate = rejected as f64 / n;
            rep.check(
                format!("{name} {test}"),
                (tol::REJECTION_RATE_LOW..=tol::REJECTION_RATE_HIGH).contains(&rate),
                format!("rejection rate {rate:.2} ({inconclusive} inconclusive)"),
            );
        }
        rep.check(
            format!("{name} combined"),
            true,
            format!("combined rejection rate {:.2}", combined as f64 / n),
        );
        if name == "usm_general" {
            rep.check(
                "usm_general belief_epsilon",
                epsilon < tol::BELIEF_EPSILON,
                format!("worst step truncation {epsilon:.3e}"),
            );
        }
    }
    Ok(rep)
}

fn classic_detectable() -> Result<CriterionReport> {
    let mut rep = CriterionReport::new(3);
    for (name, alpha, tb) in [
        ("strong_sm", 0.3, Tiebreak::FavorAttacker),
        ("classic_sm", 0.4, Tiebreak::AgainstAttacker),
    ] {
        let mut c = two_player(alpha, name, 0.0, tb);
        c.horizon_heights = 100_000;
        c.num_seeds = 100;
        c.base_seed = base_seed(3);
        let ps = run_seeds(&c, &c.seeds(), |_, r| Ok(battery(&r.states, tol::DETECT_P)?.combined_p))?;
        let hits = ps.iter().filter(|&&p| p < tol::DETECT_P).count();
        let worst = ps.iter().cloned().fold(0.0, f64::max);
        rep.check(
            name,
            hits >= tol::DETECT_MIN_SEEDS,
            format!("{hits}/{} seeds reject, largest combined p {worst:.3e}", ps.len()),
        );
    }
    Ok(rep)
}

fn main_profitability() -> Result<CriterionReport> {
    let mut rep = CriterionReport::new(4);
    let z = ci_quantile();
    for (alpha, above) in [(0.40, true), (0.34, false)] {
        let beta = 0.05;
        let mut c = two_player(alpha, "usm_main", beta, Tiebreak::AgainstAttacker);
        c.horizon_heights = 1_000_000;
        c.num_seeds = 10;
        c.base_seed = base_seed(4);
        let (rewards, _) = rewards_and_pair_rates(&c)?;
        let (m, se) = mean_and_se(&rewards);
        let (lo, hi) = (m - z * se, m + z * se);
        let (_, _, chain) = markov::solve(alpha, beta, 0.0, tol::MARKOV_CAP, 1e-13)?;
        let exact = chain.block_ratio;
        let ok = if above { lo > alpha } else { hi < alpha };
        let side = if above { "above" } else { "below" };
        rep.check(
            format!("alpha {alpha} {side}"),
            ok,
            format!("mean {m:.6} ci [{lo:.6}, {hi:.6}] over {} heights", c.horizon_heights as u64 * c.num_seeds as u64),
        );
        rep.check(
            format!("alpha {alpha} chain"),
            (exact > alpha) == above && within_sigmas(m, exact, se),
            format!("chain value {exact:.6}, simulation off by {:.2} se", (m - exact) / se),
        );
    }
    Ok(rep)
}

fn markov_agreement() -> Result<CriterionReport> {
    let mut rep = CriterionReport::new(5);
    for alpha in [0.35, 0.40, 0.45] {
        for beta in [0.02, 0.08] {
            let (_, _, r) = markov::solve(alpha, beta, 0.0, tol::MARKOV_CAP, 1e-14)?;
            let d = r.max_disagreement();
            rep.check(
                format!("({alpha}, {beta}) formulas"),
                d < tol::CHAIN_AGREEMENT,
                format!("max disagreement {d:.2e}"),
            );
            let mut c = two_player(alpha, "usm_main", beta, Tiebreak::AgainstAttacker);
            c.horizon_heights = 1_000_000;
            c.num_seeds = 10;
            c.base_seed = base_seed(5);
            let (rewards, _) = rewards_and_pair_rates(&c)?;
            let (m, se) = mean_and_se(&rewards);
            rep.check(
                format!("({alpha}, {beta}) simulation"),
                within_sigmas(m, r.block_ratio, se),
                format!("chain {:.6} simulation {m:.6} se {se:.2e}", r.block_ratio),
            );
        }
    }
    Ok(rep)
}

fn thresholds() -> Result<CriterionReport> {
    let mut rep = CriterionReport::new(6);
    let a = alpha_star();
    let resid = alpha_star_polynomial(a);
    rep.check(
        "alpha_star",
        (a - tol::ALPHA_STAR).abs() < tol::ALPHA_STAR_DIGITS && resid.abs() < tol::QUARTIC_RESIDUAL,
        format!("{a:.10} residual {resid:.2e}"),
    );
    let golden = (3.0 - 5f64.sqrt()) / 2.0;
    let t = main_threshold(0.0)?;
    rep.check(
        "main_threshold(0)",
        (t - golden).abs() < tol::MAIN_THRESHOLD,
        format!("{t:.12} vs {golden:.12}"),
    );
    let s = sm_threshold(0.0)?;
    rep.check("sm_threshold(0)", s == 1.0 / 3.0, format!("{s}"));
    for (alpha, above) in [(0.34, true), (0.32, false)] {
        let mut c = two_player(alpha, "classic_sm", 0.0, Tiebreak::AgainstAttacker);
        c.horizon_heights = 1_000_000;
        c.base_seed = base_seed(6);
        let won = run_seeds(&c, &c.seeds(), |_, r| Ok(r.tallies.pairs_won_fraction()))?[0];
        let ok = if above { won > 1.0 - alpha } else { won < 1.0 - alpha };
        rep.check(
            format!("classic_sm pairs won at {alpha}"),
            ok,
            format!("{won:.6} vs 1 - alpha = {:.2}", 1.0 - alpha),
        );
    }
    Ok(rep)
}

/// Attacker chain blocks minus `charge` per chain height, one value per short
/// selfish-mining episode. Episodes cut off by the horizon are dropped.
fn short_sm_episode_values(alpha: f64, beta_prime: f64, charge: f64, seed: u64) -> Result<Vec<f64>> {
    let mut c = with_natural_pairs(two_player(alpha, "short_sm", 0.0, Tiebreak::AgainstAttacker), beta_prime);
    c.horizon_heights = 1_000_000;
    c.base_seed = seed;
    let rows = run_seeds(&c, &c.seeds(), |_, r| {
        let mut vals = Vec::with_capacity(r.report.episodes.len());
        for &(first, last) in &r.report.episodes {
            if last as usize > r.chain_creators.len() {
                continue;
            }
            let mine = (first..=last)
                .filter(|&h| r.chain_creators[h as usize - 1].is_attacker())
                .count() as f64;
            vals.push(mine - charge * (last - first + 1) as f64);
        }
        Ok(vals)
    })?;
    Ok(rows.into_iter().flatten().collect())
}

fn general_condition_check() -> Result<CriterionReport> {
    let mut rep = CriterionReport::new(7);
    let alpha = 0.382;
    let n = tol::GRID_POINTS;
    let (mut negative, mut worst, mut outside) = (Vec::new(), f64::INFINITY, 0);
    let mut exact_min = f64::INFINITY;
    for k in 0..n {
        let bp = k as f64 / n as f64;
        match general_condition(alpha, bp) {
            Ok(v) => {
                worst = worst.min(v);
                if v < 0.0 {
                    negative.push(bp);
                }
                exact_min = exact_min.min(general_condition_exact(alpha, bp)?);
            }
            Err(Error::Parameter(_)) => outside += 1,
            Err(e) => return Err(e),
        }
    }
    let range = match (negative.first(), negative.last()) {
        (Some(a), Some(b)) => format!(", negative for beta' in [{a:.4}, {b:.4}]"),
        _ => String::new(),
    };
    rep.check(
        "grid nonnegative",
        negative.is_empty(),
        format!(
            "{} of {} feasible points negative, minimum {worst:.3e}{range}; {outside} points have no attacker-only rounds",
            negative.len(),
            n - outside
        ),
    );
    rep.check(
        "grid nonnegative, exact charge",
        exact_min >= 0.0,
        format!("minimum {exact_min:.3e} with the honest share as the block charge"),
    );

    let golden = (3.0 - 5f64.sqrt()) / 2.0;
    let root = crate::analysis::bisect(|a| general_condition(a, 0.0).unwrap_or(f64::NAN), 0.2, 0.49, 1e-13)?;
    rep.check(
        "sign change at zero natural pairs",
        (root - golden).abs() < tol::SIGN_CHANGE,
        format!("{root:.10} vs {golden:.10}"),
    );

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(base_seed(7));
    let (mut checked, mut dev): (usize, f64) = (0, 0.0);
    while checked < 100 {
        let a: f64 = rng.gen_range(0.05..0.95);
        let b: f64 = rng.gen_range(0.0..0.9);
        let Ok(benchmark) = honest_reward_general(a, b) else { continue };
        let lhs = short_sm_expected_reward(a, b, benchmark)? - (1.0 - benchmark);
        dev = dev.max((lhs - condition_with_charge(a, b, benchmark)?).abs());
        checked += 1;
    }
    rep.check(
        "restated via honest benchmark",
        dev < tol::RESTATEMENT,
        format!("largest deviation {dev:.2e} over {checked} points"),
    );

    let (a, b) = (0.42, 0.1);
    let benchmark = honest_reward_general(a, b)?;
    let closed = short_sm_expected_reward(a, b, benchmark)?;
    let vals = short_sm_episode_values(a, b, benchmark, base_seed(7))?;
    let (m, se) = mean_and_se(&vals);
    rep.check(
        "short_sm episode value",
        within_sigmas(m, closed, se),
        format!("closed form {closed:.6}, simulation {m:.6} se {se:.2e} over {} episodes", vals.len()),
    );
    Ok(rep)
}

fn reduction() -> Result<CriterionReport> {
    let mut rep = CriterionReport::new(8);
    let hashrates = vec![0.35, 0.30, 0.20, 0.15];
    let latency = 0.8;
    let n_player = GameParams {
        setup: MinerSetup::NPlayer {
            hashrates: hashrates.clone(),
            latency,
        },
        horizon_heights: 10_000,
        seed: 0,
        honest_tiebreak: Tiebreak::AgainstAttacker,
    };
    let two = GameParams {
        setup: MinerSetup::TwoPlayer {
            dist: round_distribution(&hashrates, latency)?,
        },
        ..n_player.clone()
    };
    let seeds: Vec<u64> = (0..50).map(|k| base_seed(8) + k).collect();
    type Factory = fn() -> Box<dyn Strategy>;
    let cases: [(&str, Factory); 2] = [
        ("honest", || Box::new(Honest)),
        ("classic_sm", || Box::new(ClassicSm::default())),
    ];
    for (name, make) in cases {
        let r = couple_check(&n_player, &two, &seeds, make)?;
        let iso = r.seeds.iter().filter(|s| s.isomorphic).count();
        let eq = r.seeds.iter().filter(|s| s.rewards_equal).count();
        let first = r.seeds.iter().find(|s| !(s.isomorphic && s.rewards_equal));
        let detail = match first {
            None => format!("{iso}/{} isomorphic, {eq} equal rewards", r.seeds.len()),
            Some(s) => format!(
                "{iso}/{} isomorphic, {eq} equal rewards; seed {} diverges at round {:?}",
                r.seeds.len(),
                s.seed,
                s.first_divergent_round
            ),
        };
        rep.check(name, r.all_equal(), detail);
    }
    Ok(rep)
}

fn conservation() -> Result<CriterionReport> {
    let mut rep = CriterionReport::new(9);
    let mut cases = vec![
        two_player(0.3, "honest", 0.0, Tiebreak::AgainstAttacker),
        two_player(0.3, "strong_sm", 0.0, Tiebreak::FavorAttacker),
        two_player(0.4, "classic_sm", 0.0, Tiebreak::AgainstAttacker),
        two_player(0.4, "classic_sm", 0.0, Tiebreak::Mixed { gamma: 0.5 }),
        with_natural_pairs(two_player(0.42, "short_sm", 0.0, Tiebreak::AgainstAttacker), 0.1),
        two_player(0.4, "usm_warmup", 0.3, Tiebreak::FavorAttacker),
        two_player(0.42, "usm_main", 0.1, Tiebreak::AgainstAttacker),
        with_natural_pairs(two_player(0.45, "usm_general", 0.07, Tiebreak::AgainstAttacker), 0.05),
    ];
    cases.push(ExperimentConfig {
        hashrates: Some(vec![0.35, 0.30, 0.20, 0.15]),
        latency: 0.8,
        ..Default::default()
    });
    for mut c in cases {
        c.horizon_heights = 100_000;
        c.num_seeds = 8;
        c.base_seed = base_seed(9);
        let label = match &c.hashrates {
            Some(h) => format!("{} {}-player", c.strategy, h.len()),
            None => format!("{} {:?}", c.strategy, c.tiebreak),
        };
        // run_seeds audits block counts and broadcast order on every run.
        let rows = run_seeds(&c, &c.seeds(), |_, r| {
            let mut p = ProductionCheck::default();
            p.add(r);
            Ok((p, r.states.pair_count() as u64))
        });
        let rows = match rows {
            Ok(rows) => rows,
            Err(e @ Error::ProtocolViolation(_)) => {
                rep.check(format!("{label} audits"), false, e.to_string());
                continue;
            }
            Err(e) => return Err(e),
        };
        rep.check(format!("{label} audits"), true, format!("{} runs", rows.len()));
        let mut pooled = ProductionCheck::default();
        let mut pairs = 0;
        for (p, k) in &rows {
            pooled.rounds += p.rounds;
            pooled.blocks += p.blocks;
            pooled.attacker_blocks += p.attacker_blocks;
            pairs += k;
        }
        let pooled = pooled.finish_for(&c.setup()?)?;
        let heights = c.horizon_heights as u64 * rows.len() as u64;
        let mut detail = format!("deviation {:.1} within {:.1}", pooled.deviation, pooled.bound);
        if c.strategy.starts_with("usm") {
            let beta = pairs as f64 / heights as f64;
            detail.push_str(&format!(
                "; {:.5} attacker blocks per height, alpha(1+beta) = {:.5}",
                pooled.rate_per_height(heights),
                c.effective_alpha()? * (1.0 + beta)
            ));
        }
        rep.check(format!("{label} production"), pooled.ok(), detail);
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_and_numbers_resolve() {
        for (k, (n, id, _)) in CRITERIA.iter().enumerate() {
            assert_eq!(*n as usize, k + 1);
            assert_eq!(CriterionReport::new(*n).id, *id);
        }
        assert!(matches!(run_criterion("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn summary_names_failed_checks() {
        let mut r = CriterionReport::new(6);
        r.check("a", true, "");
        assert_eq!(r.summary_line(), "criterion 6 thresholds: PASS");
        r.check("b", false, "");
        assert_eq!(r.summary_line(), "criterion 6 thresholds: FAIL (failed: b)");
    }

    #[test]
    fn thresholds_criterion_passes() {
        let r = run_criterion("thresholds").unwrap();
        assert!(r.passed(), "{}", r.render());
    }
}
