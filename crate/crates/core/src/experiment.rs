//! Seed fan-out, per-run summaries and CSV emission.

use crate::config::ExperimentConfig;
use crate::engine::{audit_view, run_game, AuditReport, GameResult, MinerSetup, RoundDistribution};
use crate::error::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// One CSV row per finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub strategy: String,
    pub alpha: f64,
    pub beta: f64,
    pub reward: f64,
    pub pair_rate: f64,
    pub pairs_won_fraction: f64,
    pub solo_pairs_won_fraction: f64,
}

impl RunSummary {
    pub fn from_result(config: &ExperimentConfig, seed: u64, r: &GameResult) -> Result<Self> {
        Ok(RunSummary {
            seed,
            strategy: config.strategy.clone(),
            alpha: config.effective_alpha()?,
            beta: config.beta()?,
            reward: r.reward(),
            pair_rate: r.pair_rate(),
            pairs_won_fraction: r.tallies.pairs_won_fraction(),
            solo_pairs_won_fraction: r.tallies.solo_pairs_won_fraction(),
        })
    }
}

/// Attacker production over a batch: created blocks against their expected
/// share of all blocks. Each round contributes an independent, mean-zero term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ProductionCheck {
    pub rounds: u64,
    pub blocks: u64,
    pub attacker_blocks: u64,
    pub deviation: f64,
    pub bound: f64,
}

impl ProductionCheck {
    pub fn add(&mut self, r: &GameResult) {
        self.rounds += r.production.rounds;
        self.blocks += r.production.blocks;
        self.attacker_blocks += r.production.attacker_blocks;
    }

    /// Fills the deviation and its three-sigma bound for a two-player game.
    pub fn finish(mut self, dist: &RoundDistribution) -> Self {
        let share = dist.attacker_share();
        self.deviation = self.attacker_blocks as f64 - share * self.blocks as f64;
        self.bound = 3.0 * (self.rounds as f64 * dist.production_variance()).sqrt();
        self
    }

    /// Attacker blocks against rounds in which the attacker mines. Used when
    /// several honest miners can produce blocks in one round; `dist` is the
    /// reduced distribution.
    pub fn finish_by_rounds(mut self, dist: &RoundDistribution) -> Self {
        let mines = dist.alpha_prime + dist.beta_prime;
        self.deviation = self.attacker_blocks as f64 - mines * self.rounds as f64;
        self.bound = 3.0 * (self.rounds as f64 * mines * (1.0 - mines)).sqrt();
        self
    }

    /// Picks the statistic that matches the setup.
    pub fn finish_for(self, setup: &MinerSetup) -> Result<Self> {
        let dist = setup.distribution()?;
        Ok(if setup.is_two_player() {
            self.finish(&dist)
        } else {
            self.finish_by_rounds(&dist)
        })
    }

    pub fn ok(&self) -> bool {
        self.deviation.abs() <= self.bound
    }

    /// Attacker blocks per finalized height.
    pub fn rate_per_height(&self, heights: u64) -> f64 {
        self.attacker_blocks as f64 / heights as f64
    }
}

/// Runs every seed, applies `f` to each result and returns the values in seed
/// order. Every run is audited; a failed audit aborts the batch.
pub fn run_seeds<T, F>(config: &ExperimentConfig, seeds: &[u64], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, &GameResult) -> Result<T> + Sync,
{
    config.validate()?;
    let two_player = config.setup()?.is_two_player();
    seeds
        .par_iter()
        .map(|&seed| {
            let params = config.game_params(seed)?;
            let mut strategy = config.make_strategy()?;
            let result = run_game(&params, strategy.as_mut())?;
            check_audit(&audit_view(&result, two_player), seed)?;
            f(seed, &result)
        })
        .collect()
}

pub fn check_audit(a: &AuditReport, seed: u64) -> Result<()> {
    if a.ok() {
        Ok(())
    } else {
        Err(Error::ProtocolViolation(format!(
            "seed {seed}: audit failed: {}",
            a.first_violation.clone().unwrap_or_default()
        )))
    }
}

/// Summaries of all configured seeds plus the pooled production check.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(Vec<RunSummary>, ProductionCheck)> {
    let rows = run_seeds(config, &config.seeds(), |seed, r| {
        let mut p = ProductionCheck::default();
        p.add(r);
        Ok((RunSummary::from_result(config, seed, r)?, p))
    })?;
    let mut prod = ProductionCheck::default();
    let mut out = Vec::with_capacity(rows.len());
    for (s, p) in rows {
        prod.rounds += p.rounds;
        prod.blocks += p.blocks;
        prod.attacker_blocks += p.attacker_blocks;
        out.push(s);
    }
    Ok((out, prod.finish_for(&config.setup()?)?))
}

pub fn write_summaries_csv<W: Write>(rows: &[RunSummary], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_summaries_jsonl<W: Write>(rows: &[RunSummary], mut w: W) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Mean and standard error of the mean.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_configs_give_identical_csv() {
        let c = ExperimentConfig {
            alpha: 0.35,
            strategy: "classic_sm".into(),
            horizon_heights: 5_000,
            num_seeds: 3,
            base_seed: 42,
            ..Default::default()
        };
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_summaries_csv(&run_experiment(&c).unwrap().0, &mut a).unwrap();
        write_summaries_csv(&run_experiment(&c).unwrap().0, &mut b).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with(
            "seed,strategy,alpha,beta,reward,pair_rate,pairs_won_fraction,solo_pairs_won_fraction\n42,classic_sm,"
        ));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn production_check_holds_for_honest_runs() {
        let c = ExperimentConfig {
            alpha_prime: Some(0.3),
            beta_prime: Some(0.1),
            horizon_heights: 20_000,
            num_seeds: 4,
            ..Default::default()
        };
        let (_, p) = run_experiment(&c).unwrap();
        assert!(p.ok(), "{p:?}");
        let c = ExperimentConfig {
            hashrates: Some(vec![0.35, 0.3, 0.2, 0.15]),
            latency: 0.8,
            horizon_heights: 20_000,
            num_seeds: 4,
            ..Default::default()
        };
        let (_, p) = run_experiment(&c).unwrap();
        assert!(p.ok(), "{p:?}");
    }

    #[test]
    fn mean_and_se_by_hand() {
        let (m, se) = mean_and_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }
}
