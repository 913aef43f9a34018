//! Serializable run descriptions and the strategy factory.

use crate::engine::{round_distribution, GameParams, MinerSetup, RoundDistribution, Tiebreak};
use crate::error::{Error, Result};
use crate::strategies::{ClassicSm, Honest, ShortSm, Strategy, StrongSm};
use crate::usm::{LabeledSm, WarmupSm};
use serde::{Deserialize, Serialize};

pub const STRATEGIES: [&str; 7] = [
    "honest",
    "strong_sm",
    "classic_sm",
    "short_sm",
    "usm_warmup",
    "usm_main",
    "usm_general",
];

/// A complete run description. Missing fields take the defaults shown by
/// `ExperimentConfig::default()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Attacker hashrate share.
    pub alpha: f64,
    /// Per-unit latency; zero means one block per round.
    pub latency: f64,
    /// Round probabilities given directly, overriding `alpha` and `latency`.
    pub alpha_prime: Option<f64>,
    pub beta_prime: Option<f64>,
    /// Full hashrate vector (attacker first) for n-player games.
    pub hashrates: Option<Vec<f64>>,
    /// Target Pair rate of the labeling strategies.
    pub beta_target: f64,
    /// Target Pair rate as a fraction of the strategy's upper validity bound;
    /// overrides `beta_target` when set.
    pub beta_margin: Option<f64>,
    pub strategy: String,
    pub tiebreak: Tiebreak,
    pub horizon_heights: u32,
    pub num_seeds: u32,
    pub base_seed: u64,
    pub significance: f64,
    pub belief_cap: usize,
    pub belief_precision: f64,
    /// Tie-win share used by the Markov chain's race rows.
    pub gamma: f64,
    pub markov_cap: u32,
    pub markov_tol: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            alpha: 0.3,
            latency: 0.0,
            alpha_prime: None,
            beta_prime: None,
            hashrates: None,
            beta_target: 0.0,
            beta_margin: None,
            strategy: "honest".into(),
            tiebreak: Tiebreak::AgainstAttacker,
            horizon_heights: 100_000,
            num_seeds: 1,
            base_seed: 0,
            significance: 0.05,
            belief_cap: 64,
            belief_precision: 1e-9,
            gamma: 0.0,
            markov_cap: 100,
            markov_tol: 1e-13,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(text)?;
        Ok(c)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn setup(&self) -> Result<MinerSetup> {
        match (&self.hashrates, self.alpha_prime, self.beta_prime) {
            (Some(_), Some(_), _) | (Some(_), _, Some(_)) => Err(Error::Config(
                "give either hashrates or round probabilities, not both".into(),
            )),
            (Some(h), None, None) => {
                round_distribution(h, self.latency)?;
                Ok(MinerSetup::NPlayer {
                    hashrates: h.clone(),
                    latency: self.latency,
                })
            }
            (None, Some(a), Some(b)) => Ok(MinerSetup::TwoPlayer {
                dist: RoundDistribution::new(a, b)?,
            }),
            (None, None, None) => Ok(MinerSetup::TwoPlayer {
                dist: round_distribution(&[self.alpha, 1.0 - self.alpha], self.latency)?,
            }),
            _ => Err(Error::Config(
                "alpha_prime and beta_prime must be given together".into(),
            )),
        }
    }

    pub fn distribution(&self) -> Result<RoundDistribution> {
        self.setup()?.distribution()
    }

    /// Hashrate share implied by the round probabilities.
    pub fn effective_alpha(&self) -> Result<f64> {
        let d = self.distribution()?;
        Ok(d.attacker_share())
    }

    pub fn game_params(&self, seed: u64) -> Result<GameParams> {
        Ok(GameParams {
            setup: self.setup()?,
            horizon_heights: self.horizon_heights,
            seed,
            honest_tiebreak: self.tiebreak,
        })
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.num_seeds as u64).map(|k| self.base_seed.wrapping_add(k)).collect()
    }

    /// Target Pair rate after applying `beta_margin`.
    pub fn beta(&self) -> Result<f64> {
        let Some(margin) = self.beta_margin else {
            return Ok(self.beta_target);
        };
        if !(margin > 0.0 && margin <= 1.0) {
            return Err(Error::Config(format!("beta_margin {margin} not in (0, 1]")));
        }
        let dist = self.distribution()?;
        let bound = match self.strategy.as_str() {
            "usm_warmup" => dist.attacker_share(),
            "usm_main" => dist.attacker_share().powi(2),
            "usm_general" => dist.alpha_prime * dist.alpha_prime / 2.0,
            other => {
                return Err(Error::Config(format!(
                    "beta_margin does not apply to strategy {other:?}"
                )))
            }
        };
        Ok(bound * margin)
    }

    pub fn make_strategy(&self) -> Result<Box<dyn Strategy>> {
        let dist = self.distribution()?;
        let alpha = dist.attacker_share();
        let beta = self.beta()?;
        Ok(match self.strategy.as_str() {
            "honest" => Box::new(Honest),
            "strong_sm" => Box::new(StrongSm::default()),
            "classic_sm" => Box::new(ClassicSm::default()),
            "short_sm" => Box::new(ShortSm::default()),
            "usm_warmup" => {
                require_no_natural_pairs(&dist, "usm_warmup")?;
                Box::new(WarmupSm::new(alpha, beta, self.tiebreak)?)
            }
            "usm_main" => {
                require_no_natural_pairs(&dist, "usm_main")?;
                Box::new(LabeledSm::main(alpha, beta, self.tiebreak)?)
            }
            "usm_general" => Box::new(LabeledSm::general(
                dist,
                beta,
                self.tiebreak,
                self.belief_cap,
                self.belief_precision,
            )?),
            other => {
                return Err(Error::Config(format!(
                    "unknown strategy {other:?}; expected one of {}",
                    STRATEGIES.join(", ")
                )))
            }
        })
    }

    /// Checks everything a run needs before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.horizon_heights == 0 {
            return Err(Error::Config("horizon_heights must be positive".into()));
        }
        if self.num_seeds == 0 {
            return Err(Error::Config("num_seeds must be positive".into()));
        }
        if !(self.significance > 0.0 && self.significance < 1.0) {
            return Err(Error::Config("significance must lie in (0, 1)".into()));
        }
        if let Tiebreak::Mixed { gamma } = self.tiebreak {
            if !(0.0..=1.0).contains(&gamma) {
                return Err(Error::Config("tiebreak gamma must lie in [0, 1]".into()));
            }
        }
        self.make_strategy().map(|_| ())
    }
}

fn require_no_natural_pairs(dist: &RoundDistribution, name: &str) -> Result<()> {
    if dist.beta_prime > 0.0 {
        return Err(Error::Parameter(format!(
            "{name} needs one block per round; use usm_general with natural pairs"
        )));
    }
    Ok(())
}
