//! Labeling strategy for an honest tiebreak that favors the attacker.

use super::{flip, invariant, release_ready, Intent, Withheld};
use crate::engine::{BlockTree, RoundEvent, RoundOutcome, Tiebreak};
use crate::error::{Error, Result};
use crate::model::{BlockId, HeightState};
use crate::strategies::{Strategy, StrategyReport};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

/// Labels each fresh attacker block Pair with a bias that keeps every
/// height Pair with probability `beta`.
#[derive(Debug, Clone)]
pub struct WarmupSm {
    alpha: f64,
    beta: f64,
    /// Chance the next height's first block is the attacker's.
    attacker_first: f64,
    hidden: VecDeque<Withheld>,
    labels: Vec<Option<HeightState>>,
    report: StrategyReport,
}

impl WarmupSm {
    pub fn new(alpha: f64, beta: f64, tiebreak: Tiebreak) -> Result<Self> {
        if tiebreak != Tiebreak::FavorAttacker {
            return Err(Error::Parameter(
                "warmup strategy needs honest tiebreak favoring the attacker".into(),
            ));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Parameter(format!("alpha {alpha} not in (0, 1)")));
        }
        if !(0.0..=alpha).contains(&beta) {
            return Err(Error::Validity(format!("beta {beta} not in [0, alpha]")));
        }
        Ok(WarmupSm {
            alpha,
            beta,
            attacker_first: alpha,
            hidden: VecDeque::new(),
            labels: Vec::new(),
            report: StrategyReport::default(),
        })
    }

    fn determined(&mut self, state: HeightState) {
        self.labels.push(Some(state));
        let pairs = self.hidden.iter().filter(|w| w.intent == Intent::Pair).count() as i32;
        self.attacker_first = 1.0 - (1.0 - self.alpha).powi(pairs + 1);
    }
}

impl Strategy for WarmupSm {
    fn choose_parent(&mut self, tree: &BlockTree) -> BlockId {
        match self.hidden.back() {
            Some(w) => w.id,
            None => tree.attacker_view_tip(None),
        }
    }

    fn react(
        &mut self,
        event: &RoundEvent,
        tree: &BlockTree,
        rng: &mut ChaCha8Rng,
        out: &mut Vec<BlockId>,
    ) -> Result<()> {
        let next = self.labels.len() as u32 + 1;
        match event.outcome() {
            RoundOutcome::AttackerOnly => {
                let id = event.attacker_block.expect("attacker block");
                let h = tree.block(id).height;
                invariant(h == next, || format!("attacker block at {h}, expected {next}"))?;
                let bias = self.beta / self.attacker_first;
                let pair = flip(rng, bias)?;
                self.report.record_bias(bias);
                let intent = if pair { Intent::Pair } else { Intent::Single };
                self.hidden.push_back(Withheld { id, height: h, intent });
                self.determined(if pair { HeightState::Pair } else { HeightState::Single });
            }
            RoundOutcome::HonestOnly => {
                let h = tree.block(event.honest_blocks[0]).height;
                if h == next {
                    invariant(self.hidden.is_empty(), || "fresh honest height with hidden blocks".into())?;
                    self.determined(HeightState::Single);
                } else {
                    let front = self.hidden.front();
                    invariant(
                        front.is_some_and(|w| w.intent == Intent::Pair && w.height == h),
                        || format!("honest block at {h} does not match the lowest hidden pair"),
                    )?;
                }
            }
            RoundOutcome::Both => {
                return Err(Error::Parameter(
                    "warmup strategy assumes no simultaneous blocks".into(),
                ))
            }
        }
        release_ready(&mut self.hidden, tree, out);
        Ok(())
    }

    fn flush(&mut self, tree: &BlockTree, out: &mut Vec<BlockId>) {
        release_ready(&mut self.hidden, tree, out);
        self.hidden.clear();
    }

    fn is_sp_simple(&self) -> bool {
        true
    }

    fn name(&self) -> &'static str {
        "usm_warmup"
    }

    fn report(&self) -> StrategyReport {
        let mut r = self.report.clone();
        r.labels = Some(self.labels.clone());
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run_game, GameParams, MinerSetup, RoundDistribution};
    use crate::model::ChainRule::FavorAttacker;
    use crate::strategies::tests::Script;
    use RoundOutcome::{AttackerOnly as A, HonestOnly as H};

    #[test]
    fn probabilities_follow_hidden_pairs() {
        let mut st = WarmupSm::new(0.4, 0.4, Tiebreak::FavorAttacker).unwrap();
        let mut s = Script::new(FavorAttacker);
        // Bias is one at an empty stack, so the first block is Pair.
        assert!(s.step(&mut st, A).is_empty());
        assert!((st.attacker_first - (1.0 - 0.6f64.powi(2))).abs() < 1e-12);
        s.step(&mut st, A);
        let out = s.step(&mut st, H);
        assert_eq!(s.heights(&out)[0], 1);
    }

    #[test]
    fn honest_fresh_height_is_single() {
        let mut st = WarmupSm::new(0.3, 0.1, Tiebreak::FavorAttacker).unwrap();
        let mut s = Script::new(FavorAttacker);
        s.step(&mut st, H);
        assert_eq!(st.labels, vec![Some(HeightState::Single)]);
        assert!((st.attacker_first - 0.3).abs() < 1e-15);
    }

    #[test]
    fn rejects_wrong_tiebreak_and_beta() {
        assert!(WarmupSm::new(0.3, 0.1, Tiebreak::AgainstAttacker).is_err());
        assert!(WarmupSm::new(0.3, 0.31, Tiebreak::FavorAttacker).is_err());
    }

    #[test]
    fn pair_rate_hits_target() {
        let mut st = WarmupSm::new(0.3, 0.2, Tiebreak::FavorAttacker).unwrap();
        let params = GameParams {
            setup: MinerSetup::TwoPlayer { dist: RoundDistribution::zero_latency(0.3).unwrap() },
            horizon_heights: 50_000,
            seed: 5,
            honest_tiebreak: Tiebreak::FavorAttacker,
        };
        let r = run_game(&params, &mut st).unwrap();
        assert!((r.pair_rate() - 0.2).abs() < 0.01, "{}", r.pair_rate());
    }
}
