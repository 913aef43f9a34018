//! Undetectable selfish mining against an honest tiebreak that favors
//! honest blocks, with or without natural pairs.

use super::kernel::{safe_probability_zero_latency, Belief, Config};
use super::{flip, invariant, release_ready, Intent, Withheld};
use crate::engine::{BlockTree, RoundDistribution, RoundEvent, RoundOutcome, Tiebreak};
use crate::error::{Error, Result};
use crate::model::{BlockId, HeightState};
use crate::strategies::{Strategy, StrategyReport};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

/// Round-level situation of the attacker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    /// `pairs` hidden Pair blocks; the next height is fresh.
    Fresh { pairs: u32 },
    /// The last fixed height is a hidden Pair; nothing above it.
    PairOnTop { pairs: u32 },
    /// Public race at the top height, nothing hidden.
    Race,
    /// A hidden block of unknown safety sits above the top Pair.
    Undecided { pairs: u32 },
}

#[derive(Debug, Clone)]
enum BiasRule {
    /// Exact attacker configuration, no natural pairs.
    Exact { alpha: f64 },
    /// Conditional on the public states only.
    Filtered(Box<Belief>),
}

/// Labels each height Pair with probability `beta` independently of the past.
#[derive(Debug, Clone)]
pub struct LabeledSm {
    beta: f64,
    rule: BiasRule,
    mode: Mode,
    config: Config,
    bias: f64,
    hidden: VecDeque<Withheld>,
    labels: Vec<Option<HeightState>>,
    report: StrategyReport,
}

impl LabeledSm {
    /// Variant for `beta_prime = 0`, biasing by the exact configuration.
    pub fn main(alpha: f64, beta: f64, tiebreak: Tiebreak) -> Result<Self> {
        if tiebreak != Tiebreak::AgainstAttacker {
            return Err(Error::Parameter(
                "labeled strategy needs honest tiebreak against the attacker".into(),
            ));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Parameter(format!("alpha {alpha} not in (0, 1)")));
        }
        if !(0.0..=alpha * alpha).contains(&beta) {
            return Err(Error::Validity(format!(
                "beta {beta} not in [0, alpha^2 = {}]",
                alpha * alpha
            )));
        }
        Ok(Self::start(beta, BiasRule::Exact { alpha }))
    }

    /// Variant for any round distribution, biasing by the public-state belief.
    pub fn general(
        dist: RoundDistribution,
        beta: f64,
        tiebreak: Tiebreak,
        cap: usize,
        precision: f64,
    ) -> Result<Self> {
        if tiebreak != Tiebreak::AgainstAttacker {
            return Err(Error::Parameter(
                "labeled strategy needs honest tiebreak against the attacker".into(),
            ));
        }
        dist.validate()?;
        let upper = dist.alpha_prime * dist.alpha_prime / 2.0;
        if !(beta >= dist.beta_prime && beta <= upper) {
            return Err(Error::Validity(format!(
                "beta {beta} not in [{}, {upper}]",
                dist.beta_prime
            )));
        }
        let belief = Belief::new(dist, cap, precision)?;
        Ok(Self::start(beta, BiasRule::Filtered(Box::new(belief))))
    }

    fn start(beta: f64, rule: BiasRule) -> Self {
        let mut s = LabeledSm {
            beta,
            rule,
            mode: Mode::Fresh { pairs: 0 },
            config: Config::Settled { pairs: 0 },
            bias: 0.0,
            hidden: VecDeque::new(),
            labels: Vec::new(),
            report: StrategyReport::default(),
        };
        s.bias = s.next_bias();
        s
    }

    fn next_bias(&self) -> f64 {
        match &self.rule {
            BiasRule::Exact { alpha } => {
                let safe = safe_probability_zero_latency(self.config, *alpha);
                if safe > 0.0 {
                    self.beta / safe
                } else {
                    f64::NAN
                }
            }
            BiasRule::Filtered(b) => b.bias(self.beta),
        }
    }

    /// Height whose state is fixed next.
    fn next_height(&self) -> u32 {
        self.labels.len() as u32 + 1
    }

    /// Records the next height's state and the configuration it leaves.
    fn settle(&mut self, state: HeightState, config: Config) -> Result<()> {
        self.labels.push(Some(state));
        if let BiasRule::Filtered(b) = &mut self.rule {
            b.observe(state, self.bias)?;
        }
        self.config = config;
        self.bias = self.next_bias();
        Ok(())
    }

    fn coin(&mut self, rng: &mut ChaCha8Rng) -> Result<bool> {
        let bias = self.bias;
        let heads = flip(rng, bias)?;
        self.report.record_bias(bias);
        Ok(heads)
    }

    fn push(&mut self, id: BlockId, height: u32, intent: Intent) {
        self.hidden.push_back(Withheld { id, height, intent });
    }

    fn check_honest_at_lowest_pair(&self, honest_height: u32) -> Result<()> {
        let front = self.hidden.front();
        invariant(
            front.is_some_and(|w| w.intent == Intent::Pair && w.height == honest_height),
            || format!("honest block at {honest_height} does not match the lowest hidden pair"),
        )
    }

    fn check_at(&self, height: u32, expected: u32, what: &str) -> Result<()> {
        invariant(height == expected, || {
            format!("{what} block at height {height}, expected {expected}")
        })
    }

    /// The undecided block on top is resolved by a coin, then the attacker's
    /// new block above it becomes the next candidate.
    fn resolve_undecided(
        &mut self,
        pairs: u32,
        block: BlockId,
        height: u32,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let top = self.hidden.back_mut().expect("undecided block is hidden");
        debug_assert_eq!(top.intent, Intent::Undecided);
        if self.coin(rng)? {
            self.hidden.back_mut().unwrap().intent = Intent::Pair;
            self.push(block, height, Intent::Undecided);
            self.settle(HeightState::Pair, Config::Undecided { pairs: pairs + 1 })?;
            self.mode = Mode::Undecided { pairs: pairs + 1 };
        } else {
            self.hidden.back_mut().unwrap().intent = Intent::Single;
            self.settle(HeightState::Single, Config::JustSettled { pairs })?;
            if self.coin(rng)? {
                self.push(block, height, Intent::Pair);
                self.settle(HeightState::Pair, Config::PairOnTop { pairs: pairs + 1 })?;
                self.mode = Mode::PairOnTop { pairs: pairs + 1 };
            } else {
                self.push(block, height, Intent::Single);
                self.settle(HeightState::Single, Config::Settled { pairs })?;
                self.mode = Mode::Fresh { pairs };
            }
        }
        Ok(())
    }

    fn step(
        &mut self,
        outcome: RoundOutcome,
        own: Option<(BlockId, u32)>,
        honest: Option<u32>,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let next = self.next_height();
        match (self.mode, outcome) {
            (Mode::Fresh { pairs: 0 }, RoundOutcome::HonestOnly) => {
                self.check_at(honest.unwrap(), next, "honest")?;
                self.settle(HeightState::Single, Config::Settled { pairs: 0 })?;
            }
            (Mode::Fresh { pairs }, RoundOutcome::HonestOnly) => {
                self.check_honest_at_lowest_pair(honest.unwrap())?;
                self.mode = Mode::Fresh { pairs: pairs - 1 };
            }
            (Mode::Fresh { pairs }, RoundOutcome::AttackerOnly) => {
                let (id, h) = own.unwrap();
                self.check_at(h, next, "attacker")?;
                if self.coin(rng)? {
                    self.push(id, h, Intent::Pair);
                    self.settle(HeightState::Pair, Config::PairOnTop { pairs: pairs + 1 })?;
                    self.mode = Mode::PairOnTop { pairs: pairs + 1 };
                } else {
                    self.push(id, h, Intent::Single);
                    self.settle(HeightState::Single, Config::Settled { pairs })?;
                }
            }
            (Mode::Fresh { pairs: 0 }, RoundOutcome::Both) => {
                let (id, h) = own.unwrap();
                self.check_at(h, next, "attacker")?;
                self.check_at(honest.unwrap(), next, "honest")?;
                self.push(id, h, Intent::Pair);
                self.settle(HeightState::Pair, Config::Race)?;
                self.mode = Mode::Race;
            }
            (Mode::Fresh { pairs }, RoundOutcome::Both) => {
                let (id, h) = own.unwrap();
                self.check_at(h, next, "attacker")?;
                self.check_honest_at_lowest_pair(honest.unwrap())?;
                if self.coin(rng)? {
                    self.push(id, h, Intent::Pair);
                    self.settle(HeightState::Pair, Config::PairOnTop { pairs })?;
                    self.mode = Mode::PairOnTop { pairs };
                } else {
                    self.push(id, h, Intent::Single);
                    self.settle(HeightState::Single, Config::Settled { pairs: pairs - 1 })?;
                    self.mode = Mode::Fresh { pairs: pairs - 1 };
                }
            }
            (Mode::PairOnTop { pairs }, RoundOutcome::HonestOnly) => {
                self.check_honest_at_lowest_pair(honest.unwrap())?;
                self.mode = if pairs == 1 {
                    Mode::Race
                } else {
                    Mode::PairOnTop { pairs: pairs - 1 }
                };
            }
            (Mode::PairOnTop { pairs }, RoundOutcome::AttackerOnly) => {
                let (id, h) = own.unwrap();
                self.check_at(h, next, "attacker")?;
                self.push(id, h, Intent::Undecided);
                self.mode = Mode::Undecided { pairs };
            }
            (Mode::PairOnTop { pairs }, RoundOutcome::Both) => {
                let (id, h) = own.unwrap();
                self.check_at(h, next, "attacker")?;
                self.check_honest_at_lowest_pair(honest.unwrap())?;
                if pairs == 1 {
                    // Pivotal: the honest block matches the top pair and this
                    // block wins outright.
                    self.push(id, h, Intent::Single);
                    self.settle(HeightState::Single, Config::Settled { pairs: 0 })?;
                    self.mode = Mode::Fresh { pairs: 0 };
                } else {
                    self.push(id, h, Intent::Undecided);
                    self.mode = Mode::Undecided { pairs: pairs - 1 };
                }
            }
            (Mode::Race, RoundOutcome::HonestOnly) => {
                self.check_at(honest.unwrap(), next, "honest")?;
                self.settle(HeightState::Single, Config::Settled { pairs: 0 })?;
                self.mode = Mode::Fresh { pairs: 0 };
            }
            (Mode::Race, RoundOutcome::AttackerOnly) => {
                let (id, h) = own.unwrap();
                self.check_at(h, next, "attacker")?;
                self.push(id, h, Intent::Single);
                self.settle(HeightState::Single, Config::Settled { pairs: 0 })?;
                self.mode = Mode::Fresh { pairs: 0 };
            }
            (Mode::Race, RoundOutcome::Both) => {
                let (id, h) = own.unwrap();
                self.check_at(h, next, "attacker")?;
                self.check_at(honest.unwrap(), next, "honest")?;
                self.push(id, h, Intent::Pair);
                self.settle(HeightState::Pair, Config::Race)?;
            }
            (Mode::Undecided { pairs }, RoundOutcome::HonestOnly) => {
                self.check_honest_at_lowest_pair(honest.unwrap())?;
                if pairs == 1 {
                    // The undecided block becomes pivotal once the last pair is matched.
                    self.hidden.back_mut().unwrap().intent = Intent::Single;
                    self.settle(HeightState::Single, Config::Settled { pairs: 0 })?;
                    self.mode = Mode::Fresh { pairs: 0 };
                } else {
                    self.mode = Mode::Undecided { pairs: pairs - 1 };
                }
            }
            (Mode::Undecided { pairs }, RoundOutcome::AttackerOnly) => {
                let (id, h) = own.unwrap();
                self.check_at(h, next + 1, "attacker")?;
                self.resolve_undecided(pairs, id, h, rng)?;
            }
            (Mode::Undecided { pairs }, RoundOutcome::Both) => {
                let (id, h) = own.unwrap();
                self.check_at(h, next + 1, "attacker")?;
                self.check_honest_at_lowest_pair(honest.unwrap())?;
                self.resolve_undecided(pairs - 1, id, h, rng)?;
            }
        }
        Ok(())
    }

    fn hidden_pairs(&self) -> u32 {
        self.hidden.iter().filter(|w| w.intent == Intent::Pair).count() as u32
    }
}

impl Strategy for LabeledSm {
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
        let own = event.attacker_block.map(|id| (id, tree.block(id).height));
        let honest = event.honest_blocks.first().map(|&id| tree.block(id).height);
        invariant(
            event.honest_blocks.iter().all(|&id| Some(tree.block(id).height) == honest),
            || "honest blocks of one round at different heights".into(),
        )?;
        self.step(event.outcome(), own, honest, rng)?;
        release_ready(&mut self.hidden, tree, out);
        let expected = match self.mode {
            Mode::Fresh { pairs } | Mode::PairOnTop { pairs } | Mode::Undecided { pairs } => pairs,
            Mode::Race => 0,
        };
        invariant(self.hidden_pairs() == expected, || {
            format!("{} hidden pairs in mode {:?}", self.hidden_pairs(), self.mode)
        })
    }

    fn flush(&mut self, tree: &BlockTree, out: &mut Vec<BlockId>) {
        release_ready(&mut self.hidden, tree, out);
        self.hidden.clear();
    }

    fn is_sp_simple(&self) -> bool {
        matches!(self.rule, BiasRule::Exact { .. })
    }

    fn name(&self) -> &'static str {
        match self.rule {
            BiasRule::Exact { .. } => "usm_main",
            BiasRule::Filtered(_) => "usm_general",
        }
    }

    fn report(&self) -> StrategyReport {
        let mut r = self.report.clone();
        r.labels = Some(self.labels.clone());
        if let BiasRule::Filtered(b) = &self.rule {
            r.belief_epsilon = Some(b.worst_step_loss());
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run_game, GameParams, MinerSetup};
    use crate::model::ChainRule::AgainstAttacker;
    use crate::strategies::tests::Script;
    use RoundOutcome::{AttackerOnly as A, Both as B, HonestOnly as H};

    fn forced(beta: f64) -> LabeledSm {
        LabeledSm::main(0.45, beta, Tiebreak::AgainstAttacker).unwrap()
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(LabeledSm::main(0.3, 0.1, Tiebreak::AgainstAttacker).is_err());
        assert!(LabeledSm::main(0.3, 0.05, Tiebreak::FavorAttacker).is_err());
        let d = RoundDistribution::new(0.3, 0.1).unwrap();
        assert!(LabeledSm::general(d, 0.05, Tiebreak::AgainstAttacker, 64, 1e-9).is_err());
        assert!(LabeledSm::general(d, 0.1, Tiebreak::AgainstAttacker, 64, 1e-9).is_err());
        let d = RoundDistribution::new(0.5, 0.1).unwrap();
        assert!(LabeledSm::general(d, 0.11, Tiebreak::AgainstAttacker, 64, 1e-9).is_ok());
    }

    #[test]
    fn zero_beta_never_withholds_past_a_height() {
        let mut s = Script::new(AgainstAttacker);
        let mut st = forced(0.0);
        for o in [A, H, A, A, H, A] {
            let out = s.step(&mut st, o);
            assert_eq!(out.len(), o.attacker_mines() as usize);
        }
        assert!(st.hidden.is_empty());
    }

    #[test]
    fn pair_released_on_match_and_single_above_follows() {
        // Force every coin: bias 1 at the first height makes it Pair.
        let mut s = Script::new(AgainstAttacker);
        let mut st = forced(0.2025);
        assert!((st.bias - 0.45).abs() < 1e-12);
        st.bias = 1.0;
        assert!(s.step(&mut st, A).is_empty());
        assert_eq!(st.mode, Mode::PairOnTop { pairs: 1 });
        // Honest matches height 1: the pair is released, a public race.
        let out = s.step(&mut st, H);
        assert_eq!(s.heights(&out), vec![1]);
        assert_eq!(st.mode, Mode::Race);
        // Honest extends its own block: height 2 Single.
        s.step(&mut st, H);
        assert_eq!(st.labels, vec![Some(HeightState::Pair), Some(HeightState::Single)]);
    }

    #[test]
    fn pivotal_undecided_block() {
        let mut s = Script::new(AgainstAttacker);
        let mut st = forced(0.2025);
        st.bias = 1.0;
        s.step(&mut st, A); // height 1 Pair, hidden
        assert!(s.step(&mut st, A).is_empty()); // height 2 undecided
        assert_eq!(st.mode, Mode::Undecided { pairs: 1 });
        // Honest matches height 1; the undecided block wins and both go out.
        let out = s.step(&mut st, H);
        assert_eq!(s.heights(&out), vec![1, 2]);
        assert_eq!(st.labels, vec![Some(HeightState::Pair), Some(HeightState::Single)]);
        assert_eq!(st.mode, Mode::Fresh { pairs: 0 });
    }

    #[test]
    fn undecided_resolution_flips_twice_on_single() {
        let mut s = Script::new(AgainstAttacker);
        let mut st = forced(0.2025);
        st.bias = 1.0;
        s.step(&mut st, A); // 1 Pair
        s.step(&mut st, A); // 2 undecided
        st.bias = 0.0;
        // Third block: undecided at 2 becomes Single; coin for 3 uses bias beta.
        s.step(&mut st, A);
        assert_eq!(st.labels.len(), 3);
        assert_eq!(st.labels[1], Some(HeightState::Single));
        assert!(st.report.coin_flips >= 3);
        let out = s.step(&mut st, H);
        assert_eq!(s.heights(&out)[..2], [1, 2]);
    }

    #[test]
    fn simultaneous_blocks_form_a_race() {
        let d = RoundDistribution::new(0.5, 0.1).unwrap();
        let mut st = LabeledSm::general(d, 0.1, Tiebreak::AgainstAttacker, 64, 1e-9).unwrap();
        let mut s = Script::new(AgainstAttacker);
        let out = s.step(&mut st, B);
        assert_eq!(s.heights(&out), vec![1]);
        assert_eq!(st.mode, Mode::Race);
        let out = s.step(&mut st, A);
        assert_eq!(s.heights(&out), vec![2]);
        assert_eq!(st.labels, vec![Some(HeightState::Pair), Some(HeightState::Single)]);
    }

    fn run(strategy: &mut LabeledSm, alpha_prime: f64, beta_prime: f64, h: u32, seed: u64) -> crate::engine::GameResult {
        let params = GameParams {
            setup: MinerSetup::TwoPlayer {
                dist: RoundDistribution::new(alpha_prime, beta_prime).unwrap(),
            },
            horizon_heights: h,
            seed,
            honest_tiebreak: Tiebreak::AgainstAttacker,
        };
        run_game(&params, strategy).unwrap()
    }

    #[test]
    fn main_pair_rate_and_labels_agree_with_states() {
        let mut st = LabeledSm::main(0.4, 0.1, Tiebreak::AgainstAttacker).unwrap();
        let r = run(&mut st, 0.4, 0.0, 50_000, 11);
        assert!((r.pair_rate() - 0.1).abs() < 0.01, "{}", r.pair_rate());
        let rep = st.report();
        assert!(rep.max_bias.unwrap() <= 1.0);
    }

    #[test]
    fn general_pair_rate_and_belief_precision() {
        let mut st =
            LabeledSm::general(RoundDistribution::new(0.4225, 0.05).unwrap(), 0.07, Tiebreak::AgainstAttacker, 64, 1e-9)
                .unwrap();
        let r = run(&mut st, 0.4225, 0.05, 50_000, 12);
        assert!((r.pair_rate() - 0.07).abs() < 0.01, "{}", r.pair_rate());
        assert!(st.report().belief_epsilon.unwrap() < 1e-9);
    }
}
