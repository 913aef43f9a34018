//! Attacker strategy interface and the baseline strategies.

use crate::engine::{BlockTree, RoundEvent, RoundOutcome};
use crate::error::Result;
use crate::model::{BlockId, HeightState};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Diagnostics a strategy hands back after a game.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    /// Intended state per height (index `h-1`) for labeling strategies.
    #[serde(skip)]
    pub labels: Option<Vec<Option<HeightState>>>,
    pub coin_flips: u64,
    pub min_bias: Option<f64>,
    pub max_bias: Option<f64>,
    /// Largest per-step probability mass lost to belief truncation.
    pub belief_epsilon: Option<f64>,
    /// Height ranges `(first, last)` of completed short-SM episodes.
    #[serde(skip)]
    pub episodes: Vec<(u32, u32)>,
}

impl StrategyReport {
    pub(crate) fn record_bias(&mut self, bias: f64) {
        self.coin_flips += 1;
        self.min_bias = Some(self.min_bias.map_or(bias, |m| m.min(bias)));
        self.max_bias = Some(self.max_bias.map_or(bias, |m| m.max(bias)));
    }
}

/// An attacker driven by the engine one round at a time.
pub trait Strategy: Send {
    /// Parent for the block the attacker mines this round.
    fn choose_parent(&mut self, tree: &BlockTree) -> BlockId;

    /// Called after the round's blocks exist and honest blocks are public.
    /// Pushes own blocks to broadcast, parents first.
    fn react(
        &mut self,
        event: &RoundEvent,
        tree: &BlockTree,
        rng: &mut ChaCha8Rng,
        out: &mut Vec<BlockId>,
    ) -> Result<()>;

    /// Terminal rule at the end of a run.
    fn flush(&mut self, tree: &BlockTree, out: &mut Vec<BlockId>);

    /// Whether actions depend only on the per-round outcome class.
    fn is_sp_simple(&self) -> bool;

    fn name(&self) -> &'static str;

    fn report(&self) -> StrategyReport {
        StrategyReport::default()
    }
}

/// Longest chain favoring own blocks, broadcast at once.
#[derive(Debug, Default)]
pub struct Honest;

impl Strategy for Honest {
    fn choose_parent(&mut self, tree: &BlockTree) -> BlockId {
        tree.attacker_view_tip(None)
    }

    fn react(
        &mut self,
        event: &RoundEvent,
        _tree: &BlockTree,
        _rng: &mut ChaCha8Rng,
        out: &mut Vec<BlockId>,
    ) -> Result<()> {
        out.extend(event.attacker_block);
        Ok(())
    }

    fn flush(&mut self, _tree: &BlockTree, _out: &mut Vec<BlockId>) {}

    fn is_sp_simple(&self) -> bool {
        true
    }

    fn name(&self) -> &'static str {
        "honest"
    }
}

/// Withholds every block and releases it exactly when another miner reaches its height.
#[derive(Debug, Default)]
pub struct StrongSm {
    hidden: VecDeque<BlockId>,
}

impl Strategy for StrongSm {
    fn choose_parent(&mut self, tree: &BlockTree) -> BlockId {
        tree.attacker_view_tip(self.hidden.back().copied())
    }

    fn react(
        &mut self,
        event: &RoundEvent,
        tree: &BlockTree,
        _rng: &mut ChaCha8Rng,
        out: &mut Vec<BlockId>,
    ) -> Result<()> {
        if let Some(b) = event.attacker_block {
            self.hidden.push_back(b);
        }
        for &hb in &event.honest_blocks {
            let h = tree.block(hb).height;
            while let Some(&front) = self.hidden.front() {
                let fh = tree.block(front).height;
                if fh > h {
                    break;
                }
                self.hidden.pop_front();
                if fh == h && !out.contains(&front) {
                    out.push(front);
                }
            }
        }
        Ok(())
    }

    fn flush(&mut self, _tree: &BlockTree, out: &mut Vec<BlockId>) {
        out.extend(self.hidden.drain(..));
    }

    fn is_sp_simple(&self) -> bool {
        true
    }

    fn name(&self) -> &'static str {
        "strong_sm"
    }
}

/// Withholds blocks; releases on a match at the same height or when a block
/// becomes pivotal.
#[derive(Debug, Default)]
pub struct ClassicSm {
    hidden: VecDeque<BlockId>,
    /// Highest height at which the attacker has created a block.
    top_created: u32,
}

impl ClassicSm {
    fn releasable(&self, tree: &BlockTree, id: BlockId, out: &[BlockId]) -> bool {
        let b = tree.block(id);
        let parent_public = tree.is_public(b.parent) || out.contains(&b.parent);
        if !parent_public {
            return false;
        }
        let h = b.height;
        let matched = tree.nonattacker_public_at(h);
        let pivotal = h >= 2
            && tree.nonattacker_public_at(h - 1)
            && tree.attacker_created_at(h - 1)
            && self.top_created < h + 1;
        matched || pivotal
    }
}

impl Strategy for ClassicSm {
    fn choose_parent(&mut self, tree: &BlockTree) -> BlockId {
        tree.attacker_view_tip(self.hidden.back().copied())
    }

    fn react(
        &mut self,
        event: &RoundEvent,
        tree: &BlockTree,
        _rng: &mut ChaCha8Rng,
        out: &mut Vec<BlockId>,
    ) -> Result<()> {
        if let Some(b) = event.attacker_block {
            self.hidden.push_back(b);
            self.top_created = self.top_created.max(tree.block(b).height);
        }
        // Blocks left below the public tip lost their race and are abandoned.
        let public_max = tree.public_max_height();
        loop {
            let mut changed = false;
            while let Some(&front) = self.hidden.front() {
                if self.releasable(tree, front, out) {
                    out.push(front);
                    self.hidden.pop_front();
                    changed = true;
                } else if tree.block(front).height <= public_max
                    && !tree.is_public(tree.block(front).parent)
                    && !out.contains(&tree.block(front).parent)
                {
                    self.hidden.pop_front();
                    changed = true;
                } else {
                    break;
                }
            }
            if !changed {
                break;
            }
        }
        Ok(())
    }

    fn flush(&mut self, tree: &BlockTree, out: &mut Vec<BlockId>) {
        for id in self.hidden.drain(..) {
            let b = tree.block(id);
            if tree.is_public(b.parent) || out.contains(&b.parent) {
                out.push(id);
            }
        }
    }

    fn is_sp_simple(&self) -> bool {
        true
    }

    fn name(&self) -> &'static str {
        "classic_sm"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShortPhase {
    Idle,
    /// One hidden block, next round not yet seen.
    Hidden,
    /// Honest matched the hidden block; natural pairs may follow.
    Matched,
    /// Two or more hidden attacker blocks in a row.
    Lead,
}

/// Hides one block and cashes out at the first opportunity.
#[derive(Debug)]
pub struct ShortSm {
    phase: ShortPhase,
    hidden: Vec<BlockId>,
    start_height: u32,
    honest_top: u32,
    episodes: Vec<(u32, u32)>,
}

impl Default for ShortSm {
    fn default() -> Self {
        ShortSm {
            phase: ShortPhase::Idle,
            hidden: Vec::new(),
            start_height: 0,
            honest_top: 0,
            episodes: Vec::new(),
        }
    }
}

impl ShortSm {
    fn publish_all(&mut self, tree: &BlockTree, out: &mut Vec<BlockId>) {
        let last = self.hidden.last().map(|&b| tree.block(b).height).unwrap_or(0);
        out.append(&mut self.hidden);
        self.episodes.push((self.start_height, last));
        self.phase = ShortPhase::Idle;
    }
}

impl Strategy for ShortSm {
    fn choose_parent(&mut self, tree: &BlockTree) -> BlockId {
        tree.attacker_view_tip(self.hidden.last().copied())
    }

    fn react(
        &mut self,
        event: &RoundEvent,
        tree: &BlockTree,
        _rng: &mut ChaCha8Rng,
        out: &mut Vec<BlockId>,
    ) -> Result<()> {
        let outcome = event.outcome();
        match self.phase {
            ShortPhase::Idle => {
                let a = match event.attacker_block {
                    Some(a) => a,
                    None => return Ok(()),
                };
                let contested = tree.public_tips().len() > 1;
                if outcome == RoundOutcome::AttackerOnly && !contested {
                    self.hidden.push(a);
                    self.start_height = tree.block(a).height;
                    self.phase = ShortPhase::Hidden;
                } else {
                    out.push(a);
                }
            }
            ShortPhase::Hidden => match outcome {
                RoundOutcome::HonestOnly => {
                    self.honest_top = tree.block(event.honest_blocks[0]).height;
                    self.phase = ShortPhase::Matched;
                }
                RoundOutcome::Both => {
                    self.hidden.extend(event.attacker_block);
                    self.publish_all(tree, out);
                }
                RoundOutcome::AttackerOnly => {
                    self.hidden.extend(event.attacker_block);
                    self.phase = ShortPhase::Lead;
                }
            },
            ShortPhase::Matched => match outcome {
                RoundOutcome::Both => {
                    self.hidden.extend(event.attacker_block);
                    self.honest_top = tree.block(event.honest_blocks[0]).height;
                }
                RoundOutcome::AttackerOnly => {
                    self.hidden.extend(event.attacker_block);
                    self.publish_all(tree, out);
                }
                RoundOutcome::HonestOnly => {
                    let top = tree.block(event.honest_blocks[0]).height;
                    self.hidden.clear();
                    self.episodes.push((self.start_height, top));
                    self.phase = ShortPhase::Idle;
                }
            },
            ShortPhase::Lead => match outcome {
                RoundOutcome::AttackerOnly => self.hidden.extend(event.attacker_block),
                RoundOutcome::Both => {
                    self.hidden.extend(event.attacker_block);
                    self.publish_all(tree, out);
                }
                RoundOutcome::HonestOnly => self.publish_all(tree, out),
            },
        }
        Ok(())
    }

    fn flush(&mut self, tree: &BlockTree, out: &mut Vec<BlockId>) {
        if matches!(self.phase, ShortPhase::Lead | ShortPhase::Hidden) {
            out.append(&mut self.hidden);
        }
        let _ = tree;
        self.hidden.clear();
        self.phase = ShortPhase::Idle;
    }

    fn is_sp_simple(&self) -> bool {
        true
    }

    fn name(&self) -> &'static str {
        "short_sm"
    }

    fn report(&self) -> StrategyReport {
        StrategyReport {
            episodes: self.episodes.clone(),
            ..Default::default()
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::engine::{run_game, GameParams, MinerSetup, RoundDistribution, Tiebreak};
    use crate::model::{HeightState, MinerId};

    fn params(alpha: f64, beta_prime: f64, h: u32, seed: u64, tb: Tiebreak) -> GameParams {
        GameParams {
            setup: MinerSetup::TwoPlayer {
                dist: RoundDistribution::new(alpha * (1.0 + beta_prime) - beta_prime, beta_prime)
                    .unwrap(),
            },
            horizon_heights: h,
            seed,
            honest_tiebreak: tb,
        }
    }

    /// Drives a strategy through a scripted outcome sequence on a private tree.
    pub(crate) struct Script {
        pub tree: BlockTree,
        pub round: u64,
        pub rng: ChaCha8Rng,
        pub broadcasts: Vec<Vec<BlockId>>,
        pub tiebreak: crate::model::ChainRule,
    }

    impl Script {
        pub fn new(tiebreak: crate::model::ChainRule) -> Self {
            Script {
                tree: BlockTree::new(),
                round: 0,
                rng: crate::engine::substream(1, 1),
                broadcasts: Vec::new(),
                tiebreak,
            }
        }

        pub fn step(&mut self, s: &mut dyn Strategy, o: RoundOutcome) -> Vec<BlockId> {
            self.try_step(s, o).unwrap()
        }

        pub fn try_step(&mut self, s: &mut dyn Strategy, o: RoundOutcome) -> Result<Vec<BlockId>> {
            self.round += 1;
            let mut ev = RoundEvent {
                round: self.round,
                outcome: Some(o),
                ..Default::default()
            };
            let hp = self.tree.preferred_public_tip(self.tiebreak);
            if o.attacker_mines() {
                let p = s.choose_parent(&self.tree);
                ev.attacker_block = Some(self.tree.add_block_for_test(p, MinerId::ATTACKER, self.round));
            }
            if o.honest_mines() {
                let id = self.tree.add_block_for_test(hp, MinerId(2), self.round);
                self.tree.broadcast_for_test(id, self.round);
                ev.honest_blocks.push(id);
            }
            let mut out = Vec::new();
            s.react(&ev, &self.tree, &mut self.rng, &mut out)?;
            for &id in &out {
                self.tree.broadcast_for_test(id, self.round);
            }
            self.broadcasts.push(out.clone());
            Ok(out)
        }

        pub fn step_heights(&mut self, s: &mut dyn Strategy, o: RoundOutcome) -> Vec<u32> {
            let out = self.step(s, o);
            self.heights(&out)
        }

        pub fn heights(&self, ids: &[BlockId]) -> Vec<u32> {
            ids.iter().map(|&i| self.tree.block(i).height).collect()
        }
    }

    use crate::model::ChainRule::{AgainstAttacker, FavorAttacker};
    use RoundOutcome::{AttackerOnly as A, Both as B, HonestOnly as H};

    #[test]
    fn honest_broadcasts_on_creation() {
        let mut s = Script::new(AgainstAttacker);
        let mut st = Honest;
        assert_eq!(s.step_heights(&mut st, A), vec![1]);
        assert!(s.step(&mut st, H).is_empty());
        let out = s.step(&mut st, B);
        assert_eq!(s.heights(&out), vec![3]);
        assert!(s.tree.nonattacker_public_at(3));
    }

    #[test]
    fn strong_sm_withholds_then_matches() {
        let mut s = Script::new(FavorAttacker);
        let mut st = StrongSm::default();
        assert!(s.step(&mut st, A).is_empty());
        assert!(s.step(&mut st, A).is_empty());
        let out = s.step(&mut st, H);
        assert_eq!(s.heights(&out), vec![1]);
        // Honest now builds on the attacker's height-1 block.
        let out = s.step(&mut st, H);
        assert_eq!(s.heights(&out), vec![2]);
    }

    #[test]
    fn classic_sm_lead_one_concedes_tie() {
        let mut s = Script::new(AgainstAttacker);
        let mut st = ClassicSm::default();
        assert!(s.step(&mut st, A).is_empty());
        let out = s.step(&mut st, H);
        assert_eq!(s.heights(&out), vec![1]);
        // Honest extends its own block; the attacker block is orphaned.
        s.step(&mut st, H);
        let tip = s.tree.preferred_public_tip(AgainstAttacker);
        assert_eq!(s.tree.block(tip).parent, 2);
    }

    #[test]
    fn classic_sm_lead_two_releases_both_on_match() {
        let mut s = Script::new(AgainstAttacker);
        let mut st = ClassicSm::default();
        s.step(&mut st, A);
        s.step(&mut st, A);
        let out = s.step(&mut st, H);
        // Match at 1, then height 2 is pivotal at once.
        assert_eq!(s.heights(&out), vec![1, 2]);
    }

    #[test]
    fn classic_sm_lead_three_matches_then_pivots() {
        let mut s = Script::new(AgainstAttacker);
        let mut st = ClassicSm::default();
        s.step(&mut st, A);
        s.step(&mut st, A);
        s.step(&mut st, A);
        let out = s.step(&mut st, H);
        assert_eq!(s.heights(&out), vec![1]);
        let out = s.step(&mut st, H);
        assert_eq!(s.heights(&out), vec![2, 3]);
        let tip = s.tree.preferred_public_tip(AgainstAttacker);
        assert!(s.tree.block(tip).creator.is_attacker());
        assert_eq!(s.tree.block(tip).height, 3);
    }

    #[test]
    fn classic_sm_wins_race_when_next_block_is_its_own() {
        let mut s = Script::new(AgainstAttacker);
        let mut st = ClassicSm::default();
        s.step(&mut st, A);
        s.step(&mut st, H);
        let out = s.step(&mut st, A);
        assert_eq!(s.heights(&out), vec![2]);
    }

    #[test]
    fn short_sm_bullets() {
        // Natural pair right after hiding: publish both.
        let mut s = Script::new(AgainstAttacker);
        let mut st = ShortSm::default();
        assert!(s.step(&mut st, A).is_empty());
        assert_eq!(s.step_heights(&mut st, B), vec![1, 2]);
        assert_eq!(st.episodes, vec![(1, 2)]);

        // Honest next, then attacker: publish all.
        let mut s = Script::new(AgainstAttacker);
        let mut st = ShortSm::default();
        s.step(&mut st, A);
        assert!(s.step(&mut st, H).is_empty());
        assert!(s.step(&mut st, B).is_empty());
        assert_eq!(s.step_heights(&mut st, A), vec![1, 2, 3]);
        assert_eq!(st.episodes, vec![(1, 3)]);

        // Honest next, then honest: concede.
        let mut s = Script::new(AgainstAttacker);
        let mut st = ShortSm::default();
        s.step(&mut st, A);
        s.step(&mut st, H);
        assert!(s.step(&mut st, H).is_empty());
        assert_eq!(st.episodes, vec![(1, 2)]);
        assert_eq!(st.phase, ShortPhase::Idle);

        // Attacker streak ended by honest: publish all.
        let mut s = Script::new(AgainstAttacker);
        let mut st = ShortSm::default();
        s.step(&mut st, A);
        s.step(&mut st, A);
        s.step(&mut st, A);
        assert_eq!(s.step_heights(&mut st, H), vec![1, 2, 3]);
        assert_eq!(st.episodes, vec![(1, 3)]);
    }

    #[test]
    fn honest_attacker_matches_hashrate() {
        let r = run_game(&params(0.3, 0.0, 200_000, 3, Tiebreak::AgainstAttacker), &mut Honest)
            .unwrap();
        let sd = (0.3f64 * 0.7 / 200_000.0).sqrt();
        assert!((r.reward() - 0.3).abs() < 3.0 * sd, "{}", r.reward());
        assert!(r.states.states.iter().all(|s| *s == HeightState::Single));
    }

    #[test]
    fn strong_sm_reward_and_pairs() {
        let r = run_game(&params(0.25, 0.0, 200_000, 4, Tiebreak::FavorAttacker), &mut StrongSm::default())
            .unwrap();
        assert!((r.reward() - 1.0 / 3.0).abs() < 0.01, "{}", r.reward());
        assert_eq!(r.tallies.attacker_won_pairs, r.tallies.pairs);
    }

    #[test]
    fn runs_are_bit_deterministic() {
        let p = params(0.4, 0.0, 20_000, 9, Tiebreak::AgainstAttacker);
        let a = run_game(&p, &mut ClassicSm::default()).unwrap();
        let b = run_game(&p, &mut ClassicSm::default()).unwrap();
        assert_eq!(a.chain_creators, b.chain_creators);
        assert_eq!(a.view.ordered(), b.view.ordered());
        assert_eq!(a.production, b.production);
    }

    #[test]
    fn baseline_views_pass_audits() {
        use crate::engine::audit_view;
        for (st, tb) in [
            (Box::new(ClassicSm::default()) as Box<dyn Strategy>, Tiebreak::AgainstAttacker),
            (Box::new(StrongSm::default()), Tiebreak::FavorAttacker),
            (Box::new(ShortSm::default()), Tiebreak::AgainstAttacker),
            (Box::new(Honest), Tiebreak::Mixed { gamma: 0.5 }),
        ] {
            let mut st = st;
            let r = run_game(&params(0.4, 0.1, 30_000, 5, tb), st.as_mut()).unwrap();
            let a = audit_view(&r, true);
            assert!(a.ok(), "{}: {:?}", st.name(), a);
        }
    }
}
