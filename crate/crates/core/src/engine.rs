//! Round sampling, the n-player to 2-player reduction, and the game loop.

use crate::error::{Error, Result};
use crate::model::{
    height_states, longest_chain, tip_key, Block, BlockId, ChainRule, HeightState, MinerId,
    StateSequence, View, GENESIS_ID, NOT_BROADCAST,
};
use crate::strategies::{Strategy, StrategyReport};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Heights mined past the horizon before a run is finalized.
pub const FINALIZATION_SLACK: u32 = 64;

const STREAM_OUTCOME: u64 = 0;
const STREAM_STRATEGY: u64 = 1;
const STREAM_HONEST_IDENTITY: u64 = 2;
const STREAM_TIEBREAK: u64 = 3;

/// Seeded generator for one of the per-game substreams.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Law of one round, conditioned on at least one block being found.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundDistribution {
    pub alpha_prime: f64,
    pub beta_prime: f64,
}

impl RoundDistribution {
    pub fn new(alpha_prime: f64, beta_prime: f64) -> Result<Self> {
        let d = RoundDistribution {
            alpha_prime,
            beta_prime,
        };
        d.validate()?;
        Ok(d)
    }

    /// 0-NCG: exactly one miner per round.
    pub fn zero_latency(alpha: f64) -> Result<Self> {
        Self::new(alpha, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha_prime.is_finite()
            && self.beta_prime.is_finite()
            && self.alpha_prime >= 0.0
            && self.beta_prime >= 0.0
            && self.alpha_prime + self.beta_prime <= 1.0 + 1e-12;
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!(
                "invalid round distribution alpha'={} beta'={}",
                self.alpha_prime, self.beta_prime
            )))
        }
    }

    pub fn honest_only(&self) -> f64 {
        (1.0 - self.alpha_prime - self.beta_prime).max(0.0)
    }

    /// Attacker share of all blocks produced, `(α′+β′)/(1+β′)`.
    pub fn attacker_share(&self) -> f64 {
        (self.alpha_prime + self.beta_prime) / (1.0 + self.beta_prime)
    }

    /// Maps one uniform draw to an outcome.
    pub fn classify(&self, u: f64) -> RoundOutcome {
        if u < self.alpha_prime {
            RoundOutcome::AttackerOnly
        } else if u < self.alpha_prime + self.beta_prime {
            RoundOutcome::Both
        } else {
            RoundOutcome::HonestOnly
        }
    }

    /// Per-round variance of `attacker_blocks − α·blocks`.
    pub fn production_variance(&self) -> f64 {
        let a = self.attacker_share();
        self.alpha_prime * (1.0 - a).powi(2)
            + self.honest_only() * a * a
            + self.beta_prime * (1.0 - 2.0 * a).powi(2)
    }
}

/// Which side found a block in a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RoundOutcome {
    AttackerOnly,
    HonestOnly,
    Both,
}

impl RoundOutcome {
    pub fn attacker_mines(self) -> bool {
        matches!(self, RoundOutcome::AttackerOnly | RoundOutcome::Both)
    }

    pub fn honest_mines(self) -> bool {
        matches!(self, RoundOutcome::HonestOnly | RoundOutcome::Both)
    }
}

fn check_latency(hashrates: &[f64], latency: f64) -> Result<()> {
    if hashrates.is_empty() || hashrates.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(Error::Parameter("hashrates must be positive".into()));
    }
    if !latency.is_finite() || latency < 0.0 {
        return Err(Error::Parameter(format!("latency {latency} out of range")));
    }
    let cap = hashrates.iter().map(|a| 1.0 / a).fold(f64::INFINITY, f64::min);
    if latency > cap * (1.0 + 1e-12) {
        return Err(Error::Parameter(format!(
            "latency {latency} exceeds 1/max hashrate = {cap}"
        )));
    }
    Ok(())
}

/// Collapses miners `2..n` into one honest miner with the same any-heads probability.
/// `latency == 0` uses the limit convention (sum of honest rates).
pub fn reduce_hashrates(hashrates: &[f64], latency: f64) -> Result<(f64, f64)> {
    check_latency(hashrates, latency)?;
    let attacker = hashrates[0];
    let rest = &hashrates[1..];
    if latency == 0.0 {
        return Ok((attacker, rest.iter().sum()));
    }
    let none: f64 = rest.iter().map(|a| 1.0 - a * latency).product();
    Ok((attacker, (1.0 - none) / latency))
}

/// Conditions the per-miner coins on at least one head.
pub fn round_distribution(hashrates: &[f64], latency: f64) -> Result<RoundDistribution> {
    check_latency(hashrates, latency)?;
    let total: f64 = hashrates.iter().sum();
    if latency == 0.0 {
        return RoundDistribution::new(hashrates[0] / total, 0.0);
    }
    let p1 = hashrates[0] * latency;
    let others_none: f64 = hashrates[1..].iter().map(|a| 1.0 - a * latency).product();
    let any = 1.0 - (1.0 - p1) * others_none;
    if any <= 0.0 {
        return Err(Error::Parameter("no miner can ever find a block".into()));
    }
    RoundDistribution::new(p1 * others_none / any, p1 * (1.0 - others_none) / any)
}

/// Pair rate of an all-honest two-miner game at latency `ell`.
pub fn pair_rate_at_latency(alpha: f64, ell: f64) -> f64 {
    let both = alpha * (1.0 - alpha) * ell * ell;
    both / (1.0 - both)
}

/// Inverts [`pair_rate_at_latency`] in `ell ≥ 0`.
pub fn target_latency(alpha: f64, beta: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha {alpha} not in (0,1)")));
    }
    let ell_max = 1.0 / alpha.max(1.0 - alpha);
    let beta_max = pair_rate_at_latency(alpha, ell_max).min(1.0);
    if !(beta >= 0.0 && beta < beta_max) {
        return Err(Error::Parameter(format!(
            "pair rate {beta} unattainable at alpha {alpha} (max {beta_max})"
        )));
    }
    Ok((beta / ((1.0 + beta) * alpha * (1.0 - alpha))).sqrt())
}

/// How honest miners choose among equal-height public tips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tiebreak {
    FavorAttacker,
    AgainstAttacker,
    /// Choose the attacker's tip with probability `gamma` when both kinds are tied.
    Mixed { gamma: f64 },
}

impl Tiebreak {
    /// Rule used for the final chain. Mixed falls back to against-attacker; the
    /// final tip only affects heights above the horizon.
    pub fn chain_rule(self) -> ChainRule {
        match self {
            Tiebreak::FavorAttacker => ChainRule::FavorAttacker,
            Tiebreak::AgainstAttacker | Tiebreak::Mixed { .. } => ChainRule::AgainstAttacker,
        }
    }

    pub fn is_pure(self) -> bool {
        !matches!(self, Tiebreak::Mixed { .. })
    }
}

/// Who plays against the attacker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinerSetup {
    /// One aggregated honest miner, outcomes drawn from `dist`.
    TwoPlayer { dist: RoundDistribution },
    /// Individual honest miners `2..=n`; `hashrates[0]` is the attacker.
    NPlayer { hashrates: Vec<f64>, latency: f64 },
}

impl MinerSetup {
    pub fn distribution(&self) -> Result<RoundDistribution> {
        match self {
            MinerSetup::TwoPlayer { dist } => {
                dist.validate()?;
                Ok(*dist)
            }
            MinerSetup::NPlayer { hashrates, latency } => round_distribution(hashrates, *latency),
        }
    }

    pub fn is_two_player(&self) -> bool {
        matches!(self, MinerSetup::TwoPlayer { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameParams {
    pub setup: MinerSetup,
    pub horizon_heights: u32,
    pub seed: u64,
    pub honest_tiebreak: Tiebreak,
}

/// Everything the strategy learns about one round.
#[derive(Debug, Clone, Default)]
pub struct RoundEvent {
    pub round: u64,
    pub outcome: Option<RoundOutcome>,
    pub attacker_block: Option<BlockId>,
    pub honest_blocks: Vec<BlockId>,
}

impl RoundEvent {
    pub fn outcome(&self) -> RoundOutcome {
        self.outcome.expect("event carries an outcome")
    }
}

/// All blocks ever created in a game plus public-view indexes.
#[derive(Debug, Clone)]
pub struct BlockTree {
    blocks: Vec<Block>,
    public_max: u32,
    public_tips: Vec<BlockId>,
    any_public_at: Vec<bool>,
    nonattacker_public_at: Vec<bool>,
    attacker_created_at: Vec<bool>,
    first_created_round: Vec<u64>,
}

impl Default for BlockTree {
    fn default() -> Self {
        Self::new()
    }
}

impl BlockTree {
    pub fn new() -> Self {
        BlockTree {
            blocks: vec![Block::genesis()],
            public_max: 0,
            public_tips: vec![GENESIS_ID],
            any_public_at: vec![true],
            nonattacker_public_at: vec![true],
            attacker_created_at: vec![false],
            first_created_round: vec![0],
        }
    }

    pub fn block(&self, id: BlockId) -> &Block {
        &self.blocks[id as usize]
    }

    pub fn get(&self, id: BlockId) -> Option<&Block> {
        self.blocks.get(id as usize)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn is_public(&self, id: BlockId) -> bool {
        self.blocks[id as usize].is_broadcast()
    }

    pub fn public_max_height(&self) -> u32 {
        self.public_max
    }

    /// Public blocks at the maximal public height.
    pub fn public_tips(&self) -> &[BlockId] {
        &self.public_tips
    }

    pub fn any_public_at(&self, h: u32) -> bool {
        self.any_public_at.get(h as usize).copied().unwrap_or(false)
    }

    pub fn nonattacker_public_at(&self, h: u32) -> bool {
        self.nonattacker_public_at
            .get(h as usize)
            .copied()
            .unwrap_or(false)
    }

    pub fn attacker_created_at(&self, h: u32) -> bool {
        self.attacker_created_at
            .get(h as usize)
            .copied()
            .unwrap_or(false)
    }

    /// Preferred public tip under a pure rule.
    pub fn preferred_public_tip(&self, rule: ChainRule) -> BlockId {
        *self
            .public_tips
            .iter()
            .min_by_key(|&&id| tip_key(self.block(id), rule))
            .expect("genesis is always public")
    }

    /// Longest chain in the attacker's view: own blocks plus public ones, own favored.
    pub fn attacker_view_tip(&self, own_top: Option<BlockId>) -> BlockId {
        let public = self.preferred_public_tip(ChainRule::FavorAttacker);
        match own_top {
            Some(own) if self.block(own).height >= self.public_max => own,
            _ => public,
        }
    }

    fn ensure_height(&mut self, h: u32) {
        let need = h as usize + 1;
        if self.any_public_at.len() < need {
            self.any_public_at.resize(need, false);
            self.nonattacker_public_at.resize(need, false);
            self.attacker_created_at.resize(need, false);
            self.first_created_round.resize(need, 0);
        }
    }

    fn add_block(&mut self, parent: BlockId, creator: MinerId, round: u64) -> BlockId {
        let height = self.blocks[parent as usize].height + 1;
        let id = self.blocks.len() as BlockId;
        self.blocks.push(Block {
            id,
            parent,
            height,
            creator,
            created_round: round,
            broadcast_round: NOT_BROADCAST,
        });
        self.ensure_height(height);
        let h = height as usize;
        if self.first_created_round[h] == 0 {
            self.first_created_round[h] = round;
        }
        if creator.is_attacker() {
            self.attacker_created_at[h] = true;
        }
        id
    }

    fn broadcast(&mut self, id: BlockId, round: u64) {
        let b = &mut self.blocks[id as usize];
        b.broadcast_round = round;
        let (h, attacker) = (b.height, b.creator.is_attacker());
        self.any_public_at[h as usize] = true;
        if !attacker {
            self.nonattacker_public_at[h as usize] = true;
        }
        if h > self.public_max {
            self.public_max = h;
            self.public_tips.clear();
            self.public_tips.push(id);
        } else if h == self.public_max {
            self.public_tips.push(id);
        }
    }

    /// View of everything broadcast so far.
    pub fn view(&self) -> View {
        let blocks: Vec<Block> = self.blocks.iter().filter(|b| b.is_broadcast()).copied().collect();
        View::from_blocks(blocks).expect("engine maintains a parent-closed view")
    }

    /// Round of the first block created at each height `1..=h_max`.
    pub fn first_creation_rounds(&self, h_max: u32) -> Vec<u64> {
        (1..=h_max as usize)
            .map(|h| self.first_created_round.get(h).copied().unwrap_or(0))
            .collect()
    }
}

#[cfg(test)]
impl BlockTree {
    pub(crate) fn add_block_for_test(&mut self, parent: BlockId, creator: MinerId, round: u64) -> BlockId {
        self.add_block(parent, creator, round)
    }

    pub(crate) fn broadcast_for_test(&mut self, id: BlockId, round: u64) {
        self.broadcast(id, round)
    }
}

/// Pair-win tallies over heights `1..=H`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairTallies {
    pub pairs: u64,
    pub attacker_won_pairs: u64,
    pub solo_pairs: u64,
    pub attacker_won_solo_pairs: u64,
}

impl PairTallies {
    pub fn merge(&mut self, o: &PairTallies) {
        self.pairs += o.pairs;
        self.attacker_won_pairs += o.attacker_won_pairs;
        self.solo_pairs += o.solo_pairs;
        self.attacker_won_solo_pairs += o.attacker_won_solo_pairs;
    }

    pub fn pairs_won_fraction(&self) -> f64 {
        ratio(self.attacker_won_pairs, self.pairs)
    }

    pub fn solo_pairs_won_fraction(&self) -> f64 {
        ratio(self.attacker_won_solo_pairs, self.solo_pairs)
    }
}

pub(crate) fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        f64::NAN
    } else {
        a as f64 / b as f64
    }
}

/// Block-production counts over the whole run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Production {
    pub rounds: u64,
    pub blocks: u64,
    pub attacker_blocks: u64,
    /// Attacker blocks created at heights `1..=H`.
    pub attacker_blocks_in_horizon: u64,
}

#[derive(Debug, Clone)]
pub struct GameResult {
    pub horizon: u32,
    pub view: View,
    pub states: StateSequence,
    /// `t(h)` for `h = 1..=H`.
    pub first_creation_rounds: Vec<u64>,
    /// Longest-chain blocks per miner id over heights `1..=H`.
    pub chain_blocks_by_miner: HashMap<u32, u64>,
    /// Creator of the chain block at each height `1..=H`.
    pub chain_creators: Vec<MinerId>,
    pub tallies: PairTallies,
    pub production: Production,
    pub outcomes: Vec<RoundOutcome>,
    pub report: StrategyReport,
}

impl GameResult {
    pub fn attacker_chain_blocks(&self) -> u64 {
        self.chain_blocks_by_miner.get(&1).copied().unwrap_or(0)
    }

    pub fn reward(&self) -> f64 {
        self.attacker_chain_blocks() as f64 / self.horizon as f64
    }

    pub fn pair_rate(&self) -> f64 {
        self.states.pair_count() as f64 / self.states.len().max(1) as f64
    }
}

struct HonestMiners {
    /// (miner id, per-round head probability) for miners 2..=n.
    miners: Vec<(MinerId, f64)>,
    latency: f64,
}

impl HonestMiners {
    fn sample(&self, rng: &mut ChaCha8Rng, out: &mut Vec<MinerId>) {
        out.clear();
        if self.miners.len() == 1 {
            out.push(self.miners[0].0);
            return;
        }
        if self.latency == 0.0 {
            let total: f64 = self.miners.iter().map(|m| m.1).sum();
            let mut u = rng.gen::<f64>() * total;
            for &(id, w) in &self.miners {
                if u < w {
                    out.push(id);
                    return;
                }
                u -= w;
            }
            out.push(self.miners.last().unwrap().0);
            return;
        }
        loop {
            for &(id, p) in &self.miners {
                if rng.gen::<f64>() < p {
                    out.push(id);
                }
            }
            if !out.is_empty() {
                return;
            }
        }
    }
}

fn honest_parent(tree: &BlockTree, tiebreak: Tiebreak, rng: &mut ChaCha8Rng) -> BlockId {
    match tiebreak {
        Tiebreak::FavorAttacker => tree.preferred_public_tip(ChainRule::FavorAttacker),
        Tiebreak::AgainstAttacker => tree.preferred_public_tip(ChainRule::AgainstAttacker),
        Tiebreak::Mixed { gamma } => {
            let tips = tree.public_tips();
            let has_att = tips.iter().any(|&t| tree.block(t).creator.is_attacker());
            let has_other = tips.iter().any(|&t| !tree.block(t).creator.is_attacker());
            if has_att && has_other && rng.gen::<f64>() < gamma {
                tree.preferred_public_tip(ChainRule::FavorAttacker)
            } else {
                tree.preferred_public_tip(ChainRule::AgainstAttacker)
            }
        }
    }
}

fn validate_broadcast(tree: &BlockTree, id: BlockId) -> Result<()> {
    let b = tree
        .get(id)
        .ok_or_else(|| Error::ProtocolViolation(format!("broadcast of unknown block {id}")))?;
    if !b.creator.is_attacker() {
        return Err(Error::ProtocolViolation(format!(
            "attacker broadcast foreign block {id}"
        )));
    }
    if b.is_broadcast() {
        return Err(Error::ProtocolViolation(format!("block {id} broadcast twice")));
    }
    if !tree.is_public(b.parent) {
        return Err(Error::ProtocolViolation(format!(
            "block {id} broadcast before its parent {}",
            b.parent
        )));
    }
    Ok(())
}

fn validate_parent(tree: &BlockTree, parent: BlockId) -> Result<()> {
    let b = tree.get(parent).ok_or_else(|| {
        Error::ProtocolViolation(format!("attacker mined on unknown block {parent}"))
    })?;
    if !(b.is_broadcast() || b.creator.is_attacker()) {
        return Err(Error::ProtocolViolation(format!(
            "attacker mined on invisible block {parent}"
        )));
    }
    Ok(())
}

/// Plays one game to `horizon_heights` finalized heights.
pub fn run_game(params: &GameParams, strategy: &mut dyn Strategy) -> Result<GameResult> {
    let dist = params.setup.distribution()?;
    if params.horizon_heights == 0 {
        return Err(Error::Parameter("horizon must be at least one height".into()));
    }
    let honest = match &params.setup {
        MinerSetup::TwoPlayer { .. } => HonestMiners {
            miners: vec![(MinerId(2), 1.0)],
            latency: 0.0,
        },
        MinerSetup::NPlayer { hashrates, latency } => HonestMiners {
            miners: hashrates[1..]
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    let p = if *latency == 0.0 { *a } else { a * latency };
                    (MinerId(i as u32 + 2), p)
                })
                .collect(),
            latency: *latency,
        },
    };
    let mut outcome_rng = substream(params.seed, STREAM_OUTCOME);
    let mut coin_rng = substream(params.seed, STREAM_STRATEGY);
    let mut identity_rng = substream(params.seed, STREAM_HONEST_IDENTITY);
    let mut tiebreak_rng = substream(params.seed, STREAM_TIEBREAK);

    let horizon = params.horizon_heights;
    let stop_height = horizon + FINALIZATION_SLACK;
    let round_cap = 1000 + 200 * stop_height as u64;
    let mut tree = BlockTree::new();
    let mut production = Production::default();
    let mut outcomes = Vec::with_capacity(stop_height as usize * 2);
    let mut ev = RoundEvent::default();
    let mut honest_ids = Vec::new();
    let mut honest_parents = Vec::new();
    let mut broadcasts = Vec::new();
    let mut round = 0u64;

    while tree.public_max_height() < stop_height {
        round += 1;
        if round > round_cap {
            return Err(Error::ProtocolViolation(format!(
                "public chain stalled after {round_cap} rounds"
            )));
        }
        let outcome = dist.classify(outcome_rng.gen::<f64>());
        outcomes.push(outcome);
        production.rounds += 1;

        honest_parents.clear();
        if outcome.honest_mines() {
            honest.sample(&mut identity_rng, &mut honest_ids);
            for _ in 0..honest_ids.len() {
                honest_parents.push(honest_parent(&tree, params.honest_tiebreak, &mut tiebreak_rng));
            }
        }
        ev.round = round;
        ev.outcome = Some(outcome);
        ev.attacker_block = None;
        ev.honest_blocks.clear();
        if outcome.attacker_mines() {
            let parent = strategy.choose_parent(&tree);
            validate_parent(&tree, parent)?;
            let id = tree.add_block(parent, MinerId::ATTACKER, round);
            ev.attacker_block = Some(id);
            production.blocks += 1;
            production.attacker_blocks += 1;
            if tree.block(id).height <= horizon {
                production.attacker_blocks_in_horizon += 1;
            }
        }
        for (k, &miner) in honest_ids.iter().enumerate().take(honest_parents.len()) {
            let id = tree.add_block(honest_parents[k], miner, round);
            tree.broadcast(id, round);
            ev.honest_blocks.push(id);
            production.blocks += 1;
        }
        broadcasts.clear();
        strategy.react(&ev, &tree, &mut coin_rng, &mut broadcasts)?;
        for &id in &broadcasts {
            validate_broadcast(&tree, id)?;
            tree.broadcast(id, round);
        }
    }
    broadcasts.clear();
    strategy.flush(&tree, &mut broadcasts);
    for &id in &broadcasts {
        validate_broadcast(&tree, id)?;
        tree.broadcast(id, round);
    }

    finalize(params, &tree, strategy.report(), production, outcomes)
}

fn finalize(
    params: &GameParams,
    tree: &BlockTree,
    report: StrategyReport,
    production: Production,
    outcomes: Vec<RoundOutcome>,
) -> Result<GameResult> {
    let horizon = params.horizon_heights;
    let view = tree.view();
    let upper = horizon + 1;
    let states_ext = height_states(&view, upper)?;
    let chain = longest_chain(&view, params.honest_tiebreak.chain_rule());
    if chain.len() <= upper as usize {
        return Err(Error::MalformedView("final chain shorter than horizon".into()));
    }
    let chain_creators: Vec<MinerId> = chain[1..=horizon as usize].iter().map(|b| b.creator).collect();
    let mut chain_blocks_by_miner = HashMap::new();
    for c in &chain_creators {
        *chain_blocks_by_miner.entry(c.0).or_insert(0u64) += 1;
    }
    let st = &states_ext.states;
    let mut tallies = PairTallies::default();
    for h in 1..=horizon as usize {
        if !st[h - 1].is_pair() {
            continue;
        }
        let won = chain_creators[h - 1].is_attacker();
        tallies.pairs += 1;
        tallies.attacker_won_pairs += won as u64;
        let below_single = h == 1 || !st[h - 2].is_pair();
        let above_single = !st[h].is_pair();
        if below_single && above_single {
            tallies.solo_pairs += 1;
            tallies.attacker_won_solo_pairs += won as u64;
        }
    }
    let states = StateSequence::new(st[..horizon as usize].to_vec());
    if let Some(labels) = &report.labels {
        for (i, s) in states.states.iter().enumerate() {
            match labels.get(i) {
                Some(Some(l)) if l == s => {}
                other => {
                    return Err(Error::ProtocolViolation(format!(
                        "height {} has state {:?} but label {:?}",
                        i + 1,
                        s,
                        other
                    )))
                }
            }
        }
    }
    Ok(GameResult {
        horizon,
        first_creation_rounds: tree.first_creation_rounds(horizon),
        view,
        states,
        chain_blocks_by_miner,
        chain_creators,
        tallies,
        production,
        outcomes,
        report,
    })
}

/// Deterministic checks that every run must pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub height_count_violations: u64,
    pub broadcast_order_violations: u64,
    pub first_violation: Option<String>,
}

impl AuditReport {
    pub fn ok(&self) -> bool {
        self.height_count_violations == 0 && self.broadcast_order_violations == 0
    }
}

/// Per-height block counts (two-player games) and parent-before-child broadcast order.
pub fn audit_view(result: &GameResult, two_player: bool) -> AuditReport {
    let mut rep = AuditReport::default();
    let view = &result.view;
    for b in view.blocks() {
        if b.id == GENESIS_ID {
            continue;
        }
        let p = view.get(b.parent).expect("closed view");
        if p.broadcast_round > b.broadcast_round {
            rep.broadcast_order_violations += 1;
            rep.first_violation
                .get_or_insert_with(|| format!("block {} broadcast before parent {}", b.id, p.id));
        }
    }
    if two_player {
        let h_max = result.horizon as usize;
        let mut attacker = vec![0u32; h_max + 1];
        let mut other = vec![0u32; h_max + 1];
        for b in view.blocks() {
            let h = b.height as usize;
            if h == 0 || h > h_max {
                continue;
            }
            if b.creator.is_attacker() {
                attacker[h] += 1;
            } else {
                other[h] += 1;
            }
        }
        for h in 1..=h_max {
            let expected = if result.states.states[h - 1] == HeightState::Pair { 2 } else { 1 };
            let count = attacker[h] + other[h];
            if count != expected || attacker[h] > 1 || other[h] > 1 {
                rep.height_count_violations += 1;
                rep.first_violation.get_or_insert_with(|| {
                    format!("height {h}: {} attacker + {} other blocks", attacker[h], other[h])
                });
            }
        }
    }
    rep
}

/// Outcome of coupling one seed of an n-player game with its reduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupleSeedReport {
    pub seed: u64,
    pub isomorphic: bool,
    pub rewards_equal: bool,
    pub reward_n_player: f64,
    pub reward_two_player: f64,
    pub first_divergent_round: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupleReport {
    pub seeds: Vec<CoupleSeedReport>,
}

impl CoupleReport {
    pub fn all_equal(&self) -> bool {
        self.seeds.iter().all(|s| s.isomorphic && s.rewards_equal)
    }
}

/// Canonical, identity-free description of a view: honest blocks from the same
/// round with the same parent collapse to one entry.
fn canonical_entries(view: &View) -> Vec<(u64, bool, u32, u32, u64)> {
    let mut key_of: HashMap<BlockId, u32> = HashMap::new();
    let mut interned: HashMap<(bool, u32, u64, u32), u32> = HashMap::new();
    let mut entries = Vec::new();
    key_of.insert(GENESIS_ID, 0);
    for b in view.ordered() {
        if b.id == GENESIS_ID {
            continue;
        }
        let parent_key = key_of[&b.parent];
        let k = (b.creator.is_attacker(), b.height, b.created_round, parent_key);
        let next = interned.len() as u32 + 1;
        let id = *interned.entry(k).or_insert_with(|| {
            entries.push((b.created_round, k.0, b.height, parent_key, b.broadcast_round));
            next
        });
        key_of.insert(b.id, id);
    }
    entries
}

/// Runs each seed in both games with the same outcome stream and compares them.
pub fn couple_check<F>(
    n_player: &GameParams,
    two_player: &GameParams,
    seeds: &[u64],
    make_strategy: F,
) -> Result<CoupleReport>
where
    F: Fn() -> Box<dyn Strategy> + Sync,
{
    if !make_strategy().is_sp_simple() {
        return Err(Error::UnsupportedStrategy(
            "coupling requires an SP-Simple strategy".into(),
        ));
    }
    if !(n_player.honest_tiebreak.is_pure() && two_player.honest_tiebreak.is_pure()) {
        return Err(Error::Parameter("coupling requires a pure tiebreak".into()));
    }
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut a_params = n_player.clone();
        a_params.seed = seed;
        let mut b_params = two_player.clone();
        b_params.seed = seed;
        let a = run_game(&a_params, make_strategy().as_mut())?;
        let b = run_game(&b_params, make_strategy().as_mut())?;
        let ea = canonical_entries(&a.view);
        let eb = canonical_entries(&b.view);
        let isomorphic = ea == eb;
        let mut first = None;
        if !isomorphic {
            let round_div = a
                .outcomes
                .iter()
                .zip(&b.outcomes)
                .position(|(x, y)| x != y)
                .map(|i| i as u64 + 1);
            let entry_div = ea
                .iter()
                .zip(&eb)
                .find(|(x, y)| x != y)
                .map(|(x, y)| x.0.min(y.0))
                .or_else(|| {
                    let n = ea.len().min(eb.len());
                    ea.get(n).or(eb.get(n)).map(|e| e.0)
                });
            first = match (round_div, entry_div) {
                (Some(r), Some(e)) => Some(r.min(e)),
                (r, e) => r.or(e),
            };
        }
        let rewards_equal = a.attacker_chain_blocks() == b.attacker_chain_blocks();
        out.push(CoupleSeedReport {
            seed,
            isomorphic,
            rewards_equal,
            reward_n_player: a.reward(),
            reward_two_player: b.reward(),
            first_divergent_round: first,
        });
    }
    Ok(CoupleReport { seeds: out })
}
