//! Blocks, views, per-height states and chain-reward accounting.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

/// Miner index. `1` is the attacker; `0` is reserved for the genesis creator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MinerId(pub u32);

impl MinerId {
    pub const GENESIS: MinerId = MinerId(0);
    pub const ATTACKER: MinerId = MinerId(1);

    pub fn is_attacker(self) -> bool {
        self == Self::ATTACKER
    }
}

pub type BlockId = u32;
pub const GENESIS_ID: BlockId = 0;
/// Sentinel for "never broadcast".
pub const NOT_BROADCAST: u64 = u64::MAX;

/// One mined block. `broadcast_round == NOT_BROADCAST` while withheld.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub id: BlockId,
    pub parent: BlockId,
    pub height: u32,
    pub creator: MinerId,
    pub created_round: u64,
    pub broadcast_round: u64,
}

impl Block {
    pub fn genesis() -> Self {
        Block {
            id: GENESIS_ID,
            parent: GENESIS_ID,
            height: 0,
            creator: MinerId::GENESIS,
            created_round: 0,
            broadcast_round: 0,
        }
    }

    pub fn is_broadcast(&self) -> bool {
        self.broadcast_round != NOT_BROADCAST
    }

    pub fn broadcast(&self) -> Option<u64> {
        self.is_broadcast().then_some(self.broadcast_round)
    }
}

/// Serialized form of one view record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub id: BlockId,
    pub creator: u32,
    pub parent: Option<BlockId>,
    pub height: u32,
    pub created_round: u64,
    pub broadcast_round: Option<u64>,
}

impl From<&Block> for BlockRecord {
    fn from(b: &Block) -> Self {
        BlockRecord {
            id: b.id,
            creator: b.creator.0,
            parent: (b.id != GENESIS_ID).then_some(b.parent),
            height: b.height,
            created_round: b.created_round,
            broadcast_round: b.broadcast(),
        }
    }
}

/// Chain-selection rule for equal-height tips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainRule {
    FavorAttacker,
    AgainstAttacker,
}

/// Per-height state of a view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeightState {
    Single,
    Pair,
}

impl HeightState {
    pub fn is_pair(self) -> bool {
        self == HeightState::Pair
    }

    pub fn symbol(self) -> char {
        match self {
            HeightState::Single => 'S',
            HeightState::Pair => 'P',
        }
    }

    pub fn from_symbol(c: char) -> Option<Self> {
        match c {
            'S' | 's' | '0' => Some(HeightState::Single),
            'P' | 'p' | '1' => Some(HeightState::Pair),
            _ => None,
        }
    }
}

/// States for heights `1..=len`; index 0 holds height 1.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StateSequence {
    pub states: Vec<HeightState>,
}

impl StateSequence {
    pub fn new(states: Vec<HeightState>) -> Self {
        StateSequence { states }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn pair_count(&self) -> usize {
        self.states.iter().filter(|s| s.is_pair()).count()
    }

    pub fn to_symbols(&self) -> String {
        self.states.iter().map(|s| s.symbol()).collect()
    }

    /// Parses `S`/`P` characters; whitespace, commas and newlines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut states = Vec::with_capacity(text.len());
        for c in text.chars() {
            if c.is_whitespace() || c == ',' {
                continue;
            }
            states.push(HeightState::from_symbol(c).ok_or_else(|| {
                Error::Parameter(format!("invalid state symbol {c:?}"))
            })?);
        }
        Ok(StateSequence { states })
    }
}

/// The set of broadcast blocks, closed under parents, always containing genesis.
#[derive(Debug, Clone)]
pub struct View {
    blocks: Vec<Block>,
    pos: Vec<u32>,
    max_height: u32,
}

const ABSENT: u32 = u32::MAX;

impl View {
    /// Validates and indexes a block set. Blocks need not be broadcast-stamped,
    /// but if a broadcast round is present it must not precede creation.
    pub fn from_blocks(mut blocks: Vec<Block>) -> Result<Self> {
        if !blocks.iter().any(|b| b.id == GENESIS_ID) {
            blocks.push(Block::genesis());
        }
        blocks.sort_by_key(|b| b.id);
        let max_id = blocks.last().map(|b| b.id).unwrap_or(0) as usize;
        let mut pos = vec![ABSENT; max_id + 1];
        for (i, b) in blocks.iter().enumerate() {
            if pos[b.id as usize] != ABSENT {
                return Err(Error::MalformedView(format!("duplicate id {}", b.id)));
            }
            pos[b.id as usize] = i as u32;
        }
        let mut max_height = 0;
        for b in &blocks {
            if b.id == GENESIS_ID {
                if b.height != 0 {
                    return Err(Error::MalformedView("genesis height must be 0".into()));
                }
                continue;
            }
            let pi = pos.get(b.parent as usize).copied().unwrap_or(ABSENT);
            if pi == ABSENT {
                return Err(Error::MalformedView(format!(
                    "block {} points to missing parent {}",
                    b.id, b.parent
                )));
            }
            let parent = &blocks[pi as usize];
            if b.height != parent.height + 1 {
                return Err(Error::MalformedView(format!(
                    "block {} has height {} but parent height {}",
                    b.id, b.height, parent.height
                )));
            }
            if b.is_broadcast() && b.broadcast_round < b.created_round {
                return Err(Error::MalformedView(format!(
                    "block {} broadcast before creation",
                    b.id
                )));
            }
            if b.created_round < 1 {
                return Err(Error::MalformedView(format!(
                    "block {} has created_round 0",
                    b.id
                )));
            }
            if b.creator == MinerId::GENESIS {
                return Err(Error::MalformedView(format!(
                    "block {} uses the genesis creator",
                    b.id
                )));
            }
            max_height = max_height.max(b.height);
        }
        Ok(View {
            blocks,
            pos,
            max_height,
        })
    }

    pub fn genesis_only() -> Self {
        View::from_blocks(vec![Block::genesis()]).expect("genesis view is valid")
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn max_height(&self) -> u32 {
        self.max_height
    }

    pub fn get(&self, id: BlockId) -> Option<&Block> {
        let p = *self.pos.get(id as usize)?;
        (p != ABSENT).then(|| &self.blocks[p as usize])
    }

    /// Blocks in the canonical (height, created_round, id) order.
    pub fn ordered(&self) -> Vec<Block> {
        let mut v = self.blocks.clone();
        v.sort_by_key(|b| (b.height, b.created_round, b.id));
        v
    }

    /// Number of blocks at each height `0..=max_height`.
    pub fn height_counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.max_height as usize + 1];
        for b in &self.blocks {
            counts[b.height as usize] += 1;
        }
        counts
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for b in self.ordered() {
            wr.serialize(BlockRecord::from(&b))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for b in self.ordered() {
            serde_json::to_writer(&mut w, &BlockRecord::from(&b))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut blocks = Vec::new();
        for rec in rd.deserialize::<BlockRecord>() {
            blocks.push(record_to_block(rec?));
        }
        View::from_blocks(blocks)
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut blocks = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            blocks.push(record_to_block(serde_json::from_str(&line)?));
        }
        View::from_blocks(blocks)
    }
}

fn record_to_block(r: BlockRecord) -> Block {
    Block {
        id: r.id,
        parent: r.parent.unwrap_or(GENESIS_ID),
        height: r.height,
        creator: MinerId(r.creator),
        created_round: r.created_round,
        broadcast_round: r.broadcast_round.unwrap_or(NOT_BROADCAST),
    }
}

/// Single/Pair state of heights `1..=h_max`, using only the attacker/other partition.
pub fn height_states(view: &View, h_max: u32) -> Result<StateSequence> {
    let n = h_max as usize;
    let mut has_attacker = vec![false; n + 1];
    let mut has_other = vec![false; n + 1];
    for b in view.blocks() {
        let h = b.height as usize;
        if h == 0 || h > n {
            continue;
        }
        if b.creator.is_attacker() {
            has_attacker[h] = true;
        } else {
            has_other[h] = true;
        }
    }
    let mut states = Vec::with_capacity(n);
    for h in 1..=n {
        if !has_attacker[h] && !has_other[h] {
            return Err(Error::MalformedView(format!("height {h} has no block")));
        }
        states.push(if has_attacker[h] && has_other[h] {
            HeightState::Pair
        } else {
            HeightState::Single
        });
    }
    Ok(StateSequence { states })
}

/// Preference key among equal-height candidates: smaller wins.
pub(crate) fn tip_key(b: &Block, rule: ChainRule) -> (bool, u32, u64, BlockId) {
    let deprioritized = match rule {
        ChainRule::FavorAttacker => !b.creator.is_attacker(),
        ChainRule::AgainstAttacker => b.creator.is_attacker(),
    };
    (deprioritized, b.creator.0, b.created_round, b.id)
}

/// Genesis-first path to the preferred maximal-height block.
pub fn longest_chain(view: &View, rule: ChainRule) -> Vec<Block> {
    let top = view.max_height();
    let tip = view
        .blocks()
        .iter()
        .filter(|b| b.height == top)
        .min_by_key(|b| tip_key(b, rule))
        .copied()
        .unwrap_or_else(Block::genesis);
    let mut chain = Vec::with_capacity(top as usize + 1);
    let mut cur = tip;
    loop {
        chain.push(cur);
        if cur.id == GENESIS_ID {
            break;
        }
        cur = *view.get(cur.parent).expect("view is parent-closed");
    }
    chain.reverse();
    chain
}

/// Fraction of non-genesis longest-chain blocks created by `miner`.
pub fn reward_fraction(view: &View, miner: MinerId, rule: ChainRule) -> Result<f64> {
    let chain = longest_chain(view, rule);
    let total = chain.len() - 1;
    if total == 0 {
        return Err(Error::UndefinedFraction(
            "longest chain has no blocks above genesis".into(),
        ));
    }
    let mine = chain[1..].iter().filter(|b| b.creator == miner).count();
    Ok(mine as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blk(id: u32, parent: u32, height: u32, creator: u32, round: u64) -> Block {
        Block {
            id,
            parent,
            height,
            creator: MinerId(creator),
            created_round: round,
            broadcast_round: round,
        }
    }

    #[test]
    fn genesis_only_has_empty_states() {
        let v = View::genesis_only();
        assert!(height_states(&v, 0).unwrap().is_empty());
    }

    #[test]
    fn two_creators_at_one_height_is_pair() {
        let v = View::from_blocks(vec![blk(1, 0, 1, 1, 1), blk(2, 0, 1, 2, 2)]).unwrap();
        assert_eq!(height_states(&v, 1).unwrap().states, vec![HeightState::Pair]);
    }

    #[test]
    fn single_creator_chain_is_all_single() {
        let v = View::from_blocks(vec![
            blk(1, 0, 1, 2, 1),
            blk(2, 1, 2, 2, 2),
            blk(3, 2, 3, 2, 3),
        ])
        .unwrap();
        assert_eq!(height_states(&v, 3).unwrap().to_symbols(), "SSS");
    }

    #[test]
    fn missing_height_is_malformed() {
        let v = View::from_blocks(vec![blk(1, 0, 1, 2, 1)]).unwrap();
        assert!(matches!(height_states(&v, 2), Err(Error::MalformedView(_))));
    }

    #[test]
    fn broken_parent_is_rejected() {
        assert!(View::from_blocks(vec![blk(1, 7, 1, 2, 1)]).is_err());
        assert!(View::from_blocks(vec![blk(1, 0, 2, 2, 1)]).is_err());
    }

    #[test]
    fn linear_chain_is_its_own_longest_chain() {
        let v = View::from_blocks(vec![
            blk(1, 0, 1, 2, 1),
            blk(2, 1, 2, 1, 2),
            blk(3, 2, 3, 2, 3),
        ])
        .unwrap();
        let ids: Vec<_> = longest_chain(&v, ChainRule::AgainstAttacker)
            .iter()
            .map(|b| b.id)
            .collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn strictly_longer_branch_wins_under_either_rule() {
        let v = View::from_blocks(vec![
            blk(1, 0, 1, 2, 1),
            blk(2, 1, 2, 1, 2),
            blk(3, 1, 2, 2, 3),
            blk(4, 3, 3, 2, 4),
        ])
        .unwrap();
        for rule in [ChainRule::FavorAttacker, ChainRule::AgainstAttacker] {
            let ids: Vec<_> = longest_chain(&v, rule).iter().map(|b| b.id).collect();
            assert_eq!(ids, vec![0, 1, 3, 4]);
        }
    }

    #[test]
    fn equal_tips_follow_rule() {
        let v = View::from_blocks(vec![blk(1, 0, 1, 2, 1), blk(2, 0, 1, 1, 2)]).unwrap();
        assert_eq!(longest_chain(&v, ChainRule::FavorAttacker)[1].id, 2);
        assert_eq!(longest_chain(&v, ChainRule::AgainstAttacker)[1].id, 1);
    }

    #[test]
    fn reward_fraction_counts() {
        let v = View::from_blocks(vec![
            blk(1, 0, 1, 1, 1),
            blk(2, 1, 2, 2, 2),
            blk(3, 2, 3, 1, 3),
            blk(4, 3, 4, 2, 4),
        ])
        .unwrap();
        assert_eq!(
            reward_fraction(&v, MinerId::ATTACKER, ChainRule::AgainstAttacker).unwrap(),
            0.5
        );
        let all = View::from_blocks(vec![blk(1, 0, 1, 1, 1), blk(2, 1, 2, 1, 2)]).unwrap();
        assert_eq!(
            reward_fraction(&all, MinerId::ATTACKER, ChainRule::FavorAttacker).unwrap(),
            1.0
        );
        assert!(reward_fraction(&View::genesis_only(), MinerId::ATTACKER, ChainRule::FavorAttacker).is_err());
    }

    #[test]
    fn csv_and_jsonl_round_trip() {
        let v = View::from_blocks(vec![
            blk(1, 0, 1, 1, 1),
            blk(2, 0, 1, 2, 1),
            blk(3, 2, 2, 2, 3),
        ])
        .unwrap();
        let mut buf = Vec::new();
        v.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,creator,parent,height,created_round,broadcast_round"));
        let back = View::read_csv(&buf[..]).unwrap();
        assert_eq!(back.ordered(), v.ordered());
        let mut jbuf = Vec::new();
        v.write_jsonl(&mut jbuf).unwrap();
        let back = View::read_jsonl(&jbuf[..]).unwrap();
        assert_eq!(back.ordered(), v.ordered());
    }

    #[test]
    fn state_symbols_parse() {
        let s = StateSequence::parse("S P,S\nP").unwrap();
        assert_eq!(s.to_symbols(), "SPSP");
        assert!(StateSequence::parse("SX").is_err());
    }
}
