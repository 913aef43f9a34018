//! Strategies that choose each height's state with a biased coin so the
//! public state sequence is i.i.d.

pub mod kernel;
pub mod labeled;
pub mod warmup;

pub use kernel::{Belief, Config, ConfigMass, Resolution};
pub use labeled::LabeledSm;
pub use warmup::WarmupSm;

use crate::engine::BlockTree;
use crate::error::{Error, Result};
use crate::model::BlockId;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

const BIAS_SLACK: f64 = 1e-12;

/// Intended fate of a withheld block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Intent {
    /// Released once another miner's block at the same height is public.
    Pair,
    /// Released as soon as its parent is public.
    Single,
    /// Sits above the top Pair until its height is determined.
    Undecided,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Withheld {
    pub id: BlockId,
    pub height: u32,
    pub intent: Intent,
}

/// Releases from the bottom of the hidden stack until nothing more qualifies.
pub(crate) fn release_ready(
    hidden: &mut VecDeque<Withheld>,
    tree: &BlockTree,
    out: &mut Vec<BlockId>,
) {
    while let Some(&front) = hidden.front() {
        let ready = match front.intent {
            Intent::Pair => tree.nonattacker_public_at(front.height),
            Intent::Single => {
                let parent = tree.block(front.id).parent;
                tree.is_public(parent) || out.contains(&parent)
            }
            Intent::Undecided => false,
        };
        if !ready {
            break;
        }
        out.push(front.id);
        hidden.pop_front();
    }
}

/// Flips a coin landing true with probability `bias`, rejecting biases
/// outside the unit interval.
pub(crate) fn flip(rng: &mut ChaCha8Rng, bias: f64) -> Result<bool> {
    if !(-BIAS_SLACK..=1.0 + BIAS_SLACK).contains(&bias) {
        return Err(Error::Validity(format!("coin bias {bias} outside [0, 1]")));
    }
    Ok(rng.gen::<f64>() < bias)
}

/// Fails with a protocol violation when an internal invariant breaks.
pub(crate) fn invariant(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::ProtocolViolation(msg()))
    }
}
