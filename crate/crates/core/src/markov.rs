//! Exact reward of the zero-latency labeled strategy through its
//! height-determination Markov chain, truncated at a maximum lead.

use crate::analysis::pairs_won_fraction;
use crate::error::{Error, Result};
use serde::Serialize;

/// Chain state at the moment a height's state is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum MarkovState {
    /// Nothing hidden.
    Zero,
    /// `pairs ≥ 1` hidden pairs topped by a Single.
    Settled(u32),
    /// `pairs ≥ 1` hidden pairs, the top one just fixed.
    PairOnTop(u32),
    /// `pairs ≥ 2` hidden pairs plus an undecided block above them.
    Undecided(u32),
}

/// What a transition reveals about who wins pairs, chain blocks and solo pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Counters {
    pub pairs_honest: f64,
    pub pairs_attacker: f64,
    pub blocks_honest: f64,
    pub blocks_attacker: f64,
    pub solo_honest: f64,
    pub solo_attacker: f64,
}

impl Counters {
    fn new(v: [f64; 6]) -> Self {
        Counters {
            pairs_honest: v[0],
            pairs_attacker: v[1],
            blocks_honest: v[2],
            blocks_attacker: v[3],
            solo_honest: v[4],
            solo_attacker: v[5],
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.pairs_honest,
            self.pairs_attacker,
            self.blocks_honest,
            self.blocks_attacker,
            self.solo_honest,
            self.solo_attacker,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Transition {
    pub from: MarkovState,
    pub to: MarkovState,
    pub probability: f64,
    pub counters: Counters,
    /// Heights whose state this transition fixes.
    pub heights: u32,
}

#[derive(Debug, Clone)]
pub struct Chain {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub cap: u32,
    pub transitions: Vec<Transition>,
}

/// Stationary probability per state, indexed like [`Chain::index`].
#[derive(Debug, Clone, Serialize)]
pub struct StationaryDistribution {
    pub probabilities: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// The three reward expressions plus the shares they are built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChainRewards {
    pub block_ratio: f64,
    pub pair_counting: f64,
    pub solo_pair: f64,
    pub pair_share: f64,
    pub solo_pair_share: f64,
}

impl ChainRewards {
    pub fn max_disagreement(&self) -> f64 {
        let v = [self.block_ratio, self.pair_counting, self.solo_pair];
        let hi = v.iter().cloned().fold(f64::MIN, f64::max);
        let lo = v.iter().cloned().fold(f64::MAX, f64::min);
        hi - lo
    }
}

/// Reward of a strategy that creates an `alpha` share of `1 + beta` blocks
/// per height and wins a `pair_share` fraction of the Pairs.
pub fn reward_from_pair_share(alpha: f64, beta: f64, pair_share: f64) -> f64 {
    alpha - (1.0 - alpha - pair_share) * beta
}

impl Chain {
    pub fn build(alpha: f64, beta: f64, gamma: f64, cap: u32) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Parameter(format!("alpha {alpha} not in (0, 1)")));
        }
        if !(0.0..=alpha * alpha).contains(&beta) {
            return Err(Error::Validity(format!("beta {beta} not in [0, alpha^2]")));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Parameter(format!("gamma {gamma} not in [0, 1]")));
        }
        if cap < 8 {
            return Err(Error::Parameter(format!("lead cap {cap} below 8")));
        }
        let c = 1.0 - alpha;
        let a = alpha;
        let mut t = Vec::new();
        let clamp = |k: u32| k.min(cap);
        let settled = |k: u32| if k == 0 { MarkovState::Zero } else { MarkovState::Settled(clamp(k)) };
        let mut push = |from, to, probability: f64, counters: [f64; 6], heights| {
            if probability > 0.0 {
                t.push(Transition {
                    from,
                    to,
                    probability,
                    counters: Counters::new(counters),
                    heights,
                });
            }
        };
        let zero = [0.0; 6];
        for i in 0..=cap {
            let from = settled(i);
            let bias = beta / (1.0 - c.powi(i as i32 + 1));
            // Honest completes every pair and takes the next height.
            push(from, MarkovState::Zero, c.powi(i as i32 + 1), [0.0, 0.0, 1.0, 0.0, 0.0, 0.0], 1);
            for j in 0..=i {
                let reach = c.powi(j as i32) * a;
                push(from, MarkovState::PairOnTop(clamp(i - j + 1)), reach * bias, zero, 1);
                push(from, settled(i - j), reach * (1.0 - bias), [0.0, 0.0, 0.0, 1.0, 0.0, 0.0], 1);
            }
        }
        for i in 2..=cap {
            let from = MarkovState::Undecided(i);
            let bias = beta / (1.0 - c.powi(i as i32));
            push(from, MarkovState::Zero, c.powi(i as i32), zero, 1);
            for j in 0..i {
                let reach = c.powi(j as i32) * a;
                push(from, MarkovState::Undecided(clamp(i + 1 - j)), reach * bias, [0.0, 1.0, 0.0, 1.0, 0.0, 0.0], 1);
                push(from, MarkovState::PairOnTop(clamp(i + 1 - j)), reach * (1.0 - bias) * beta, zero, 2);
                push(
                    from,
                    settled(i - j),
                    reach * (1.0 - bias) * (1.0 - beta),
                    [0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
                    2,
                );
            }
        }
        for i in 1..=cap {
            let from = MarkovState::PairOnTop(i);
            let fi = i as i32;
            let safe = 1.0 - c.powi(fi + 1) - (fi + 1) as f64 * a * c.powi(fi);
            let bias = beta / safe;
            let g = gamma;
            push(from, MarkovState::Zero, c.powi(fi + 1), [1.0 - g, g, 2.0 - g, g, 1.0 - g, g], 1);
            push(
                from,
                MarkovState::Zero,
                (fi + 1) as f64 * c.powi(fi) * a,
                [0.0, 1.0, 0.0, 2.0, 0.0, 1.0],
                1,
            );
            for j in 0..i {
                let reach = (j + 1) as f64 * a * a * c.powi(j as i32);
                push(from, MarkovState::Undecided(clamp(i + 1 - j)), reach * bias, [0.0, 2.0, 0.0, 3.0, 0.0, 0.0], 1);
                push(
                    from,
                    MarkovState::PairOnTop(clamp(i + 1 - j)),
                    reach * (1.0 - bias) * beta,
                    [0.0, 1.0, 0.0, 2.0, 0.0, 1.0],
                    2,
                );
                push(
                    from,
                    settled(i - j),
                    reach * (1.0 - bias) * (1.0 - beta),
                    [0.0, 1.0, 0.0, 3.0, 0.0, 1.0],
                    2,
                );
            }
        }
        Ok(Chain {
            alpha,
            beta,
            gamma,
            cap,
            transitions: t,
        })
    }

    pub fn num_states(&self) -> usize {
        3 * self.cap as usize + 1
    }

    pub fn index(&self, s: MarkovState) -> usize {
        let cap = self.cap as usize;
        match s {
            MarkovState::Zero => 0,
            MarkovState::Settled(i) => i as usize,
            MarkovState::PairOnTop(i) => cap + i as usize,
            MarkovState::Undecided(i) => 2 * cap + i as usize,
        }
    }

    pub fn states(&self) -> Vec<MarkovState> {
        let mut v = vec![MarkovState::Zero];
        v.extend((1..=self.cap).map(MarkovState::Settled));
        v.extend((1..=self.cap).map(MarkovState::PairOnTop));
        v.extend((1..=self.cap).map(MarkovState::Undecided));
        v
    }

    /// Outgoing probability per state, zero where a state has no rows.
    pub fn row_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.num_states()];
        for t in &self.transitions {
            s[self.index(t.from)] += t.probability;
        }
        s
    }

    /// One application of the transition operator to a row vector.
    pub fn step(&self, p: &[f64]) -> Vec<f64> {
        let mut next = vec![0.0; self.num_states()];
        for t in &self.transitions {
            next[self.index(t.to)] += p[self.index(t.from)] * t.probability;
        }
        next
    }

    /// Power iteration from the empty state until the L1 change is below `tol`.
    pub fn stationary(&self, tol: f64, max_iter: usize) -> Result<StationaryDistribution> {
        let mut p = vec![0.0; self.num_states()];
        p[0] = 1.0;
        for it in 1..=max_iter {
            let mut next = self.step(&p);
            let total: f64 = next.iter().sum();
            next.iter_mut().for_each(|x| *x /= total);
            let residual: f64 = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum();
            p = next;
            if residual < tol {
                return Ok(StationaryDistribution {
                    probabilities: p,
                    residual,
                    iterations: it,
                });
            }
        }
        Err(Error::NonConvergence(format!(
            "stationary distribution not within {tol:e} after {max_iter} iterations"
        )))
    }

    /// Stationary flow through each transition.
    fn flows<'a>(&'a self, dist: &'a StationaryDistribution) -> impl Iterator<Item = (f64, &'a Transition)> + 'a {
        self.transitions
            .iter()
            .map(move |t| (dist.probabilities[self.index(t.from)] * t.probability, t))
    }

    fn weighted(&self, dist: &StationaryDistribution) -> ([f64; 6], f64) {
        let mut sums = [0.0; 6];
        let mut heights = 0.0;
        for (f, t) in self.flows(dist) {
            for (s, v) in sums.iter_mut().zip(t.counters.as_array()) {
                *s += f * v;
            }
            heights += f * t.heights as f64;
        }
        (sums, heights)
    }

    pub fn rewards(&self, dist: &StationaryDistribution) -> Result<ChainRewards> {
        let ([ph, pa, bh, ba, sh, sa], _) = self.weighted(dist);
        if !(bh + ba > 0.0) {
            return Err(Error::UndefinedFraction("no chain growth".into()));
        }
        let block_ratio = ba / (bh + ba);
        let pair_share = if ph + pa > 0.0 { pa / (ph + pa) } else { 1.0 };
        let solo_pair_share = if sh + sa > 0.0 { sa / (sh + sa) } else { 1.0 };
        let (a, b) = (self.alpha, self.beta);
        Ok(ChainRewards {
            block_ratio,
            pair_counting: reward_from_pair_share(a, b, pair_share),
            solo_pair: reward_from_pair_share(a, b, pairs_won_fraction(solo_pair_share, b)),
            pair_share,
            solo_pair_share,
        })
    }

    /// Chain blocks credited per fixed height in the stationary regime; one
    /// when the block bookkeeping is conserved.
    pub fn blocks_per_height(&self, dist: &StationaryDistribution) -> f64 {
        let (s, heights) = self.weighted(dist);
        (s[2] + s[3]) / heights
    }

    /// Stationary fraction of heights fixed as Pair.
    pub fn pair_rate(&self, dist: &StationaryDistribution) -> f64 {
        let (_, heights) = self.weighted(dist);
        let mut pairs = 0.0;
        for (f, t) in self.flows(dist) {
            pairs += f * pair_heights(t);
        }
        pairs / heights
    }

    /// Stationary mass on states at the lead cap.
    pub fn tail_mass(&self, dist: &StationaryDistribution) -> f64 {
        [
            MarkovState::Settled(self.cap),
            MarkovState::PairOnTop(self.cap),
            MarkovState::Undecided(self.cap),
        ]
        .iter()
        .map(|&s| dist.probabilities[self.index(s)])
        .sum()
    }
}

/// Pair-labeled heights fixed by a transition: only moves into a pair-topped
/// or undecided state add a Pair.
fn pair_heights(t: &Transition) -> f64 {
    match t.to {
        MarkovState::PairOnTop(_) | MarkovState::Undecided(_) => 1.0,
        _ => 0.0,
    }
}

/// Builds and solves the chain, returning the three rewards.
pub fn solve(alpha: f64, beta: f64, gamma: f64, cap: u32, tol: f64) -> Result<(Chain, StationaryDistribution, ChainRewards)> {
    let chain = Chain::build(alpha, beta, gamma, cap)?;
    let dist = chain.stationary(tol, 1_000_000)?;
    let r = chain.rewards(&dist)?;
    Ok((chain, dist, r))
}
