//! Attacker configurations at label-determination moments, the one-step law
//! between them, and the belief filter that conditions on public states only.

use crate::engine::RoundDistribution;
use crate::error::{Error, Result};
use crate::model::HeightState;

/// What the attacker holds at the moment the latest height's state is fixed.
/// `pairs` counts hidden Pair-labeled blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Config {
    /// Last fixed height is Single.
    Settled { pairs: u32 },
    /// Last fixed height is a hidden Pair-labeled attacker block.
    PairOnTop { pairs: u32 },
    /// A hidden block sits above the top Pair; its safety is unknown.
    Undecided { pairs: u32 },
    /// An undecided block was just labeled Single and the attacker already
    /// holds the next height's block, which is safe.
    JustSettled { pairs: u32 },
    /// A public equal-length race with nothing hidden.
    Race,
}

/// Probability mass over configurations, indexed by pair count.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigMass {
    pub settled: Vec<f64>,
    pub pair_on_top: Vec<f64>,
    pub undecided: Vec<f64>,
    pub just_settled: Vec<f64>,
    pub race: f64,
}

impl ConfigMass {
    pub fn zeros(cap: usize) -> Self {
        ConfigMass {
            settled: vec![0.0; cap + 2],
            pair_on_top: vec![0.0; cap + 2],
            undecided: vec![0.0; cap + 2],
            just_settled: vec![0.0; cap + 2],
            race: 0.0,
        }
    }

    pub fn point(config: Config, cap: usize) -> Self {
        let mut m = Self::zeros(cap);
        match config {
            Config::Settled { pairs } => m.settled[pairs as usize] = 1.0,
            Config::PairOnTop { pairs } => m.pair_on_top[pairs as usize] = 1.0,
            Config::Undecided { pairs } => m.undecided[pairs as usize] = 1.0,
            Config::JustSettled { pairs } => m.just_settled[pairs as usize] = 1.0,
            Config::Race => m.race = 1.0,
        }
        m
    }

    pub fn cap(&self) -> usize {
        self.settled.len() - 2
    }

    pub fn total(&self) -> f64 {
        self.settled.iter().sum::<f64>()
            + self.pair_on_top.iter().sum::<f64>()
            + self.undecided.iter().sum::<f64>()
            + self.just_settled.iter().sum::<f64>()
            + self.race
    }

    pub fn get(&self, config: Config) -> f64 {
        match config {
            Config::Settled { pairs } => self.settled[pairs as usize],
            Config::PairOnTop { pairs } => self.pair_on_top[pairs as usize],
            Config::Undecided { pairs } => self.undecided[pairs as usize],
            Config::JustSettled { pairs } => self.just_settled[pairs as usize],
            Config::Race => self.race,
        }
    }

    fn total_up_to(&self, extent: usize) -> f64 {
        let e = extent.min(self.settled.len());
        self.settled[..e].iter().sum::<f64>()
            + self.pair_on_top[..e].iter().sum::<f64>()
            + self.undecided[..e].iter().sum::<f64>()
            + self.just_settled[..e].iter().sum::<f64>()
            + self.race
    }

    /// Largest pair count carrying mass.
    fn top_index(&self) -> usize {
        let last = |v: &[f64]| v.iter().rposition(|&x| x != 0.0).unwrap_or(0);
        last(&self.settled)
            .max(last(&self.pair_on_top))
            .max(last(&self.undecided))
            .max(last(&self.just_settled))
    }
}

/// Where the mass of a configuration goes by the time the next height is fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolution {
    /// `[k]`: a safe block at a fresh height; Pair leads to `PairOnTop{k}`,
    /// Single to `Settled{k-1}`.
    pub fresh_coin: Vec<f64>,
    /// `[k]`: an undecided block turned out safe; Pair leads to `Undecided{k}`,
    /// Single to `JustSettled{k-1}`.
    pub undecided_coin: Vec<f64>,
    /// Labeled Single without a coin, leading to `Settled{0}`.
    pub forced_single: f64,
    /// Simultaneous first blocks, labeled Pair, leading to `Race`.
    pub forced_pair: f64,
    /// Entries at or above this index are zero.
    extent: usize,
}

impl Resolution {
    fn empty(cap: usize) -> Self {
        Resolution {
            fresh_coin: vec![0.0; cap + 2],
            undecided_coin: vec![0.0; cap + 2],
            forced_single: 0.0,
            forced_pair: 0.0,
            extent: cap + 2,
        }
    }

    /// Probability the next height carries a safe attacker block.
    pub fn safe(&self) -> f64 {
        self.fresh_coin[..self.extent].iter().sum::<f64>()
            + self.undecided_coin[..self.extent].iter().sum::<f64>()
    }

    pub fn total(&self) -> f64 {
        self.safe() + self.forced_single + self.forced_pair
    }
}

/// Round-level visit masses reused across calls.
#[derive(Debug, Clone)]
struct Scratch {
    fresh: Vec<f64>,
    pair_top: Vec<f64>,
    undec: Vec<f64>,
}

impl Scratch {
    fn new(cap: usize) -> Self {
        Scratch {
            fresh: vec![0.0; cap + 3],
            pair_top: vec![0.0; cap + 3],
            undec: vec![0.0; cap + 3],
        }
    }
}

/// Pushes `mass` through the round-by-round attacker machine until the next
/// height's state is fixed. Linear in `mass`; runs in time linear in the cap.
pub fn resolve(mass: &ConfigMass, dist: &RoundDistribution) -> Resolution {
    let cap = mass.cap();
    let mut out = Resolution::empty(cap);
    resolve_into(mass, mass.top_index().min(cap), dist, &mut Scratch::new(cap), &mut out);
    out
}

fn resolve_into(
    mass: &ConfigMass,
    top: usize,
    dist: &RoundDistribution,
    s: &mut Scratch,
    out: &mut Resolution,
) {
    let a = dist.alpha_prime;
    let b = dist.beta_prime;
    let c = dist.honest_only();
    // Total probability of passing through each round-level situation.
    let (fresh, pair_top, undec) = (&mut s.fresh, &mut s.pair_top, &mut s.undec);
    fresh[top + 1] = 0.0;
    pair_top[top + 1] = 0.0;
    pair_top[0] = 0.0;
    undec[top + 1] = 0.0;
    undec[1] = 0.0;
    for k in (0..=top).rev() {
        fresh[k] = mass.settled[k] + c * fresh[k + 1];
    }
    for k in (1..=top).rev() {
        pair_top[k] = mass.pair_on_top[k] + c * pair_top[k + 1];
    }
    for k in (1..=top).rev() {
        undec[k] = mass.undecided[k] + a * pair_top[k] + b * pair_top[k + 1] + c * undec[k + 1];
    }
    let p1 = if top >= 1 { pair_top[1] } else { 0.0 };
    let race = mass.race + c * p1;

    out.fresh_coin[..out.extent].fill(0.0);
    out.undecided_coin[..out.extent].fill(0.0);
    out.forced_single = c * fresh[0] + b * p1 + (a + c) * race + c * undec[1];
    out.forced_pair = b * fresh[0] + b * race;
    for k in 0..=top {
        out.fresh_coin[k + 1] += a * fresh[k] + mass.just_settled[k];
        if k >= 1 {
            out.fresh_coin[k] += b * fresh[k];
            out.undecided_coin[k + 1] += a * undec[k];
            out.undecided_coin[k] += b * undec[k];
        }
    }
    out.extent = top + 2;
}

/// Posterior configuration mass after observing `label`, unnormalized, with
/// coins landing Pair at probability `bias`.
pub fn posterior(res: &Resolution, label: HeightState, bias: f64, cap: usize) -> ConfigMass {
    let mut m = ConfigMass::zeros(cap);
    posterior_into(res, label, bias, &mut m);
    m
}

/// Writes the posterior into `m`, which must be all zero up to `res.extent`.
fn posterior_into(res: &Resolution, label: HeightState, bias: f64, m: &mut ConfigMass) {
    match label {
        HeightState::Pair => {
            for k in 1..res.extent {
                m.pair_on_top[k] = bias * res.fresh_coin[k];
                m.undecided[k] = bias * res.undecided_coin[k];
            }
            m.race = res.forced_pair;
        }
        HeightState::Single => {
            for k in 1..res.extent {
                m.settled[k - 1] = (1.0 - bias) * res.fresh_coin[k];
                m.just_settled[k - 1] = (1.0 - bias) * res.undecided_coin[k];
            }
            m.settled[0] += res.forced_single;
        }
    }
}

/// Safe-block probability of a single configuration with no natural pairs,
/// by closed form.
pub fn safe_probability_zero_latency(config: Config, alpha: f64) -> f64 {
    let c = 1.0 - alpha;
    match config {
        Config::Settled { pairs } => 1.0 - c.powi(pairs as i32 + 1),
        Config::PairOnTop { pairs } => {
            let i = pairs as i32;
            1.0 - c.powi(i + 1) - (i + 1) as f64 * alpha * c.powi(i)
        }
        Config::Undecided { pairs } => 1.0 - c.powi(pairs as i32),
        Config::JustSettled { .. } => 1.0,
        Config::Race => 0.0,
    }
}

/// Conditional distribution of the attacker configuration given only the
/// public state sequence so far.
#[derive(Debug, Clone)]
pub struct Belief {
    mass: ConfigMass,
    /// Highest pair count carrying mass.
    top: usize,
    spare: ConfigMass,
    dist: RoundDistribution,
    floor: f64,
    precision: f64,
    worst_step_loss: f64,
    pending: Resolution,
    scratch: Scratch,
}

impl Belief {
    /// Starts at genesis: nothing hidden, height 0 Single.
    pub fn new(dist: RoundDistribution, cap: usize, precision: f64) -> Result<Self> {
        if cap < 2 {
            return Err(Error::Parameter("belief cap must be at least 2".into()));
        }
        let mass = ConfigMass::point(Config::Settled { pairs: 0 }, cap);
        let mut b = Belief {
            mass,
            top: 0,
            spare: ConfigMass::zeros(cap),
            dist,
            floor: 1e-18,
            precision,
            worst_step_loss: 0.0,
            pending: Resolution::empty(cap),
            scratch: Scratch::new(cap),
        };
        resolve_into(&b.mass, 0, &b.dist, &mut b.scratch, &mut b.pending);
        Ok(b)
    }

    pub fn mass(&self) -> &ConfigMass {
        &self.mass
    }

    /// Safe-block probability of the next height given the states so far.
    pub fn safe_probability(&self) -> f64 {
        self.pending.safe()
    }

    /// Forced-pair probability of the next height given the states so far.
    pub fn forced_pair_probability(&self) -> f64 {
        self.pending.forced_pair
    }

    /// Coin bias that makes the next height Pair with probability `beta`.
    pub fn bias(&self, beta: f64) -> f64 {
        let safe = self.safe_probability();
        if safe <= 0.0 {
            0.0
        } else {
            (beta - self.forced_pair_probability()) / safe
        }
    }

    /// Largest mass fraction removed by the floor or the cap in any single step.
    pub fn worst_step_loss(&self) -> f64 {
        self.worst_step_loss
    }

    /// Conditions on the next height's state, given the coin bias in force.
    pub fn observe(&mut self, label: HeightState, bias: f64) -> Result<()> {
        let cap = self.mass.cap();
        let next = &mut self.spare;
        posterior_into(&self.pending, label, bias, next);
        let extent = self.pending.extent;
        let total = next.total_up_to(extent);
        if !(total > 0.0) {
            return Err(Error::Precision(format!(
                "state {label:?} has zero probability under the belief"
            )));
        }
        let inv = 1.0 / total;
        let mut lost = 0.0;
        let mut top = 0;
        for v in [
            &mut next.settled,
            &mut next.pair_on_top,
            &mut next.undecided,
            &mut next.just_settled,
        ] {
            // Fold the overflow slot into the cap.
            let over = v[cap + 1];
            v[cap] += over;
            v[cap + 1] = 0.0;
            lost += over * inv;
            for (k, x) in v[..extent.min(cap + 1)].iter_mut().enumerate() {
                *x *= inv;
                if *x < self.floor {
                    lost += *x;
                    *x = 0.0;
                } else {
                    top = top.max(k);
                }
            }
        }
        next.race *= inv;
        let rescale = 1.0 / next.total_up_to(extent);
        for v in [
            &mut next.settled,
            &mut next.pair_on_top,
            &mut next.undecided,
            &mut next.just_settled,
        ] {
            v[..=top].iter_mut().for_each(|x| *x *= rescale);
        }
        next.race *= rescale;
        self.worst_step_loss = self.worst_step_loss.max(lost);
        if lost > self.precision {
            return Err(Error::Precision(format!(
                "belief truncation lost {lost:e} > {:e}",
                self.precision
            )));
        }
        std::mem::swap(&mut self.mass, &mut self.spare);
        // Clear the old mass so the spare is all zero for the next step.
        let old_extent = (self.top + 2).min(cap + 2);
        for v in [
            &mut self.spare.settled,
            &mut self.spare.pair_on_top,
            &mut self.spare.undecided,
            &mut self.spare.just_settled,
        ] {
            v[..old_extent].fill(0.0);
        }
        self.spare.race = 0.0;
        self.top = top;
        resolve_into(&self.mass, top, &self.dist, &mut self.scratch, &mut self.pending);
        Ok(())
    }
}
