//! Closed-form rewards, profitability thresholds and the natural-pair
//! sufficient condition.

use crate::error::{Error, Result};

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} = {v} not in [0, 1]")))
    }
}

/// Reward of the warmup strategy, which wins every Pair.
pub fn warmup_reward(alpha: f64, beta: f64) -> Result<f64> {
    unit("alpha", alpha)?;
    if !(0.0..=alpha).contains(&beta) {
        return Err(Error::Validity(format!("beta {beta} not in [0, alpha]")));
    }
    Ok(alpha + alpha * beta)
}

/// Reward when a `delta` fraction of Pairs goes to the attacker.
pub fn pair_reward(alpha: f64, beta: f64, delta: f64) -> Result<f64> {
    unit("alpha", alpha)?;
    unit("beta", beta)?;
    unit("delta", delta)?;
    Ok(alpha - (1.0 - alpha - delta) * beta)
}

/// Lower bound on the fraction of solo Pairs the labeled strategy wins.
pub fn solo_pair_lower_bound(alpha: f64, beta: f64) -> Result<f64> {
    unit("alpha", alpha)?;
    unit("beta", beta)?;
    if beta >= 1.0 {
        return Err(Error::Singular("beta = 1".into()));
    }
    Ok((2.0 * alpha - alpha * alpha - beta) / (1.0 - beta))
}

/// Fraction of all Pairs won when a `solo_share` fraction of solo Pairs is
/// won and every Pair adjacent to another Pair is won.
pub fn pairs_won_fraction(solo_share: f64, beta: f64) -> f64 {
    solo_share * (1.0 - beta) * (1.0 - beta) + 2.0 * beta - beta * beta
}

/// Smallest hashrate at which the zero-latency labeled strategy profits.
pub fn main_threshold(beta: f64) -> Result<f64> {
    if beta == 1.0 {
        return Err(Error::Singular("beta = 1".into()));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Parameter(format!("beta {beta} not in [0, 1)")));
    }
    Ok((3.0 - 2.0 * beta - (5.0 - 4.0 * beta).sqrt()) / (2.0 * (1.0 - beta)))
}

/// The quartic whose root in (0, 1) is `alpha_star`.
pub fn alpha_star_polynomial(a: f64) -> f64 {
    a.powi(4) - 2.0 * a.powi(3) + 3.0 * a - 1.0
}

/// The root in (0, 1) of `a^4 - 2a^3 + 3a - 1`.
pub fn alpha_star() -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if alpha_star_polynomial(lo) * alpha_star_polynomial(mid) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut root = 0.5 * (lo + hi);
    for _ in 0..4 {
        let slope = 4.0 * root.powi(3) - 6.0 * root * root + 3.0;
        root -= alpha_star_polynomial(root) / slope;
    }
    root
}

/// Hashrate above which classic selfish mining wins more than a `1 - alpha`
/// share of Pairs when it wins a `gamma` share of ties.
pub fn sm_threshold(gamma: f64) -> Result<f64> {
    unit("gamma", gamma)?;
    Ok((1.0 - gamma) / (3.0 - 2.0 * gamma))
}

/// Round probabilities `(attacker only, honest only)` from the hashrate and
/// the natural pair rate.
fn rounds(alpha: f64, beta_prime: f64) -> Result<(f64, f64)> {
    unit("alpha", alpha)?;
    unit("beta_prime", beta_prime)?;
    let ap = alpha * (1.0 + beta_prime) - beta_prime;
    if ap < 0.0 {
        return Err(Error::Parameter(format!(
            "attacker-only round probability {ap} < 0"
        )));
    }
    let hp = 1.0 - ap - beta_prime;
    if hp <= 0.0 {
        return Err(Error::Singular("no honest-only rounds".into()));
    }
    Ok((ap, hp))
}

/// Honest-mining benchmark share for the natural-pair setting (approximate
/// per-Pair win probability; see `honest_share_exact`).
pub fn honest_reward_general(alpha: f64, beta_prime: f64) -> Result<f64> {
    let (ap, hp) = rounds(alpha, beta_prime)?;
    if beta_prime >= 1.0 {
        return Err(Error::Singular("beta_prime = 1".into()));
    }
    Ok((alpha - beta_prime + ap * beta_prime / hp) / (1.0 - beta_prime))
}

/// Chain share of an honest attacker when ties go against it: every Pair
/// run is settled by the next Single.
pub fn honest_share_exact(alpha: f64, beta_prime: f64) -> Result<f64> {
    let (ap, _) = rounds(alpha, beta_prime)?;
    if beta_prime >= 1.0 {
        return Err(Error::Singular("beta_prime = 1".into()));
    }
    Ok(ap / (1.0 - beta_prime))
}

/// Expected attacker blocks and total chain blocks per short-SM episode.
fn episode_blocks(alpha: f64, beta_prime: f64) -> Result<(f64, f64)> {
    let (ap, hp) = rounds(alpha, beta_prime)?;
    if ap >= 1.0 || beta_prime >= 1.0 {
        return Err(Error::Singular("degenerate round distribution".into()));
    }
    let b = beta_prime;
    let tail = (2.0 + b - ap) * ap / (1.0 - ap);
    let attacker = (2.0 - b) * hp * ap / ((1.0 - b) * (1.0 - b)) + 2.0 * b + tail;
    let total = (2.0 - b) * hp / (1.0 - b) + 2.0 * b + tail;
    Ok((attacker, total))
}

/// Expected episode value of short selfish mining when each chain block is
/// charged `charge`.
pub fn short_sm_expected_reward(alpha: f64, beta_prime: f64, charge: f64) -> Result<f64> {
    let (attacker, total) = episode_blocks(alpha, beta_prime)?;
    Ok(attacker - charge * total)
}

/// Margin of the sufficient profitability condition with the approximate
/// block charge `(a' - a'^2) / (1 - a' - b')`.
pub fn general_condition(alpha: f64, beta_prime: f64) -> Result<f64> {
    let (ap, hp) = rounds(alpha, beta_prime)?;
    let charge = (ap - ap * ap) / hp;
    condition_with_charge(alpha, beta_prime, charge)
}

/// The same margin charged at the exact honest share.
pub fn general_condition_exact(alpha: f64, beta_prime: f64) -> Result<f64> {
    let charge = honest_share_exact(alpha, beta_prime)?;
    condition_with_charge(alpha, beta_prime, charge)
}

/// Episode margin over honest mining when each chain block is charged `charge`.
pub fn condition_with_charge(alpha: f64, beta_prime: f64, charge: f64) -> Result<f64> {
    let (attacker, total) = episode_blocks(alpha, beta_prime)?;
    Ok((attacker - 1.0) - charge * (total - 1.0))
}

/// Sign change of `f` in `[lo, hi]` by bisection to `tol`.
pub fn bisect(mut f: impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64> {
    let (mut flo, fhi) = (f(lo), f(hi));
    if flo * fhi > 0.0 {
        return Err(Error::NonConvergence(format!("no sign change in [{lo}, {hi}]")));
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if flo * fm <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
            flo = fm;
        }
    }
    Ok(0.5 * (lo + hi))
}
