//! Property tests over random parameters for the invariants every run and
//! every closed form must satisfy.

use proptest::prelude::*;
use crate::analysis::{main_threshold, pair_reward, pairs_won_fraction};
use crate::config::ExperimentConfig;
use crate::detect::transition_counts;
use crate::engine::{audit_view, run_game, GameResult, Tiebreak};
use crate::markov::{Chain, MarkovState};
use crate::model::{reward_fraction, HeightState, MinerId, StateSequence, View};

/// A valid configuration for one of the strategies, at a short horizon.
fn config_strategy() -> impl Strategy<Value = ExperimentConfig> {
    (0usize..7, 0.05f64..0.49, 0.0f64..1.0, 0.0f64..0.15, any::<u64>()).prop_map(
        |(k, alpha, frac, natural, seed)| {
            let mut c = ExperimentConfig {
                alpha,
                horizon_heights: 3_000,
                base_seed: seed,
                ..Default::default()
            };
            let natural_pairs = |c: &mut ExperimentConfig, bp: f64| {
                let bp = bp.min(alpha * 0.5);
                c.alpha_prime = Some(alpha * (1.0 + bp) - bp);
                c.beta_prime = Some(bp);
            };
            match k {
                0 => {
                    c.strategy = "honest".into();
                    natural_pairs(&mut c, natural);
                }
                1 => {
                    c.strategy = "strong_sm".into();
                    c.tiebreak = Tiebreak::FavorAttacker;
                }
                2 => {
                    c.strategy = "classic_sm".into();
                    c.tiebreak = if frac < 0.5 {
                        Tiebreak::AgainstAttacker
                    } else {
                        Tiebreak::Mixed { gamma: frac }
                    };
                }
                3 => {
                    c.strategy = "short_sm".into();
                    natural_pairs(&mut c, natural);
                }
                4 => {
                    c.strategy = "usm_warmup".into();
                    c.tiebreak = Tiebreak::FavorAttacker;
                    c.beta_target = alpha * frac;
                }
                5 => {
                    c.strategy = "usm_main".into();
                    c.beta_target = alpha * alpha * frac;
                }
                _ => {
                    c.strategy = "usm_general".into();
                    natural_pairs(&mut c, natural);
                    let d = c.distribution().unwrap();
                    let upper = d.alpha_prime * d.alpha_prime / 2.0;
                    c.beta_target = d.beta_prime + (upper - d.beta_prime).max(0.0) * frac;
                    // Too few attacker-only rounds for any target; drop the natural pairs.
                    if upper < d.beta_prime {
                        c.beta_prime = Some(0.0);
                        c.alpha_prime = Some(alpha);
                        c.beta_target = alpha * alpha / 2.0 * frac;
                    }
                }
            }
            c
        },
    )
}

fn play(c: &ExperimentConfig) -> GameResult {
    c.validate().unwrap();
    let params = c.game_params(c.base_seed).unwrap();
    run_game(&params, c.make_strategy().unwrap().as_mut()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn every_run_is_a_valid_view_with_conserved_heights(c in config_strategy()) {
        let r = play(&c);
        let audit = audit_view(&r, true);
        prop_assert!(audit.ok(), "{:?}", audit);
        // The view re-validates from its raw blocks.
        let again = View::from_blocks(r.view.blocks().to_vec()).unwrap();
        prop_assert_eq!(again.len(), r.view.len());
        prop_assert_eq!(r.states.len(), c.horizon_heights as usize);
        // Both blocks of a Pair sit directly on height h-1.
        for b in r.view.blocks().iter().filter(|b| b.height > 0) {
            let p = r.view.get(b.parent).unwrap();
            prop_assert_eq!(p.height + 1, b.height);
        }
        // Coin biases stay in [0, 1].
        if let (Some(lo), Some(hi)) = (r.report.min_bias, r.report.max_bias) {
            prop_assert!(lo >= -1e-12 && hi <= 1.0 + 1e-12, "bias range [{}, {}]", lo, hi);
        }
    }

    #[test]
    fn reward_fractions_sum_to_one(c in config_strategy()) {
        let r = play(&c);
        let rule = c.tiebreak.chain_rule();
        let total: f64 = [1, 2]
            .iter()
            .map(|&m| reward_fraction(&r.view, MinerId(m), rule).unwrap())
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn runs_are_bit_deterministic(c in config_strategy()) {
        let a = play(&c);
        let b = play(&c);
        prop_assert_eq!(a.states, b.states);
        prop_assert_eq!(a.view.blocks(), b.view.blocks());
        prop_assert_eq!(a.outcomes, b.outcomes);
    }

    #[test]
    fn honest_without_natural_pairs_is_all_single(alpha in 0.01f64..0.99, seed in any::<u64>()) {
        let c = ExperimentConfig { alpha, horizon_heights: 2_000, base_seed: seed, ..Default::default() };
        let r = play(&c);
        prop_assert_eq!(r.states.pair_count(), 0);
    }

    #[test]
    fn main_strategy_wins_every_pair_run_of_two_or_more(
        alpha in 0.2f64..0.49, frac in 0.1f64..1.0, seed in any::<u64>()
    ) {
        let c = ExperimentConfig {
            alpha,
            strategy: "usm_main".into(),
            beta_target: alpha * alpha * frac,
            horizon_heights: 20_000,
            base_seed: seed,
            ..Default::default()
        };
        let r = play(&c);
        let s = &r.states.states;
        let mut h = 0;
        while h < s.len() {
            if s[h] != HeightState::Pair {
                h += 1;
                continue;
            }
            let start = h;
            while h < s.len() && s[h] == HeightState::Pair {
                h += 1;
            }
            // Only runs closed by a Single on both sides.
            if h - start >= 2 && h < s.len() {
                for k in start..h {
                    prop_assert!(r.chain_creators[k].is_attacker(), "height {} in run {}..{}", k + 1, start + 1, h);
                }
            }
        }
    }

    #[test]
    fn pair_reward_beats_alpha_iff_share_beats_one_minus_alpha(
        alpha in 0.01f64..0.99, beta in 0.001f64..0.99, delta in 0.0f64..=1.0
    ) {
        prop_assume!((delta - (1.0 - alpha)).abs() > 1e-9);
        let r = pair_reward(alpha, beta, delta).unwrap();
        prop_assert_eq!(r > alpha, delta > 1.0 - alpha);
    }

    #[test]
    fn main_threshold_decreases_in_beta(b1 in 0.0f64..0.99, b2 in 0.0f64..0.99) {
        prop_assume!((b1 - b2).abs() > 1e-6);
        let (lo, hi) = if b1 < b2 { (b1, b2) } else { (b2, b1) };
        prop_assert!(main_threshold(lo).unwrap() > main_threshold(hi).unwrap());
    }

    #[test]
    fn full_solo_share_wins_every_pair(beta in 0.0f64..=1.0) {
        prop_assert!((pairs_won_fraction(1.0, beta) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn markov_chain_is_row_stochastic(
        alpha in 0.05f64..0.5, frac in 0.0f64..=1.0, gamma in 0.0f64..=1.0, cap in 8u32..60
    ) {
        let chain = Chain::build(alpha, alpha * alpha * frac, gamma, cap).unwrap();
        for (k, s) in chain.states().into_iter().zip(chain.row_sums()) {
            // Undecided configurations start at two pairs; the slot for one is unused.
            if k == MarkovState::Undecided(1) {
                prop_assert_eq!(s, 0.0);
            } else {
                prop_assert!((s - 1.0).abs() < 1e-12, "{:?} {}", k, s);
            }
        }
    }

    #[test]
    fn state_symbols_round_trip(bits in proptest::collection::vec(any::<bool>(), 0..300), lag in 1usize..4) {
        let seq = StateSequence::new(
            bits.iter().map(|&p| if p { HeightState::Pair } else { HeightState::Single }).collect(),
        );
        let back = StateSequence::parse(&seq.to_symbols()).unwrap();
        prop_assert_eq!(&back, &seq);
        if seq.len() > lag {
            prop_assert_eq!(transition_counts(&seq, lag).unwrap().total() as usize, seq.len() - lag);
        }
    }

    #[test]
    fn view_csv_round_trips(c in config_strategy()) {
        let mut c = c;
        c.horizon_heights = 300;
        let r = play(&c);
        let mut buf = Vec::new();
        r.view.write_csv(&mut buf).unwrap();
        let back = View::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back.ordered(), r.view.ordered());
    }
}
