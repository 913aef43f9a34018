//! Tests of whether a Single/Pair sequence looks i.i.d. Bernoulli.
//!
//! Everything here reads only the state sequence.

use crate::error::{Error, Result};
use crate::model::{HeightState, StateSequence};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

/// Minimum expected count per cell before pooling.
const MIN_EXPECTED: f64 = 5.0;
/// Completed Pair runs needed for the run-length test.
const MIN_RUNS: usize = 30;

/// Counts of (previous `lag` states, next state). Prefixes are encoded
/// oldest-first as bits with Pair = 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TransitionTable {
    pub lag: usize,
    pub counts: Vec<[u64; 2]>,
}

impl TransitionTable {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|r| r[0] + r[1]).sum()
    }

    pub fn get(&self, prefix: &[HeightState], next: HeightState) -> u64 {
        self.counts[encode(prefix)][next.is_pair() as usize]
    }

    /// Non-zero cells as (prefix symbols, next symbol, count).
    pub fn cells(&self) -> Vec<(String, char, u64)> {
        let mut v = Vec::new();
        for (code, row) in self.counts.iter().enumerate() {
            for (col, &n) in row.iter().enumerate() {
                if n > 0 {
                    v.push((decode(code, self.lag), if col == 1 { 'P' } else { 'S' }, n));
                }
            }
        }
        v
    }
}

fn encode(prefix: &[HeightState]) -> usize {
    prefix.iter().fold(0, |acc, s| (acc << 1) | s.is_pair() as usize)
}

fn decode(code: usize, lag: usize) -> String {
    (0..lag)
        .rev()
        .map(|b| if code >> b & 1 == 1 { 'P' } else { 'S' })
        .collect()
}

pub fn transition_counts(seq: &StateSequence, lag: usize) -> Result<TransitionTable> {
    if lag == 0 || lag > 16 {
        return Err(Error::Parameter(format!("lag {lag} not in 1..=16")));
    }
    let s = &seq.states;
    if s.len() <= lag {
        return Err(Error::SequenceTooShort(format!(
            "length {} with lag {lag}",
            s.len()
        )));
    }
    let mask = (1usize << lag) - 1;
    let mut counts = vec![[0u64; 2]; 1 << lag];
    let mut code = encode(&s[..lag]);
    for &next in &s[lag..] {
        counts[code][next.is_pair() as usize] += 1;
        code = ((code << 1) | next.is_pair() as usize) & mask;
    }
    Ok(TransitionTable { lag, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Reject,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestEntry {
    pub name: String,
    pub statistic: f64,
    pub df: f64,
    pub p_value: f64,
    pub verdict: Verdict,
    pub note: Option<String>,
}

impl TestEntry {
    fn conclusive(name: String, statistic: f64, df: f64, significance: f64) -> Self {
        let p_value = chi_square_tail(statistic, df);
        TestEntry {
            name,
            statistic,
            df,
            p_value,
            verdict: if p_value < significance { Verdict::Reject } else { Verdict::Pass },
            note: None,
        }
    }

    fn inconclusive(name: String, note: impl Into<String>) -> Self {
        TestEntry {
            name,
            statistic: f64::NAN,
            df: 0.0,
            p_value: 1.0,
            verdict: Verdict::Inconclusive,
            note: Some(note.into()),
        }
    }
}

fn chi_square_tail(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let d = ChiSquared::new(df).expect("positive degrees of freedom");
    d.sf(x).clamp(0.0, 1.0)
}

/// Likelihood-ratio statistic of independence on a rows × 2 table.
fn g_statistic(rows: &[[u64; 2]]) -> f64 {
    let col = [
        rows.iter().map(|r| r[0]).sum::<u64>() as f64,
        rows.iter().map(|r| r[1]).sum::<u64>() as f64,
    ];
    let n = col[0] + col[1];
    let mut g = 0.0;
    for r in rows {
        let rt = (r[0] + r[1]) as f64;
        for j in 0..2 {
            let o = r[j] as f64;
            if o > 0.0 {
                g += o * (o / (rt * col[j] / n)).ln();
            }
        }
    }
    2.0 * g
}

/// Merges sparse rows, smallest first, until every row's expected counts
/// reach the minimum.
fn pool_rows(table: &TransitionTable) -> Vec<[u64; 2]> {
    let col1 = table.counts.iter().map(|r| r[1]).sum::<u64>() as f64;
    let n = table.total() as f64;
    let frac = [(n - col1) / n, col1 / n];
    let min_expected = |r: &[u64; 2]| {
        let t = (r[0] + r[1]) as f64;
        (t * frac[0]).min(t * frac[1])
    };
    let mut rows: Vec<[u64; 2]> = table.counts.iter().copied().filter(|r| r[0] + r[1] > 0).collect();
    rows.sort_by_key(|r| r[0] + r[1]);
    let mut pooled: Vec<[u64; 2]> = Vec::new();
    let mut acc = [0u64; 2];
    for r in rows {
        if min_expected(&r) >= MIN_EXPECTED {
            pooled.push(r);
        } else {
            acc[0] += r[0];
            acc[1] += r[1];
            if min_expected(&acc) >= MIN_EXPECTED {
                pooled.push(acc);
                acc = [0, 0];
            }
        }
    }
    if acc[0] + acc[1] > 0 {
        // A leftover pool too small on its own joins the smallest full row.
        match pooled.iter_mut().min_by_key(|r| r[0] + r[1]) {
            Some(r) => {
                r[0] += acc[0];
                r[1] += acc[1];
            }
            None => pooled.push(acc),
        }
    }
    pooled
}

/// Independence of the next state from the previous `lag` states.
pub fn g_test_independence(seq: &StateSequence, lag: usize, significance: f64) -> Result<TestEntry> {
    let table = transition_counts(seq, lag)?;
    Ok(g_test_table(&table, significance))
}

pub fn g_test_table(table: &TransitionTable, significance: f64) -> TestEntry {
    let name = format!("g_lag{}", table.lag);
    let pairs: u64 = table.counts.iter().map(|r| r[1]).sum();
    if pairs == 0 || pairs == table.total() {
        return TestEntry::inconclusive(name, "degenerate table: one state only");
    }
    let rows = pool_rows(table);
    if rows.len() < 2 {
        return TestEntry::inconclusive(name, "fewer than two rows after pooling");
    }
    let g = g_statistic(&rows);
    TestEntry::conclusive(name, g, (rows.len() - 1) as f64, significance)
}

/// Lengths of Pair runs closed by a Single on both sides; the sequence is
/// preceded by the genesis height, which counts as Single.
pub fn completed_pair_runs(seq: &StateSequence) -> Vec<u64> {
    let mut runs = Vec::new();
    let mut current = 0u64;
    for s in &seq.states {
        if s.is_pair() {
            current += 1;
        } else if current > 0 {
            runs.push(current);
            current = 0;
        }
    }
    runs
}

/// Goodness of fit of Pair-run lengths to a geometric law fitted by
/// maximum likelihood.
pub fn run_length_test(seq: &StateSequence, significance: f64) -> TestEntry {
    let name = "pair_runs".to_string();
    let runs = completed_pair_runs(seq);
    if runs.len() < MIN_RUNS {
        return TestEntry::inconclusive(name, format!("{} completed pair runs", runs.len()));
    }
    let n = runs.len() as f64;
    let total: u64 = runs.iter().sum();
    // Continuation probability of a run.
    let cont = 1.0 - n / total as f64;
    let max_len = *runs.iter().max().unwrap() as usize;
    let mut observed = vec![0u64; max_len + 1];
    for &r in &runs {
        observed[r as usize] += 1;
    }
    // Bins 1..tail-1 individually, then everything from `tail` up.
    let expected = |l: usize| n * (1.0 - cont) * cont.powi(l as i32 - 1);
    let mut tail = 1;
    while expected(tail) >= MIN_EXPECTED && tail <= max_len {
        tail += 1;
    }
    let mut bins: Vec<(f64, f64)> = (1..tail)
        .map(|l| (observed.get(l).copied().unwrap_or(0) as f64, expected(l)))
        .collect();
    let tail_obs: u64 = observed.iter().skip(tail).sum();
    bins.push((tail_obs as f64, n * cont.powi(tail as i32 - 1)));
    while bins.len() > 1 && bins.last().unwrap().1 < MIN_EXPECTED {
        let (o, e) = bins.pop().unwrap();
        let last = bins.last_mut().unwrap();
        last.0 += o;
        last.1 += e;
    }
    if bins.len() < 3 {
        return TestEntry::inconclusive(name, "fewer than three bins after pooling");
    }
    let stat: f64 = bins.iter().map(|&(o, e)| (o - e) * (o - e) / e).sum();
    TestEntry::conclusive(name, stat, (bins.len() - 2) as f64, significance)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BetaEstimate {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub heights: usize,
    pub confidence: f64,
}

/// Pair fraction with its Wilson score interval.
pub fn estimate_beta(seq: &StateSequence, confidence: f64) -> Result<BetaEstimate> {
    if seq.is_empty() {
        return Err(Error::SequenceTooShort("empty sequence".into()));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Parameter(format!("confidence {confidence} not in (0, 1)")));
    }
    let n = seq.len() as f64;
    let share = seq.pair_count() as f64 / n;
    let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(1.0 - (1.0 - confidence) / 2.0);
    let z2 = z * z;
    let centre = (share + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (share * (1.0 - share) / n + z2 / (4.0 * n * n)).sqrt();
    Ok(BetaEstimate {
        estimate: share,
        lower: (centre - half).max(0.0),
        upper: (centre + half).min(1.0),
        heights: seq.len(),
        confidence,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionReport {
    pub tests: Vec<TestEntry>,
    pub beta: BetaEstimate,
    /// Bonferroni-adjusted smallest p-value over the conclusive tests.
    pub combined_p: f64,
    pub significance: f64,
    pub verdict: Verdict,
    pub belief_epsilon: Option<f64>,
}

/// Lag-1, lag-2 and lag-3 independence tests plus the run-length test.
pub fn battery(seq: &StateSequence, significance: f64) -> Result<DetectionReport> {
    if !(significance > 0.0 && significance < 1.0) {
        return Err(Error::Parameter(format!("significance {significance} not in (0, 1)")));
    }
    let mut tests = Vec::new();
    for lag in 1..=3 {
        tests.push(g_test_independence(seq, lag, significance)?);
    }
    tests.push(run_length_test(seq, significance));
    let conclusive: Vec<&TestEntry> = tests.iter().filter(|t| t.verdict != Verdict::Inconclusive).collect();
    let (combined_p, verdict) = if conclusive.is_empty() {
        (1.0, Verdict::Inconclusive)
    } else {
        let m = conclusive.len() as f64;
        let p = conclusive.iter().map(|t| t.p_value).fold(1.0, f64::min);
        let adj = (p * m).min(1.0);
        (adj, if adj < significance { Verdict::Reject } else { Verdict::Pass })
    };
    Ok(DetectionReport {
        tests,
        beta: estimate_beta(seq, 1.0 - significance)?,
        combined_p,
        significance,
        verdict,
        belief_epsilon: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use HeightState::{Pair as P, Single as S};

    fn seq(v: &[HeightState]) -> StateSequence {
        StateSequence::new(v.to_vec())
    }

    fn bernoulli(beta: f64, n: usize, seed: u64) -> StateSequence {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        StateSequence::new((0..n).map(|_| if rng.gen::<f64>() < beta { P } else { S }).collect())
    }

    #[test]
    fn counts_by_hand() {
        let t = transition_counts(&seq(&[S, P, S, P]), 1).unwrap();
        assert_eq!(t.get(&[S], P), 2);
        assert_eq!(t.get(&[P], S), 1);
        assert_eq!(t.total(), 3);
        let t = transition_counts(&seq(&[S; 5]), 1).unwrap();
        assert_eq!(t.cells(), vec![("S".into(), 'S', 4)]);
        let t = transition_counts(&seq(&[P, P, S]), 2).unwrap();
        assert_eq!(t.cells(), vec![("PP".into(), 'S', 1)]);
        assert!(matches!(transition_counts(&seq(&[S, P]), 2), Err(Error::SequenceTooShort(_))));
    }

    #[test]
    fn g_statistic_by_hand() {
        let t = TransitionTable { lag: 1, counts: vec![[40, 10], [10, 40]] };
        let e = g_test_table(&t, 0.05);
        let oracle = 2.0 * (2.0 * 40.0 * (40.0f64 / 25.0).ln() + 2.0 * 10.0 * (10.0f64 / 25.0).ln());
        assert!((e.statistic - oracle).abs() < 1e-9);
        assert!((e.statistic - 38.549).abs() < 1e-3);
        assert_eq!(e.df, 1.0);
        assert!(e.p_value < 0.01);
        let t = TransitionTable { lag: 1, counts: vec![[40, 10], [80, 20]] };
        let e = g_test_table(&t, 0.05);
        assert!(e.statistic.abs() < 1e-12);
        assert_eq!(e.p_value, 1.0);
    }

    #[test]
    fn degenerate_table_is_inconclusive() {
        let e = g_test_independence(&seq(&[S; 100]), 2, 0.05).unwrap();
        assert_eq!(e.verdict, Verdict::Inconclusive);
        assert!(e.p_value >= 0.0 && e.p_value <= 1.0);
    }

    #[test]
    fn beta_estimate() {
        let e = estimate_beta(&seq(&[P, S, S, S]), 0.95).unwrap();
        assert_eq!(e.estimate, 0.25);
        assert!(e.lower < 0.25 && e.upper > 0.25);
        assert_eq!(estimate_beta(&seq(&[S; 10]), 0.95).unwrap().estimate, 0.0);
    }

    #[test]
    fn runs_need_both_ends() {
        let s = seq(&[P, P, S, P, S, S, P, P, P]);
        assert_eq!(completed_pair_runs(&s), vec![2, 1]);
        assert_eq!(run_length_test(&s, 0.05).verdict, Verdict::Inconclusive);
    }

    #[test]
    fn calibrated_on_iid_sequences() {
        let seeds = 200;
        let s = 0.05;
        let band = 2.0 * (s * (1.0 - s) / seeds as f64).sqrt();
        let mut rejections = [0usize; 4];
        for seed in 0..seeds {
            let r = battery(&bernoulli(0.2, 20_000, seed), s).unwrap();
            for (k, t) in r.tests.iter().enumerate() {
                assert_ne!(t.verdict, Verdict::Inconclusive);
                rejections[k] += (t.verdict == Verdict::Reject) as usize;
            }
        }
        for (k, &n) in rejections.iter().enumerate() {
            let rate = n as f64 / seeds as f64;
            assert!((rate - s).abs() <= band + 1.0 / seeds as f64, "test {k}: {rate}");
        }
    }

    #[test]
    fn markov_dependence_is_rejected() {
        // Pair follows Pair more often than it follows Single.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut v = vec![S];
        for _ in 0..50_000 {
            let p = if v.last() == Some(&P) { 0.3 } else { 0.1 };
            v.push(if rng.gen::<f64>() < p { P } else { S });
        }
        let r = battery(&StateSequence::new(v), 0.05).unwrap();
        assert_eq!(r.verdict, Verdict::Reject);
        assert!(r.combined_p < 0.01);
    }
}
