//! Synthetic token corpora for the toy hosts.
//!
//! Three generators:
//!  - uniform noise (calibration checks),
//!  - a first-order Markov chain with an analytically known entropy rate,
//!  - a key/value recall grammar that forces the cache to carry long-range
//!    bindings: pairs are introduced early, and later query events
//!    (MARK, key) must be answered with the most recent value bound to that
//!    key. The MARK token doubles as the boundary marker the steering
//!    experiments count in generated text.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::{subseed, Token};

pub fn uniform_corpus(vocab: usize, n_seqs: usize, len: usize, seed: u64) -> Vec<Vec<Token>> {
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, 0xc0f0, 0));
    (0..n_seqs)
        .map(|_| (0..len).map(|_| rng.gen_range(0..vocab) as Token).collect())
        .collect()
}

/// A seeded first-order Markov chain plus its analytic entropy rate (nats).
#[derive(Debug, Clone)]
pub struct MarkovChain {
    pub transition: Vec<Vec<f64>>,
    pub entropy_rate: f64,
}

impl MarkovChain {
    /// Random sparse-ish transition matrix: every row concentrates mass on a
    /// few successors so the chain is learnable but not deterministic.
    pub fn random(vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, 0x3a60, 0));
        let mut transition = vec![vec![0.0; vocab]; vocab];
        for row in transition.iter_mut() {
            let mut succ: Vec<usize> = (0..vocab).collect();
            succ.shuffle(&mut rng);
            let weights = [0.55, 0.25, 0.12, 0.08];
            for (w, &s) in weights.iter().zip(succ.iter()) {
                row[s] = *w;
            }
        }
        let entropy_rate = entropy_rate(&transition);
        MarkovChain { transition, entropy_rate }
    }

    pub fn sample_next(&self, current: usize, rng: &mut ChaCha8Rng) -> usize {
        let row = &self.transition[current];
        let mut u: f64 = rng.gen();
        for (j, p) in row.iter().enumerate() {
            u -= p;
            if u <= 0.0 {
                return j;
            }
        }
        row.len() - 1
    }

    pub fn corpus(&self, n_seqs: usize, len: usize, seed: u64) -> Vec<Vec<Token>> {
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, 0x3a61, 1));
        (0..n_seqs)
            .map(|_| {
                let mut seq = Vec::with_capacity(len);
                let mut cur = rng.gen_range(0..self.transition.len());
                seq.push(cur as Token);
                for _ in 1..len {
                    cur = self.sample_next(cur, &mut rng);
                    seq.push(cur as Token);
                }
                seq
            })
            .collect()
    }
}

/// Entropy rate H = −Σ_i π_i Σ_j P_ij ln P_ij with π the stationary
/// distribution (power iteration).
pub fn entropy_rate(transition: &[Vec<f64>]) -> f64 {
    let n = transition.len();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..5000 {
        let mut next = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                next[j] += pi[i] * transition[i][j];
            }
        }
        let z: f64 = next.iter().sum();
        for v in &mut next {
            *v /= z;
        }
        pi = next;
    }
    let mut h = 0.0;
    for i in 0..n {
        for p in &transition[i] {
            if *p > 0.0 {
                h -= pi[i] * p * p.ln();
            }
        }
    }
    h
}

/// Token layout and generator for the recall grammar (vocab 64).
#[derive(Debug, Clone)]
pub struct RecallGrammar {
    pub filler: MarkovChain,
    pub seed: u64,
}

pub const BOS: Token = 0;
/// Query/boundary marker; also the surface token the amplification
/// experiment counts in continuations.
pub const MARK: Token = 1;
pub const KEY_BASE: Token = 2;
pub const N_KEYS: usize = 16;
pub const VALUE_BASE: Token = 18;
pub const N_VALUES: usize = 16;
pub const FILLER_BASE: Token = 34;
pub const N_FILLER: usize = 30;
pub const RECALL_VOCAB: usize = 64;

impl RecallGrammar {
    pub fn new(seed: u64) -> Self {
        RecallGrammar { filler: MarkovChain::random(N_FILLER, subseed(seed, 0xf111, 0)), seed }
    }

    /// Generate `n_seqs` sequences of exactly `len` tokens.
    ///
    /// Layout per sequence: BOS, then three (key, value) assignments spread
    /// through filler, then alternating filler runs and query events
    /// (MARK, key, bound value).
    pub fn corpus(&self, n_seqs: usize, len: usize, seed: u64) -> Vec<Vec<Token>> {
        (0..n_seqs).map(|i| self.sequence(len, subseed(seed, 0x5e01, i as u64))).collect()
    }

    pub fn sequence(&self, len: usize, seed: u64) -> Vec<Token> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seq = vec![BOS];
        let mut filler_state = rng.gen_range(0..N_FILLER);
        let push_filler = |seq: &mut Vec<Token>, run: usize, rng: &mut ChaCha8Rng, state: &mut usize| {
            for _ in 0..run {
                *state = self.filler.sample_next(*state, rng);
                seq.push(FILLER_BASE + *state as Token);
            }
        };
        // Assignments: distinct keys, independent values.
        let mut keys: Vec<usize> = (0..N_KEYS).collect();
        keys.shuffle(&mut rng);
        let n_pairs = 3;
        let pairs: Vec<(Token, Token)> = keys[..n_pairs]
            .iter()
            .map(|&k| (KEY_BASE + k as Token, VALUE_BASE + rng.gen_range(0..N_VALUES) as Token))
            .collect();
        for &(k, v) in &pairs {
            push_filler(&mut seq, rng.gen_range(2..5), &mut rng, &mut filler_state);
            seq.push(k);
            seq.push(v);
        }
        // Queries until the target length.
        while seq.len() < len {
            push_filler(&mut seq, rng.gen_range(2..6), &mut rng, &mut filler_state);
            let &(k, v) = &pairs[rng.gen_range(0..n_pairs)];
            seq.push(MARK);
            seq.push(k);
            seq.push(v);
        }
        seq.truncate(len);
        seq
    }

    /// Positions whose token is the boundary marker.
    pub fn marker_positions(seq: &[Token]) -> Vec<usize> {
        seq.iter().enumerate().filter(|(_, t)| **t == MARK).map(|(i, _)| i).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markov_rows_are_distributions() {
        let mc = MarkovChain::random(8, 3);
        for row in &mc.transition {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(mc.entropy_rate > 0.0 && mc.entropy_rate < (8f64).ln());
    }

    #[test]
    fn markov_entropy_rate_matches_empirical_surprisal() {
        let mc = MarkovChain::random(8, 5);
        let corpus = mc.corpus(200, 256, 7);
        let mut nll = 0.0;
        let mut n = 0usize;
        for seq in &corpus {
            for t in 0..seq.len() - 1 {
                nll -= mc.transition[seq[t] as usize][seq[t + 1] as usize].ln();
                n += 1;
            }
        }
        let emp = nll / n as f64;
        assert!((emp - mc.entropy_rate).abs() < 0.02, "{emp} vs {}", mc.entropy_rate);
    }

    #[test]
    fn recall_sequences_answer_queries_with_bound_values() {
        let g = RecallGrammar::new(1);
        let corpus = g.corpus(20, 64, 2);
        for seq in &corpus {
            assert_eq!(seq.len(), 64);
            assert_eq!(seq[0], BOS);
            // Replay: track bindings; after every complete (MARK, key) the
            // next token is that key's bound value.
            let mut bound = std::collections::BTreeMap::new();
            let mut t = 1;
            while t < seq.len() {
                let tok = seq[t];
                if (KEY_BASE..KEY_BASE + N_KEYS as Token).contains(&tok)
                    && t >= 1
                    && seq[t - 1] != MARK
                {
                    if t + 1 < seq.len() {
                        bound.insert(tok, seq[t + 1]);
                        t += 2;
                        continue;
                    }
                } else if tok == MARK && t + 2 < seq.len() {
                    let key = seq[t + 1];
                    let val = seq[t + 2];
                    assert_eq!(Some(&val), bound.get(&key), "query answered with stale value");
                    t += 3;
                    continue;
                }
                t += 1;
            }
            assert!(!bound.is_empty());
        }
    }

    #[test]
    fn corpora_are_deterministic() {
        let g = RecallGrammar::new(9);
        assert_eq!(g.corpus(5, 64, 3), g.corpus(5, 64, 3));
        assert_eq!(uniform_corpus(16, 3, 10, 1), uniform_corpus(16, 3, 10, 1));
    }
}
