//! Tiny fixed-weight recurrent softmax model generated from a seed.

use super::{Distribution, ForwardCounter, LanguageModel, Token, TokenSeq};

/// A deterministic "neural-ish" model whose weights are drawn from a named
/// pseudo-random scheme, so the same `(seed, embed_dim, temperature)` yields
/// bit-identical distributions on every platform and in every
/// implementation.
///
/// Weight scheme (documented so goldens are portable): a splitmix64 stream is
/// seeded with `seed` and consumed in this fixed order, one `u64` per weight,
/// each mapped to `(2u - 1)/sqrt(d)` with `u = (x >> 11) / 2^53 ∈ [0, 1)`:
///
/// 1. start state `h0` (`d` weights),
/// 2. token embeddings `E` (`vocab_size x d`, row-major),
/// 3. recurrence matrix `A` (`d x d`, row-major),
/// 4. output matrix `W` (`vocab_size x d`, row-major).
///
/// Evaluation: `h ← h0`; for each prefix token `t`, `h ← tanh(A·h + E[t])`;
/// the conditional is `softmax(W·h / temperature)`.
pub struct SoftmaxModel {
    vocab_size: usize,
    eos: Token,
    seed: u64,
    embed_dim: usize,
    temperature: f64,
    h0: Vec<f64>,
    embed: Vec<Vec<f64>>,
    recur: Vec<Vec<f64>>,
    out: Vec<Vec<f64>>,
    counter: ForwardCounter,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit_f64(x: u64) -> f64 {
    (x >> 11) as f64 / (1u64 << 53) as f64
}

impl SoftmaxModel {
    pub fn new(vocab_size: usize, eos: Token, seed: u64, embed_dim: usize, temperature: f64) -> Self {
        assert!(vocab_size > 0, "vocab_size must be positive");
        assert!(eos.index() < vocab_size, "eos must be a valid token");
        assert!(embed_dim > 0, "embed_dim must be positive");
        assert!(
            temperature.is_finite() && temperature > 0.0,
            "temperature must be positive"
        );
        let mut state = seed;
        let scale = 1.0 / (embed_dim as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| (2.0 * unit_f64(splitmix64(&mut state)) - 1.0) * scale)
                .collect()
        };
        let h0 = draw(embed_dim);
        let embed: Vec<Vec<f64>> = (0..vocab_size).map(|_| draw(embed_dim)).collect();
        let recur: Vec<Vec<f64>> = (0..embed_dim).map(|_| draw(embed_dim)).collect();
        let out: Vec<Vec<f64>> = (0..vocab_size).map(|_| draw(embed_dim)).collect();
        SoftmaxModel {
            vocab_size,
            eos,
            seed,
            embed_dim,
            temperature,
            h0,
            embed,
            recur,
            out,
            counter: ForwardCounter::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

impl LanguageModel for SoftmaxModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn eos(&self) -> Token {
        self.eos
    }

    fn conditional(&self, prefix: &TokenSeq) -> Distribution {
        let d = self.embed_dim;
        let mut h = self.h0.clone();
        for t in prefix.iter() {
            let e = &self.embed[t.index()];
            let mut next = vec![0.0; d];
            for (i, row) in self.recur.iter().enumerate() {
                let mut acc = e[i];
                for (j, w) in row.iter().enumerate() {
                    acc += w * h[j];
                }
                next[i] = acc.tanh();
            }
            h = next;
        }
        let mut logits = vec![0.0; self.vocab_size];
        for (v, row) in self.out.iter().enumerate() {
            let mut acc = 0.0;
            for (j, w) in row.iter().enumerate() {
                acc += w * h[j];
            }
            logits[v] = acc / self.temperature;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        Distribution::new(probs).expect("softmax output is a valid distribution")
    }

    fn counter(&self) -> &ForwardCounter {
        &self.counter
    }
}
