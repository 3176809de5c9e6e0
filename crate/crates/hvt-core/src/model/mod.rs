//! Language-model abstractions over an integer vocabulary.
//!
//! Everything downstream (draft trees, verification, baselines, benchmarks)
//! talks to models through the [`LanguageModel`] trait: a pure conditional
//! next-token distribution plus an instrumented forward-pass counter. The
//! counter is the cost unit of the whole crate: a deterministic,
//! hardware-independent stand-in for wall-clock latency and energy.
//!
//! Two synthetic implementations are provided so that both the draft and the
//! target role can be enumerated exactly at desk scale: [`TableModel`] (an
//! explicit n-gram-style conditional table) and [`SoftmaxModel`] (a tiny
//! fixed-weight recurrent scorer generated from a seed). [`UniformMixModel`]
//! interpolates any base model with the uniform distribution, which gives the
//! benchmark a single divergence knob between the draft and target models.

mod corpus;
mod softmax;
mod spec;
mod table;

pub use corpus::{format_corpus, parse_corpus, read_corpus, sample_corpus, write_corpus};
pub use softmax::SoftmaxModel;
pub use spec::{generate_model, random_table_spec, ModelSpec, TableRow};
pub use table::TableModel;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to `ln 0` so that log-probabilities stay finite and totally
/// ordered; anything at or below this value means "probability zero".
pub const LOG_PROB_FLOOR: f64 = -1e12;

/// Tolerance for "probabilities sum to one" on distributions built in memory.
pub const DIST_SUM_TOLERANCE: f64 = 1e-9;

/// Looser tolerance accepted when loading model files; rows within this bound
/// are renormalized exactly.
pub const FILE_SUM_TOLERANCE: f64 = 1e-6;

/// Errors raised by model construction and evaluation.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("prefix contains the EOS token at position {position}")]
    InvalidPrefix { position: usize },
    #[error("continuation must be non-empty")]
    EmptyContinuation,
    #[error("invalid distribution: {reason}")]
    InvalidDistribution { reason: String },
    #[error("invalid model spec: {reason}")]
    InvalidSpec { reason: String },
    #[error("token {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("corpus line {line}: {reason}")]
    InvalidCorpus { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("model file is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Token and TokenSeq
// ---------------------------------------------------------------------------

/// A single vocabulary symbol. Valid ids live in `[0, vocab_size)`; each
/// model family reserves one id as EOS.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct Token(pub u32);

impl Token {
    pub fn id(self) -> u32 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for Token {
    fn from(id: u32) -> Self {
        Token(id)
    }
}

/// A finite ordered sequence of tokens. Sequences never continue past EOS;
/// that invariant is enforced at the model boundary (see
/// [`LanguageModel::next_distribution`]) because only a model knows which id
/// is EOS.
#[derive(
    Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct TokenSeq(Vec<Token>);

impl TokenSeq {
    pub fn new() -> Self {
        TokenSeq(Vec::new())
    }

    pub fn from_ids(ids: &[u32]) -> Self {
        TokenSeq(ids.iter().copied().map(Token).collect())
    }

    pub fn ids(&self) -> Vec<u32> {
        self.0.iter().map(|t| t.0).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<Token> {
        self.0.get(i).copied()
    }

    pub fn last(&self) -> Option<Token> {
        self.0.last().copied()
    }

    pub fn push(&mut self, t: Token) {
        self.0.push(t);
    }

    pub fn as_slice(&self) -> &[Token] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = Token> + '_ {
        self.0.iter().copied()
    }

    /// New sequence with `t` appended.
    pub fn extended(&self, t: Token) -> Self {
        let mut out = self.clone();
        out.push(t);
        out
    }

    /// New sequence `self ⧺ other`.
    pub fn concat(&self, other: &TokenSeq) -> Self {
        let mut out = self.clone();
        out.0.extend_from_slice(&other.0);
        out
    }

    /// The trailing `n` tokens (or the whole sequence when shorter).
    pub fn suffix(&self, n: usize) -> TokenSeq {
        let start = self.len().saturating_sub(n);
        TokenSeq(self.0[start..].to_vec())
    }

    /// The leading `n` tokens (or the whole sequence when shorter).
    pub fn prefix(&self, n: usize) -> TokenSeq {
        TokenSeq(self.0[..self.len().min(n)].to_vec())
    }

    pub fn contains(&self, t: Token) -> bool {
        self.0.contains(&t)
    }

    /// Position of the first occurrence of `t`, if any.
    pub fn position(&self, t: Token) -> Option<usize> {
        self.0.iter().position(|&x| x == t)
    }
}

impl From<Vec<Token>> for TokenSeq {
    fn from(v: Vec<Token>) -> Self {
        TokenSeq(v)
    }
}

impl FromIterator<Token> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = Token>>(iter: I) -> Self {
        TokenSeq(iter.into_iter().collect())
    }
}

impl std::ops::Index<usize> for TokenSeq {
    type Output = Token;
    fn index(&self, i: usize) -> &Token {
        &self.0[i]
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Distribution
// ---------------------------------------------------------------------------

/// A probability vector over the vocabulary: non-negative entries summing to
/// one within [`DIST_SUM_TOLERANCE`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, ModelError> {
        if probs.is_empty() {
            return Err(ModelError::InvalidDistribution {
                reason: "empty probability vector".into(),
            });
        }
        if let Some((i, &p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(ModelError::InvalidDistribution {
                reason: format!("entry {i} is {p}, expected a finite non-negative value"),
            });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > DIST_SUM_TOLERANCE {
            return Err(ModelError::InvalidDistribution {
                reason: format!("entries sum to {sum}, expected 1"),
            });
        }
        Ok(Distribution { probs })
    }

    /// Validate within `tol`, then renormalize exactly. Used by file loaders.
    pub fn new_renormalized(probs: Vec<f64>, tol: f64) -> Result<Self, ModelError> {
        if probs.is_empty() {
            return Err(ModelError::InvalidDistribution {
                reason: "empty probability vector".into(),
            });
        }
        if let Some((i, &p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(ModelError::InvalidDistribution {
                reason: format!("entry {i} is {p}, expected a finite non-negative value"),
            });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(ModelError::InvalidDistribution {
                reason: format!("entries sum to {sum}, expected 1 within {tol}"),
            });
        }
        let probs = probs.into_iter().map(|p| p / sum).collect();
        Ok(Distribution { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Distribution {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn point_mass(n: usize, t: Token) -> Self {
        let mut probs = vec![0.0; n];
        probs[t.index()] = 1.0;
        Distribution { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, t: Token) -> f64 {
        self.probs[t.index()]
    }

    /// `ln prob(t)`, floored at [`LOG_PROB_FLOOR`] so zero-probability tokens
    /// stay finite and sortable.
    pub fn log_prob(&self, t: Token) -> f64 {
        let p = self.prob(t);
        if p <= 0.0 {
            LOG_PROB_FLOOR
        } else {
            p.ln().max(LOG_PROB_FLOOR)
        }
    }

    /// Highest-probability token, ties broken by ascending id.
    pub fn argmax(&self) -> Token {
        let mut best = 0usize;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        Token(best as u32)
    }

    /// The `k` highest-probability tokens, ties broken by ascending id,
    /// returned in (descending probability, ascending id) order.
    pub fn top_k(&self, k: usize) -> Vec<Token> {
        let mut idx: Vec<usize> = (0..self.probs.len()).collect();
        idx.sort_by(|&a, &b| {
            self.probs[b]
                .total_cmp(&self.probs[a])
                .then(a.cmp(&b))
        });
        idx.truncate(k);
        idx.into_iter().map(|i| Token(i as u32)).collect()
    }

    /// Inverse-CDF draw over ascending token ids for a fixed `u ∈ [0, 1)`:
    /// returns the smallest token whose cumulative mass exceeds `u`.
    pub fn sample_with(&self, u: f64) -> Token {
        let mut cum = 0.0;
        let mut last_positive = 0usize;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                last_positive = i;
            }
            cum += p;
            if u < cum {
                return Token(i as u32);
            }
        }
        // u landed past the accumulated mass (float shortfall); return the
        // last token with positive probability.
        Token(last_positive as u32)
    }

    /// Seeded inverse-CDF draw; consumes exactly one `f64` from `rng`.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Token {
        self.sample_with(rng.random::<f64>())
    }

    /// Pointwise mixture `(1 - alpha)·self + alpha·other`.
    pub fn mix(&self, other: &Distribution, alpha: f64) -> Distribution {
        debug_assert_eq!(self.len(), other.len());
        let probs = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (1.0 - alpha) * a + alpha * b)
            .collect();
        Distribution { probs }
    }
}

/// Draw a token from `dist` by inverse CDF using one uniform draw from `rng`.
pub fn sample_token<R: rand::Rng + ?Sized>(dist: &Distribution, rng: &mut R) -> Token {
    dist.sample(rng)
}

// ---------------------------------------------------------------------------
// LanguageModel
// ---------------------------------------------------------------------------

/// Monotone counter of forward passes, shareable across threads.
#[derive(Debug, Default)]
pub struct ForwardCounter(AtomicU64);

impl ForwardCounter {
    pub fn new() -> Self {
        ForwardCounter(AtomicU64::new(0))
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

/// A conditional next-token distribution provider with an instrumented
/// forward-pass counter.
///
/// Implementations must be pure: the same prefix always yields the identical
/// distribution. Counting discipline:
///
/// * [`next_distribution`](Self::next_distribution): one counted forward
///   pass per call; this is the unit every sequential decoder pays per
///   position.
/// * [`score_block`](Self::score_block): one counted forward pass for the
///   whole block. This models batched verification, where a single pass of
///   the large model scores every position of a drafted block at once.
///
/// [`conditional`](Self::conditional) is the raw evaluation kernel
/// implementors provide; it performs no counting or prefix validation and is
/// public only so wrappers can compose models without double counting.
pub trait LanguageModel: Send + Sync {
    /// Vocabulary size; token ids range over `[0, vocab_size)`.
    fn vocab_size(&self) -> usize;

    /// The reserved end-of-sequence token.
    fn eos(&self) -> Token;

    /// Raw evaluation kernel: the conditional distribution after `prefix`.
    /// Not counted and not validated; use the counted entry points below.
    fn conditional(&self, prefix: &TokenSeq) -> Distribution;

    /// The model's forward-pass counter.
    fn counter(&self) -> &ForwardCounter;

    /// Counted forward passes so far.
    fn forward_count(&self) -> u64 {
        self.counter().get()
    }

    /// Reset the counter to zero (between benchmark trials).
    fn reset_forward_count(&self) {
        self.counter().reset()
    }

    /// The conditional distribution after `prefix`; exactly one counted
    /// forward pass. Fails without counting if `prefix` contains EOS.
    fn next_distribution(&self, prefix: &TokenSeq) -> Result<Distribution, ModelError> {
        validate_prefix(self.eos(), prefix)?;
        let dist = self.conditional(prefix);
        self.counter().add(1);
        Ok(dist)
    }

    /// Distributions at every position needed to verify `block` as a
    /// continuation of `prefix`: element `i` conditions on
    /// `prefix ⧺ block[..i]`. A final extra distribution for the position
    /// past the block is included unless the block ends with EOS, so the
    /// result holds `block.len() + 1` entries (or `block.len()` after EOS).
    /// Counted as a single forward pass: verifying a drafted block is one
    /// batched evaluation.
    fn score_block(
        &self,
        prefix: &TokenSeq,
        block: &[Token],
    ) -> Result<Vec<Distribution>, ModelError> {
        validate_prefix(self.eos(), prefix)?;
        let mut ctx = prefix.clone();
        let mut out = Vec::with_capacity(block.len() + 1);
        for (i, &t) in block.iter().enumerate() {
            out.push(self.conditional(&ctx));
            if t == self.eos() && i + 1 < block.len() {
                return Err(ModelError::InvalidPrefix {
                    position: ctx.len(),
                });
            }
            ctx.push(t);
        }
        if block.last() != Some(&self.eos()) {
            out.push(self.conditional(&ctx));
        }
        self.counter().add(1);
        Ok(out)
    }
}

fn validate_prefix(eos: Token, prefix: &TokenSeq) -> Result<(), ModelError> {
    if let Some(position) = prefix.position(eos) {
        return Err(ModelError::InvalidPrefix { position });
    }
    Ok(())
}

impl<T: LanguageModel + ?Sized> LanguageModel for &T {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn eos(&self) -> Token {
        (**self).eos()
    }
    fn conditional(&self, prefix: &TokenSeq) -> Distribution {
        (**self).conditional(prefix)
    }
    fn counter(&self) -> &ForwardCounter {
        (**self).counter()
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for Box<T> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn eos(&self) -> Token {
        (**self).eos()
    }
    fn conditional(&self, prefix: &TokenSeq) -> Distribution {
        (**self).conditional(prefix)
    }
    fn counter(&self) -> &ForwardCounter {
        (**self).counter()
    }
}

// ---------------------------------------------------------------------------
// UniformMixModel
// ---------------------------------------------------------------------------

/// Interpolates a base model with the uniform distribution:
/// `q(·|x) = (1 - alpha)·base(·|x) + alpha·uniform`.
///
/// `alpha` is the divergence knob between a draft model and its target: at
/// `alpha = 0` the wrapper reproduces the base model bit for bit, at
/// `alpha = 1` it ignores the base entirely. The wrapper keeps its own
/// forward counter; the wrapped model's counter is not observed.
pub struct UniformMixModel<M> {
    base: M,
    alpha: f64,
    counter: ForwardCounter,
}

impl<M: LanguageModel> UniformMixModel<M> {
    pub fn new(base: M, alpha: f64) -> Self {
        assert!((0.0..=1.0).contains(&alpha), "alpha must be in [0, 1]");
        UniformMixModel {
            base,
            alpha,
            counter: ForwardCounter::new(),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl<M: LanguageModel> LanguageModel for UniformMixModel<M> {
    fn vocab_size(&self) -> usize {
        self.base.vocab_size()
    }

    fn eos(&self) -> Token {
        self.base.eos()
    }

    fn conditional(&self, prefix: &TokenSeq) -> Distribution {
        let base = self.base.conditional(prefix);
        if self.alpha == 0.0 {
            return base;
        }
        base.mix(&Distribution::uniform(self.base.vocab_size()), self.alpha)
    }

    fn counter(&self) -> &ForwardCounter {
        &self.counter
    }
}

// ---------------------------------------------------------------------------
// Sequence scoring
// ---------------------------------------------------------------------------

/// Cumulative log-probability of `continuation` after `prefix`:
/// `Σ_j ln P(continuation_j | prefix ⧺ continuation_{<j})`.
///
/// One counted forward pass per continuation token. Zero-probability steps
/// contribute [`LOG_PROB_FLOOR`].
pub fn sequence_logprob(
    model: &dyn LanguageModel,
    prefix: &TokenSeq,
    continuation: &TokenSeq,
) -> Result<f64, ModelError> {
    if continuation.is_empty() {
        return Err(ModelError::EmptyContinuation);
    }
    let mut ctx = prefix.clone();
    let mut total = 0.0;
    for t in continuation.iter() {
        let dist = model.next_distribution(&ctx)?;
        total += dist.log_prob(t);
        ctx.push(t);
    }
    Ok(total)
}

/// Corpus perplexity: `exp(-total logprob / total token count)`. Sequences
/// are scored from the empty prefix. A zero-probability token drives the
/// result to `+inf`.
pub fn perplexity(model: &dyn LanguageModel, corpus: &[TokenSeq]) -> Result<f64, ModelError> {
    let mut total_logprob = 0.0;
    let mut total_tokens = 0usize;
    for seq in corpus {
        total_logprob += sequence_logprob(model, &TokenSeq::new(), seq)?;
        total_tokens += seq.len();
    }
    if total_tokens == 0 {
        return Err(ModelError::EmptyContinuation);
    }
    Ok((-total_logprob / total_tokens as f64).exp())
}
