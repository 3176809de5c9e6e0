//! Reference decoders: greedy, multinomial, and flat token-level
//! speculative decoding.
//!
//! The flat speculative decoder is the lossless baseline: a draft model
//! proposes a block of tokens autoregressively, the target model scores the
//! whole block in one batched pass, and each token is kept with probability
//! `min(1, p/q)`. On the first rejection the replacement token is drawn from
//! the normalized residual `max(0, p - q)` and the rest of the block is
//! discarded; if every token survives, one bonus token is sampled from the
//! target distribution at the next position. This scheme reproduces the
//! target model's output distribution exactly, which makes it the ground
//! truth that tree-based decoding is measured against.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{LanguageModel, ModelError, TokenSeq};
use crate::report::DecodeReport;

/// The implemented baseline decoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Greedy,
    Multinomial,
    FlatSpeculative,
}

impl BaselineKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BaselineKind::Greedy => "greedy",
            BaselineKind::Multinomial => "multinomial",
            BaselineKind::FlatSpeculative => "flat_speculative",
        }
    }
}

/// Append the argmax token (ties to the lowest id) until EOS or the budget
/// runs out. Exactly one target forward pass per emitted token.
pub fn greedy_decode(
    p_model: &dyn LanguageModel,
    prompt: &TokenSeq,
    max_new_tokens: usize,
) -> Result<(TokenSeq, DecodeReport), ModelError> {
    let p_before = p_model.forward_count();
    let mut report = DecodeReport::new("greedy", prompt.len());
    let mut seq = prompt.clone();
    for _ in 0..max_new_tokens {
        let dist = p_model.next_distribution(&seq)?;
        let t = dist.argmax();
        seq.push(t);
        report.tokens_emitted += 1;
        if t == p_model.eos() {
            break;
        }
    }
    report.beams_returned = 1;
    report.p_forward = p_model.forward_count() - p_before;
    Ok((seq, report))
}

/// Sample one token per position from the target conditional.
pub fn multinomial_decode<R: Rng + ?Sized>(
    p_model: &dyn LanguageModel,
    prompt: &TokenSeq,
    max_new_tokens: usize,
    rng: &mut R,
) -> Result<(TokenSeq, DecodeReport), ModelError> {
    let p_before = p_model.forward_count();
    let mut report = DecodeReport::new("multinomial", prompt.len());
    let mut seq = prompt.clone();
    for _ in 0..max_new_tokens {
        let dist = p_model.next_distribution(&seq)?;
        let t = dist.sample(rng);
        seq.push(t);
        report.tokens_emitted += 1;
        if t == p_model.eos() {
            break;
        }
    }
    report.beams_returned = 1;
    report.p_forward = p_model.forward_count() - p_before;
    Ok((seq, report))
}

/// Flat token-level speculative decoding (see the module docs).
///
/// Report fields are reused as follows: `total_nodes` counts drafted tokens,
/// `accepted_nodes`/`rejected_nodes` count the accept/reject outcomes of the
/// positions actually walked, and `pruned_nodes` counts drafted tokens
/// discarded behind a rejection. The target model pays one batched pass per
/// draft block, so `p_forward` equals the number of verification rounds.
pub fn flat_speculative_decode<R: Rng + ?Sized>(
    p_model: &dyn LanguageModel,
    q_model: &dyn LanguageModel,
    prompt: &TokenSeq,
    gamma: usize,
    max_new_tokens: usize,
    rng: &mut R,
) -> Result<(TokenSeq, DecodeReport), ModelError> {
    assert!(gamma >= 1, "gamma must be at least 1");
    let p_before = p_model.forward_count();
    let q_before = q_model.forward_count();
    let mut report = DecodeReport::new("flat_speculative", prompt.len());
    let eos = p_model.eos();
    let mut seq = prompt.clone();
    let mut emitted = 0usize;

    'rounds: while emitted < max_new_tokens && seq.last() != Some(eos) {
        let budget = max_new_tokens - emitted;
        let draft_len = gamma.min(budget);

        // Draft autoregressively from q, stopping at EOS.
        let mut draft = Vec::with_capacity(draft_len);
        let mut q_dists = Vec::with_capacity(draft_len);
        let mut ctx = seq.clone();
        for _ in 0..draft_len {
            let dist = q_model.next_distribution(&ctx)?;
            let t = dist.sample(rng);
            ctx.push(t);
            q_dists.push(dist);
            draft.push(t);
            if t == eos {
                break;
            }
        }
        report.total_nodes += draft.len() as u64;

        // One batched target pass scores every draft position (plus the
        // bonus position unless the draft ended at EOS).
        let block = p_model.score_block(&seq, &draft)?;

        let mut all_accepted = true;
        for (i, &t) in draft.iter().enumerate() {
            let p_i = block[i].prob(t);
            let q_i = q_dists[i].prob(t);
            let accept_prob = if q_i <= 0.0 { 1.0 } else { (p_i / q_i).min(1.0) };
            let u = rng.random::<f64>();
            if u < accept_prob {
                report.accepted_nodes += 1;
                report.verified_nodes += 1;
                seq.push(t);
                emitted += 1;
                if t == eos {
                    break 'rounds;
                }
            } else {
                report.rejected_nodes += 1;
                report.verified_nodes += 1;
                report.pruned_nodes += (draft.len() - i - 1) as u64;
                // Replacement from the normalized residual max(0, p - q).
                let residual: Vec<f64> = block[i]
                    .probs()
                    .iter()
                    .zip(q_dists[i].probs())
                    .map(|(p, q)| (p - q).max(0.0))
                    .collect();
                let mass: f64 = residual.iter().sum();
                let replacement = if mass > 0.0 {
                    inverse_cdf(&residual, rng.random::<f64>() * mass)
                } else {
                    block[i].sample(rng)
                };
                seq.push(replacement);
                emitted += 1;
                all_accepted = false;
                if replacement == eos {
                    break 'rounds;
                }
                break;
            }
        }

        if all_accepted && draft.last() != Some(&eos) && emitted < max_new_tokens {
            let bonus = block[draft.len()].sample(rng);
            seq.push(bonus);
            emitted += 1;
            if bonus == eos {
                break;
            }
        }
    }

    report.tokens_emitted = emitted as u64;
    report.beams_returned = 1;
    report.p_forward = p_model.forward_count() - p_before;
    report.q_forward = q_model.forward_count() - q_before;
    Ok((seq, report))
}

fn inverse_cdf(weights: &[f64], target: f64) -> crate::model::Token {
    let mut cum = 0.0;
    let mut last_positive = 0usize;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
        }
        cum += w;
        if w > 0.0 && target < cum {
            return crate::model::Token(i as u32);
        }
    }
    crate::model::Token(last_positive as u32)
}
