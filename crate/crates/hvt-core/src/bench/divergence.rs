//! Output-distribution tests: exact enumeration where feasible, Monte-Carlo
//! otherwise, and total-variation distance between the two.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{run_decoder, BenchError, DecoderSpec};
use crate::model::{LanguageModel, Token, TokenSeq};

/// Enumeration budget: `vocab_size ^ horizon` must stay at or below this.
pub const ENUM_BUDGET: f64 = 1e5;

/// Smallest Monte-Carlo sample count accepted by [`divergence_test`].
pub const MIN_MC_SAMPLES: u64 = 10_000;

/// A distribution over emitted token sequences. Keys are the emitted
/// portions only (the prompt is not included); sequences end at EOS or at
/// the horizon.
pub type SeqDistribution = BTreeMap<TokenSeq, f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceMethod {
    ExactEnum,
    MonteCarlo,
}

/// Outcome of comparing a decoder's output distribution against the target
/// model's own sequence distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceResult {
    pub decoder: String,
    pub method: DivergenceMethod,
    pub total_variation: f64,
    /// Union support size of the two compared distributions.
    pub support: usize,
    /// Sample count for the Monte-Carlo method.
    pub samples: Option<u64>,
}

/// Total variation distance `½ Σ |d1(x) - d2(x)|` over the union of
/// supports. Both inputs must be normalized.
pub fn total_variation(d1: &SeqDistribution, d2: &SeqDistribution) -> f64 {
    let mut keys: Vec<&TokenSeq> = d1.keys().chain(d2.keys()).collect();
    keys.sort();
    keys.dedup();
    0.5 * keys
        .into_iter()
        .map(|k| (d1.get(k).unwrap_or(&0.0) - d2.get(k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
}

fn check_budget(vocab_size: usize, horizon: usize) -> Result<(), BenchError> {
    let states = (vocab_size as f64).powi(horizon as i32);
    if states > ENUM_BUDGET {
        return Err(BenchError::Budget(format!(
            "vocab_size^horizon = {states:.0} exceeds the enumeration budget of {ENUM_BUDGET:.0}; \
             use the Monte-Carlo method"
        )));
    }
    Ok(())
}

/// The target model's own distribution over emitted sequences: ancestral
/// probabilities of every continuation of `prompt`, stopping at EOS or after
/// `horizon` tokens. This is the reference that lossless decoders must
/// match.
pub fn model_sequence_distribution(
    p_model: &dyn LanguageModel,
    prompt: &TokenSeq,
    horizon: usize,
) -> Result<SeqDistribution, BenchError> {
    check_budget(p_model.vocab_size(), horizon)?;
    let mut out = SeqDistribution::new();
    let mut stack: Vec<(TokenSeq, f64)> = vec![(TokenSeq::new(), 1.0)];
    while let Some((emitted, mass)) = stack.pop() {
        if emitted.len() >= horizon || emitted.last() == Some(p_model.eos()) {
            *out.entry(emitted).or_insert(0.0) += mass;
            continue;
        }
        let ctx = prompt.concat(&emitted);
        let dist = p_model.conditional(&ctx);
        for id in 0..p_model.vocab_size() {
            let t = Token(id as u32);
            let pt = dist.prob(t);
            if pt > 0.0 {
                stack.push((emitted.extended(t), mass * pt));
            }
        }
    }
    Ok(out)
}

/// Exact output distribution of a decoder over emitted sequences of length
/// at most `horizon`, obtained by enumerating every stochastic branch with
/// its exact probability mass (uniform draws are handled symbolically as
/// interval masses, never discretized).
///
/// Supported for the greedy, multinomial, and flat speculative decoders; the
/// tree decoder's branch space is not enumerated here; measure it with
/// [`divergence_test`]'s Monte-Carlo path instead.
pub fn exact_output_distribution(
    decoder: &DecoderSpec,
    p_model: &dyn LanguageModel,
    q_model: &dyn LanguageModel,
    prompt: &TokenSeq,
    horizon: usize,
) -> Result<SeqDistribution, BenchError> {
    check_budget(p_model.vocab_size(), horizon)?;
    match decoder {
        DecoderSpec::Greedy => {
            let mut emitted = TokenSeq::new();
            while emitted.len() < horizon && emitted.last() != Some(p_model.eos()) {
                let dist = p_model.conditional(&prompt.concat(&emitted));
                emitted.push(dist.argmax());
            }
            let mut out = SeqDistribution::new();
            out.insert(emitted, 1.0);
            Ok(out)
        }
        DecoderSpec::Multinomial => model_sequence_distribution(p_model, prompt, horizon),
        DecoderSpec::FlatSpeculative { gamma } => {
            let mut out = SeqDistribution::new();
            flat_rounds(
                p_model,
                q_model,
                prompt,
                *gamma,
                horizon,
                TokenSeq::new(),
                1.0,
                &mut out,
            );
            Ok(out)
        }
        DecoderSpec::Hvt { .. } => Err(BenchError::NotEnumerable(
            "the tree decoder is not exactly enumerable; use Monte-Carlo".into(),
        )),
    }
}

/// Enumerate one draft-verify round of flat speculative decoding and recurse
/// into the following rounds. Mirrors `flat_speculative_decode` exactly:
/// same draft policy, acceptance test, residual replacement, bonus token,
/// and stopping rules, with every stochastic choice expanded symbolically.
#[allow(clippy::too_many_arguments)]
fn flat_rounds(
    p_model: &dyn LanguageModel,
    q_model: &dyn LanguageModel,
    prompt: &TokenSeq,
    gamma: usize,
    horizon: usize,
    emitted: TokenSeq,
    mass: f64,
    out: &mut SeqDistribution,
) {
    if mass <= 0.0 {
        return;
    }
    if emitted.len() >= horizon || emitted.last() == Some(p_model.eos()) {
        *out.entry(emitted).or_insert(0.0) += mass;
        return;
    }
    let draft_len = gamma.min(horizon - emitted.len());
    let base = prompt.concat(&emitted);
    // Enumerate all drafts q can produce (token probability zero cannot be
    // drafted), then walk the acceptance cascade for each.
    let mut drafts: Vec<(Vec<Token>, Vec<crate::model::Distribution>, f64)> = Vec::new();
    enumerate_drafts(
        q_model,
        &base,
        draft_len,
        Vec::new(),
        Vec::new(),
        1.0,
        &mut drafts,
    );
    for (draft, q_dists, draft_mass) in drafts {
        // The batched target scores, recomputed symbolically.
        let mut block = Vec::with_capacity(draft.len() + 1);
        let mut ctx = base.clone();
        for &t in &draft {
            block.push(p_model.conditional(&ctx));
            ctx.push(t);
        }
        if draft.last() != Some(&p_model.eos()) {
            block.push(p_model.conditional(&ctx));
        }
        walk_acceptance(
            p_model,
            q_model,
            prompt,
            gamma,
            horizon,
            &draft,
            &q_dists,
            &block,
            0,
            emitted.clone(),
            mass * draft_mass,
            out,
        );
    }
}

fn enumerate_drafts(
    q_model: &dyn LanguageModel,
    ctx: &TokenSeq,
    remaining: usize,
    tokens: Vec<Token>,
    dists: Vec<crate::model::Distribution>,
    mass: f64,
    out: &mut Vec<(Vec<Token>, Vec<crate::model::Distribution>, f64)>,
) {
    if remaining == 0 || tokens.last() == Some(&q_model.eos()) {
        out.push((tokens, dists, mass));
        return;
    }
    let dist = q_model.conditional(ctx);
    for id in 0..q_model.vocab_size() {
        let t = Token(id as u32);
        let qt = dist.prob(t);
        if qt > 0.0 {
            let mut tokens = tokens.clone();
            tokens.push(t);
            let mut dists = dists.clone();
            dists.push(dist.clone());
            enumerate_drafts(
                q_model,
                &ctx.extended(t),
                remaining - 1,
                tokens,
                dists,
                mass * qt,
                out,
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn walk_acceptance(
    p_model: &dyn LanguageModel,
    q_model: &dyn LanguageModel,
    prompt: &TokenSeq,
    gamma: usize,
    horizon: usize,
    draft: &[Token],
    q_dists: &[crate::model::Distribution],
    block: &[crate::model::Distribution],
    i: usize,
    emitted: TokenSeq,
    mass: f64,
    out: &mut SeqDistribution,
) {
    if mass <= 0.0 {
        return;
    }
    if i == draft.len() {
        // Every draft token accepted: bonus token unless the draft ended at
        // EOS or the budget is exhausted.
        if draft.last() != Some(&p_model.eos()) && emitted.len() < horizon {
            let bonus_dist = &block[draft.len()];
            for id in 0..p_model.vocab_size() {
                let t = Token(id as u32);
                let bt = bonus_dist.prob(t);
                if bt > 0.0 {
                    flat_rounds(
                        p_model,
                        q_model,
                        prompt,
                        gamma,
                        horizon,
                        emitted.extended(t),
                        mass * bt,
                        out,
                    );
                }
            }
        } else {
            flat_rounds(p_model, q_model, prompt, gamma, horizon, emitted, mass, out);
        }
        return;
    }
    let t = draft[i];
    let p_i = block[i].prob(t);
    let q_i = q_dists[i].prob(t);
    let accept_prob = if q_i <= 0.0 { 1.0 } else { (p_i / q_i).min(1.0) };
    if accept_prob > 0.0 {
        walk_acceptance(
            p_model,
            q_model,
            prompt,
            gamma,
            horizon,
            draft,
            q_dists,
            block,
            i + 1,
            emitted.extended(t),
            mass * accept_prob,
            out,
        );
    }
    let reject_prob = 1.0 - accept_prob;
    if reject_prob > 0.0 {
        let residual: Vec<f64> = block[i]
            .probs()
            .iter()
            .zip(q_dists[i].probs())
            .map(|(p, q)| (p - q).max(0.0))
            .collect();
        let res_mass: f64 = residual.iter().sum();
        let replacement_probs: Vec<f64> = if res_mass > 0.0 {
            residual.iter().map(|w| w / res_mass).collect()
        } else {
            block[i].probs().to_vec()
        };
        for (id, &rp) in replacement_probs.iter().enumerate() {
            if rp > 0.0 {
                flat_rounds(
                    p_model,
                    q_model,
                    prompt,
                    gamma,
                    horizon,
                    emitted.extended(Token(id as u32)),
                    mass * reject_prob * rp,
                    out,
                );
            }
        }
    }
}

/// Compare a decoder's output distribution over `horizon` emitted tokens
/// against the target model's own distribution, exactly when the decoder and
/// budget allow it, by Monte-Carlo sampling otherwise.
#[allow(clippy::too_many_arguments)]
pub fn divergence_test<R: Rng + ?Sized>(
    decoder: &DecoderSpec,
    p_model: &dyn LanguageModel,
    q_model: &dyn LanguageModel,
    prompt: &TokenSeq,
    horizon: usize,
    samples: u64,
    rng: &mut R,
) -> Result<DivergenceResult, BenchError> {
    let target = match model_sequence_distribution(p_model, prompt, horizon) {
        Ok(t) => t,
        Err(BenchError::Budget(msg)) => {
            return Err(BenchError::Budget(format!(
                "target distribution is not enumerable ({msg}); shrink the horizon or vocabulary"
            )))
        }
        Err(e) => return Err(e),
    };
    match exact_output_distribution(decoder, p_model, q_model, prompt, horizon) {
        Ok(dist) => {
            let tv = total_variation(&dist, &target);
            let support = dist
                .keys()
                .chain(target.keys())
                .collect::<std::collections::BTreeSet<_>>()
                .len();
            Ok(DivergenceResult {
                decoder: decoder.id(),
                method: DivergenceMethod::ExactEnum,
                total_variation: tv,
                support,
                samples: None,
            })
        }
        Err(BenchError::NotEnumerable(_)) | Err(BenchError::Budget(_)) => {
            monte_carlo_divergence(decoder, p_model, q_model, prompt, horizon, samples, rng)
        }
        Err(e) => Err(e),
    }
}

/// Monte-Carlo divergence estimate: run the decoder `samples` times, tally
/// the emitted prefixes of length `horizon`, and compare against the target
/// model's exact sequence distribution.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_divergence<R: Rng + ?Sized>(
    decoder: &DecoderSpec,
    p_model: &dyn LanguageModel,
    q_model: &dyn LanguageModel,
    prompt: &TokenSeq,
    horizon: usize,
    samples: u64,
    rng: &mut R,
) -> Result<DivergenceResult, BenchError> {
    if samples < MIN_MC_SAMPLES {
        return Err(BenchError::Config(format!(
            "decoder {} needs Monte-Carlo with at least {MIN_MC_SAMPLES} samples (got {samples})",
            decoder.id()
        )));
    }
    let target = model_sequence_distribution(p_model, prompt, horizon)?;
    let mut empirical = SeqDistribution::new();
    let weight = 1.0 / samples as f64;
    for _ in 0..samples {
        let (output, _) = run_decoder(decoder, p_model, q_model, prompt, horizon, rng)
            .map_err(|e| BenchError::Config(format!("decoder failed: {e}")))?;
        let emitted: TokenSeq = output
            .as_slice()
            .iter()
            .skip(prompt.len())
            .take(horizon)
            .copied()
            .collect();
        *empirical.entry(emitted).or_insert(0.0) += weight;
    }
    let tv = total_variation(&empirical, &target);
    let support = empirical
        .keys()
        .chain(target.keys())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    Ok(DivergenceResult {
        decoder: decoder.id(),
        method: DivergenceMethod::MonteCarlo,
        total_variation: tv,
        support,
        samples: Some(samples),
    })
}
