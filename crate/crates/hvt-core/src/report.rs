//! Per-run metrics shared by every decoder.

use serde::{Deserialize, Serialize};

use crate::engine::StepStats;

/// Accounting for one decode run. All decoders fill the same record so the
/// benchmark can compare them column for column:
///
/// * greedy / multinomial: only the forward counts and emitted tokens are
///   meaningful;
/// * flat speculative: `accepted_nodes` / `rejected_nodes` count draft
///   tokens, so `acceptance_rate` is the per-token acceptance rate;
/// * hierarchical verification: per-step [`StepStats`] plus totals.
///
/// `p_forward` and `q_forward` mirror the instrumented model counters
/// exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeReport {
    pub decoder: String,
    pub prompt_len: usize,
    pub beams_returned: usize,
    /// Emitted (non-prompt) tokens summed over the returned beams.
    pub tokens_emitted: u64,
    pub p_forward: u64,
    pub q_forward: u64,
    pub total_nodes: u64,
    pub verified_nodes: u64,
    pub accepted_nodes: u64,
    pub rejected_nodes: u64,
    pub pruned_nodes: u64,
    pub unvisited_nodes: u64,
    pub residual_draws: u64,
    #[serde(default)]
    pub steps: Vec<StepStats>,
}

impl DecodeReport {
    pub fn new(decoder: &str, prompt_len: usize) -> Self {
        DecodeReport {
            decoder: decoder.to_string(),
            prompt_len,
            beams_returned: 0,
            tokens_emitted: 0,
            p_forward: 0,
            q_forward: 0,
            total_nodes: 0,
            verified_nodes: 0,
            accepted_nodes: 0,
            rejected_nodes: 0,
            pruned_nodes: 0,
            unvisited_nodes: 0,
            residual_draws: 0,
            steps: Vec::new(),
        }
    }

    pub fn record_step(&mut self, stats: StepStats) {
        self.total_nodes += stats.total_nodes;
        self.verified_nodes += stats.verified_nodes;
        self.accepted_nodes += stats.accepted_nodes;
        self.rejected_nodes += stats.rejected_nodes;
        self.pruned_nodes += stats.pruned_nodes;
        self.unvisited_nodes += stats.unvisited_nodes;
        self.residual_draws += stats.residual_draws;
        self.steps.push(stats);
    }

    /// Accepted / verified over the whole run; `None` when the decoder never
    /// verifies anything (greedy, multinomial).
    pub fn acceptance_rate(&self) -> Option<f64> {
        if self.verified_nodes == 0 {
            None
        } else {
            Some(self.accepted_nodes as f64 / self.verified_nodes as f64)
        }
    }

    /// Mean of the per-step acceptance rates (alternative aggregation to
    /// [`acceptance_rate`](Self::acceptance_rate), which weights by totals).
    pub fn mean_step_acceptance_rate(&self) -> Option<f64> {
        let rates: Vec<f64> = self
            .steps
            .iter()
            .filter(|s| s.verified_nodes > 0)
            .map(|s| s.accepted_nodes as f64 / s.verified_nodes as f64)
            .collect();
        if rates.is_empty() {
            None
        } else {
            Some(rates.iter().sum::<f64>() / rates.len() as f64)
        }
    }

    /// Fraction of draft nodes never evaluated by the target model; `None`
    /// for decoders without a draft tree.
    pub fn verification_reduction_rate(&self) -> Option<f64> {
        if self.total_nodes == 0 {
            None
        } else {
            Some(1.0 - self.verified_nodes as f64 / self.total_nodes as f64)
        }
    }

    /// Target forward passes per emitted token.
    pub fn p_forward_per_token(&self) -> f64 {
        if self.tokens_emitted == 0 {
            0.0
        } else {
            self.p_forward as f64 / self.tokens_emitted as f64
        }
    }

    /// Draft forward passes per emitted token.
    pub fn q_forward_per_token(&self) -> f64 {
        if self.tokens_emitted == 0 {
            0.0
        } else {
            self.q_forward as f64 / self.tokens_emitted as f64
        }
    }
}
