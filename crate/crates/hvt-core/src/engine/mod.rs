//! The hierarchical verification engine.
//!
//! One decoding step takes the draft trees of the active beams, ranks every
//! candidate node in a single max-priority queue, and verifies nodes against
//! the target model in priority order. Verifying a node costs one target
//! forward pass; accepting it keeps the node, rejecting it prunes the whole
//! subtree below it without spending anything further. The step ends when
//! the queue drains or, with `stop_at_w`, as soon as the accepted frontier
//! is wide enough; whatever is still pending is marked unvisited. Beams for
//! the next step come from the accepted frontier, topped up from the
//! residual distribution `max(0, p - q)` over the draft leaves when too few
//! nodes survived.
//!
//! Because priorities can rank a deep node above its still-pending parent,
//! popping a node first verifies its pending ancestors root-to-leaf; a
//! rejected ancestor prunes the popped node along with the rest of the
//! subtree. Every target evaluation is memoized on the tree, so a node's
//! target log-probability is paid for at most once per step regardless of
//! how many descendants or residual draws revisit it.

mod queue;
mod trace;

pub use queue::{QueueItem, VerificationQueue};
pub use trace::TraceEvent;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LanguageModel, ModelError, Token, TokenSeq};
use crate::report::DecodeReport;
use crate::tree::{
    build_draft_tree_with, DraftPolicy, DraftTree, NodeId, NodeStatus, PriorityMode, TreeError,
};

/// Residual masses below this are treated as zero and trigger the ancestral
/// fallback.
pub const RESIDUAL_MIN_MASS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How surviving beams are ranked when selecting the top W.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FrontierRank {
    /// Cumulative target log-probability of the emitted tokens.
    #[default]
    CumLogprob,
    /// Cumulative target log-probability divided by emitted length.
    LengthNormalized,
}

/// Whether the acceptance test draws a uniform sample (the probabilistic
/// `min(1, p/q)` rule) or applies a deterministic threshold (accept iff the
/// ratio is at least one; debugging aid).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AcceptMode {
    #[default]
    Stochastic,
    Threshold,
}

/// Full configuration of a hierarchical-verification decode run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HvtConfig {
    /// Draft tree depth γ.
    pub gamma: usize,
    /// Branching factor k.
    pub k: usize,
    /// Beam width W.
    pub w: usize,
    pub priority_mode: PriorityMode,
    /// Stop verifying once the accepted frontier reaches width W.
    pub stop_at_w: bool,
    /// Cap on non-root nodes per draft tree.
    pub node_cap: usize,
    pub max_new_tokens: usize,
    /// Seed recorded alongside results; the decode functions consume the rng
    /// they are handed, which the CLI builds from this value.
    pub seed: u64,
    pub frontier_rank: FrontierRank,
    pub draft_policy: DraftPolicy,
    pub accept_mode: AcceptMode,
}

impl Default for HvtConfig {
    fn default() -> Self {
        HvtConfig {
            gamma: 3,
            k: 2,
            w: 2,
            priority_mode: PriorityMode::LogLikelihood,
            stop_at_w: true,
            node_cap: 4096,
            max_new_tokens: 16,
            seed: 0,
            frontier_rank: FrontierRank::CumLogprob,
            draft_policy: DraftPolicy::TopK,
            accept_mode: AcceptMode::Stochastic,
        }
    }
}

impl HvtConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.gamma < 1 {
            return Err(EngineError::Config("gamma must be at least 1".into()));
        }
        if self.k < 1 {
            return Err(EngineError::Config("k must be at least 1".into()));
        }
        if self.w < 1 {
            return Err(EngineError::Config("w must be at least 1".into()));
        }
        if self.max_new_tokens < 1 {
            return Err(EngineError::Config(
                "max_new_tokens must be at least 1".into(),
            ));
        }
        if self.node_cap < self.k {
            return Err(EngineError::Config("node_cap must be at least k".into()));
        }
        Ok(())
    }
}

/// Per-step verification accounting.
///
/// Identities maintained by the engine:
/// `verified = accepted + rejected` and
/// `verified + pruned + unvisited = total`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepStats {
    /// Candidate (non-root) nodes across the step's draft trees.
    pub total_nodes: u64,
    pub verified_nodes: u64,
    pub accepted_nodes: u64,
    pub rejected_nodes: u64,
    pub pruned_nodes: u64,
    pub unvisited_nodes: u64,
    pub residual_draws: u64,
    /// Target forward passes spent this step (verification plus residual
    /// scoring).
    pub p_forward: u64,
    /// Draft forward passes spent building this step's trees.
    pub q_forward: u64,
}

/// Acceptance rate and verification reduction rate of one step:
/// `accepted / verified` (zero when nothing was verified) and
/// `1 - verified / total`.
pub fn step_metrics(stats: &StepStats) -> (f64, f64) {
    assert!(stats.total_nodes > 0, "step_metrics requires total_nodes > 0");
    let acceptance = if stats.verified_nodes == 0 {
        0.0
    } else {
        stats.accepted_nodes as f64 / stats.verified_nodes as f64
    };
    let vrr = 1.0 - stats.verified_nodes as f64 / stats.total_nodes as f64;
    (acceptance, vrr)
}

/// Result of a single verification step over one draft tree.
#[derive(Debug, Clone)]
pub struct StepResult {
    /// Accepted non-root nodes, in acceptance order.
    pub accepted: Vec<NodeId>,
    /// Up to W continuations: the full sequence (prefix ⧺ path) and its
    /// cumulative target log-probability relative to the prefix.
    pub continuations: Vec<(TokenSeq, f64)>,
    pub stats: StepStats,
    pub trace: Vec<TraceEvent>,
}

/// A decoded beam: the full token sequence (prompt included) and the
/// cumulative target log-probability of its emitted portion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSeq {
    pub tokens: TokenSeq,
    pub score: f64,
}

// ---------------------------------------------------------------------------
// Target-side scoring, memoized on the tree
// ---------------------------------------------------------------------------

/// Cumulative target log-probability of `v`'s path, computing missing values
/// along the ancestor chain. Each node's value costs exactly one target
/// forward pass, paid at most once per tree.
fn ensure_p_logp(
    tree: &mut DraftTree,
    v: NodeId,
    p_model: &dyn LanguageModel,
) -> Result<f64, ModelError> {
    if let Some(val) = tree.node(v).p_logp_cum {
        return Ok(val);
    }
    let parent = tree.node(v).parent.expect("root carries p_logp_cum");
    let parent_cum = ensure_p_logp(tree, parent, p_model)?;
    let ctx = tree.root_prefix().concat(&tree.path_tokens(parent));
    let dist = p_model.next_distribution(&ctx)?;
    let token = tree.node(v).token.expect("non-root node has a token");
    let val = parent_cum + dist.log_prob(token);
    tree.node_mut(v).p_logp_cum = Some(val);
    Ok(val)
}

/// Per-token target log-probabilities along the root→v path.
fn path_token_logps(tree: &DraftTree, v: NodeId) -> Vec<f64> {
    let mut rev = Vec::new();
    let mut cur = v;
    while let Some(parent) = tree.node(cur).parent {
        let cum = tree.node(cur).p_logp_cum.expect("path scored");
        let parent_cum = tree.node(parent).p_logp_cum.expect("ancestor scored");
        rev.push(cum - parent_cum);
        cur = parent;
    }
    rev.reverse();
    rev
}

// ---------------------------------------------------------------------------
// verify_node
// ---------------------------------------------------------------------------

/// Verify a single pending node whose ancestors are all accepted: compute
/// its target score lazily (one fresh target pass), then accept with
/// probability `min(1, p_v / q_v)`. Returns the new status, which is also
/// written back onto the tree.
pub fn verify_node<R: Rng + ?Sized>(
    tree: &mut DraftTree,
    v: NodeId,
    p_model: &dyn LanguageModel,
    cfg: &HvtConfig,
    rng: &mut R,
) -> Result<NodeStatus, EngineError> {
    let (status, _, _) = verify_node_inner(tree, v, p_model, cfg, rng)?;
    Ok(status)
}

fn verify_node_inner<R: Rng + ?Sized>(
    tree: &mut DraftTree,
    v: NodeId,
    p_model: &dyn LanguageModel,
    cfg: &HvtConfig,
    rng: &mut R,
) -> Result<(NodeStatus, Option<f64>, f64), EngineError> {
    assert_eq!(
        tree.status(v),
        NodeStatus::Pending,
        "verify_node requires a pending node"
    );
    for a in tree.ancestors_root_first(v) {
        assert_eq!(
            tree.status(a),
            NodeStatus::Accepted,
            "verify_node requires all ancestors accepted (ordering violation)"
        );
    }
    let p_cum = ensure_p_logp(tree, v, p_model)?;
    let log_ratio = p_cum - tree.node(v).q_logp_cum;
    let (accepted, u) = match cfg.accept_mode {
        AcceptMode::Stochastic => {
            let u = rng.random::<f64>();
            (u < log_ratio.exp().min(1.0), Some(u))
        }
        AcceptMode::Threshold => (log_ratio >= 0.0, None),
    };
    let status = if accepted {
        NodeStatus::Accepted
    } else {
        NodeStatus::Rejected
    };
    tree.set_status(v, status);
    Ok((status, u, log_ratio))
}

// ---------------------------------------------------------------------------
// The step proper (shared by hvt_step and decode)
// ---------------------------------------------------------------------------

/// Running score context of the beam that owns a tree.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct BeamBase {
    /// Cumulative target log-probability of the tokens emitted so far.
    pub score: f64,
    /// Tokens emitted so far.
    pub emitted: usize,
}

/// One continuation proposed by a step, tied to the tree (beam) it extends.
#[derive(Debug, Clone)]
pub(crate) struct Continuation {
    pub beam: usize,
    pub tokens: Vec<Token>,
    pub token_logps: Vec<f64>,
}

pub(crate) struct StepOutcome {
    pub continuations: Vec<Continuation>,
    pub accepted: Vec<(usize, NodeId)>,
    pub stats: StepStats,
}

/// Accepted non-root nodes with no accepted child, in (tree, node) order.
fn frontier(trees: &[DraftTree]) -> Vec<(usize, NodeId)> {
    let mut out = Vec::new();
    for (ti, tree) in trees.iter().enumerate() {
        for v in tree.non_root_ids() {
            if tree.status(v) == NodeStatus::Accepted
                && !tree
                    .children(v)
                    .iter()
                    .any(|&c| tree.status(c) == NodeStatus::Accepted)
            {
                out.push((ti, v));
            }
        }
    }
    out
}

fn prune_subtree(
    tree: &mut DraftTree,
    v: NodeId,
    tree_idx: usize,
    queue: &mut VerificationQueue,
    stats: &mut StepStats,
) -> u64 {
    let mut count = 0;
    for d in tree.descendants(v) {
        debug_assert_eq!(
            tree.status(d),
            NodeStatus::Pending,
            "descendants of a just-rejected node are still pending"
        );
        tree.set_status(d, NodeStatus::Pruned);
        queue.prune_in_tree(tree_idx, d);
        count += 1;
    }
    stats.pruned_nodes += count;
    count
}

pub(crate) fn run_step<R: Rng + ?Sized>(
    trees: &mut [DraftTree],
    bases: &[BeamBase],
    width: usize,
    p_model: &dyn LanguageModel,
    cfg: &HvtConfig,
    rng: &mut R,
    trace: &mut Vec<TraceEvent>,
) -> Result<StepOutcome, EngineError> {
    debug_assert_eq!(trees.len(), bases.len());
    let mut stats = StepStats::default();
    let p_before = p_model.forward_count();

    let mut queue = VerificationQueue::new();
    for (ti, tree) in trees.iter().enumerate() {
        stats.total_nodes += tree.non_root_count() as u64;
        stats.q_forward += tree.expanded_nodes();
        for v in tree.non_root_ids() {
            let priority = tree
                .priority(v, cfg.priority_mode)
                .expect("non-root node priority");
            queue.push_in_tree(ti, priority, v);
        }
    }

    let mut accepted: Vec<(usize, NodeId)> = Vec::new();
    loop {
        if cfg.stop_at_w {
            let f = frontier(trees);
            if f.len() >= width {
                trace.push(TraceEvent::EarlyStop {
                    frontier: f.len() as u64,
                });
                break;
            }
        }
        let Some(item) = queue.pop() else { break };
        let (ti, v) = (item.tree, item.node);
        if trees[ti].status(v) != NodeStatus::Pending {
            // Already settled through an ancestor cascade; not a pop.
            continue;
        }
        trace.push(TraceEvent::Pop {
            tree: ti as u32,
            node: v.0,
            priority: item.priority,
        });

        // Verify any pending ancestors root-to-leaf before the node itself;
        // the target score of v conditions on every ancestor's token.
        let mut subtree_rejected = false;
        let chain: Vec<NodeId> = trees[ti]
            .ancestors_root_first(v)
            .into_iter()
            .chain(std::iter::once(v))
            .collect();
        for u in chain {
            match trees[ti].status(u) {
                NodeStatus::Accepted => continue,
                NodeStatus::Pending => {
                    let (status, draw, log_ratio) =
                        verify_node_inner(&mut trees[ti], u, p_model, cfg, rng)?;
                    stats.verified_nodes += 1;
                    trace.push(TraceEvent::Verify {
                        tree: ti as u32,
                        node: u.0,
                        u: draw,
                        log_ratio,
                        status,
                    });
                    match status {
                        NodeStatus::Accepted => {
                            stats.accepted_nodes += 1;
                            accepted.push((ti, u));
                        }
                        NodeStatus::Rejected => {
                            stats.rejected_nodes += 1;
                            // The rejected node's own queue entry (if it was a
                            // cascade ancestor rather than the popped node) is
                            // skipped later by the status filter.
                            let pruned =
                                prune_subtree(&mut trees[ti], u, ti, &mut queue, &mut stats);
                            trace.push(TraceEvent::Prune {
                                tree: ti as u32,
                                node: u.0,
                                pruned,
                            });
                            subtree_rejected = true;
                        }
                        _ => unreachable!("verification yields accepted or rejected"),
                    }
                }
                other => unreachable!(
                    "popped node with ancestor in state {other:?}; it should have been pruned"
                ),
            }
            if subtree_rejected {
                break;
            }
        }
    }

    // Everything still pending was never considered by the target model.
    let mut unvisited = 0;
    for tree in trees.iter_mut() {
        for v in tree.non_root_ids().collect::<Vec<_>>() {
            if tree.status(v) == NodeStatus::Pending {
                tree.set_status(v, NodeStatus::Unvisited);
                unvisited += 1;
            }
        }
    }
    stats.unvisited_nodes = unvisited;
    if unvisited > 0 {
        trace.push(TraceEvent::MarkUnvisited { count: unvisited });
    }

    // Top-`width` frontier by the configured rank.
    let mut picks = frontier(trees);
    let rank = |&(ti, v): &(usize, NodeId)| -> f64 {
        let p_cum = trees[ti].node(v).p_logp_cum.expect("accepted node scored");
        let score = bases[ti].score + p_cum;
        match cfg.frontier_rank {
            FrontierRank::CumLogprob => score,
            FrontierRank::LengthNormalized => {
                score / (bases[ti].emitted + trees[ti].node(v).depth as usize) as f64
            }
        }
    };
    picks.sort_by(|a, b| rank(b).total_cmp(&rank(a)).then_with(|| a.cmp(b)));
    picks.truncate(width);

    let mut continuations = Vec::with_capacity(width);
    for &(ti, v) in &picks {
        trace.push(TraceEvent::FrontierPick {
            tree: ti as u32,
            node: v.0,
            score: rank(&(ti, v)),
        });
        continuations.push(Continuation {
            beam: ti,
            tokens: trees[ti].path_tokens(v).as_slice().to_vec(),
            token_logps: path_token_logps(&trees[ti], v),
        });
    }

    let gap = width - continuations.len();
    if gap > 0 {
        let fills = residual_fill(trees, gap, p_model, cfg.gamma, rng, trace)?;
        stats.residual_draws = fills.len() as u64;
        continuations.extend(fills);
    }

    stats.p_forward = p_model.forward_count() - p_before;
    debug_assert_eq!(
        stats.verified_nodes,
        stats.accepted_nodes + stats.rejected_nodes
    );
    debug_assert_eq!(
        stats.total_nodes,
        stats.verified_nodes + stats.pruned_nodes + stats.unvisited_nodes
    );
    Ok(StepOutcome {
        continuations,
        accepted,
        stats,
    })
}

// ---------------------------------------------------------------------------
// Residual recovery
// ---------------------------------------------------------------------------

/// Draw `count` sequences from the residual mass `max(0, p(x) - q(x))` over
/// the draft-tree leaves (without replacement, renormalizing between draws).
/// When no residual mass remains, sequences are drawn ancestrally from the
/// target model instead, `gamma` tokens long (stopping at EOS).
fn residual_fill<R: Rng + ?Sized>(
    trees: &mut [DraftTree],
    count: usize,
    p_model: &dyn LanguageModel,
    gamma: usize,
    rng: &mut R,
    trace: &mut Vec<TraceEvent>,
) -> Result<Vec<Continuation>, EngineError> {
    // Leaf support in (tree, node id) order, weighted by max(0, p - q).
    let mut support: Vec<(usize, NodeId)> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for (ti, tree) in trees.iter_mut().enumerate() {
        for v in tree.leaves() {
            let p_cum = ensure_p_logp(tree, v, p_model)?;
            let q_cum = tree.node(v).q_logp_cum;
            support.push((ti, v));
            weights.push((p_cum.exp() - q_cum.exp()).max(0.0));
        }
    }

    let mut out = Vec::with_capacity(count);
    let mut fallback_round = 0usize;
    for _ in 0..count {
        let mass: f64 = weights.iter().sum();
        if mass < RESIDUAL_MIN_MASS {
            // Ancestral fallback: fresh continuation straight from the
            // target model, rotating over the trees for the beam to extend.
            let ti = fallback_round % trees.len();
            fallback_round += 1;
            let mut ctx = trees[ti].root_prefix().clone();
            let mut tokens = Vec::new();
            let mut logps = Vec::new();
            for _ in 0..gamma {
                let dist = p_model.next_distribution(&ctx)?;
                let t = dist.sample(rng);
                logps.push(dist.log_prob(t));
                tokens.push(t);
                ctx.push(t);
                if t == p_model.eos() {
                    break;
                }
            }
            trace.push(TraceEvent::ResidualFresh {
                tree: ti as u32,
                tokens: tokens.iter().map(|t| t.id()).collect(),
            });
            out.push(Continuation {
                beam: ti,
                tokens,
                token_logps: logps,
            });
            continue;
        }
        let target = rng.random::<f64>() * mass;
        let mut cum = 0.0;
        let mut chosen = None;
        let mut last_positive = None;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                last_positive = Some(i);
            }
            cum += w;
            if w > 0.0 && target < cum {
                chosen = Some(i);
                break;
            }
        }
        let idx = chosen.or(last_positive).expect("mass is positive");
        let (ti, v) = support[idx];
        weights[idx] = 0.0;
        trace.push(TraceEvent::ResidualLeaf {
            tree: ti as u32,
            node: v.0,
        });
        out.push(Continuation {
            beam: ti,
            tokens: trees[ti].path_tokens(v).as_slice().to_vec(),
            token_logps: path_token_logps(&trees[ti], v),
        });
    }
    Ok(out)
}

/// Standalone residual sampler over one tree (see [`residual_fill`] for the
/// semantics): returns full sequences `prefix ⧺ x` with score `ln p(x)`.
pub fn residual_sample<R: Rng + ?Sized>(
    tree: &mut DraftTree,
    p_model: &dyn LanguageModel,
    count: usize,
    rng: &mut R,
) -> Result<Vec<(TokenSeq, f64)>, EngineError> {
    assert!(count >= 1, "residual_sample requires count >= 1");
    let gamma = tree.gamma();
    let mut trace = Vec::new();
    let fills = residual_fill(
        std::slice::from_mut(tree),
        count,
        p_model,
        gamma,
        rng,
        &mut trace,
    )?;
    Ok(fills
        .into_iter()
        .map(|c| {
            let seq = tree
                .root_prefix()
                .concat(&TokenSeq::from(c.tokens.clone()));
            (seq, c.token_logps.iter().sum())
        })
        .collect())
}

// ---------------------------------------------------------------------------
// hvt_step: one verification step over a prepared tree
// ---------------------------------------------------------------------------

/// Run one full verification step over a freshly built draft tree: verify in
/// priority order with subtree pruning, then return the top-W continuations
/// (residual-sampled when fewer than W nodes survive).
pub fn hvt_step<R: Rng + ?Sized>(
    tree: &mut DraftTree,
    p_model: &dyn LanguageModel,
    cfg: &HvtConfig,
    rng: &mut R,
) -> Result<StepResult, EngineError> {
    cfg.validate()?;
    let mut trace = Vec::new();
    let bases = [BeamBase::default()];
    let outcome = run_step(
        std::slice::from_mut(tree),
        &bases,
        cfg.w,
        p_model,
        cfg,
        rng,
        &mut trace,
    )?;
    let continuations = outcome
        .continuations
        .iter()
        .map(|c| {
            let seq = tree
                .root_prefix()
                .concat(&TokenSeq::from(c.tokens.clone()));
            (seq, c.token_logps.iter().sum())
        })
        .collect();
    Ok(StepResult {
        accepted: outcome.accepted.into_iter().map(|(_, v)| v).collect(),
        continuations,
        stats: outcome.stats,
        trace,
    })
}

// ---------------------------------------------------------------------------
// decode: the outer multi-step loop
// ---------------------------------------------------------------------------

struct Beam {
    seq: TokenSeq,
    score: f64,
    emitted: usize,
    finished: bool,
}

/// Decode up to `max_new_tokens` past the prompt, maintaining up to W beams.
///
/// Each iteration builds one draft tree per unfinished beam, merges every
/// candidate node into a single priority queue (priorities are comparable
/// across trees because both modes are prefix-relative), runs the
/// verification step globally, and carries the top-W continuations forward.
/// Beams freeze once they emit EOS or exhaust the token budget; decoding
/// ends when every beam is frozen. Returns the beams sorted by the
/// configured rank plus an aggregated report.
pub fn decode<R: Rng + ?Sized>(
    p_model: &dyn LanguageModel,
    q_model: &dyn LanguageModel,
    prompt: &TokenSeq,
    cfg: &HvtConfig,
    rng: &mut R,
) -> Result<(Vec<ScoredSeq>, DecodeReport), EngineError> {
    let (beams, report, _) = decode_traced(p_model, q_model, prompt, cfg, rng)?;
    Ok((beams, report))
}

/// [`decode`], additionally returning the full step trace.
pub fn decode_traced<R: Rng + ?Sized>(
    p_model: &dyn LanguageModel,
    q_model: &dyn LanguageModel,
    prompt: &TokenSeq,
    cfg: &HvtConfig,
    rng: &mut R,
) -> Result<(Vec<ScoredSeq>, DecodeReport, Vec<TraceEvent>), EngineError> {
    if cfg.max_new_tokens == 0 {
        // Nothing to generate: the prompt comes back unchanged.
        let beams = vec![ScoredSeq {
            tokens: prompt.clone(),
            score: 0.0,
        }];
        return Ok((beams, DecodeReport::new("hvt", prompt.len()), Vec::new()));
    }
    cfg.validate()?;
    if p_model.vocab_size() != q_model.vocab_size() || p_model.eos() != q_model.eos() {
        return Err(EngineError::ModelMismatch(format!(
            "target has vocab {} / eos {}, draft has vocab {} / eos {}",
            p_model.vocab_size(),
            p_model.eos(),
            q_model.vocab_size(),
            q_model.eos()
        )));
    }
    if let Some(pos) = prompt.position(p_model.eos()) {
        return Err(EngineError::Model(ModelError::InvalidPrefix {
            position: pos,
        }));
    }
    if let Some(t) = prompt.iter().find(|t| t.index() >= p_model.vocab_size()) {
        return Err(EngineError::Model(ModelError::TokenOutOfRange {
            id: t.id(),
            vocab_size: p_model.vocab_size(),
        }));
    }

    let mut report = DecodeReport::new("hvt", prompt.len());
    let mut trace = Vec::new();
    let mut beams = vec![Beam {
        seq: prompt.clone(),
        score: 0.0,
        emitted: 0,
        finished: false,
    }];

    let mut step_no = 0u32;
    while beams.iter().any(|b| !b.finished) {
        let active: Vec<usize> = (0..beams.len()).filter(|&i| !beams[i].finished).collect();
        let width = cfg.w - (beams.len() - active.len());
        trace.push(TraceEvent::StepBegin {
            step: step_no,
            beams: active.len() as u32,
        });
        step_no += 1;

        let q_before = q_model.forward_count();
        let mut trees = Vec::with_capacity(active.len());
        let mut bases = Vec::with_capacity(active.len());
        for &bi in &active {
            let tree = build_draft_tree_with(
                q_model,
                &beams[bi].seq,
                cfg.gamma,
                cfg.k,
                cfg.node_cap,
                cfg.draft_policy,
                rng,
            )?;
            trace.push(TraceEvent::TreeDump {
                tree: (trees.len()) as u32,
                nodes: tree.dump(),
            });
            bases.push(BeamBase {
                score: beams[bi].score,
                emitted: beams[bi].emitted,
            });
            trees.push(tree);
        }
        debug_assert_eq!(
            q_model.forward_count() - q_before,
            trees.iter().map(|t| t.expanded_nodes()).sum::<u64>()
        );

        let outcome = run_step(&mut trees, &bases, width, p_model, cfg, rng, &mut trace)?;
        report.record_step(outcome.stats);

        // Materialize candidates, truncating to each source beam's budget.
        let mut candidates: Vec<Beam> = Vec::with_capacity(outcome.continuations.len());
        for c in &outcome.continuations {
            let src = &beams[active[c.beam]];
            let budget = cfg.max_new_tokens - src.emitted;
            let take = c.tokens.len().min(budget);
            debug_assert!(take >= 1, "continuations are non-empty within budget");
            let mut seq = src.seq.clone();
            let mut score = src.score;
            for i in 0..take {
                seq.push(c.tokens[i]);
                score += c.token_logps[i];
            }
            let emitted = src.emitted + take;
            let finished =
                c.tokens[take - 1] == p_model.eos() || emitted >= cfg.max_new_tokens;
            candidates.push(Beam {
                seq,
                score,
                emitted,
                finished,
            });
        }
        // Frozen beams keep their slots; candidates fill the rest.
        let mut next: Vec<Beam> = beams.into_iter().filter(|b| b.finished).collect();
        next.extend(candidates);
        beams = next;
    }

    report.tokens_emitted = beams.iter().map(|b| b.emitted as u64).sum();
    report.p_forward = report.steps.iter().map(|s| s.p_forward).sum();
    report.q_forward = report.steps.iter().map(|s| s.q_forward).sum();
    report.beams_returned = beams.len();

    let rank = |b: &Beam| -> f64 {
        match cfg.frontier_rank {
            FrontierRank::CumLogprob => b.score,
            FrontierRank::LengthNormalized => {
                if b.emitted == 0 {
                    b.score
                } else {
                    b.score / b.emitted as f64
                }
            }
        }
    };
    beams.sort_by(|a, b| rank(b).total_cmp(&rank(a)).then(a.seq.cmp(&b.seq)));
    let out = beams
        .into_iter()
        .map(|b| ScoredSeq {
            tokens: b.seq,
            score: b.score,
        })
        .collect();
    Ok((out, report, trace))
}
