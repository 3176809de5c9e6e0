//! Speculative draft trees: prefix tries of continuations proposed by the
//! draft model, with per-node cumulative scores and verification status.
//!
//! A tree is rooted at the current beam prefix. Every non-root node carries
//! one token; the path from the root to a node spells a candidate
//! continuation. Nodes store the draft model's per-step and cumulative
//! log-probabilities at construction time; the target model's cumulative
//! log-probability is filled in lazily during verification.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LanguageModel, ModelError, Token, TokenSeq};

/// Exponent clamp for the perplexity priority so it never overflows to
/// `-inf` when a path hits the log-probability floor.
const PERPLEXITY_EXP_CLAMP: f64 = 700.0;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("priority is undefined for the root node")]
    UndefinedPriority,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Index of a node within one tree; the root is always index 0 and parents
/// precede children.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Verification status of a draft node.
///
/// Non-root nodes start `Pending` and move to exactly one of the other
/// states during a verification step. The root is `Accepted` from the start:
/// it stands for the already-committed prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Pending,
    Accepted,
    Rejected,
    Pruned,
    Unvisited,
}

/// How queue priorities are derived from a node's draft score `s(v)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PriorityMode {
    /// `π(v) = s(v)`: cumulative draft log-likelihood.
    #[default]
    LogLikelihood,
    /// `π(v) = -exp(-s(v)/depth(v))`: negative per-token perplexity, which
    /// ranks nodes by geometric-mean step probability instead of raw mass.
    NegPerplexity,
}

/// How the draft tokens at each expanded node are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DraftPolicy {
    /// Deterministic: the k most probable tokens, ties broken by ascending
    /// token id.
    #[default]
    TopK,
    /// Stochastic: k distinct tokens drawn without replacement by repeated
    /// inverse-CDF sampling with renormalization.
    Sampled,
}

#[derive(Debug, Clone)]
pub struct DraftNode {
    /// Token on the edge from the parent; `None` only for the root.
    pub token: Option<Token>,
    pub parent: Option<NodeId>,
    pub depth: u32,
    /// `ln q(token | path prefix)` for this edge; 0 for the root.
    pub q_logp_step: f64,
    /// Cumulative draft log-likelihood `s(v)` along the root path.
    pub q_logp_cum: f64,
    /// Cumulative target log-likelihood, filled lazily during verification.
    pub p_logp_cum: Option<f64>,
    pub status: NodeStatus,
}

/// One serialized node row for the debug dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDump {
    pub id: u32,
    pub parent: Option<u32>,
    pub token: Option<u32>,
    pub depth: u32,
    pub q_logp_cum: f64,
    pub status: NodeStatus,
}

/// The speculative prefix trie for one beam.
pub struct DraftTree {
    root_prefix: TokenSeq,
    nodes: Vec<DraftNode>,
    children: Vec<Vec<NodeId>>,
    gamma: usize,
    k: usize,
    truncated: bool,
    /// Number of nodes that received children during construction; equals the
    /// draft model forward passes spent on this tree.
    expanded_nodes: u64,
}

impl DraftTree {
    pub fn root_prefix(&self) -> &TokenSeq {
        &self.root_prefix
    }

    /// Total node count including the root.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Candidate node count (everything but the root).
    pub fn non_root_count(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn gamma(&self) -> usize {
        self.gamma
    }

    pub fn branching(&self) -> usize {
        self.k
    }

    /// True when expansion stopped early because of the node cap.
    pub fn truncated(&self) -> bool {
        self.truncated
    }

    pub fn expanded_nodes(&self) -> u64 {
        self.expanded_nodes
    }

    pub fn node(&self, v: NodeId) -> &DraftNode {
        &self.nodes[v.index()]
    }

    pub(crate) fn node_mut(&mut self, v: NodeId) -> &mut DraftNode {
        &mut self.nodes[v.index()]
    }

    pub fn children(&self, v: NodeId) -> &[NodeId] {
        &self.children[v.index()]
    }

    pub fn is_leaf(&self, v: NodeId) -> bool {
        self.children[v.index()].is_empty()
    }

    pub fn status(&self, v: NodeId) -> NodeStatus {
        self.nodes[v.index()].status
    }

    pub(crate) fn set_status(&mut self, v: NodeId, status: NodeStatus) {
        self.nodes[v.index()].status = status;
    }

    /// All node ids except the root, in creation (breadth-first) order.
    pub fn non_root_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (1..self.nodes.len() as u32).map(NodeId)
    }

    /// Leaf node ids in ascending id order.
    pub fn leaves(&self) -> Vec<NodeId> {
        (0..self.nodes.len() as u32)
            .map(NodeId)
            .filter(|&v| self.is_leaf(v) && v != NodeId::ROOT)
            .collect()
    }

    /// Tokens along the root→v path; empty for the root.
    pub fn path_tokens(&self, v: NodeId) -> TokenSeq {
        let mut rev = Vec::new();
        let mut cur = v;
        while let Some(parent) = self.nodes[cur.index()].parent {
            rev.push(self.nodes[cur.index()].token.expect("non-root node has a token"));
            cur = parent;
        }
        rev.reverse();
        TokenSeq::from(rev)
    }

    /// Strict descendants of `v` (excludes `v` itself).
    pub fn descendants(&self, v: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack: Vec<NodeId> = self.children(v).to_vec();
        while let Some(u) = stack.pop() {
            out.push(u);
            stack.extend_from_slice(self.children(u));
        }
        out.sort();
        out
    }

    /// Ancestor chain of `v` from the root's child down to `v`'s parent
    /// (excludes the root and `v`).
    pub fn ancestors_root_first(&self, v: NodeId) -> Vec<NodeId> {
        let mut rev = Vec::new();
        let mut cur = self.nodes[v.index()].parent;
        while let Some(u) = cur {
            if u == NodeId::ROOT {
                break;
            }
            rev.push(u);
            cur = self.nodes[u.index()].parent;
        }
        rev.reverse();
        rev
    }

    /// `l(v) = exp(s(v))`: the draft likelihood of the node's path.
    pub fn likelihood(&self, v: NodeId) -> f64 {
        self.nodes[v.index()].q_logp_cum.exp()
    }

    /// Queue priority of a non-root node under the given mode.
    pub fn priority(&self, v: NodeId, mode: PriorityMode) -> Result<f64, TreeError> {
        if v == NodeId::ROOT {
            return Err(TreeError::UndefinedPriority);
        }
        let node = &self.nodes[v.index()];
        Ok(match mode {
            PriorityMode::LogLikelihood => node.q_logp_cum,
            PriorityMode::NegPerplexity => {
                let exponent = (-node.q_logp_cum / node.depth as f64).min(PERPLEXITY_EXP_CLAMP);
                -exponent.exp()
            }
        })
    }

    /// Serializable rows for the `--dump-tree` debug output.
    pub fn dump(&self) -> Vec<NodeDump> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| NodeDump {
                id: i as u32,
                parent: n.parent.map(|p| p.0),
                token: n.token.map(|t| t.0),
                depth: n.depth,
                q_logp_cum: n.q_logp_cum,
                status: n.status,
            })
            .collect()
    }
}

/// Build the draft tree by deterministic top-k expansion (see
/// [`build_draft_tree_with`] for the stochastic policy).
pub fn build_draft_tree(
    q_model: &dyn LanguageModel,
    prefix: &TokenSeq,
    gamma: usize,
    k: usize,
    node_cap: usize,
) -> Result<DraftTree, TreeError> {
    // The deterministic policy consumes no randomness; any rng would do.
    let mut unused = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    build_draft_tree_with(
        q_model,
        prefix,
        gamma,
        k,
        node_cap,
        DraftPolicy::TopK,
        &mut unused,
    )
}

/// Build the draft tree for `prefix` by expanding every node above depth
/// `gamma` with `k` child tokens chosen per `policy`.
///
/// Expansion proceeds breadth-first. EOS nodes become leaves regardless of
/// remaining depth, and expansion halts (with the truncation flag set) as
/// soon as adding another node's children would exceed `node_cap` non-root
/// nodes. The draft model pays one counted forward pass per expanded node.
pub fn build_draft_tree_with<R: rand::Rng + ?Sized>(
    q_model: &dyn LanguageModel,
    prefix: &TokenSeq,
    gamma: usize,
    k: usize,
    node_cap: usize,
    policy: DraftPolicy,
    rng: &mut R,
) -> Result<DraftTree, TreeError> {
    assert!(gamma >= 1, "gamma must be at least 1");
    assert!(k >= 1, "k must be at least 1");
    assert!(
        k <= q_model.vocab_size(),
        "k must not exceed the vocabulary size"
    );
    assert!(node_cap >= k, "node_cap must be at least k");

    let mut tree = DraftTree {
        root_prefix: prefix.clone(),
        nodes: vec![DraftNode {
            token: None,
            parent: None,
            depth: 0,
            q_logp_step: 0.0,
            q_logp_cum: 0.0,
            p_logp_cum: Some(0.0),
            status: NodeStatus::Accepted,
        }],
        children: vec![Vec::new()],
        gamma,
        k,
        truncated: false,
        expanded_nodes: 0,
    };

    let mut frontier = std::collections::VecDeque::from([NodeId::ROOT]);
    while let Some(v) = frontier.pop_front() {
        let node = &tree.nodes[v.index()];
        if node.depth as usize >= gamma {
            continue;
        }
        if node.token == Some(q_model.eos()) {
            continue; // nothing continues past EOS
        }
        if tree.non_root_count() + k > node_cap {
            tree.truncated = true;
            break;
        }
        let ctx = prefix.concat(&tree.path_tokens(v));
        let dist = q_model.next_distribution(&ctx)?;
        tree.expanded_nodes += 1;
        let tokens = match policy {
            DraftPolicy::TopK => dist.top_k(k),
            DraftPolicy::Sampled => sample_distinct(&dist, k, rng),
        };
        let parent_depth = tree.nodes[v.index()].depth;
        let parent_cum = tree.nodes[v.index()].q_logp_cum;
        for t in tokens {
            let step = dist.log_prob(t);
            let id = NodeId(tree.nodes.len() as u32);
            tree.nodes.push(DraftNode {
                token: Some(t),
                parent: Some(v),
                depth: parent_depth + 1,
                q_logp_step: step,
                q_logp_cum: parent_cum + step,
                p_logp_cum: None,
                status: NodeStatus::Pending,
            });
            tree.children.push(Vec::new());
            tree.children[v.index()].push(id);
            frontier.push_back(id);
        }
    }
    Ok(tree)
}

/// Up to `k` distinct tokens drawn without replacement: repeated inverse-CDF
/// draws over the remaining support, renormalized after each removal. Stops
/// early if the positive support is exhausted.
fn sample_distinct<R: rand::Rng + ?Sized>(
    dist: &crate::model::Distribution,
    k: usize,
    rng: &mut R,
) -> Vec<Token> {
    let mut remaining: Vec<f64> = dist.probs().to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mass: f64 = remaining.iter().sum();
        if mass <= 0.0 {
            break;
        }
        let target = rng.random::<f64>() * mass;
        let mut cum = 0.0;
        let mut chosen = None;
        let mut last_positive = None;
        for (i, &p) in remaining.iter().enumerate() {
            if p > 0.0 {
                last_positive = Some(i);
            }
            cum += p;
            if p > 0.0 && target < cum {
                chosen = Some(i);
                break;
            }
        }
        let i = chosen.or(last_positive).expect("positive mass remains");
        out.push(Token(i as u32));
        remaining[i] = 0.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Distribution, LanguageModel, SoftmaxModel, TableModel};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn order0(probs: Vec<f64>) -> TableModel {
        let v = probs.len();
        TableModel::new(v, Token((v - 1) as u32), 0, Distribution::new(probs).unwrap()).unwrap()
    }

    /// Independent recursive enumerator: returns path-tokens -> cumulative
    /// draft log-probability for every node a top-k expansion must create.
    /// Deliberately reimplements top-k by direct sorting and builds depth
    /// first, unlike the breadth-first production code.
    fn brute_force_scores(
        q: &dyn LanguageModel,
        prefix: &TokenSeq,
        gamma: usize,
        k: usize,
    ) -> BTreeMap<Vec<u32>, f64> {
        #[allow(clippy::too_many_arguments)]
        fn rec(
            q: &dyn LanguageModel,
            ctx: &TokenSeq,
            path: &[u32],
            depth: usize,
            gamma: usize,
            k: usize,
            s: f64,
            out: &mut BTreeMap<Vec<u32>, f64>,
        ) {
            if depth == gamma {
                return;
            }
            if path.last() == Some(&q.eos().id()) {
                return;
            }
            let dist = q.conditional(ctx);
            let mut idx: Vec<usize> = (0..q.vocab_size()).collect();
            idx.sort_by(|&a, &b| {
                dist.probs()[b]
                    .partial_cmp(&dist.probs()[a])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            for &i in idx.iter().take(k) {
                let p = dist.probs()[i];
                let lp = if p <= 0.0 { crate::model::LOG_PROB_FLOOR } else { p.ln() };
                let mut path2 = path.to_vec();
                path2.push(i as u32);
                out.insert(path2.clone(), s + lp);
                rec(
                    q,
                    &ctx.extended(Token(i as u32)),
                    &path2,
                    depth + 1,
                    gamma,
                    k,
                    s + lp,
                    out,
                );
            }
        }
        let mut out = BTreeMap::new();
        rec(q, prefix, &[], 0, gamma, k, 0.0, &mut out);
        out
    }

    #[test]
    fn full_expansion_node_count() {
        // vocab ends with EOS at id 3, which never ranks in the top 2.
        let m = order0(vec![0.5, 0.3, 0.2, 0.0]);
        let tree = build_draft_tree(&m, &TokenSeq::new(), 3, 2, 10_000).unwrap();
        assert_eq!(tree.non_root_count(), 2 + 4 + 8);
        assert!(!tree.truncated());
    }

    #[test]
    fn order0_children_are_top2_with_logs() {
        let m = order0(vec![0.5, 0.3, 0.2, 0.0]);
        let tree = build_draft_tree(&m, &TokenSeq::new(), 2, 2, 10_000).unwrap();
        for v in std::iter::once(NodeId::ROOT).chain(tree.non_root_ids()) {
            if tree.is_leaf(v) {
                continue;
            }
            let kids = tree.children(v);
            let tokens: Vec<u32> = kids.iter().map(|&c| tree.node(c).token.unwrap().id()).collect();
            assert_eq!(tokens, vec![0, 1]);
            assert!((tree.node(kids[0]).q_logp_step - 0.5f64.ln()).abs() < 1e-12);
            assert!((tree.node(kids[1]).q_logp_step - 0.3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn tie_break_is_ascending_token_id() {
        let m = order0(vec![0.25, 0.25, 0.25, 0.25]);
        let tree = build_draft_tree(&m, &TokenSeq::new(), 1, 3, 10).unwrap();
        let tokens: Vec<u32> = tree
            .children(NodeId::ROOT)
            .iter()
            .map(|&c| tree.node(c).token.unwrap().id())
            .collect();
        assert_eq!(tokens, vec![0, 1, 2]);
    }

    #[test]
    fn matches_brute_force_enumerator_on_seeded_model() {
        let m = SoftmaxModel::new(7, Token(6), 1234, 4, 0.9);
        let prefix = TokenSeq::from_ids(&[2, 5]);
        let tree = build_draft_tree(&m, &prefix, 2, 3, 10_000).unwrap();
        let expected = brute_force_scores(&m, &prefix, 2, 3);
        assert_eq!(tree.non_root_count(), expected.len());
        for v in tree.non_root_ids() {
            let path = tree.path_tokens(v).ids();
            let want = expected
                .get(&path)
                .unwrap_or_else(|| panic!("unexpected node for path {path:?}"));
            let got = tree.node(v).q_logp_cum;
            assert!((got - want).abs() < 1e-9, "path {path:?}: {got} vs {want}");
        }
    }

    #[test]
    fn likelihood_is_exp_of_score() {
        let m = order0(vec![0.5, 0.25, 0.25, 0.0]);
        let tree = build_draft_tree(&m, &TokenSeq::new(), 2, 2, 100).unwrap();
        assert_eq!(tree.likelihood(NodeId::ROOT), 1.0);
        // Path [0, 1] has probability 0.5 * 0.25 = 0.125.
        let v = tree
            .non_root_ids()
            .find(|&v| tree.path_tokens(v).ids() == vec![0, 1])
            .unwrap();
        assert!((tree.node(v).q_logp_cum - (-2.0794415416798357)).abs() < 1e-9);
        assert!((tree.likelihood(v) - 0.125).abs() < 1e-9);
    }

    #[test]
    fn likelihood_matches_path_product() {
        let m = SoftmaxModel::new(5, Token(4), 77, 3, 1.0);
        let tree = build_draft_tree(&m, &TokenSeq::new(), 3, 2, 10_000).unwrap();
        for v in tree.non_root_ids() {
            // Product of the per-step exponentials, accumulated independently
            // over the stored parent chain.
            let mut prod = 1.0;
            let mut cur = v;
            while let Some(parent) = tree.node(cur).parent {
                prod *= tree.node(cur).q_logp_step.exp();
                cur = parent;
            }
            assert!((tree.likelihood(v) - prod).abs() < 1e-9);
        }
    }

    #[test]
    fn priority_worked_values() {
        let m = order0(vec![0.5, 0.25, 0.25, 0.0]);
        let tree = build_draft_tree(&m, &TokenSeq::new(), 2, 2, 100).unwrap();
        let v = tree
            .non_root_ids()
            .find(|&v| tree.path_tokens(v).ids() == vec![0, 1])
            .unwrap();
        // s = ln(0.125), depth 2: -exp(-s/2) = -sqrt(8).
        let neg_ppl = tree.priority(v, PriorityMode::NegPerplexity).unwrap();
        assert!((neg_ppl - (-2.8284271247461903)).abs() < 1e-6, "got {neg_ppl}");
        let ll = tree.priority(v, PriorityMode::LogLikelihood).unwrap();
        assert_eq!(ll, tree.node(v).q_logp_cum);
    }

    #[test]
    fn priority_of_certain_path_is_minus_one() {
        let m = order0(vec![1.0, 0.0]);
        let tree = build_draft_tree(&m, &TokenSeq::new(), 3, 1, 100).unwrap();
        for v in tree.non_root_ids() {
            let p = tree.priority(v, PriorityMode::NegPerplexity).unwrap();
            assert!((p - (-1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn priority_undefined_for_root() {
        let m = order0(vec![0.5, 0.5]);
        let tree = build_draft_tree(&m, &TokenSeq::new(), 1, 1, 10).unwrap();
        assert!(matches!(
            tree.priority(NodeId::ROOT, PriorityMode::LogLikelihood),
            Err(TreeError::UndefinedPriority)
        ));
    }

    #[test]
    fn descendants_of_leaf_and_root() {
        let m = order0(vec![0.4, 0.3, 0.2, 0.1, 0.0]);
        let tree = build_draft_tree(&m, &TokenSeq::new(), 2, 2, 100).unwrap();
        // k=2, gamma=2: root has all 6 non-root nodes below it.
        assert_eq!(tree.descendants(NodeId::ROOT).len(), 6);
        for v in tree.leaves() {
            assert!(tree.descendants(v).is_empty());
        }
    }

    #[test]
    fn descendants_match_ancestor_walk() {
        let m = SoftmaxModel::new(6, Token(5), 99, 3, 1.0);
        let tree = build_draft_tree(&m, &TokenSeq::new(), 3, 2, 10_000).unwrap();
        for v in tree.non_root_ids() {
            // Second traversal: u is a descendant of v iff v appears on u's
            // parent chain.
            let mut expected: Vec<NodeId> = tree
                .non_root_ids()
                .filter(|&u| {
                    let mut cur = tree.node(u).parent;
                    while let Some(a) = cur {
                        if a == v {
                            return true;
                        }
                        cur = tree.node(a).parent;
                    }
                    false
                })
                .collect();
            expected.sort();
            assert_eq!(tree.descendants(v), expected);
        }
    }

    #[test]
    fn path_tokens_walks_parent_chain() {
        let m = order0(vec![0.5, 0.3, 0.2, 0.0]);
        let tree = build_draft_tree(&m, &TokenSeq::from_ids(&[2]), 3, 2, 10_000).unwrap();
        assert!(tree.path_tokens(NodeId::ROOT).is_empty());
        for v in tree.non_root_ids() {
            let path = tree.path_tokens(v);
            assert_eq!(path.len() as u32, tree.node(v).depth);
            // Independent check against the parent chain.
            let mut cur = v;
            let mut rev = Vec::new();
            while let Some(parent) = tree.node(cur).parent {
                rev.push(tree.node(cur).token.unwrap());
                cur = parent;
            }
            rev.reverse();
            assert_eq!(path.as_slice(), rev.as_slice());
        }
    }

    #[test]
    fn eos_nodes_become_leaves() {
        // EOS (token 1) is always in the top 2, so every branch dies at it.
        let m = order0(vec![0.6, 0.4]);
        let tree = build_draft_tree(&m, &TokenSeq::new(), 3, 2, 10_000).unwrap();
        for v in tree.non_root_ids() {
            if tree.node(v).token == Some(Token(1)) {
                assert!(tree.is_leaf(v), "EOS node {v:?} must be a leaf");
            }
        }
        // Depth-3 binary tree minus the EOS-terminated branches:
        // level 1: {0, eos}; only 0 expands; level 2: {00, 0eos}; level 3: {000, 00eos}.
        assert_eq!(tree.non_root_count(), 6);
    }

    #[test]
    fn node_cap_truncates_breadth_first() {
        let m = order0(vec![0.5, 0.3, 0.2, 0.0]);
        let tree = build_draft_tree(&m, &TokenSeq::new(), 3, 2, 5).unwrap();
        assert!(tree.truncated());
        assert!(tree.non_root_count() <= 5);
        // Breadth-first: the whole first level exists before truncation.
        assert_eq!(tree.children(NodeId::ROOT).len(), 2);
    }

    #[test]
    fn forward_count_equals_expanded_nodes() {
        let m = SoftmaxModel::new(6, Token(5), 4, 3, 1.0);
        let before = m.forward_count();
        let tree = build_draft_tree(&m, &TokenSeq::new(), 3, 2, 10_000).unwrap();
        let expanded = tree.non_root_ids().filter(|&v| !tree.is_leaf(v)).count() as u64 + 1;
        assert_eq!(m.forward_count() - before, expanded);
        assert_eq!(tree.expanded_nodes(), expanded);
    }

    #[test]
    fn structural_bounds_hold() {
        let m = SoftmaxModel::new(6, Token(5), 21, 3, 1.0);
        for (gamma, k, cap) in [(2usize, 3usize, 1000usize), (3, 2, 9), (4, 2, 1000)] {
            let tree = build_draft_tree(&m, &TokenSeq::new(), gamma, k, cap).unwrap();
            let geometric: usize = (1..=gamma).map(|j| k.pow(j as u32)).sum();
            assert!(tree.node_count() <= geometric + 1);
            assert!(tree.node_count() <= cap + 1);
        }
    }

    #[test]
    fn sampled_policy_draws_distinct_children_deterministically() {
        use rand::SeedableRng;
        let m = order0(vec![0.4, 0.3, 0.2, 0.1, 0.0]);
        let mut rng1 = ChaCha8Rng::seed_from_u64(11);
        let t1 = build_draft_tree_with(
            &m, &TokenSeq::new(), 2, 3, 1000, DraftPolicy::Sampled, &mut rng1,
        )
        .unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(11);
        let t2 = build_draft_tree_with(
            &m, &TokenSeq::new(), 2, 3, 1000, DraftPolicy::Sampled, &mut rng2,
        )
        .unwrap();
        assert_eq!(t1.non_root_count(), t2.non_root_count());
        for v in t1.non_root_ids() {
            assert_eq!(t1.node(v).token, t2.node(v).token);
            assert_eq!(t1.node(v).q_logp_cum, t2.node(v).q_logp_cum);
        }
        for v in std::iter::once(NodeId::ROOT).chain(t1.non_root_ids()) {
            let mut tokens: Vec<u32> =
                t1.children(v).iter().map(|&c| t1.node(c).token.unwrap().id()).collect();
            let n = tokens.len();
            tokens.dedup();
            assert_eq!(tokens.len(), n, "children must be distinct");
        }
    }

    #[test]
    fn top_k_pads_with_zero_probability_tokens_at_the_floor() {
        // k exceeds the draft support: ranking still yields exactly k
        // children, with impossible tokens carrying the log floor.
        let m = order0(vec![0.6, 0.4, 0.0, 0.0]);
        let tree = build_draft_tree(&m, &TokenSeq::new(), 1, 3, 10).unwrap();
        let kids = tree.children(NodeId::ROOT);
        assert_eq!(kids.len(), 3);
        let tokens: Vec<u32> = kids.iter().map(|&c| tree.node(c).token.unwrap().id()).collect();
        assert_eq!(tokens, vec![0, 1, 2]);
        assert_eq!(
            tree.node(kids[2]).q_logp_step,
            crate::model::LOG_PROB_FLOOR
        );
    }

    #[test]
    fn dump_rows_cover_every_node() {
        let m = order0(vec![0.5, 0.3, 0.2, 0.0]);
        let tree = build_draft_tree(&m, &TokenSeq::new(), 2, 2, 100).unwrap();
        let dump = tree.dump();
        assert_eq!(dump.len(), tree.node_count());
        assert_eq!(dump[0].parent, None);
        for (i, row) in dump.iter().enumerate() {
            assert_eq!(row.id as usize, i);
        }
    }
}
