//! Max-priority queue ordering draft nodes for verification.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use crate::tree::NodeId;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    priority: f64,
    tree: usize,
    node: NodeId,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Max-heap on priority; on ties the lower (tree, node) pair wins,
        // so it must compare as the larger entry.
        self.priority
            .total_cmp(&other.priority)
            .then_with(|| other.tree.cmp(&self.tree))
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// An entry returned by [`VerificationQueue::pop`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueItem {
    pub priority: f64,
    pub tree: usize,
    pub node: NodeId,
}

/// Max-priority queue over pending draft nodes, keyed by priority with a
/// deterministic tie-break (lower node id wins; across merged trees, lower
/// tree index first). Removal is lazy: pruned entries stay in the heap but
/// are never returned by `pop`. Pruning an entry that was already popped is
/// a no-op.
#[derive(Debug, Default)]
pub struct VerificationQueue {
    heap: BinaryHeap<Entry>,
    /// Keys of entries currently sitting in the heap.
    present: HashSet<(usize, NodeId)>,
    /// Present entries that pruning has invalidated.
    removed: HashSet<(usize, NodeId)>,
    live: usize,
}

impl VerificationQueue {
    pub fn new() -> Self {
        VerificationQueue::default()
    }

    /// Push a node of a single-tree queue (tree index 0).
    pub fn push(&mut self, priority: f64, node: NodeId) {
        self.push_in_tree(0, priority, node);
    }

    /// Push a node belonging to tree `tree` in a merged multi-tree queue.
    pub fn push_in_tree(&mut self, tree: usize, priority: f64, node: NodeId) {
        assert!(priority.is_finite(), "queue priorities must be finite");
        self.heap.push(Entry {
            priority,
            tree,
            node,
        });
        self.present.insert((tree, node));
        self.live += 1;
    }

    /// Pop the highest-priority live entry; pruned nodes are never returned.
    pub fn pop(&mut self) -> Option<QueueItem> {
        while let Some(entry) = self.heap.pop() {
            let key = (entry.tree, entry.node);
            self.present.remove(&key);
            if self.removed.remove(&key) {
                continue;
            }
            self.live -= 1;
            return Some(QueueItem {
                priority: entry.priority,
                tree: entry.tree,
                node: entry.node,
            });
        }
        None
    }

    /// Mark a single-tree entry as pruned.
    pub fn prune(&mut self, node: NodeId) {
        self.prune_in_tree(0, node);
    }

    /// Mark a merged-queue entry as pruned.
    pub fn prune_in_tree(&mut self, tree: usize, node: NodeId) {
        let key = (tree, node);
        if self.present.contains(&key) && self.removed.insert(key) {
            self.live -= 1;
        }
    }

    /// Number of live (non-pruned) entries.
    pub fn len(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }
}
