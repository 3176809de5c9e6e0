//! Line-oriented step trace for debugging and for trace-equivalence tests.

use serde::Serialize;

use crate::tree::{NodeDump, NodeStatus};

/// One event in the verification step trace. Serialized as one JSON object
/// per line by the CLI's `--trace` flag; `TreeDump` events double as the
/// `--dump-tree` output.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    StepBegin {
        step: u32,
        beams: u32,
    },
    TreeDump {
        tree: u32,
        nodes: Vec<NodeDump>,
    },
    Pop {
        tree: u32,
        node: u32,
        priority: f64,
    },
    Verify {
        tree: u32,
        node: u32,
        /// The uniform draw consumed by the acceptance test; absent in
        /// threshold mode.
        u: Option<f64>,
        log_ratio: f64,
        status: NodeStatus,
    },
    Prune {
        tree: u32,
        node: u32,
        pruned: u64,
    },
    EarlyStop {
        frontier: u64,
    },
    MarkUnvisited {
        count: u64,
    },
    FrontierPick {
        tree: u32,
        node: u32,
        score: f64,
    },
    ResidualLeaf {
        tree: u32,
        node: u32,
    },
    ResidualFresh {
        tree: u32,
        tokens: Vec<u32>,
    },
}
