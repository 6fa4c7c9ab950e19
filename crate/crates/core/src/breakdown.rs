//! Module/operation hierarchy recovered from stack traces.
//!
//! Every operation stack starts at the frame where the model is invoked. The
//! longest prefix shared by all operations collapses into the root; below it
//! each distinct frame becomes a module node and every operation becomes a
//! leaf named after the operation and keyed by its innermost frame.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{OperationMeasurement, StackFrame, WeightMeasurement};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Module,
    Operation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortKey {
    #[default]
    RunTime,
    Memory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BreakdownNode {
    pub kind: NodeKind,
    pub display_name: String,
    pub frame: StackFrame,
    pub run_time_ms: f64,
    pub weight_bytes: u64,
    pub activation_bytes: u64,
    pub children: Vec<BreakdownNode>,
    pub leaf_count: usize,
    operation: Option<usize>,
    own_weights: Vec<usize>,
}

impl BreakdownNode {
    pub fn memory_bytes(&self) -> u64 {
        self.weight_bytes + self.activation_bytes
    }

    pub fn is_leaf(&self) -> bool {
        self.kind == NodeKind::Operation
    }

    /// Index of the measured operation behind a leaf.
    pub fn operation_index(&self) -> Option<usize> {
        self.operation
    }

    /// Weights attached directly to this node (not to descendants).
    pub fn attached_weights(&self) -> &[usize] {
        &self.own_weights
    }

    fn visit_leaves<'a>(&'a self, f: &mut impl FnMut(&'a BreakdownNode)) {
        if self.children.is_empty() {
            f(self);
        }
        for child in &self.children {
            child.visit_leaves(f);
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a BreakdownNode)) {
        f(self);
        for child in &self.children {
            child.visit(f);
        }
    }

    /// Leaves in depth-first order.
    pub fn leaves(&self) -> Vec<&BreakdownNode> {
        let mut out = Vec::new();
        self.visit_leaves(&mut |n| out.push(n));
        out
    }
}

/// Ordering used for children: descending by key, then by name.
pub fn compare_nodes(a: &BreakdownNode, b: &BreakdownNode, key: SortKey) -> std::cmp::Ordering {
    let primary = match key {
        SortKey::RunTime => b.run_time_ms.total_cmp(&a.run_time_ms),
        SortKey::Memory => b.memory_bytes().cmp(&a.memory_bytes()),
    };
    primary
        .then_with(|| a.display_name.cmp(&b.display_name))
        .then_with(|| a.kind.cmp_rank().cmp(&b.kind.cmp_rank()))
}

impl NodeKind {
    fn cmp_rank(self) -> u8 {
        match self {
            NodeKind::Module => 0,
            NodeKind::Operation => 1,
        }
    }
}

/// Child indices from the root, in the tree's stored (run time) order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodePath(pub Vec<usize>);

impl NodePath {
    pub fn root() -> Self {
        NodePath(Vec::new())
    }

    pub fn child(&self, index: usize) -> Self {
        let mut path = self.0.clone();
        path.push(index);
        NodePath(path)
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for NodePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "/")?;
        for (i, idx) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "/")?;
            }
            write!(f, "{idx}")?;
        }
        Ok(())
    }
}

/// Per-line totals for the code view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InlineMarker {
    pub frame: StackFrame,
    pub run_time_ms: f64,
    pub weight_bytes: u64,
    pub activation_bytes: u64,
    pub scoped: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BreakdownError {
    #[error("no operations to build a breakdown from")]
    NoOperations,
    #[error("operation `{0}` has an empty stack")]
    EmptyStack(String),
    #[error("operations do not share an outermost frame ({0} and {1})")]
    NoCommonRoot(StackFrame, StackFrame),
    #[error("path {0} does not address a node")]
    InvalidPath(NodePath),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BreakdownTree {
    pub root: BreakdownNode,
    /// Stack prefix collapsed into the root.
    pub root_prefix: Vec<StackFrame>,
    pub operations: Vec<OperationMeasurement>,
    pub weights: Vec<WeightMeasurement>,
}

struct ArenaNode {
    frame: StackFrame,
    children: Vec<usize>,
    operation: Option<usize>,
    weights: Vec<usize>,
}

fn common_prefix_len(stacks: &[&[StackFrame]]) -> usize {
    let first = stacks[0];
    let mut len = first.len();
    for stack in &stacks[1..] {
        len = len.min(stack.len());
        len = first[..len]
            .iter()
            .zip(stack.iter())
            .take_while(|(a, b)| a == b)
            .count();
    }
    len
}

/// Appends " (k)" to the k-th sibling carrying an already-used name.
fn disambiguate(names: &mut [String]) {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for name in names.iter() {
        *counts.entry(name.clone()).or_default() += 1;
    }
    let mut seen: HashMap<String, usize> = HashMap::new();
    for name in names.iter_mut() {
        if counts[name.as_str()] > 1 {
            let k = seen.entry(name.clone()).or_default();
            *k += 1;
            if *k > 1 {
                *name = format!("{name} ({k})");
            }
        }
    }
}

impl BreakdownTree {
    /// Assembles the hierarchy from per-operation and per-weight stacks.
    pub fn build(
        operations: &[OperationMeasurement],
        weights: &[WeightMeasurement],
    ) -> Result<BreakdownTree, BreakdownError> {
        if operations.is_empty() {
            return Err(BreakdownError::NoOperations);
        }
        if let Some(op) = operations.iter().find(|op| op.stack.is_empty()) {
            return Err(BreakdownError::EmptyStack(op.name.clone()));
        }
        let outer = &operations[0].stack[0];
        if let Some(op) = operations.iter().find(|op| &op.stack[0] != outer) {
            return Err(BreakdownError::NoCommonRoot(outer.clone(), op.stack[0].clone()));
        }

        // Every leaf keeps at least its own innermost frame.
        let stacks: Vec<&[StackFrame]> = operations.iter().map(|op| op.stack.as_slice()).collect();
        let shortest = stacks.iter().map(|s| s.len()).min().unwrap_or(1);
        let prefix_len = common_prefix_len(&stacks).min(shortest - 1).max(1);
        let root_prefix = operations[0].stack[..prefix_len].to_vec();

        let mut arena = vec![ArenaNode {
            frame: root_prefix[prefix_len - 1].clone(),
            children: Vec::new(),
            operation: None,
            weights: Vec::new(),
        }];
        let mut modules: HashMap<(usize, &StackFrame), usize> = HashMap::new();

        for (op_idx, op) in operations.iter().enumerate() {
            let mut node = 0;
            let inner = op.stack.len().saturating_sub(1).max(prefix_len);
            for frame in &op.stack[prefix_len..inner] {
                node = match modules.get(&(node, frame)) {
                    Some(&child) => child,
                    None => {
                        let child = arena.len();
                        arena.push(ArenaNode {
                            frame: frame.clone(),
                            children: Vec::new(),
                            operation: None,
                            weights: Vec::new(),
                        });
                        arena[node].children.push(child);
                        modules.insert((node, frame), child);
                        child
                    }
                };
            }
            let leaf = arena.len();
            arena.push(ArenaNode {
                frame: op.stack.last().unwrap().clone(),
                children: Vec::new(),
                operation: Some(op_idx),
                weights: Vec::new(),
            });
            arena[node].children.push(leaf);
        }

        for (w_idx, weight) in weights.iter().enumerate() {
            let mut node = 0;
            if weight.stack.len() >= prefix_len && weight.stack[..prefix_len] == root_prefix[..] {
                for frame in &weight.stack[prefix_len..] {
                    match modules.get(&(node, frame)) {
                        Some(&child) => node = child,
                        None => break,
                    }
                }
            }
            arena[node].weights.push(w_idx);
        }

        let root = finalize(&arena, 0, operations, weights, None);
        Ok(BreakdownTree {
            root,
            root_prefix,
            operations: operations.to_vec(),
            weights: weights.to_vec(),
        })
    }

    pub fn node(&self, path: &NodePath) -> Result<&BreakdownNode, BreakdownError> {
        let mut node = &self.root;
        for &idx in &path.0 {
            node = node
                .children
                .get(idx)
                .ok_or_else(|| BreakdownError::InvalidPath(path.clone()))?;
        }
        Ok(node)
    }

    /// Children of the addressed node, sorted descending by `key`.
    pub fn children_at(
        &self,
        path: &NodePath,
        key: SortKey,
    ) -> Result<Vec<&BreakdownNode>, BreakdownError> {
        let node = self.node(path)?;
        let mut children: Vec<&BreakdownNode> = node.children.iter().collect();
        children.sort_by(|a, b| compare_nodes(a, b, key));
        Ok(children)
    }

    /// Same as [`children_at`](Self::children_at) but paired with each
    /// child's stored path.
    pub fn children_with_paths(
        &self,
        path: &NodePath,
        key: SortKey,
    ) -> Result<Vec<(NodePath, &BreakdownNode)>, BreakdownError> {
        let node = self.node(path)?;
        let mut children: Vec<(NodePath, &BreakdownNode)> = node
            .children
            .iter()
            .enumerate()
            .map(|(i, c)| (path.child(i), c))
            .collect();
        children.sort_by(|a, b| compare_nodes(a.1, b.1, key));
        Ok(children)
    }

    /// One marker per source line appearing in stacks under `scope`.
    pub fn inline_markers(&self, scope: &NodePath) -> Result<Vec<InlineMarker>, BreakdownError> {
        let node = self.node(scope)?;
        let mut ops = Vec::new();
        let mut weights = Vec::new();
        node.visit(&mut |n| {
            if let Some(op) = n.operation {
                ops.push(op);
            }
            weights.extend_from_slice(&n.own_weights);
        });
        ops.sort_unstable();
        weights.sort_unstable();

        let mut markers: BTreeMap<&StackFrame, InlineMarker> = BTreeMap::new();
        let scoped = !scope.is_root();
        let empty = |frame: &StackFrame| InlineMarker {
            frame: frame.clone(),
            run_time_ms: 0.0,
            weight_bytes: 0,
            activation_bytes: 0,
            scoped,
        };
        for op in ops.iter().map(|&i| &self.operations[i]) {
            let frames: BTreeSet<&StackFrame> = op.stack.iter().collect();
            for frame in frames {
                let marker = markers.entry(frame).or_insert_with(|| empty(frame));
                marker.run_time_ms += op.run_time_ms;
                marker.activation_bytes += op.activation_bytes;
            }
        }
        for weight in weights.iter().map(|&i| &self.weights[i]) {
            let frames: BTreeSet<&StackFrame> = weight.stack.iter().collect();
            for frame in frames {
                markers.entry(frame).or_insert_with(|| empty(frame)).weight_bytes += weight.bytes;
            }
        }
        Ok(markers.into_values().collect())
    }

    /// Rebuilds the tree after replacing each operation's measurements.
    pub fn map_operations(
        &self,
        mut f: impl FnMut(&OperationMeasurement) -> OperationMeasurement,
    ) -> BreakdownTree {
        let ops: Vec<OperationMeasurement> = self.operations.iter().map(&mut f).collect();
        BreakdownTree::build(&ops, &self.weights).expect("stacks are unchanged")
    }

    /// Every node with its path, pre-order.
    pub fn walk(&self) -> Vec<(NodePath, &BreakdownNode)> {
        fn go<'a>(path: NodePath, node: &'a BreakdownNode, out: &mut Vec<(NodePath, &'a BreakdownNode)>) {
            out.push((path.clone(), node));
            for (i, child) in node.children.iter().enumerate() {
                go(path.child(i), child, out);
            }
        }
        let mut out = Vec::new();
        go(NodePath::root(), &self.root, &mut out);
        out
    }
}

pub fn build_tree(
    operations: &[OperationMeasurement],
    weights: &[WeightMeasurement],
) -> Result<BreakdownTree, BreakdownError> {
    BreakdownTree::build(operations, weights)
}

fn finalize(
    arena: &[ArenaNode],
    idx: usize,
    operations: &[OperationMeasurement],
    weights: &[WeightMeasurement],
    name: Option<String>,
) -> BreakdownNode {
    let node = &arena[idx];
    if let Some(op_idx) = node.operation {
        let op = &operations[op_idx];
        return BreakdownNode {
            kind: NodeKind::Operation,
            display_name: name.unwrap_or_else(|| op.name.clone()),
            frame: node.frame.clone(),
            run_time_ms: op.run_time_ms,
            weight_bytes: 0,
            activation_bytes: op.activation_bytes,
            children: Vec::new(),
            leaf_count: 1,
            operation: Some(op_idx),
            own_weights: Vec::new(),
        };
    }

    let mut names: Vec<String> = node
        .children
        .iter()
        .map(|&c| match arena[c].operation {
            Some(op) => operations[op].name.clone(),
            None => arena[c].frame.to_string(),
        })
        .collect();
    disambiguate(&mut names);

    let mut children: Vec<BreakdownNode> = node
        .children
        .iter()
        .zip(names)
        .map(|(&c, name)| finalize(arena, c, operations, weights, Some(name)))
        .collect();
    children.sort_by(|a, b| compare_nodes(a, b, SortKey::RunTime));

    let own_weight_bytes: u64 = node.weights.iter().map(|&w| weights[w].bytes).sum();
    let mut run_time_ms = 0.0;
    let mut activation_bytes = 0;
    let mut weight_bytes = own_weight_bytes;
    let mut leaf_count = 0;
    for child in &children {
        // Summing leaves in depth-first order keeps the root equal to the
        // plain sum over leaves, bit for bit.
        child.visit_leaves(&mut |leaf| run_time_ms += leaf.run_time_ms);
        activation_bytes += child.activation_bytes;
        weight_bytes += child.weight_bytes;
        leaf_count += child.leaf_count;
    }

    BreakdownNode {
        kind: NodeKind::Module,
        display_name: name.unwrap_or_else(|| node.frame.to_string()),
        frame: node.frame.clone(),
        run_time_ms,
        weight_bytes,
        activation_bytes,
        children,
        leaf_count,
        operation: None,
        own_weights: node.weights.clone(),
    }
}
