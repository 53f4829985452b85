//! Examination-flow DAGs for multi-block mobile pages.
//!
//! A page layout is an ordered list of vertical and horizontal item blocks.
//! Every item becomes a vertex; directed edges describe the browsing flows a
//! user can take between items. For strictly alternating vertical/horizontal
//! layouts (the F-shape case) the edge set consists of intra-block edges,
//! vertical-to-horizontal edges, horizontal-to-vertical edges and block-skip
//! edges. Arbitrary block sequences are covered by an entry/exit
//! generalization of the same rules.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Block orientation. Vertical blocks are top-to-bottom lists, horizontal
/// blocks are left-to-right scrollable rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Orientation {
    #[serde(rename = "v")]
    Vertical,
    #[serde(rename = "h")]
    Horizontal,
}

impl Orientation {
    pub fn short(self) -> char {
        match self {
            Orientation::Vertical => 'v',
            Orientation::Horizontal => 'h',
        }
    }
}

/// One block of a page layout: orientation plus item count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub orientation: Orientation,
    pub item_count: usize,
}

impl BlockSpec {
    pub fn vertical(item_count: usize) -> Self {
        BlockSpec { orientation: Orientation::Vertical, item_count }
    }

    pub fn horizontal(item_count: usize) -> Self {
        BlockSpec { orientation: Orientation::Horizontal, item_count }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LayoutError {
    #[error("layout has no blocks")]
    Empty,
    #[error("block {block} has zero items")]
    EmptyBlock { block: usize },
    #[error("bad layout token {token:?}: expected <v|h><count>, e.g. v6")]
    BadToken { token: String },
}

/// An ordered, validated list of blocks. Block indices are 1-based
/// throughout, matching the item addressing used everywhere else.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<BlockSpec>", into = "Vec<BlockSpec>")]
pub struct PageLayout {
    blocks: Vec<BlockSpec>,
}

impl TryFrom<Vec<BlockSpec>> for PageLayout {
    type Error = LayoutError;
    fn try_from(blocks: Vec<BlockSpec>) -> Result<Self, LayoutError> {
        PageLayout::new(blocks)
    }
}

impl From<PageLayout> for Vec<BlockSpec> {
    fn from(layout: PageLayout) -> Vec<BlockSpec> {
        layout.blocks
    }
}

impl PageLayout {
    pub fn new(blocks: Vec<BlockSpec>) -> Result<Self, LayoutError> {
        if blocks.is_empty() {
            return Err(LayoutError::Empty);
        }
        for (i, b) in blocks.iter().enumerate() {
            if b.item_count == 0 {
                return Err(LayoutError::EmptyBlock { block: i + 1 });
            }
        }
        Ok(PageLayout { blocks })
    }

    /// Parse a compact layout spec such as `"v6,h8,v6"`.
    pub fn parse(spec: &str) -> Result<Self, LayoutError> {
        let mut blocks = Vec::new();
        for token in spec.split(',') {
            let token = token.trim();
            let orientation = match token.chars().next() {
                Some('v') | Some('V') => Orientation::Vertical,
                Some('h') | Some('H') => Orientation::Horizontal,
                _ => return Err(LayoutError::BadToken { token: token.to_string() }),
            };
            let count: usize = token[1..]
                .parse()
                .map_err(|_| LayoutError::BadToken { token: token.to_string() })?;
            if count == 0 {
                return Err(LayoutError::BadToken { token: token.to_string() });
            }
            blocks.push(BlockSpec { orientation, item_count: count });
        }
        PageLayout::new(blocks)
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    /// Block spec for 1-based index `t`.
    pub fn block(&self, t: usize) -> BlockSpec {
        self.blocks[t - 1]
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_items(&self) -> usize {
        self.blocks.iter().map(|b| b.item_count).sum()
    }

    /// True for strictly alternating layouts that start with a vertical
    /// block (the F-shape family the four base edge rules were written for).
    pub fn is_alternating_f_shape(&self) -> bool {
        self.blocks.iter().enumerate().all(|(i, b)| {
            let expected = if i % 2 == 0 { Orientation::Vertical } else { Orientation::Horizontal };
            b.orientation == expected
        })
    }

    /// All node ids in row-major order (ascending block, then position).
    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.blocks.iter().enumerate().flat_map(|(i, b)| {
            (1..=b.item_count).map(move |j| NodeId::new(i + 1, j))
        })
    }

    pub fn spec_string(&self) -> String {
        self.blocks
            .iter()
            .map(|b| format!("{}{}", b.orientation.short(), b.item_count))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Address of one item: 1-based block index and 1-based position inside the
/// block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId {
    pub block: usize,
    pub pos: usize,
}

impl NodeId {
    pub fn new(block: usize, pos: usize) -> Self {
        NodeId { block, pos }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.block, self.pos)
    }
}

/// Row-major (sequential-examination) order on nodes.
pub fn row_major_lt(a: NodeId, b: NodeId) -> bool {
    a.block < b.block || (a.block == b.block && a.pos < b.pos)
}

/// Edge flavors. `HToH` and `VToV` only occur on layouts that break the
/// alternating F-shape rule; they come from the entry/exit generalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeType {
    IntraBlock,
    VToH,
    HToV,
    BlockSkip,
    HToH,
    VToV,
}

impl EdgeType {
    pub fn label(self) -> &'static str {
        match self {
            EdgeType::IntraBlock => "intra-block",
            EdgeType::VToH => "v-to-h",
            EdgeType::HToV => "h-to-v",
            EdgeType::BlockSkip => "block-skip",
            EdgeType::HToH => "h-to-h",
            EdgeType::VToV => "v-to-v",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub source: NodeId,
    pub target: NodeId,
    pub edge_type: EdgeType,
}

/// Tandem nodes have at most one predecessor; merge nodes have more and
/// aggregate their predecessor states with attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeStatus {
    Tandem,
    Merge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeClass {
    pub orientation: Orientation,
    pub merge: MergeStatus,
}

impl NodeClass {
    pub fn label(self) -> &'static str {
        match (self.orientation, self.merge) {
            (Orientation::Vertical, MergeStatus::Tandem) => "vertical-tandem",
            (Orientation::Vertical, MergeStatus::Merge) => "vertical-merge",
            (Orientation::Horizontal, MergeStatus::Tandem) => "horizontal-tandem",
            (Orientation::Horizontal, MergeStatus::Merge) => "horizontal-merge",
        }
    }
}

/// The examination-flow DAG of one page layout. Immutable after
/// construction and safe to share across threads.
#[derive(Debug, Clone)]
pub struct PageDag {
    layout: PageLayout,
    edges: Vec<Edge>,
    topo: Vec<NodeId>,
    node_index: HashMap<NodeId, usize>,
    preds: Vec<Vec<NodeId>>,
    succs: Vec<Vec<NodeId>>,
    classes: Vec<NodeClass>,
}

/// Items a user can arrive at when entering block `t` from outside.
fn entry_set(layout: &PageLayout, t: usize) -> Vec<NodeId> {
    let b = layout.block(t);
    match b.orientation {
        Orientation::Vertical => vec![NodeId::new(t, 1)],
        Orientation::Horizontal => (1..=b.item_count).map(|j| NodeId::new(t, j)).collect(),
    }
}

/// Items a user can leave block `t` from.
fn exit_set(layout: &PageLayout, t: usize) -> Vec<NodeId> {
    let b = layout.block(t);
    match b.orientation {
        Orientation::Vertical => vec![NodeId::new(t, b.item_count)],
        Orientation::Horizontal => (1..=b.item_count).map(|j| NodeId::new(t, j)).collect(),
    }
}

fn adjacency_type(from: Orientation, to: Orientation) -> EdgeType {
    match (from, to) {
        (Orientation::Vertical, Orientation::Horizontal) => EdgeType::VToH,
        (Orientation::Horizontal, Orientation::Vertical) => EdgeType::HToV,
        (Orientation::Horizontal, Orientation::Horizontal) => EdgeType::HToH,
        (Orientation::Vertical, Orientation::Vertical) => EdgeType::VToV,
    }
}

impl PageDag {
    /// Build the DAG for `layout`. `skip_edges` toggles block-skip edges
    /// (disabled by the corresponding ablation).
    pub fn build(layout: &PageLayout, skip_edges: bool) -> PageDag {
        let n = layout.num_blocks();
        let mut edges = Vec::new();

        for t in 1..=n {
            let b = layout.block(t);
            // Consecutive items inside a block.
            for j in 2..=b.item_count {
                edges.push(Edge {
                    source: NodeId::new(t, j - 1),
                    target: NodeId::new(t, j),
                    edge_type: EdgeType::IntraBlock,
                });
            }
            // Adjacent blocks: every exit of t reaches every entry of t+1.
            if t < n {
                let ty = adjacency_type(b.orientation, layout.block(t + 1).orientation);
                for &src in &exit_set(layout, t) {
                    for &dst in &entry_set(layout, t + 1) {
                        edges.push(Edge { source: src, target: dst, edge_type: ty });
                    }
                }
            }
            // Block skip: vertical block to the vertical block two ahead.
            if skip_edges
                && t + 2 <= n
                && b.orientation == Orientation::Vertical
                && layout.block(t + 2).orientation == Orientation::Vertical
            {
                for &src in &exit_set(layout, t) {
                    for &dst in &entry_set(layout, t + 2) {
                        edges.push(Edge { source: src, target: dst, edge_type: EdgeType::BlockSkip });
                    }
                }
            }
        }

        // Canonical ordering keeps serialization and tests reproducible.
        edges.sort_unstable_by_key(|e| (e.edge_type, e.source, e.target));
        for w in edges.windows(2) {
            assert!(w[0] != w[1], "duplicate edge {:?}", w[0]);
        }

        let topo: Vec<NodeId> = layout.nodes().collect();
        let node_index: HashMap<NodeId, usize> =
            topo.iter().enumerate().map(|(i, &n)| (n, i)).collect();

        let mut preds: Vec<Vec<NodeId>> = vec![Vec::new(); topo.len()];
        let mut succs: Vec<Vec<NodeId>> = vec![Vec::new(); topo.len()];
        for e in &edges {
            // Every edge must run strictly forward in row-major order; a
            // violation would make the graph cyclic.
            assert!(
                row_major_lt(e.source, e.target),
                "edge {} -> {} is not forward",
                e.source,
                e.target
            );
            succs[node_index[&e.source]].push(e.target);
            preds[node_index[&e.target]].push(e.source);
        }
        for list in preds.iter_mut().chain(succs.iter_mut()) {
            list.sort_unstable();
        }

        let classes: Vec<NodeClass> = topo
            .iter()
            .enumerate()
            .map(|(i, node)| NodeClass {
                orientation: layout.block(node.block).orientation,
                merge: if preds[i].len() > 1 { MergeStatus::Merge } else { MergeStatus::Tandem },
            })
            .collect();

        PageDag { layout: layout.clone(), edges, topo, node_index, preds, succs, classes }
    }

    pub fn layout(&self) -> &PageLayout {
        &self.layout
    }

    /// Edges in canonical `(type, source, target)` order.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Row-major topological order; respects every edge by construction.
    pub fn topo_order(&self) -> &[NodeId] {
        &self.topo
    }

    pub fn num_nodes(&self) -> usize {
        self.topo.len()
    }

    /// Dense index of a node in row-major order.
    pub fn node_index(&self, node: NodeId) -> usize {
        self.node_index[&node]
    }

    pub fn predecessors(&self, node: NodeId) -> &[NodeId] {
        &self.preds[self.node_index(node)]
    }

    pub fn successors(&self, node: NodeId) -> &[NodeId] {
        &self.succs[self.node_index(node)]
    }

    pub fn indegree(&self, node: NodeId) -> usize {
        self.predecessors(node).len()
    }

    pub fn class(&self, node: NodeId) -> NodeClass {
        self.classes[self.node_index(node)]
    }

    /// First-order neighbors in the undirected view: predecessors followed
    /// by successors, each sorted row-major. The two sets are disjoint
    /// because every edge runs forward.
    pub fn neighbors(&self, node: NodeId) -> Vec<NodeId> {
        let i = self.node_index(node);
        let mut out = Vec::with_capacity(self.preds[i].len() + self.succs[i].len());
        out.extend_from_slice(&self.preds[i]);
        out.extend_from_slice(&self.succs[i]);
        out
    }

    /// Nodes whose state can reach `node` through directed edges
    /// (transitive predecessors, not including `node`).
    pub fn ancestors(&self, node: NodeId) -> Vec<NodeId> {
        let mut seen = vec![false; self.num_nodes()];
        let mut stack = vec![node];
        while let Some(cur) = stack.pop() {
            for &p in self.predecessors(cur) {
                let i = self.node_index(p);
                if !seen[i] {
                    seen[i] = true;
                    stack.push(p);
                }
            }
        }
        self.topo
            .iter()
            .copied()
            .filter(|n| seen[self.node_index(*n)])
            .collect()
    }

    pub fn edge_type_counts(&self) -> HashMap<EdgeType, usize> {
        let mut counts = HashMap::new();
        for e in &self.edges {
            *counts.entry(e.edge_type).or_insert(0) += 1;
        }
        counts
    }
}
