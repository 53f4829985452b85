//! Structural properties of the examination DAG, checked against an
//! independent enumerator of the four base edge rules.

use std::collections::BTreeSet;

use fscm_core::page_dag::{
    BlockSpec, EdgeType, MergeStatus, NodeId, Orientation, PageDag, PageLayout,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

type EdgeTriple = (NodeId, NodeId, EdgeType);

/// Direct enumeration of the four edge rules for strictly alternating
/// layouts that start with a vertical block. Kept deliberately separate
/// from the production builder: vertical blocks sit at odd 1-based indices,
/// horizontal at even ones.
fn four_rule_edges(layout: &PageLayout) -> BTreeSet<EdgeTriple> {
    assert!(layout.is_alternating_f_shape());
    let n = layout.num_blocks();
    let m = |t: usize| layout.block(t).item_count;
    let mut edges = BTreeSet::new();

    for t in 1..=n {
        for j in 2..=m(t) {
            edges.insert((NodeId::new(t, j - 1), NodeId::new(t, j), EdgeType::IntraBlock));
        }
    }
    // Last item of a vertical block to every item of the next horizontal.
    for t in (1..n).step_by(2) {
        for j in 1..=m(t + 1) {
            edges.insert((NodeId::new(t, m(t)), NodeId::new(t + 1, j), EdgeType::VToH));
        }
    }
    // Every item of a horizontal block to the first item of the next vertical.
    for t in (2..n).step_by(2) {
        for j in 1..=m(t) {
            edges.insert((NodeId::new(t, j), NodeId::new(t + 1, 1), EdgeType::HToV));
        }
    }
    // Last item of a vertical block to the first item of the vertical block
    // two ahead.
    if n >= 3 {
        for t in (1..=n - 2).step_by(2) {
            edges.insert((NodeId::new(t, m(t)), NodeId::new(t + 2, 1), EdgeType::BlockSkip));
        }
    }
    edges
}

fn random_alternating_layout(rng: &mut ChaCha20Rng) -> PageLayout {
    let n = rng.gen_range(1..=7);
    let blocks = (0..n)
        .map(|i| BlockSpec {
            orientation: if i % 2 == 0 { Orientation::Vertical } else { Orientation::Horizontal },
            item_count: rng.gen_range(1..=8),
        })
        .collect();
    PageLayout::new(blocks).unwrap()
}

fn random_any_layout(rng: &mut ChaCha20Rng) -> PageLayout {
    let n = rng.gen_range(1..=7);
    let blocks = (0..n)
        .map(|_| BlockSpec {
            orientation: if rng.gen_bool(0.5) {
                Orientation::Vertical
            } else {
                Orientation::Horizontal
            },
            item_count: rng.gen_range(1..=8),
        })
        .collect();
    PageLayout::new(blocks).unwrap()
}

fn edge_set(dag: &PageDag) -> BTreeSet<EdgeTriple> {
    dag.edges().iter().map(|e| (e.source, e.target, e.edge_type)).collect()
}

#[test]
fn builder_matches_four_rule_oracle_on_200_layouts() {
    let mut rng = ChaCha20Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let layout = random_alternating_layout(&mut rng);
        let dag = PageDag::build(&layout, true);
        assert_eq!(
            edge_set(&dag),
            four_rule_edges(&layout),
            "edge mismatch for layout {}",
            layout.spec_string()
        );
    }
}

#[test]
fn every_edge_is_forward_and_topo_respects_it() {
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    for _ in 0..200 {
        let layout = random_any_layout(&mut rng);
        let dag = PageDag::build(&layout, true);
        for e in dag.edges() {
            assert!(
                e.source.block < e.target.block
                    || (e.source.block == e.target.block && e.source.pos < e.target.pos)
            );
            assert!(dag.node_index(e.source) < dag.node_index(e.target));
        }
        // Topological order is a permutation of all nodes.
        let mut sorted = dag.topo_order().to_vec();
        sorted.sort();
        let mut all: Vec<NodeId> = layout.nodes().collect();
        all.sort();
        assert_eq!(sorted, all);
    }
}

#[test]
fn merge_count_formula_on_alternating_layouts() {
    let mut rng = ChaCha20Rng::seed_from_u64(4096);
    for _ in 0..200 {
        let layout = random_alternating_layout(&mut rng);
        let dag = PageDag::build(&layout, true);
        let merges = dag
            .topo_order()
            .iter()
            .filter(|&&n| dag.class(n).merge == MergeStatus::Merge)
            .count();
        let horizontal_excess: usize = layout
            .blocks()
            .iter()
            .filter(|b| b.orientation == Orientation::Horizontal)
            .map(|b| b.item_count - 1)
            .sum();
        let verticals =
            layout.blocks().iter().filter(|b| b.orientation == Orientation::Vertical).count();
        assert_eq!(
            merges,
            horizontal_excess + (verticals - 1),
            "layout {}",
            layout.spec_string()
        );
    }
}

#[test]
fn vertical_nodes_past_first_position_are_tandem() {
    let mut rng = ChaCha20Rng::seed_from_u64(31);
    for _ in 0..200 {
        let layout = random_any_layout(&mut rng);
        let dag = PageDag::build(&layout, true);
        for node in dag.topo_order() {
            let class = dag.class(*node);
            if class.orientation == Orientation::Vertical && node.pos >= 2 {
                assert_eq!(class.merge, MergeStatus::Tandem);
                assert_eq!(dag.predecessors(*node), &[NodeId::new(node.block, node.pos - 1)]);
            }
        }
    }
}

#[test]
fn neighbor_sets_match_edges_and_are_symmetric() {
    let mut rng = ChaCha20Rng::seed_from_u64(55);
    for _ in 0..100 {
        let layout = random_any_layout(&mut rng);
        let dag = PageDag::build(&layout, true);
        let edges = edge_set(&dag);
        let nodes: Vec<NodeId> = layout.nodes().collect();
        for &u in &nodes {
            let nbrs: BTreeSet<NodeId> = dag.neighbors(u).into_iter().collect();
            for &v in &nodes {
                let connected = edges.iter().any(|&(s, t, _)| (s == u && t == v) || (s == v && t == u));
                assert_eq!(nbrs.contains(&v), connected, "{u} vs {v}");
                // Symmetry.
                assert_eq!(connected, dag.neighbors(v).contains(&u));
            }
        }
    }
}

#[test]
fn determinism_across_rebuilds() {
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    for _ in 0..50 {
        let layout = random_any_layout(&mut rng);
        let a = PageDag::build(&layout, true);
        let b = PageDag::build(&layout, true);
        assert_eq!(a.edges(), b.edges());
        assert_eq!(a.topo_order(), b.topo_order());
    }
}

#[test]
fn canonical_edge_order_is_type_source_target() {
    let layout = PageLayout::parse("v2,h3,v2").unwrap();
    let dag = PageDag::build(&layout, true);
    let mut sorted = dag.edges().to_vec();
    sorted.sort_by_key(|e| (e.edge_type, e.source, e.target));
    assert_eq!(dag.edges(), &sorted[..]);
}
