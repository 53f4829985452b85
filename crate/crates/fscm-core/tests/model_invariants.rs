//! Behavioral contracts of the FSCM network and the baseline chains:
//! attention isolation, comparison-function identities, unit separation,
//! and end-to-end gradient checks for every variant.

use fscm_core::baselines::BaselineModel;
use fscm_core::data::{Query, Session, SessionBlock, SessionItem};
use fscm_core::model::{
    AblationFlags, ClickInput, ClickModel, ComparisonKind, FscmModel, ModelConfig, ModelKind,
};
use fscm_core::numkit::{Tape, Tensor};
use fscm_core::page_dag::{NodeId, Orientation, PageDag, PageLayout};
use fscm_core::trainer::{batch_objective_value, gradient_check};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        field_dim: 3,
        click_dim: 3,
        query_vocab: 20,
        item_vocab: 30,
        lambda: 0.01,
        ..ModelConfig::default()
    }
}

/// Session over a given layout with deterministic pseudo-random content.
fn make_session(layout_spec: &str, seed: u64) -> Session {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let layout = PageLayout::parse(layout_spec).unwrap();
    let blocks = layout
        .blocks()
        .iter()
        .map(|spec| SessionBlock {
            orientation: spec.orientation,
            items: (0..spec.item_count)
                .map(|_| {
                    let id = rng.gen_range(0..30u64);
                    SessionItem {
                        id,
                        fields: vec![id as u32, rng.gen_range(0..30)],
                        click: u8::from(rng.gen_bool(0.3)),
                    }
                })
                .collect(),
        })
        .collect();
    let qid = rng.gen_range(0..20u64);
    Session {
        session_id: seed,
        query: Query { id: qid, fields: vec![qid as u32, rng.gen_range(0..20)] },
        blocks,
        trace: None,
    }
}

fn probs_of(model: &dyn ClickModel, session: &Session) -> Vec<f64> {
    let mut tape = Tape::new(model.params());
    let fwd = model.forward(&mut tape, session).unwrap();
    fwd.prob_values(&tape)
}

/// Copy parameters that exist under the same name in both models.
fn copy_shared_params(from: &dyn ClickModel, to: &mut dyn ClickModel) {
    for entry in from.params().entries() {
        let name = entry.name.clone();
        let value = entry.value.clone();
        if let Some(idx) = to.params().index(&name) {
            *to.params_mut().value_mut(idx) = value;
        }
    }
}

#[test]
fn gradient_check_every_comparison_function_and_ablation() {
    let session = make_session("v2,h3,v2", 5);
    let sessions = [&session];

    let mut variants: Vec<(ComparisonKind, AblationFlags)> = vec![
        (ComparisonKind::Inner, AblationFlags::none()),
        (ComparisonKind::Neural, AblationFlags::none()),
        (ComparisonKind::Kernel, AblationFlags::none()),
        (ComparisonKind::Kernel, AblationFlags { no_comparison: true, ..AblationFlags::none() }),
        (ComparisonKind::Kernel, AblationFlags { no_skip_edges: true, ..AblationFlags::none() }),
        (ComparisonKind::Kernel, AblationFlags { share_hv: true, ..AblationFlags::none() }),
        (ComparisonKind::Kernel, AblationFlags { share_tm: true, ..AblationFlags::none() }),
    ];
    variants.push((
        ComparisonKind::Kernel,
        AblationFlags { share_hv: true, share_tm: true, ..AblationFlags::none() },
    ));

    for (comparison, ablation) in variants {
        let config = ModelConfig { comparison, ablation, ..small_config() };
        let mut model = FscmModel::new(config, 11);
        let report = gradient_check(&mut model, &sessions, 50, 1e-5, 3).unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "{comparison:?} {ablation:?}: max rel error {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
}

#[test]
fn gradient_check_baselines() {
    let session = make_session("v2,h3,v2", 6);
    let sessions = [&session];
    for kind in [ModelKind::BaselineBlockWise, ModelKind::BaselineListWise] {
        let config = ModelConfig { kind, ..small_config() };
        let mut model = BaselineModel::new(config, 13);
        let report = gradient_check(&mut model, &sessions, 50, 1e-5, 4).unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "{kind:?}: max rel error {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
}

#[test]
fn attention_ignores_current_item_but_sees_predecessors() {
    let model = FscmModel::new(small_config(), 21);
    let base = make_session("v2,h3,v2", 8);
    let merge_idx = 5; // (3,1) in row-major order

    let alphas = |session: &Session| -> Vec<f64> {
        let mut tape = Tape::new(model.params());
        let fwd = model.forward(&mut tape, session).unwrap();
        assert_eq!(fwd.nodes[merge_idx], NodeId::new(3, 1));
        fwd.alphas[merge_idx].clone().expect("merge node has attention")
    };

    let base_alphas = alphas(&base);
    assert_eq!(base_alphas.len(), 4);
    let sum: f64 = base_alphas.iter().sum();
    assert!((sum - 1.0).abs() < 1e-12);

    // Swapping the merge node's own item leaves its weights untouched.
    let mut changed_self = base.clone();
    changed_self.blocks[2].items[0] = SessionItem { id: 29, fields: vec![29, 3], click: 0 };
    assert_eq!(alphas(&changed_self), base_alphas);

    // Swapping a predecessor's item shifts them.
    let mut changed_pred = base.clone();
    changed_pred.blocks[1].items[0] = SessionItem { id: 28, fields: vec![28, 9], click: 0 };
    let shifted = alphas(&changed_pred);
    assert!(
        base_alphas.iter().zip(&shifted).any(|(a, b)| (a - b).abs() > 1e-9),
        "changing a predecessor item should change attention"
    );
}

#[test]
fn kernel_with_identity_matrix_equals_inner_product() {
    let config_kernel = ModelConfig { comparison: ComparisonKind::Kernel, ..small_config() };
    let config_inner = ModelConfig { comparison: ComparisonKind::Inner, ..small_config() };
    let mut kernel_model = FscmModel::new(config_kernel, 31);
    let mut inner_model = FscmModel::new(config_inner, 32);
    copy_shared_params(&kernel_model, &mut inner_model);

    let item_dim = inner_model.config().item_dim();
    let idx = kernel_model.params().index("cmp.kernel").unwrap();
    *kernel_model.params_mut().value_mut(idx) = Tensor::identity(item_dim);

    for seed in 0..100 {
        let session = make_session(["v2,h3,v2", "v3,h2", "v1", "h2,h2"][seed % 4], seed as u64);
        let pk = probs_of(&kernel_model, &session);
        let pi = probs_of(&inner_model, &session);
        for (a, b) in pk.iter().zip(&pi) {
            assert!((a - b).abs() <= 1e-12, "kernel {a} vs inner {b}");
        }
    }
}

#[test]
fn four_units_are_separate_parameters() {
    let config = small_config();
    let session = make_session("v2,h3,v2", 77);
    let layout = session.layout().unwrap();
    let dag = PageDag::build(&layout, true);

    let states_of = |model: &FscmModel| -> Vec<Vec<f64>> {
        let mut tape = Tape::new(model.params());
        let fwd = model.forward(&mut tape, &session).unwrap();
        fwd.states.iter().map(|&s| tape.value(s).to_vec()).collect()
    };

    let base_model = FscmModel::new(config.clone(), 41);
    let base_states = states_of(&base_model);

    for class_node in [NodeId::new(1, 1), NodeId::new(2, 1), NodeId::new(2, 2), NodeId::new(3, 1)] {
        let class = dag.class(class_node);
        let mut model = FscmModel::new(config.clone(), 41);
        let param_idx = model.unit_param_indices(class)[2]; // the update-gate bias
        model.params_mut().value_mut(param_idx).data_mut()[0] += 0.5;
        let states = states_of(&model);

        for (i, &node) in dag.topo_order().iter().enumerate() {
            let in_scope = dag.class(node) == class
                || dag.ancestors(node).iter().any(|&a| dag.class(a) == class);
            let changed =
                base_states[i].iter().zip(&states[i]).any(|(a, b)| (a - b).abs() > 1e-12);
            if in_scope {
                if dag.class(node) == class {
                    assert!(changed, "state of {node} should react to its own unit");
                }
            } else {
                assert!(!changed, "state of {node} must not react to unit {}", class.label());
            }
        }
    }
}

#[test]
fn zero_parameters_give_zero_states_and_half_probabilities() {
    let mut model = FscmModel::new(small_config(), 51);
    for idx in 0..model.params().len() {
        let shape = model.params().value(idx).shape().to_vec();
        *model.params_mut().value_mut(idx) = Tensor::zeros(&shape);
    }
    let session = make_session("v2,h3,v2", 3);
    let mut tape = Tape::new(model.params());
    let fwd = model.forward(&mut tape, &session).unwrap();
    for &s in &fwd.states {
        assert!(tape.value(s).iter().all(|&v| v == 0.0));
    }
    for &p in &fwd.probs {
        assert_eq!(tape.scalar_value(p), 0.5);
    }

    // Single item, label 1, probability one half: the classic -ln(1/2).
    let single = Session {
        session_id: 0,
        query: Query { id: 1, fields: vec![1, 1] },
        blocks: vec![SessionBlock {
            orientation: Orientation::Vertical,
            items: vec![SessionItem { id: 2, fields: vec![2, 2], click: 1 }],
        }],
        trace: None,
    };
    // All parameters are zero, so the L2 term contributes nothing and the
    // objective is exactly the data loss.
    let value = batch_objective_value(&model, &[&single]).unwrap();
    assert!((value - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn node_input_layout_and_click_slice() {
    let model = FscmModel::new(small_config(), 61);
    let config = model.config().clone();
    let session = make_session("v2,h3,v2", 9);

    let mut tape = Tape::new(model.params());
    let first = model.node_input(&mut tape, &session, NodeId::new(1, 1), ClickInput::Start);
    assert_eq!(
        tape.value(first).len(),
        config.query_dim() + config.item_dim() + config.click_dim
    );

    // The click slice of the start-token input equals click-table row 2.
    let click_table_idx = model.params().index("emb.click").unwrap();
    let start_row = model.params().value(click_table_idx).row(2).to_vec();
    let tail = &tape.value(first)[config.query_dim() + config.item_dim()..];
    assert_eq!(tail, &start_row[..]);

    // Same node, different previous click: inputs differ only in the click
    // slice.
    let with_zero = model.node_input(&mut tape, &session, NodeId::new(1, 1), ClickInput::Label(0));
    let with_one = model.node_input(&mut tape, &session, NodeId::new(1, 1), ClickInput::Label(1));
    let a = tape.value(with_zero).to_vec();
    let b = tape.value(with_one).to_vec();
    let split = config.query_dim() + config.item_dim();
    assert_eq!(a[..split], b[..split]);
    assert_ne!(a[split..], b[split..]);
}

#[test]
fn aggregation_identity_and_uniform_fallback() {
    let model = FscmModel::new(small_config(), 71);
    // Single predecessor: aggregation is the identity mapping.
    let mut tape = Tape::new(model.params());
    let state = tape.constant(Tensor::vector(vec![1.0, -2.0, 3.0, 0.5, 0.0, 1.0, 2.0, -1.0]));
    let (agg, alpha) = model.aggregate_predecessors(&mut tape, &[state]);
    assert_eq!(tape.value(agg), tape.value(state));
    assert!(alpha.is_none());

    // Zero attention scorer: uniform weights over all predecessors.
    let mut zeroed = FscmModel::new(small_config(), 71);
    for name in ["attn.w1", "attn.b1", "attn.w2", "attn.b2"] {
        let idx = zeroed.params().index(name).unwrap();
        let shape = zeroed.params().value(idx).shape().to_vec();
        *zeroed.params_mut().value_mut(idx) = Tensor::zeros(&shape);
    }
    let session = make_session("v2,h3,v2", 10);
    let mut tape = Tape::new(zeroed.params());
    let fwd = zeroed.forward(&mut tape, &session).unwrap();
    let merge_alphas = fwd.alphas[5].as_ref().unwrap(); // (3,1), indegree 4
    assert_eq!(merge_alphas.len(), 4);
    for &a in merge_alphas {
        assert!((a - 0.25).abs() < 1e-12);
    }
}

#[test]
fn comparison_weights_and_single_node_page() {
    let model = FscmModel::new(small_config(), 81);
    // Two-item vertical list: each node has exactly one neighbor, so the
    // comparison weight is the softmax of a singleton.
    let session = make_session("v2", 12);
    let mut tape = Tape::new(model.params());
    let fwd = model.forward(&mut tape, &session).unwrap();
    for gamma in fwd.gammas.iter().flatten() {
        assert_eq!(gamma, &vec![1.0]);
    }

    // A single-node page has no comparison candidates; with shared
    // parameters the prediction matches the no-comparison ablation, since
    // the comparison context degrades to the zero vector.
    let single = make_session("v1", 13);
    let config_off = ModelConfig {
        ablation: AblationFlags { no_comparison: true, ..AblationFlags::none() },
        ..small_config()
    };
    let mut off_model = FscmModel::new(config_off, 99);
    copy_shared_params(&model, &mut off_model);
    assert_eq!(probs_of(&model, &single), probs_of(&off_model, &single));
}

#[test]
fn probabilities_are_open_interval_and_monotone_in_bias() {
    let mut model = FscmModel::new(small_config(), 91);
    let session = make_session("v3,h4", 14);
    let base = probs_of(&model, &session);
    for &p in &base {
        assert!(p > 0.0 && p < 1.0);
    }
    let b2 = model.params().index("out.b2").unwrap();
    model.params_mut().value_mut(b2).data_mut()[0] += 1.0;
    let shifted = probs_of(&model, &session);
    for (a, b) in base.iter().zip(&shifted) {
        assert!(b > a, "raising the output bias must raise the probability");
    }
}

#[test]
fn share_hv_makes_transposed_single_block_layouts_identical() {
    let config = ModelConfig {
        ablation: AblationFlags { share_hv: true, ..AblationFlags::none() },
        ..small_config()
    };
    let model = FscmModel::new(config, 101);

    let vertical = make_session("v4", 15);
    let mut horizontal = vertical.clone();
    horizontal.blocks[0].orientation = Orientation::Horizontal;

    assert_eq!(probs_of(&model, &vertical), probs_of(&model, &horizontal));
}

#[test]
fn ablation_unit_counts() {
    let count_units = |ablation: AblationFlags| -> usize {
        let config = ModelConfig { ablation, ..small_config() };
        let model = FscmModel::new(config, 1);
        model
            .params()
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("gru.") && e.name.ends_with(".w_z"))
            .count()
    };
    assert_eq!(count_units(AblationFlags::none()), 4);
    assert_eq!(count_units(AblationFlags { share_hv: true, ..AblationFlags::none() }), 2);
    assert_eq!(count_units(AblationFlags { share_tm: true, ..AblationFlags::none() }), 2);
    assert_eq!(
        count_units(AblationFlags { share_hv: true, share_tm: true, ..AblationFlags::none() }),
        1
    );
}

#[test]
fn no_comparison_ignores_neighbor_items() {
    let config = ModelConfig {
        ablation: AblationFlags { no_comparison: true, ..AblationFlags::none() },
        ..small_config()
    };
    let model = FscmModel::new(config, 111);
    let base = make_session("v3", 16);
    let mut perturbed = base.clone();
    // Change the last item; with the comparison module off, the middle
    // node's prediction cannot see its forward neighbor's content.
    perturbed.blocks[0].items[2] = SessionItem { id: 27, fields: vec![27, 4], click: 0 };

    let p_base = probs_of(&model, &base);
    let p_pert = probs_of(&model, &perturbed);
    assert_eq!(p_base[0], p_pert[0]);
    assert_eq!(p_base[1], p_pert[1]);

    // The full model does see it through the comparison candidates.
    let full = FscmModel::new(small_config(), 111);
    let p_base = probs_of(&full, &base);
    let p_pert = probs_of(&full, &perturbed);
    assert!((p_base[1] - p_pert[1]).abs() > 1e-12);
}

#[test]
fn no_skip_edges_drops_long_range_predecessor() {
    let layout = PageLayout::parse("v2,h3,v2").unwrap();
    let with = PageDag::build(&layout, true);
    let without = PageDag::build(&layout, false);
    assert_eq!(with.indegree(NodeId::new(3, 1)), 4);
    assert_eq!(without.indegree(NodeId::new(3, 1)), 3);
}

#[test]
fn baseline_modes_coincide_on_single_block_pages() {
    let bw = BaselineModel::new(
        ModelConfig { kind: ModelKind::BaselineBlockWise, ..small_config() },
        17,
    );
    let lw = BaselineModel::new(
        ModelConfig { kind: ModelKind::BaselineListWise, ..small_config() },
        17,
    );
    for spec in ["v4", "h5"] {
        let session = make_session(spec, 18);
        assert_eq!(probs_of(&bw, &session), probs_of(&lw, &session));
    }
}

#[test]
fn list_wise_chains_vertical_blocks_and_block_wise_does_not() {
    let bw = BaselineModel::new(
        ModelConfig { kind: ModelKind::BaselineBlockWise, ..small_config() },
        19,
    );
    let lw = BaselineModel::new(
        ModelConfig { kind: ModelKind::BaselineListWise, ..small_config() },
        19,
    );
    let base = make_session("v2,h3,v2", 20);
    let mut flipped = base.clone();
    flipped.blocks[0].items[1].click ^= 1; // click of (1,2)

    let block3 = |probs: &[f64]| probs[5..7].to_vec(); // (3,1), (3,2)

    let lw_base = probs_of(&lw, &base);
    let lw_flip = probs_of(&lw, &flipped);
    assert_ne!(block3(&lw_base), block3(&lw_flip), "list-wise sees block-1 clicks in block 3");

    let bw_base = probs_of(&bw, &base);
    let bw_flip = probs_of(&bw, &flipped);
    assert_eq!(block3(&bw_base), block3(&bw_flip), "block-wise must not");

    // Horizontal predictions are isolated from vertical content in both
    // modes.
    let mut vertical_item_changed = base.clone();
    vertical_item_changed.blocks[0].items[0] = SessionItem { id: 25, fields: vec![25, 7], click: 1 };
    let block2 = |probs: &[f64]| probs[2..5].to_vec();
    assert_eq!(block2(&probs_of(&bw, &base)), block2(&probs_of(&bw, &vertical_item_changed)));
    assert_eq!(block2(&probs_of(&lw, &base)), block2(&probs_of(&lw, &vertical_item_changed)));
}

#[test]
fn fscm_state_depends_on_upstream_items() {
    // Changing item (1,1) must change the state at (1,2) for generic
    // parameters: the chain actually carries information.
    let model = FscmModel::new(small_config(), 121);
    let base = make_session("v2", 22);
    let mut changed = base.clone();
    changed.blocks[0].items[0] = SessionItem { id: 23, fields: vec![23, 5], click: 0 };

    let state_of = |session: &Session, idx: usize| -> Vec<f64> {
        let mut tape = Tape::new(model.params());
        let fwd = model.forward(&mut tape, session).unwrap();
        tape.value(fwd.states[idx]).to_vec()
    };
    assert_ne!(state_of(&base, 1), state_of(&changed, 1));
}

#[test]
fn schema_mismatch_is_rejected() {
    let model = FscmModel::new(small_config(), 2);
    let mut session = make_session("v2", 23);
    session.query.fields = vec![1];
    let mut tape = Tape::new(model.params());
    assert!(model.forward(&mut tape, &session).is_err());
}
