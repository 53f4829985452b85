//! Single-list GRU click models adapted to multi-block pages.
//!
//! Both modes keep two independent recurrent cells and predictor heads, one
//! for vertical and one for horizontal lists, over shared embedding tables:
//!
//! * block-wise: every block is processed as an isolated list;
//! * list-wise: all vertical blocks are concatenated in page order into one
//!   list, horizontal blocks stay isolated.

use crate::data::Session;
use crate::model::{
    check_schema, gru_unit_input, mlp_scalar, ClickInput, ClickModel, EmbeddingIds, GruParamIds,
    MlpIds, ModelConfig, ModelError, ModelKind, ParamInit, SessionForward,
};
use crate::numkit::{gru_cell, ParamSet, Tape, VarId};
use crate::page_dag::{NodeId, Orientation, PageLayout};

struct BaselineIndex {
    embeddings: EmbeddingIds,
    unit_v: GruParamIds,
    unit_h: GruParamIds,
    head_v: MlpIds,
    head_h: MlpIds,
}

pub struct BaselineModel {
    config: ModelConfig,
    params: ParamSet,
    index: BaselineIndex,
}

impl BaselineModel {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        assert!(
            matches!(config.kind, ModelKind::BaselineBlockWise | ModelKind::BaselineListWise),
            "BaselineModel needs a baseline kind"
        );
        let mut params = ParamSet::new();
        let mut init = ParamInit::new(seed);
        let embeddings = init.embeddings(&mut params, &config);
        let unit_v = init.gru(&mut params, "gru.v", config.input_dim(), config.hidden);
        let unit_h = init.gru(&mut params, "gru.h", config.input_dim(), config.hidden);
        let head_v = init.mlp(&mut params, "out.v", config.hidden, config.hidden);
        let head_h = init.mlp(&mut params, "out.h", config.hidden, config.hidden);
        let index = BaselineIndex { embeddings, unit_v, unit_h, head_v, head_h };
        BaselineModel { config, params, index }
    }

    pub fn with_params(config: ModelConfig, params: ParamSet) -> Self {
        let template = BaselineModel::new(config, 0);
        assert_eq!(template.params.len(), params.len(), "parameter count mismatch");
        for (a, b) in template.params.entries().iter().zip(params.entries()) {
            assert_eq!(a.name, b.name, "parameter name mismatch");
            assert_eq!(a.value.shape(), b.value.shape(), "parameter shape mismatch for {}", a.name);
        }
        BaselineModel { config: template.config, params, index: template.index }
    }

    /// The item lists each mode processes independently.
    fn lists(&self, layout: &PageLayout) -> Vec<(Orientation, Vec<NodeId>)> {
        let mut lists = Vec::new();
        match self.config.kind {
            ModelKind::BaselineBlockWise => {
                for (i, block) in layout.blocks().iter().enumerate() {
                    let nodes = (1..=block.item_count).map(|j| NodeId::new(i + 1, j)).collect();
                    lists.push((block.orientation, nodes));
                }
            }
            ModelKind::BaselineListWise => {
                let mut vertical = Vec::new();
                for (i, block) in layout.blocks().iter().enumerate() {
                    let nodes: Vec<NodeId> =
                        (1..=block.item_count).map(|j| NodeId::new(i + 1, j)).collect();
                    match block.orientation {
                        Orientation::Vertical => vertical.extend(nodes),
                        Orientation::Horizontal => lists.push((Orientation::Horizontal, nodes)),
                    }
                }
                if !vertical.is_empty() {
                    lists.push((Orientation::Vertical, vertical));
                }
            }
            ModelKind::Fscm => unreachable!(),
        }
        lists
    }
}

impl ClickModel for BaselineModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        session: &Session,
    ) -> Result<SessionForward, ModelError> {
        check_schema(&self.config, session)?;
        let layout = session.layout()?;
        let emb = &self.index.embeddings;
        let v_q = emb.lookup(tape, &emb.query_tables, &session.query.fields, self.config.query_vocab);

        let num_nodes = layout.num_items();
        let node_slot: std::collections::HashMap<NodeId, usize> =
            layout.nodes().enumerate().map(|(i, n)| (n, i)).collect();
        let mut probs: Vec<Option<VarId>> = vec![None; num_nodes];
        let mut states: Vec<Option<VarId>> = vec![None; num_nodes];

        for (orientation, nodes) in self.lists(&layout) {
            let (unit, head) = match orientation {
                Orientation::Vertical => (self.index.unit_v, self.index.head_v),
                Orientation::Horizontal => (self.index.unit_h, self.index.head_h),
            };
            let weights = unit.bind(tape);
            let mut h = tape.zeros(self.config.hidden);
            let mut prev = ClickInput::Start;
            for node in nodes {
                let v_i = emb.lookup(
                    tape,
                    &emb.item_tables,
                    &session.item(node).fields,
                    self.config.item_vocab,
                );
                let x = gru_unit_input(tape, emb, v_q, v_i, prev);
                h = gru_cell(tape, &weights, x, h);
                let logit = mlp_scalar(tape, &head, h);
                let slot = node_slot[&node];
                probs[slot] = Some(tape.sigmoid(logit));
                states[slot] = Some(h);
                prev = ClickInput::Label(session.click(node));
            }
        }

        let nodes: Vec<NodeId> = layout.nodes().collect();
        Ok(SessionForward {
            labels: nodes.iter().map(|&n| session.click(n)).collect(),
            orientations: nodes.iter().map(|&n| layout.block(n.block).orientation).collect(),
            probs: probs.into_iter().map(|p| p.expect("node not covered by any list")).collect(),
            states: states.into_iter().map(|s| s.expect("node not covered")).collect(),
            alphas: vec![None; nodes.len()],
            gammas: vec![None; nodes.len()],
            nodes,
        })
    }
}
