//! The F-shape click model: embedding layers, DAG-structured GRU with four
//! node-class parameter units, attention aggregation at merge nodes, a
//! comparison module over first-order neighbors, and the click predictor.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Session};
use crate::numkit::{gru_cell, GruWeights, ParamKind, ParamSet, Tape, Tensor, VarId};
use crate::page_dag::{MergeStatus, NodeClass, NodeId, Orientation, PageDag};

/// Comparison function applied between the current item and each candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComparisonKind {
    /// g(v1, v2) = v1 . v2
    Inner,
    /// g(v1, v2) = MLP([v1 ++ v2])
    Neural,
    /// g(v1, v2) = v1^T W v2
    Kernel,
}

/// Component toggles mirroring the ablation rows of the study harness.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub no_comparison: bool,
    pub no_skip_edges: bool,
    pub share_hv: bool,
    pub share_tm: bool,
}

impl AblationFlags {
    pub fn none() -> Self {
        AblationFlags::default()
    }

    pub fn active(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.no_comparison {
            out.push("no-comparison");
        }
        if self.no_skip_edges {
            out.push("no-skip-edges");
        }
        if self.share_hv {
            out.push("share-hv");
        }
        if self.share_tm {
            out.push("share-tm");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Fscm,
    BaselineBlockWise,
    BaselineListWise,
}

/// Full architectural description. A checkpoint stores this alongside the
/// tensors and refuses to load into a different configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub query_fields: usize,
    pub item_fields: usize,
    /// Per-field vocabulary size; ids at or above it map to a reserved row.
    pub query_vocab: usize,
    pub item_vocab: usize,
    /// Embedding size of each feature field.
    pub field_dim: usize,
    /// Embedding size of the click token.
    pub click_dim: usize,
    /// GRU hidden size.
    pub hidden: usize,
    pub comparison: ComparisonKind,
    pub ablation: AblationFlags,
    /// L2 regularization strength over weight matrices.
    pub lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Fscm,
            query_fields: 2,
            item_fields: 2,
            query_vocab: 500,
            item_vocab: 200,
            field_dim: 4,
            click_dim: 4,
            hidden: 128,
            comparison: ComparisonKind::Kernel,
            ablation: AblationFlags::none(),
            lambda: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Small-model profile for laptop-scale experiments.
    pub fn desk_scale() -> Self {
        ModelConfig { hidden: 32, ..ModelConfig::default() }
    }

    pub fn query_dim(&self) -> usize {
        self.query_fields * self.field_dim
    }

    pub fn item_dim(&self) -> usize {
        self.item_fields * self.field_dim
    }

    /// GRU input size: query, item and click embeddings concatenated.
    pub fn input_dim(&self) -> usize {
        self.query_dim() + self.item_dim() + self.click_dim
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("session {session_id} does not match model config: {message}")]
    Schema { session_id: u64, message: String },
}

/// Click-embedding rows: 0 = not clicked, 1 = clicked, 2 = start token.
pub const CLICK_VOCAB: usize = 3;
pub const CLICK_START: usize = 2;

#[derive(Debug, Clone, Copy)]
pub struct MlpIds {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GruParamIds {
    pub w_z: usize,
    pub u_z: usize,
    pub b_z: usize,
    pub w_r: usize,
    pub u_r: usize,
    pub b_r: usize,
    pub w_h: usize,
    pub u_h: usize,
    pub b_h: usize,
}

impl GruParamIds {
    pub fn bind(&self, tape: &mut Tape) -> GruWeights {
        GruWeights {
            w_z: tape.param(self.w_z),
            u_z: tape.param(self.u_z),
            b_z: tape.param(self.b_z),
            w_r: tape.param(self.w_r),
            u_r: tape.param(self.u_r),
            b_r: tape.param(self.b_r),
            w_h: tape.param(self.w_h),
            u_h: tape.param(self.u_h),
            b_h: tape.param(self.b_h),
        }
    }
}

/// Deterministic parameter initialization: Xavier-uniform matrices, zero
/// biases, N(0, 0.01) embeddings.
pub struct ParamInit {
    rng: ChaCha20Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        ParamInit { rng: ChaCha20Rng::seed_from_u64(seed) }
    }

    pub fn matrix(&mut self, params: &mut ParamSet, name: &str, rows: usize, cols: usize) -> usize {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.gen_range(-bound..bound)).collect();
        params.add(name, ParamKind::Matrix, Tensor::matrix(rows, cols, data))
    }

    pub fn bias(&mut self, params: &mut ParamSet, name: &str, dim: usize) -> usize {
        params.add(name, ParamKind::Bias, Tensor::zeros(&[dim]))
    }

    pub fn embedding(&mut self, params: &mut ParamSet, name: &str, rows: usize, cols: usize) -> usize {
        let data = (0..rows * cols).map(|_| 0.01 * self.normal()).collect();
        params.add(name, ParamKind::Embedding, Tensor::matrix(rows, cols, data))
    }

    fn normal(&mut self) -> f64 {
        // Box-Muller transform.
        let u1: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = self.rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn mlp(
        &mut self,
        params: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> MlpIds {
        MlpIds {
            w1: self.matrix(params, &format!("{prefix}.w1"), hidden, input),
            b1: self.bias(params, &format!("{prefix}.b1"), hidden),
            w2: self.matrix(params, &format!("{prefix}.w2"), 1, hidden),
            b2: self.bias(params, &format!("{prefix}.b2"), 1),
        }
    }

    pub fn gru(
        &mut self,
        params: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> GruParamIds {
        GruParamIds {
            w_z: self.matrix(params, &format!("{prefix}.w_z"), hidden, input),
            u_z: self.matrix(params, &format!("{prefix}.u_z"), hidden, hidden),
            b_z: self.bias(params, &format!("{prefix}.b_z"), hidden),
            w_r: self.matrix(params, &format!("{prefix}.w_r"), hidden, input),
            u_r: self.matrix(params, &format!("{prefix}.u_r"), hidden, hidden),
            b_r: self.bias(params, &format!("{prefix}.b_r"), hidden),
            w_h: self.matrix(params, &format!("{prefix}.w_h"), hidden, input),
            u_h: self.matrix(params, &format!("{prefix}.u_h"), hidden, hidden),
            b_h: self.bias(params, &format!("{prefix}.b_h"), hidden),
        }
    }

    /// Shared embedding tables: one per query field, one per item field,
    /// plus the click table. Each table carries one reserved out-of-vocab
    /// row at the end.
    pub fn embeddings(&mut self, params: &mut ParamSet, config: &ModelConfig) -> EmbeddingIds {
        let mut query_tables = Vec::new();
        for f in 0..config.query_fields {
            query_tables.push(self.embedding(
                params,
                &format!("emb.query.f{f}"),
                config.query_vocab + 1,
                config.field_dim,
            ));
        }
        let mut item_tables = Vec::new();
        for f in 0..config.item_fields {
            item_tables.push(self.embedding(
                params,
                &format!("emb.item.f{f}"),
                config.item_vocab + 1,
                config.field_dim,
            ));
        }
        let click_table = self.embedding(params, "emb.click", CLICK_VOCAB, config.click_dim);
        EmbeddingIds { query_tables, item_tables, click_table }
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingIds {
    pub query_tables: Vec<usize>,
    pub item_tables: Vec<usize>,
    pub click_table: usize,
}

impl EmbeddingIds {
    /// Embedding of one feature-field vector: per-field row lookups
    /// concatenated. Unknown ids land on the reserved row.
    pub fn lookup(
        &self,
        tape: &mut Tape,
        tables: &[usize],
        fields: &[u32],
        vocab: usize,
    ) -> VarId {
        let rows: Vec<VarId> = tables
            .iter()
            .zip(fields)
            .map(|(&table, &value)| {
                let row = (value as usize).min(vocab);
                let table = tape.param(table);
                tape.row(table, row)
            })
            .collect();
        if rows.len() == 1 {
            rows[0]
        } else {
            tape.concat(&rows)
        }
    }

    pub fn click_row(&self, tape: &mut Tape, prev: ClickInput) -> VarId {
        let row = match prev {
            ClickInput::Start => CLICK_START,
            ClickInput::Label(c) => c as usize,
        };
        let table = tape.param(self.click_table);
        tape.row(table, row)
    }
}

/// Click-embedding selector for a node input: the label of the row-major
/// predecessor, or the start token for the first node of a list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClickInput {
    Start,
    Label(u8),
}

/// GRU input for one node: [query ++ item ++ click] embeddings.
pub fn gru_unit_input(
    tape: &mut Tape,
    emb: &EmbeddingIds,
    v_q: VarId,
    v_i: VarId,
    prev: ClickInput,
) -> VarId {
    let v_c = emb.click_row(tape, prev);
    tape.concat(&[v_q, v_i, v_c])
}

/// Reject sessions whose feature-field counts do not match the model.
pub fn check_schema(config: &ModelConfig, session: &Session) -> Result<(), ModelError> {
    let schema = |message: String| ModelError::Schema { session_id: session.session_id, message };
    if session.query.fields.len() != config.query_fields {
        return Err(schema(format!(
            "query has {} fields, model expects {}",
            session.query.fields.len(),
            config.query_fields
        )));
    }
    for block in &session.blocks {
        for item in &block.items {
            if item.fields.len() != config.item_fields {
                return Err(schema(format!(
                    "item {} has {} fields, model expects {}",
                    item.id,
                    item.fields.len(),
                    config.item_fields
                )));
            }
        }
    }
    Ok(())
}

/// Two-layer perceptron with tanh hidden activation producing a scalar.
pub fn mlp_scalar(tape: &mut Tape, ids: &MlpIds, input: VarId) -> VarId {
    let w1 = tape.param(ids.w1);
    let b1 = tape.param(ids.b1);
    let w2 = tape.param(ids.w2);
    let b2 = tape.param(ids.b2);
    let pre = tape.matvec(w1, input);
    let pre = tape.add(pre, b1);
    let act = tape.tanh(pre);
    let out = tape.matvec(w2, act);
    tape.add(out, b2)
}

/// Everything a teacher-forced forward pass produces for one session, in
/// row-major node order. Attention and comparison weights are recorded for
/// inspection and tests.
pub struct SessionForward {
    pub nodes: Vec<NodeId>,
    pub probs: Vec<VarId>,
    pub labels: Vec<u8>,
    pub orientations: Vec<Orientation>,
    pub states: Vec<VarId>,
    pub alphas: Vec<Option<Vec<f64>>>,
    pub gammas: Vec<Option<Vec<f64>>>,
}

impl SessionForward {
    pub fn prob_values(&self, tape: &Tape) -> Vec<f64> {
        self.probs.iter().map(|&p| tape.scalar_value(p)).collect()
    }
}

/// Common surface of FSCM and the baseline chain models: the trainer and
/// the evaluator only need a teacher-forced forward pass.
pub trait ClickModel: Send + Sync {
    fn config(&self) -> &ModelConfig;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn forward<'p>(&'p self, tape: &mut Tape<'p>, session: &Session)
        -> Result<SessionForward, ModelError>;
}

/// Sum of per-item binary cross-entropies for one session.
pub fn session_loss(tape: &mut Tape, fwd: &SessionForward) -> VarId {
    let mut total: Option<VarId> = None;
    for (&p, &label) in fwd.probs.iter().zip(&fwd.labels) {
        let term = tape.bce(p, label as f64);
        total = Some(match total {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    total.expect("session has no items")
}

fn gru_unit_names(ablation: &AblationFlags) -> Vec<&'static str> {
    let mut names = Vec::new();
    for orientation in [Orientation::Vertical, Orientation::Horizontal] {
        for merge in [MergeStatus::Tandem, MergeStatus::Merge] {
            let name = unit_name(NodeClass { orientation, merge }, ablation);
            if !names.contains(&name) {
                names.push(name);
            }
        }
    }
    names
}

/// Canonical unit for a node class after ablation aliasing.
fn unit_name(class: NodeClass, ablation: &AblationFlags) -> &'static str {
    let orientation =
        if ablation.share_hv { Orientation::Vertical } else { class.orientation };
    let merge = if ablation.share_tm { MergeStatus::Tandem } else { class.merge };
    match (orientation, merge) {
        (Orientation::Vertical, MergeStatus::Tandem) => "gru.v_tandem",
        (Orientation::Vertical, MergeStatus::Merge) => "gru.v_merge",
        (Orientation::Horizontal, MergeStatus::Tandem) => "gru.h_tandem",
        (Orientation::Horizontal, MergeStatus::Merge) => "gru.h_merge",
    }
}

struct FscmIndex {
    embeddings: EmbeddingIds,
    units: HashMap<&'static str, GruParamIds>,
    attention: MlpIds,
    comparison_mlp: Option<MlpIds>,
    comparison_kernel: Option<usize>,
    combiner_w: Option<usize>,
    combiner_b: Option<usize>,
    output: MlpIds,
}

pub struct FscmModel {
    config: ModelConfig,
    params: ParamSet,
    index: FscmIndex,
}

impl FscmModel {
    /// Fresh model with seeded initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        assert_eq!(config.kind, ModelKind::Fscm, "FscmModel needs kind = fscm");
        let mut params = ParamSet::new();
        let mut init = ParamInit::new(seed);

        let embeddings = init.embeddings(&mut params, &config);

        let mut units = HashMap::new();
        for name in gru_unit_names(&config.ablation) {
            units.insert(name, init.gru(&mut params, name, config.input_dim(), config.hidden));
        }

        let attention = init.mlp(&mut params, "attn", config.hidden, config.hidden);

        let (comparison_mlp, comparison_kernel, combiner_w, combiner_b) =
            if config.ablation.no_comparison {
                (None, None, None, None)
            } else {
                let mlp = match config.comparison {
                    ComparisonKind::Neural => {
                        Some(init.mlp(&mut params, "cmp", 2 * config.item_dim(), config.hidden))
                    }
                    _ => None,
                };
                let kernel = match config.comparison {
                    ComparisonKind::Kernel => Some(init.matrix(
                        &mut params,
                        "cmp.kernel",
                        config.item_dim(),
                        config.item_dim(),
                    )),
                    _ => None,
                };
                let w = init.matrix(&mut params, "cmb.w", config.item_dim(), config.query_dim());
                let b = init.bias(&mut params, "cmb.b", config.item_dim());
                (mlp, kernel, Some(w), Some(b))
            };

        let output =
            init.mlp(&mut params, "out", config.hidden + config.item_dim(), config.hidden);

        let index = FscmIndex {
            embeddings,
            units,
            attention,
            comparison_mlp,
            comparison_kernel,
            combiner_w,
            combiner_b,
            output,
        };
        FscmModel { config, params, index }
    }

    /// Rebuild a model around externally loaded parameters (checkpoint
    /// restore). The parameter set must match `FscmModel::new`'s layout.
    pub fn with_params(config: ModelConfig, params: ParamSet) -> Self {
        let template = FscmModel::new(config, 0);
        assert_eq!(template.params.len(), params.len(), "parameter count mismatch");
        for (a, b) in template.params.entries().iter().zip(params.entries()) {
            assert_eq!(a.name, b.name, "parameter name mismatch");
            assert_eq!(a.value.shape(), b.value.shape(), "parameter shape mismatch for {}", a.name);
        }
        FscmModel { config: template.config, params, index: template.index }
    }

    pub fn unit_param_indices(&self, class: NodeClass) -> Vec<usize> {
        let ids = self.index.units[unit_name(class, &self.config.ablation)];
        vec![
            ids.w_z, ids.u_z, ids.b_z, ids.w_r, ids.u_r, ids.b_r, ids.w_h, ids.u_h, ids.b_h,
        ]
    }

    /// Node input x: [query ++ item ++ click-of-previous] embeddings.
    pub fn node_input(
        &self,
        tape: &mut Tape,
        session: &Session,
        node: NodeId,
        prev: ClickInput,
    ) -> VarId {
        let emb = &self.index.embeddings;
        let v_q = emb.lookup(tape, &emb.query_tables, &session.query.fields, self.config.query_vocab);
        let v_i = emb.lookup(tape, &emb.item_tables, &session.item(node).fields, self.config.item_vocab);
        let v_c = emb.click_row(tape, prev);
        tape.concat(&[v_q, v_i, v_c])
    }

    /// Input state for a node: zero for sources, identity for tandem nodes,
    /// attention-weighted sum for merge nodes. The attention scorer sees
    /// each predecessor state alone, never the current item. Returns the
    /// state and the attention weights when attention was applied.
    pub fn aggregate_predecessors(
        &self,
        tape: &mut Tape,
        pred_states: &[VarId],
    ) -> (VarId, Option<Vec<f64>>) {
        match pred_states.len() {
            0 => (tape.zeros(self.config.hidden), None),
            1 => (pred_states[0], None),
            _ => {
                let scores: Vec<VarId> = pred_states
                    .iter()
                    .map(|&h| mlp_scalar(tape, &self.index.attention, h))
                    .collect();
                let logits = tape.stack_scalars(&scores);
                let weights = tape.softmax(logits);
                let alpha = tape.value(weights).to_vec();
                (tape.weighted_sum(weights, pred_states), Some(alpha))
            }
        }
    }

    fn comparison_score(&self, tape: &mut Tape, current: VarId, candidate: VarId) -> VarId {
        match self.config.comparison {
            ComparisonKind::Inner => tape.dot(current, candidate),
            ComparisonKind::Neural => {
                let joined = tape.concat(&[current, candidate]);
                mlp_scalar(tape, self.index.comparison_mlp.as_ref().unwrap(), joined)
            }
            ComparisonKind::Kernel => {
                let w = tape.param(self.index.comparison_kernel.unwrap());
                let wv = tape.matvec(w, candidate);
                tape.dot(current, wv)
            }
        }
    }

    /// Comparison context cp' for one node given the item embeddings of the
    /// whole page. Empty candidate sets yield a zero vector.
    fn comparison_context(
        &self,
        tape: &mut Tape,
        dag: &PageDag,
        node: NodeId,
        item_embs: &[VarId],
        combined_query: VarId,
    ) -> (VarId, Option<Vec<f64>>) {
        let neighbors = dag.neighbors(node);
        if neighbors.is_empty() {
            return (tape.zeros(self.config.item_dim()), None);
        }
        let current = item_embs[dag.node_index(node)];
        let scores: Vec<VarId> = neighbors
            .iter()
            .map(|&nb| self.comparison_score(tape, current, item_embs[dag.node_index(nb)]))
            .collect();
        let logits = tape.stack_scalars(&scores);
        let weights = tape.softmax(logits);
        let gamma = tape.value(weights).to_vec();
        let neighbor_embs: Vec<VarId> =
            neighbors.iter().map(|&nb| item_embs[dag.node_index(nb)]).collect();
        let cp = tape.weighted_sum(weights, &neighbor_embs);
        let ci = tape.mul(cp, current);
        (tape.mul(ci, combined_query), Some(gamma))
    }

}

impl ClickModel for FscmModel {
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
        let dag = PageDag::build(&layout, !self.config.ablation.no_skip_edges);
        let emb = &self.index.embeddings;

        let v_q = emb.lookup(tape, &emb.query_tables, &session.query.fields, self.config.query_vocab);
        let combined_query = match (self.index.combiner_w, self.index.combiner_b) {
            (Some(w), Some(b)) => {
                let w = tape.param(w);
                let b = tape.param(b);
                let mapped = tape.matvec(w, v_q);
                Some(tape.add(mapped, b))
            }
            _ => None,
        };

        let topo = dag.topo_order().to_vec();
        let item_embs: Vec<VarId> = topo
            .iter()
            .map(|&node| {
                emb.lookup(tape, &emb.item_tables, &session.item(node).fields, self.config.item_vocab)
            })
            .collect();

        // Sequential pass in topological order. Teacher forcing: the click
        // input of a node is the ground-truth label of its row-major
        // predecessor.
        let mut states: Vec<VarId> = Vec::with_capacity(topo.len());
        let mut alphas: Vec<Option<Vec<f64>>> = Vec::with_capacity(topo.len());
        for (idx, &node) in topo.iter().enumerate() {
            let prev = if idx == 0 {
                ClickInput::Start
            } else {
                ClickInput::Label(session.click(topo[idx - 1]))
            };
            let x = gru_unit_input(tape, emb, v_q, item_embs[idx], prev);

            let pred_states: Vec<VarId> = dag
                .predecessors(node)
                .iter()
                .map(|&p| states[dag.node_index(p)])
                .collect();
            let (h, alpha) = self.aggregate_predecessors(tape, &pred_states);
            alphas.push(alpha);

            let unit = self.index.units[unit_name(dag.class(node), &self.config.ablation)];
            let weights = unit.bind(tape);
            states.push(gru_cell(tape, &weights, x, h));
        }

        let mut probs = Vec::with_capacity(topo.len());
        let mut gammas = Vec::with_capacity(topo.len());
        for (idx, &node) in topo.iter().enumerate() {
            let (cp, gamma) = if self.config.ablation.no_comparison {
                (tape.zeros(self.config.item_dim()), None)
            } else {
                self.comparison_context(tape, &dag, node, &item_embs, combined_query.unwrap())
            };
            gammas.push(gamma);
            let joined = tape.concat(&[states[idx], cp]);
            let logit = mlp_scalar(tape, &self.index.output, joined);
            probs.push(tape.sigmoid(logit));
        }

        Ok(SessionForward {
            labels: topo.iter().map(|&n| session.click(n)).collect(),
            orientations: topo.iter().map(|&n| layout.block(n.block).orientation).collect(),
            nodes: topo,
            probs,
            states,
            alphas,
            gammas,
        })
    }
}
