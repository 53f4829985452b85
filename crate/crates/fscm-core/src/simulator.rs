//! Synthetic F-shape browsing sessions with ground-truth behavior:
//! position decay inside blocks, block skips, comparison revisits and
//! examination-gated clicks, plus detectors for the resulting statistics.
//!
//! The generative walk moves over the page's examination DAG. Within a
//! block the user continues with a position-decaying probability; at a
//! vertical exit she may take the block-skip edge; horizontal blocks are
//! entered with a probability scaled by a per-session engagement level.
//! After every examination a comparison may revisit the most attractive
//! already-examined neighbor, which boosts the winner's click odds. Clicks
//! only ever land on examined items.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Query, Session, SessionBlock, SessionItem};
use crate::numkit::sigmoid;
use crate::page_dag::{NodeId, Orientation, PageDag, PageLayout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutChoice {
    pub layout: String,
    pub weight: f64,
}

/// One mode of the per-session engagement mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngagementLevel {
    pub weight: f64,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Weighted page layouts, as compact specs like "v6,h8,v6".
    pub layouts: Vec<LayoutChoice>,
    pub query_universe: u32,
    pub item_universe: u32,
    pub query_fields: usize,
    pub item_fields: usize,
    /// Within-block continuation base per orientation; the probability of
    /// moving from position j to j+1 is `gamma^j * engagement`, so deeper
    /// positions are examined less.
    pub gamma_v: f64,
    pub gamma_h: f64,
    /// Probability of taking the block-skip edge at a vertical-block exit.
    pub p_skip: f64,
    /// Probability of entering a horizontal block (scaled by engagement).
    pub p_enter_h: f64,
    /// Probability of entering a vertical block outside of skip landings.
    pub p_enter_v: f64,
    /// Probability of a comparison revisit after an examination.
    pub p_cmp: f64,
    /// Attractiveness multiplier for the winner of a comparison.
    pub cmp_boost: f64,
    /// Presentation bias: click propensity multiplier for items in
    /// horizontal blocks (vertical cards draw more clicks at equal
    /// attractiveness).
    pub h_click_scale: f64,
    /// Per-session engagement mixture (e.g. skimmers vs. readers), with a
    /// uniform jitter around the drawn level. Engagement scales
    /// continuation, horizontal entry and click propensity.
    pub engagement_levels: Vec<EngagementLevel>,
    pub engagement_jitter: f64,
    /// Multiplier applied to engagement after every click: clicking users
    /// keep browsing and keep clicking, so earlier clicks predict later
    /// ones across blocks.
    pub click_persist: f64,
    pub engagement_cap: f64,
    /// Attractiveness model: sigmoid(bias + w_item * u_item + w_pair * u_pair)
    /// with hash-derived u values in [-1, 1).
    pub attract_bias: f64,
    pub attract_item_weight: f64,
    pub attract_pair_weight: f64,
    pub click_cap: f64,
    /// Seed of the latent relevance model (independent of the walk rng).
    pub attract_seed: u64,
}

impl SimConfig {
    /// Shipped defaults, calibrated so that 50k-session statistics land in
    /// the documented windows: ~0.9 of skips have length 2, vertical-to-
    /// vertical pairs dominate them, comparison triplets lead the
    /// non-sequential categories and within-block examination decays.
    pub fn calibrated() -> Self {
        SimConfig {
            layouts: vec![
                LayoutChoice { layout: "v6,h8,v6".into(), weight: 0.25 },
                LayoutChoice { layout: "v6,h8,v6,h8".into(), weight: 0.30 },
                LayoutChoice { layout: "v6,h8,v6,h8,v6".into(), weight: 0.45 },
            ],
            query_universe: 500,
            item_universe: 200,
            query_fields: 2,
            item_fields: 2,
            gamma_v: 0.93,
            gamma_h: 0.78,
            p_skip: 0.20,
            p_enter_h: 0.55,
            p_enter_v: 0.70,
            p_cmp: 0.40,
            cmp_boost: 3.2,
            h_click_scale: 0.65,
            engagement_levels: vec![
                EngagementLevel { weight: 0.55, level: 0.5 },
                EngagementLevel { weight: 0.45, level: 1.55 },
            ],
            engagement_jitter: 0.15,
            click_persist: 1.6,
            engagement_cap: 4.0,
            attract_bias: -2.6,
            attract_item_weight: 1.0,
            attract_pair_weight: 0.5,
            click_cap: 0.98,
            attract_seed: 90210,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::BadConfig(m));
        if self.layouts.is_empty() {
            return bad("no layouts configured".into());
        }
        for choice in &self.layouts {
            PageLayout::parse(&choice.layout)
                .map_err(|e| SimError::BadConfig(format!("layout {:?}: {e}", choice.layout)))?;
            if choice.weight <= 0.0 {
                return bad(format!("layout {:?} has non-positive weight", choice.layout));
            }
        }
        for (name, p) in [
            ("p_skip", self.p_skip),
            ("p_enter_h", self.p_enter_h),
            ("p_enter_v", self.p_enter_v),
            ("p_cmp", self.p_cmp),
            ("click_cap", self.click_cap),
            ("h_click_scale", self.h_click_scale),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        for (name, g) in [("gamma_v", self.gamma_v), ("gamma_h", self.gamma_h)] {
            if !(g > 0.0 && g <= 1.0) {
                return bad(format!("{name} = {g} outside (0, 1]"));
            }
        }
        if self.engagement_levels.is_empty() {
            return bad("no engagement levels configured".into());
        }
        for lvl in &self.engagement_levels {
            if lvl.weight <= 0.0 || lvl.level <= 0.0 {
                return bad(format!("engagement level {lvl:?} must have positive weight and level"));
            }
            if lvl.level + self.engagement_jitter > self.engagement_cap {
                return bad("engagement_cap must cover every level plus jitter".into());
            }
        }
        if self.engagement_jitter < 0.0 || self.click_persist < 0.0 {
            return bad("engagement_jitter and click_persist must be non-negative".into());
        }
        if self.query_universe == 0 || self.item_universe == 0 {
            return bad("universes must be non-empty".into());
        }
        if self.query_fields == 0 || self.item_fields == 0 {
            return bad("field counts must be at least 1".into());
        }
        Ok(())
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig::calibrated()
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    BadConfig(String),
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_chain(parts: &[u64]) -> u64 {
    let mut h = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

/// Uniform value in [-1, 1) from a hash.
fn signed_unit(h: u64) -> f64 {
    ((h >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
}

/// Latent attractiveness of item `item_id` under query `query_id`,
/// deterministic in the relevance seed.
pub fn attractiveness(cfg: &SimConfig, query_id: u64, item_id: u64) -> f64 {
    let u_item = signed_unit(hash_chain(&[cfg.attract_seed, 1, item_id]));
    let u_pair = signed_unit(hash_chain(&[cfg.attract_seed, 2, query_id, item_id]));
    sigmoid(
        cfg.attract_bias
            + cfg.attract_item_weight * u_item
            + cfg.attract_pair_weight * u_pair,
    )
}

/// Feature-field vector of a query: field 0 is the id itself, further
/// fields are deterministic hashes into the same vocabulary.
pub fn query_fields(cfg: &SimConfig, query_id: u64) -> Vec<u32> {
    (0..cfg.query_fields)
        .map(|f| {
            if f == 0 {
                query_id as u32
            } else {
                (hash_chain(&[cfg.attract_seed, 3, query_id, f as u64])
                    % cfg.query_universe as u64) as u32
            }
        })
        .collect()
}

pub fn item_fields(cfg: &SimConfig, item_id: u64) -> Vec<u32> {
    (0..cfg.item_fields)
        .map(|f| {
            if f == 0 {
                item_id as u32
            } else {
                (hash_chain(&[cfg.attract_seed, 4, item_id, f as u64])
                    % cfg.item_universe as u64) as u32
            }
        })
        .collect()
}

fn pick_layout(cfg: &SimConfig, rng: &mut ChaCha20Rng) -> PageLayout {
    let total: f64 = cfg.layouts.iter().map(|c| c.weight).sum();
    let mut draw = rng.gen_range(0.0..total);
    for choice in &cfg.layouts {
        if draw < choice.weight {
            return PageLayout::parse(&choice.layout).expect("validated layout");
        }
        draw -= choice.weight;
    }
    PageLayout::parse(&cfg.layouts.last().unwrap().layout).expect("validated layout")
}

/// Distinct item ids for the page slots.
fn pick_items(cfg: &SimConfig, rng: &mut ChaCha20Rng, slots: usize) -> Vec<u64> {
    let universe = cfg.item_universe as u64;
    if (slots as u64) >= universe {
        // Tiny universes: allow repeats rather than failing.
        return (0..slots).map(|_| rng.gen_range(0..universe)).collect();
    }
    let mut chosen = Vec::with_capacity(slots);
    let mut seen = HashSet::new();
    while chosen.len() < slots {
        let id = rng.gen_range(0..universe);
        if seen.insert(id) {
            chosen.push(id);
        }
    }
    chosen
}

struct Walk<'a> {
    cfg: &'a SimConfig,
    dag: &'a PageDag,
    attract: &'a [f64],
    base_engagement: f64,
    trace: Vec<NodeId>,
    examined: HashSet<NodeId>,
    clicked: HashSet<NodeId>,
}

impl<'a> Walk<'a> {
    fn clamp01(p: f64) -> f64 {
        p.clamp(0.0, 1.0)
    }

    /// Current engagement: the session's base level, raised by every click
    /// so far. Clicking users persist; this is what links click behavior
    /// across blocks.
    fn engagement(&self) -> f64 {
        (self.base_engagement * self.cfg.click_persist.powi(self.clicked.len() as i32))
            .min(self.cfg.engagement_cap)
    }

    fn attract_of(&self, node: NodeId) -> f64 {
        self.attract[self.dag.node_index(node)]
    }

    fn roll_click(&mut self, rng: &mut ChaCha20Rng, node: NodeId, boost: f64) {
        if self.clicked.contains(&node) {
            return;
        }
        let presentation = match self.dag.layout().block(node.block).orientation {
            Orientation::Vertical => 1.0,
            Orientation::Horizontal => self.cfg.h_click_scale,
        };
        let p = (self.attract_of(node) * boost * presentation * self.engagement())
            .clamp(0.0, self.cfg.click_cap);
        if rng.gen_bool(p) {
            self.clicked.insert(node);
        }
    }

    /// Examine one item: record it, roll a click, then maybe run one
    /// comparison revisit against the best already-examined neighbor.
    fn examine(&mut self, rng: &mut ChaCha20Rng, node: NodeId) {
        debug_assert!(self.trace.last() != Some(&node), "consecutive duplicate examination");
        self.trace.push(node);
        self.examined.insert(node);
        self.roll_click(rng, node, 1.0);

        if self.cfg.p_cmp > 0.0 && rng.gen_bool(Self::clamp01(self.cfg.p_cmp)) {
            let candidate = self
                .dag
                .neighbors(node)
                .into_iter()
                .filter(|n| self.examined.contains(n))
                .max_by(|a, b| {
                    self.attract_of(*a)
                        .partial_cmp(&self.attract_of(*b))
                        .expect("finite attractiveness")
                });
            if let Some(other) = candidate {
                // Attention bounces other -> node, leaving an A-B-A shape.
                self.trace.push(other);
                self.trace.push(node);
                let winner = if self.attract_of(other) > self.attract_of(node) {
                    other
                } else {
                    node
                };
                self.roll_click(rng, winner, self.cfg.cmp_boost);
            }
        }
    }

    /// Walk positions of block `t` starting at its first item. Returns the
    /// last examined position.
    fn walk_block(&mut self, rng: &mut ChaCha20Rng, t: usize) -> usize {
        let block = self.dag.layout().block(t);
        let gamma = match block.orientation {
            Orientation::Vertical => self.cfg.gamma_v,
            Orientation::Horizontal => self.cfg.gamma_h,
        };
        let mut j = 1;
        loop {
            self.examine(rng, NodeId::new(t, j));
            if j == block.item_count {
                return j;
            }
            let next = Self::clamp01(gamma.powi(j as i32) * self.engagement());
            if !rng.gen_bool(next) {
                return j;
            }
            j += 1;
        }
    }

    fn run(&mut self, rng: &mut ChaCha20Rng) {
        let layout = self.dag.layout().clone();
        let n = layout.num_blocks();
        let mut t = 1;
        let mut forced_entry = false;
        while t <= n {
            let orientation = layout.block(t).orientation;
            // Entries follow the session's base engagement; the click-driven
            // boost acts on continuation and click propensity instead.
            let enter = forced_entry
                || match orientation {
                    Orientation::Vertical => rng.gen_bool(Self::clamp01(self.cfg.p_enter_v)),
                    Orientation::Horizontal => {
                        rng.gen_bool(Self::clamp01(self.cfg.p_enter_h * self.base_engagement))
                    }
                };
            forced_entry = false;
            if !enter {
                t += 1;
                continue;
            }
            self.walk_block(rng, t);
            // Vertical exits may take the block-skip edge, landing directly
            // on the entry of the vertical block two ahead.
            if orientation == Orientation::Vertical
                && t + 2 <= n
                && layout.block(t + 2).orientation == Orientation::Vertical
                && rng.gen_bool(Self::clamp01(self.cfg.p_skip))
            {
                t += 2;
                forced_entry = true;
            } else {
                t += 1;
            }
        }
    }
}

fn session_rng(master_seed: u64, session_id: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(hash_chain(&[master_seed, 5, session_id]))
}

fn sample_engagement(cfg: &SimConfig, rng: &mut ChaCha20Rng) -> f64 {
    let total: f64 = cfg.engagement_levels.iter().map(|l| l.weight).sum();
    let mut draw = rng.gen_range(0.0..total);
    let mut level = cfg.engagement_levels.last().unwrap().level;
    for choice in &cfg.engagement_levels {
        if draw < choice.weight {
            level = choice.level;
            break;
        }
        draw -= choice.weight;
    }
    let jitter = if cfg.engagement_jitter > 0.0 {
        rng.gen_range(-cfg.engagement_jitter..=cfg.engagement_jitter)
    } else {
        0.0
    };
    (level + jitter).max(0.05)
}

/// Generate one session. Each session derives its own rng stream from the
/// master seed and its index, so generation parallelizes without changing
/// output.
pub fn simulate_session(cfg: &SimConfig, master_seed: u64, session_id: u64) -> Session {
    let mut rng = session_rng(master_seed, session_id);
    let layout = pick_layout(cfg, &mut rng);
    let dag = PageDag::build(&layout, true);

    let query_id = rng.gen_range(0..cfg.query_universe as u64);
    let engagement = sample_engagement(cfg, &mut rng);
    let item_ids = pick_items(cfg, &mut rng, layout.num_items());
    let attract: Vec<f64> =
        item_ids.iter().map(|&id| attractiveness(cfg, query_id, id)).collect();

    let mut walk = Walk {
        cfg,
        dag: &dag,
        attract: &attract,
        base_engagement: engagement,
        trace: Vec::new(),
        examined: HashSet::new(),
        clicked: HashSet::new(),
    };
    walk.run(&mut rng);

    let mut blocks = Vec::with_capacity(layout.num_blocks());
    let mut slot = 0;
    for (i, spec) in layout.blocks().iter().enumerate() {
        let mut items = Vec::with_capacity(spec.item_count);
        for j in 1..=spec.item_count {
            let node = NodeId::new(i + 1, j);
            items.push(SessionItem {
                id: item_ids[slot],
                fields: item_fields(cfg, item_ids[slot]),
                click: u8::from(walk.clicked.contains(&node)),
            });
            slot += 1;
        }
        blocks.push(SessionBlock { orientation: spec.orientation, items });
    }

    Session {
        session_id,
        query: Query { id: query_id, fields: query_fields(cfg, query_id) },
        blocks,
        trace: Some(walk.trace.iter().map(|n| (n.block, n.pos)).collect()),
    }
}

/// Generate `count` sessions in parallel; output is independent of the
/// thread count because every session has its own derived rng stream.
pub fn simulate_dataset(cfg: &SimConfig, master_seed: u64, count: usize) -> Vec<Session> {
    (0..count as u64)
        .into_par_iter()
        .map(|id| simulate_session(cfg, master_seed, id))
        .collect()
}

/// A session's examination sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExamTrace {
    pub steps: Vec<NodeId>,
}

impl ExamTrace {
    pub fn from_session(session: &Session) -> Option<ExamTrace> {
        session.trace.as_ref().map(|t| ExamTrace {
            steps: t.iter().map(|&(b, p)| NodeId::new(b, p)).collect(),
        })
    }
}

/// Histogram of block-skip transitions keyed by (length, source position,
/// destination position).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SkipHistogram {
    pub counts: BTreeMap<(usize, usize, usize), u64>,
}

impl SkipHistogram {
    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn by_length(&self) -> BTreeMap<usize, u64> {
        let mut out = BTreeMap::new();
        for (&(l, _, _), &c) in &self.counts {
            *out.entry(l).or_insert(0) += c;
        }
        out
    }

    pub fn length_share(&self, l: usize) -> Option<f64> {
        let total = self.total();
        if total == 0 {
            return None;
        }
        Some(*self.by_length().get(&l).unwrap_or(&0) as f64 / total as f64)
    }
}

/// Count consecutive pairs with t2 - t1 >= 2 (an l-length block skip).
pub fn detect_block_skips(trace: &[NodeId]) -> SkipHistogram {
    let mut hist = SkipHistogram::default();
    for w in trace.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b.block >= a.block + 2 {
            *hist.counts.entry((b.block - a.block, a.pos, b.pos)).or_insert(0) += 1;
        }
    }
    hist
}

/// The eight relative orderings of three consecutive examinations. `A`,
/// `B`, `C` name the first, second and third item in sequential
/// (row-major) order; comparisons are the two patterns with E_k = E_{k+2}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TripletKind {
    Abc,
    Bab,
    Aba,
    Cba,
    Bac,
    Acb,
    Bca,
    Cab,
}

pub const TRIPLET_KINDS: [TripletKind; 8] = [
    TripletKind::Abc,
    TripletKind::Bab,
    TripletKind::Aba,
    TripletKind::Cba,
    TripletKind::Bac,
    TripletKind::Acb,
    TripletKind::Bca,
    TripletKind::Cab,
];

impl TripletKind {
    pub fn label(self) -> &'static str {
        match self {
            TripletKind::Abc => "ABC",
            TripletKind::Bab => "BAB",
            TripletKind::Aba => "ABA",
            TripletKind::Cba => "CBA",
            TripletKind::Bac => "BAC",
            TripletKind::Acb => "ACB",
            TripletKind::Bca => "BCA",
            TripletKind::Cab => "CAB",
        }
    }

    pub fn is_sequential(self) -> bool {
        self == TripletKind::Abc
    }

    pub fn is_comparison(self) -> bool {
        matches!(self, TripletKind::Aba | TripletKind::Bab)
    }
}

fn seq_lt(a: NodeId, b: NodeId) -> bool {
    a.block < b.block || (a.block == b.block && a.pos < b.pos)
}

/// Classify one window of three consecutive examinations. Equal first and
/// third entries are comparisons; otherwise all three are distinct (the
/// trace never repeats consecutively) and the window is one of the six
/// permutations.
pub fn classify_triplet(x: NodeId, y: NodeId, z: NodeId) -> TripletKind {
    if x == z {
        return if seq_lt(x, y) { TripletKind::Aba } else { TripletKind::Bab };
    }
    let rank = |n: NodeId| -> usize {
        [x, y, z].iter().filter(|&&m| seq_lt(m, n)).count()
    };
    match (rank(x), rank(y), rank(z)) {
        (0, 1, 2) => TripletKind::Abc,
        (2, 1, 0) => TripletKind::Cba,
        (1, 0, 2) => TripletKind::Bac,
        (0, 2, 1) => TripletKind::Acb,
        (1, 2, 0) => TripletKind::Bca,
        (2, 0, 1) => TripletKind::Cab,
        other => unreachable!("impossible rank pattern {other:?}"),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripletCounts {
    pub counts: BTreeMap<TripletKind, u64>,
}

impl TripletCounts {
    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn count(&self, kind: TripletKind) -> u64 {
        *self.counts.get(&kind).unwrap_or(&0)
    }

    /// Frequencies over all windows; sums to 1 for non-empty counts.
    pub fn frequencies(&self) -> BTreeMap<TripletKind, f64> {
        let total = self.total();
        TRIPLET_KINDS
            .iter()
            .map(|&k| {
                let f = if total == 0 { 0.0 } else { self.count(k) as f64 / total as f64 };
                (k, f)
            })
            .collect()
    }

    pub fn merge(&mut self, other: &TripletCounts) {
        for (&k, &c) in &other.counts {
            *self.counts.entry(k).or_insert(0) += c;
        }
    }
}

/// Classify every window of three consecutive examinations. Traces shorter
/// than 3 produce empty counts.
pub fn detect_triplets(trace: &[NodeId]) -> TripletCounts {
    let mut counts = TripletCounts::default();
    for w in trace.windows(3) {
        *counts.counts.entry(classify_triplet(w[0], w[1], w[2])).or_insert(0) += 1;
    }
    counts
}

/// Aggregate behavior statistics over generated sessions; the quantities
/// the calibration windows are written against.
#[derive(Debug, Clone)]
pub struct BehaviorStats {
    pub sessions: usize,
    pub skips: SkipHistogram,
    /// Share of all skips that have length 2.
    pub skip_len2_share: Option<f64>,
    /// Share of length-2 skips that connect two vertical blocks.
    pub vv_share_of_len2: Option<f64>,
    pub triplets: TripletCounts,
    /// Examined fraction per within-block position (index 0 = position 1),
    /// per orientation; denominators count block instances reaching that
    /// position.
    pub examined_fraction_v: Vec<f64>,
    pub examined_fraction_h: Vec<f64>,
    pub clicks_per_session_v: f64,
    pub clicks_per_session_h: f64,
}

pub fn behavior_stats(sessions: &[Session]) -> BehaviorStats {
    let mut skips = SkipHistogram::default();
    let mut triplets = TripletCounts::default();
    let mut vv2 = 0u64;
    let mut len2 = 0u64;
    let mut examined_num: [Vec<u64>; 2] = [Vec::new(), Vec::new()];
    let mut examined_den: [Vec<u64>; 2] = [Vec::new(), Vec::new()];
    let mut clicks_v = 0usize;
    let mut clicks_h = 0usize;

    for session in sessions {
        let layout = session.layout().expect("valid session");
        let trace = ExamTrace::from_session(session).expect("simulator sessions carry traces");

        let hist = detect_block_skips(&trace.steps);
        for (&(l, j1, j2), &c) in &hist.counts {
            *skips.counts.entry((l, j1, j2)).or_insert(0) += c;
        }
        for w in trace.steps.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b.block == a.block + 2 {
                len2 += 1;
                let va = layout.block(a.block).orientation == Orientation::Vertical;
                let vb = layout.block(b.block).orientation == Orientation::Vertical;
                if va && vb {
                    vv2 += 1;
                }
            }
        }
        triplets.merge(&detect_triplets(&trace.steps));

        let examined: HashSet<NodeId> = trace.steps.iter().copied().collect();
        for (i, spec) in layout.blocks().iter().enumerate() {
            let o = match spec.orientation {
                Orientation::Vertical => 0,
                Orientation::Horizontal => 1,
            };
            if examined_den[o].len() < spec.item_count {
                examined_den[o].resize(spec.item_count, 0);
                examined_num[o].resize(spec.item_count, 0);
            }
            for j in 1..=spec.item_count {
                examined_den[o][j - 1] += 1;
                if examined.contains(&NodeId::new(i + 1, j)) {
                    examined_num[o][j - 1] += 1;
                }
            }
        }

        for block in &session.blocks {
            let clicks = block.items.iter().filter(|it| it.click == 1).count();
            match block.orientation {
                Orientation::Vertical => clicks_v += clicks,
                Orientation::Horizontal => clicks_h += clicks,
            }
        }
    }

    let fraction = |num: &[u64], den: &[u64]| -> Vec<f64> {
        num.iter().zip(den).map(|(&n, &d)| if d == 0 { 0.0 } else { n as f64 / d as f64 }).collect()
    };

    BehaviorStats {
        sessions: sessions.len(),
        skip_len2_share: skips.length_share(2),
        vv_share_of_len2: if len2 == 0 { None } else { Some(vv2 as f64 / len2 as f64) },
        skips,
        triplets,
        examined_fraction_v: fraction(&examined_num[0], &examined_den[0]),
        examined_fraction_h: fraction(&examined_num[1], &examined_den[1]),
        clicks_per_session_v: clicks_v as f64 / sessions.len().max(1) as f64,
        clicks_per_session_h: clicks_h as f64 / sessions.len().max(1) as f64,
    }
}

impl BehaviorStats {
    /// The two most frequent non-sequential triplet categories.
    pub fn top_two_non_sequential(&self) -> [TripletKind; 2] {
        let mut non_seq: Vec<(TripletKind, u64)> = TRIPLET_KINDS
            .iter()
            .filter(|k| !k.is_sequential())
            .map(|&k| (k, self.triplets.count(k)))
            .collect();
        // Stable order on ties: keep the canonical kind order.
        non_seq.sort_by(|a, b| b.1.cmp(&a.1));
        [non_seq[0].0, non_seq[1].0]
    }

    pub fn strictly_decreasing_examination(&self, orientation: Orientation) -> bool {
        let fractions = match orientation {
            Orientation::Vertical => &self.examined_fraction_v,
            Orientation::Horizontal => &self.examined_fraction_h,
        };
        fractions.windows(2).all(|w| w[1] < w[0])
    }
}
