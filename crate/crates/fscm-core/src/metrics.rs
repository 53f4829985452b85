//! Evaluation: mean per-item log-likelihood and rank-sum AUC, overall and
//! split by block orientation. Perplexity is deliberately not implemented;
//! with uneven block lengths it overweights sparsely populated low-ranked
//! positions.

use serde::{Deserialize, Serialize};

use crate::data::Session;
use crate::model::{ClickModel, ModelError};
use crate::numkit::{Tape, PROB_CLAMP};
use crate::page_dag::Orientation;

/// Scores of one item split. `ll`/`auc` are absent when the split is empty
/// or single-class rather than reported as zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub ll: Option<f64>,
    pub auc: Option<f64>,
    pub items: usize,
    pub clicks: usize,
}

/// Evaluation results in the Vertical / Horizontal / Overall reporting
/// scheme. AUC is pooled globally over items, not averaged per session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc_pooling: String,
    pub vertical: SplitScores,
    pub horizontal: SplitScores,
    pub overall: SplitScores,
}

/// Mean of `c ln p + (1-c) ln(1-p)` over the split, probabilities clamped
/// like the training loss. `None` on an empty split.
pub fn log_likelihood(predictions: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(predictions.len(), labels.len(), "predictions and labels differ in length");
    if predictions.is_empty() {
        return None;
    }
    Some(ll_sum(predictions, labels) / predictions.len() as f64)
}

fn ll_sum(predictions: &[f64], labels: &[u8]) -> f64 {
    predictions
        .iter()
        .zip(labels)
        .map(|(&p, &c)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if c == 1 {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum()
}

/// Probability that a random positive outranks a random negative, ties
/// counted half, computed from rank sums. `None` when a class is missing.
pub fn auc(predictions: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(predictions.len(), labels.len(), "predictions and labels differ in length");
    let positives = labels.iter().filter(|&&c| c == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }

    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| predictions[a].partial_cmp(&predictions[b]).expect("NaN prediction"));

    // Average ranks across tie groups, then sum ranks of positives.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && predictions[order[j + 1]] == predictions[order[i]] {
            j += 1;
        }
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += rank;
            }
        }
        i = j + 1;
    }

    let np = positives as f64;
    let nn = negatives as f64;
    Some((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Per-item predictions with labels and orientations, pooled over sessions.
#[derive(Debug, Default, Clone)]
pub struct PooledPredictions {
    pub predictions: Vec<f64>,
    pub labels: Vec<u8>,
    pub orientations: Vec<Orientation>,
}

impl PooledPredictions {
    pub fn push_session(
        &mut self,
        predictions: &[f64],
        labels: &[u8],
        orientations: &[Orientation],
    ) {
        self.predictions.extend_from_slice(predictions);
        self.labels.extend_from_slice(labels);
        self.orientations.extend_from_slice(orientations);
    }

    fn split(&self, orientation: Orientation) -> (Vec<f64>, Vec<u8>) {
        let mut p = Vec::new();
        let mut l = Vec::new();
        for i in 0..self.predictions.len() {
            if self.orientations[i] == orientation {
                p.push(self.predictions[i]);
                l.push(self.labels[i]);
            }
        }
        (p, l)
    }

    /// Assemble the report. The overall log-likelihood is derived from the
    /// per-split sums, so it equals the item-weighted mean of the split
    /// values exactly.
    pub fn report(&self) -> EvalReport {
        let (vp, vl) = self.split(Orientation::Vertical);
        let (hp, hl) = self.split(Orientation::Horizontal);

        let v_sum = ll_sum(&vp, &vl);
        let h_sum = ll_sum(&hp, &hl);
        let total_items = vp.len() + hp.len();
        let overall_ll =
            if total_items == 0 { None } else { Some((v_sum + h_sum) / total_items as f64) };

        let score = |p: &[f64], l: &[u8], sum: f64| SplitScores {
            ll: if p.is_empty() { None } else { Some(sum / p.len() as f64) },
            auc: auc(p, l),
            items: p.len(),
            clicks: l.iter().filter(|&&c| c == 1).count(),
        };

        EvalReport {
            auc_pooling: "global".to_string(),
            vertical: score(&vp, &vl, v_sum),
            horizontal: score(&hp, &hl, h_sum),
            overall: SplitScores {
                ll: overall_ll,
                auc: auc(&self.predictions, &self.labels),
                items: total_items,
                clicks: self.labels.iter().filter(|&&c| c == 1).count(),
            },
        }
    }
}

/// Teacher-forced predictions for every session, pooled in session order.
pub fn pooled_predictions(
    model: &dyn ClickModel,
    sessions: &[Session],
) -> Result<PooledPredictions, ModelError> {
    // Fixed-size work chunks keep the reduction order identical for every
    // thread count.
    const CHUNK: usize = 8;
    let chunks: Result<Vec<PooledPredictions>, ModelError> = {
        use rayon::prelude::*;
        sessions
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut pooled = PooledPredictions::default();
                for session in chunk {
                    let mut tape = Tape::new(model.params());
                    let fwd = model.forward(&mut tape, session)?;
                    let probs = fwd.prob_values(&tape);
                    pooled.push_session(&probs, &fwd.labels, &fwd.orientations);
                }
                Ok(pooled)
            })
            .collect()
    };
    let mut pooled = PooledPredictions::default();
    for chunk in chunks? {
        pooled.push_session(&chunk.predictions, &chunk.labels, &chunk.orientations);
    }
    Ok(pooled)
}

pub fn evaluate(model: &dyn ClickModel, sessions: &[Session]) -> Result<EvalReport, ModelError> {
    Ok(pooled_predictions(model, sessions)?.report())
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:>10.4}"),
        None => format!("{:>10}", "n/a"),
    }
}

/// Aligned plain-text table with Vertical / Horizontal / Overall columns.
pub fn report_table(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<8} {:>10} {:>10} {:>10}\n",
        "", "Vertical", "Horizontal", "Overall"
    ));
    out.push_str(&format!(
        "{:<8} {} {} {}\n",
        "LL",
        fmt_opt(report.vertical.ll),
        fmt_opt(report.horizontal.ll),
        fmt_opt(report.overall.ll)
    ));
    out.push_str(&format!(
        "{:<8} {} {} {}\n",
        "AUC",
        fmt_opt(report.vertical.auc),
        fmt_opt(report.horizontal.auc),
        fmt_opt(report.overall.auc)
    ));
    out.push_str(&format!(
        "{:<8} {:>10} {:>10} {:>10}\n",
        "items", report.vertical.items, report.horizontal.items, report.overall.items
    ));
    out.push_str(&format!(
        "{:<8} {:>10} {:>10} {:>10}\n",
        "clicks", report.vertical.clicks, report.horizontal.clicks, report.overall.clicks
    ));
    out.push_str(&format!("(AUC pooling: {})\n", report.auc_pooling));
    out
}

/// CSV series for external plotting: per-orientation, per-position item
/// counts, click rates and mean predicted probability.
pub fn plot_data_csv(
    model: &dyn ClickModel,
    sessions: &[Session],
) -> Result<String, ModelError> {
    use std::collections::BTreeMap;
    let mut rows: BTreeMap<(char, usize), (usize, usize, f64)> = BTreeMap::new();
    for session in sessions {
        let mut tape = Tape::new(model.params());
        let fwd = model.forward(&mut tape, session)?;
        for (i, node) in fwd.nodes.iter().enumerate() {
            let key = (fwd.orientations[i].short(), node.pos);
            let entry = rows.entry(key).or_insert((0, 0, 0.0));
            entry.0 += 1;
            entry.1 += fwd.labels[i] as usize;
            entry.2 += tape.scalar_value(fwd.probs[i]);
        }
    }
    let mut out = String::from("orientation,position,items,click_rate,mean_predicted\n");
    for ((orientation, pos), (items, clicks, prob_sum)) in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            orientation,
            pos,
            items,
            clicks as f64 / items as f64,
            prob_sum / items as f64
        ));
    }
    Ok(out)
}
