//! Mini-batch training: Adam, L2 regularization over weight matrices,
//! gradient clipping, per-epoch shuffling and validation-based early
//! stopping on log-likelihood.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Session;
use crate::metrics;
use crate::model::{session_loss, ClickModel, ModelError};
use crate::numkit::{GradBuf, ParamKind, ParamSet, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation-LL improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Global-norm gradient clip.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 1024,
            max_epochs: 50,
            patience: 3,
            seed: 42,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::BadConfig("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::BadConfig("patience must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("training data is empty")]
    EmptyData,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {details}")]
    NonFiniteLoss { epoch: usize, batch: usize, details: String },
}

/// One line of the training log (serialized as JSONL).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ll: f64,
    pub val_auc: Option<f64>,
}

pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_ll: f64,
    /// Epochs actually run (may be fewer than `max_epochs`).
    pub epochs_run: usize,
}

/// Adam with bias correction; moments are kept per parameter element.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.entries().iter().map(|e| vec![0.0; e.value.numel()]).collect(),
            v: params.entries().iter().map(|e| vec![0.0; e.value.numel()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradBuf) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for idx in 0..params.len() {
            let g = grads.slot(idx);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let values = params.value_mut(idx).data_mut();
            for i in 0..values.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Forward/backward over one batch: mean per-session loss plus the L2 term,
/// with matching gradients accumulated into `grads`.
///
/// Sessions are processed in fixed-size chunks whose partial gradients are
/// reduced in index order, so the result is bit-identical for every thread
/// count.
pub fn batch_objective(
    model: &dyn ClickModel,
    sessions: &[&Session],
    grads: &mut GradBuf,
) -> Result<f64, ModelError> {
    const CHUNK: usize = 4;
    use rayon::prelude::*;
    let chunks: Result<Vec<(f64, GradBuf)>, ModelError> = sessions
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut chunk_grads = GradBuf::zeros_like(model.params());
            let mut chunk_loss = 0.0;
            for session in chunk {
                let mut tape = Tape::new(model.params());
                let fwd = model.forward(&mut tape, session)?;
                let loss = session_loss(&mut tape, &fwd);
                chunk_loss += tape.scalar_value(loss);
                tape.backward(loss, &mut chunk_grads);
            }
            Ok((chunk_loss, chunk_grads))
        })
        .collect();

    let mut data_loss = 0.0;
    for (chunk_loss, chunk_grads) in chunks? {
        data_loss += chunk_loss;
        grads.add_assign(&chunk_grads);
    }

    let n = sessions.len() as f64;
    grads.scale(1.0 / n);

    // L2 over weight matrices: lambda * sum(theta^2), gradient 2*lambda*theta.
    let lambda = model.config().lambda;
    let mut objective = data_loss / n;
    if lambda > 0.0 {
        objective += lambda * model.params().l2_penalty();
        for idx in 0..model.params().len() {
            if model.params().entry(idx).kind == ParamKind::Matrix {
                let values = model.params().value(idx).data().to_vec();
                for (g, v) in grads.slot_mut(idx).iter_mut().zip(values) {
                    *g += 2.0 * lambda * v;
                }
            }
        }
    }
    Ok(objective)
}

/// The same objective without gradients; the finite-difference side of the
/// gradient checks evaluates this after perturbing single parameters.
pub fn batch_objective_value(
    model: &dyn ClickModel,
    sessions: &[&Session],
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for session in sessions {
        let mut tape = Tape::new(model.params());
        let fwd = model.forward(&mut tape, session)?;
        let loss = session_loss(&mut tape, &fwd);
        total += tape.scalar_value(loss);
    }
    let mut objective = total / sessions.len() as f64;
    let lambda = model.config().lambda;
    if lambda > 0.0 {
        objective += lambda * model.params().l2_penalty();
    }
    Ok(objective)
}

/// Coordinates with smaller analytic gradients sit below what central
/// differences can resolve at step 1e-5 and are excluded from checks.
pub const GRADCHECK_EXCLUDE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (param name, element, analytic, finite-difference) of the worst
    /// coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compare analytic gradients against central finite differences on
/// `samples` randomly chosen eligible coordinates of the batch objective.
pub fn gradient_check(
    model: &mut dyn ClickModel,
    sessions: &[&Session],
    samples: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport, ModelError> {
    let mut grads = GradBuf::zeros_like(model.params());
    batch_objective(&*model, sessions, &mut grads)?;

    let mut eligible: Vec<(usize, usize)> = Vec::new();
    for idx in 0..model.params().len() {
        for (elem, g) in grads.slot(idx).iter().enumerate() {
            if g.abs() >= GRADCHECK_EXCLUDE {
                eligible.push((idx, elem));
            }
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    eligible.truncate(samples);

    let mut report = GradCheckReport { checked: eligible.len(), max_rel_error: 0.0, worst: None };
    for (idx, elem) in eligible {
        let analytic = grads.slot(idx)[elem];
        let original = model.params().value(idx).data()[elem];

        model.params_mut().value_mut(idx).data_mut()[elem] = original + step;
        let up = batch_objective_value(&*model, sessions)?;
        model.params_mut().value_mut(idx).data_mut()[elem] = original - step;
        let down = batch_objective_value(&*model, sessions)?;
        model.params_mut().value_mut(idx).data_mut()[elem] = original;

        let fd = (up - down) / (2.0 * step);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst =
                Some((model.params().entry(idx).name.clone(), elem, analytic, fd));
        }
    }
    Ok(report)
}

fn clip_gradients(grads: &mut GradBuf, clip_norm: f64) {
    if clip_norm > 0.0 {
        let norm = grads.global_norm();
        if norm > clip_norm {
            grads.scale(clip_norm / norm);
        }
    }
}

/// Train until validation log-likelihood stops improving; the model is left
/// holding the best-validation parameters.
pub fn train(
    model: &mut dyn ClickModel,
    train_data: &[Session],
    val_data: &[Session],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(TrainError::EmptyData);
    }

    let mut adam = Adam::new(model.params(), config.learning_rate);
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;

    let mut order: Vec<usize> = (0..train_data.len()).collect();
    for epoch in 0..config.max_epochs {
        epochs_run += 1;
        // Fresh shuffle stream per epoch, all derived from the master seed.
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let sessions: Vec<&Session> = batch.iter().map(|&i| &train_data[i]).collect();
            let mut grads = GradBuf::zeros_like(model.params());
            let loss = batch_objective(&*model, &sessions, &mut grads).map_err(TrainError::Model)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    details: format!(
                        "loss {loss}, grad norm {}, batch of {} sessions",
                        grads.global_norm(),
                        sessions.len()
                    ),
                });
            }
            clip_gradients(&mut grads, config.clip_norm);
            adam.step(model.params_mut(), &grads);
            epoch_loss += loss;
            batches += 1;
        }

        let report = metrics::evaluate(&*model, val_data).map_err(TrainError::Model)?;
        let val_ll = report.overall.ll.expect("validation set is non-empty");
        log.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / batches as f64,
            val_ll,
            val_auc: report.overall.auc,
        });

        let improved = best.as_ref().map_or(true, |(_, ll, _)| val_ll > *ll);
        if improved {
            let snapshot = model.params().entries().iter().map(|e| e.value.clone()).collect();
            best = Some((epoch, val_ll, snapshot));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let (best_epoch, best_val_ll, snapshot) = best.expect("at least one epoch ran");
    for (idx, tensor) in snapshot.into_iter().enumerate() {
        *model.params_mut().value_mut(idx) = tensor;
    }
    Ok(TrainOutcome { log, best_epoch, best_val_ll, epochs_run })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradients_leave_params_unchanged() {
        let mut params = ParamSet::new();
        params.add("w", ParamKind::Matrix, Tensor::vector(vec![1.5, -2.5]));
        let before = params.value(0).data().to_vec();
        let grads = GradBuf::zeros_like(&params);
        let mut adam = Adam::new(&params, 0.1);
        adam.step(&mut params, &grads);
        assert_eq!(params.value(0).data(), &before[..]);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut params = ParamSet::new();
        params.add("w", ParamKind::Matrix, Tensor::vector(vec![0.0]));
        let mut grads = GradBuf::zeros_like(&params);
        grads.slot_mut(0)[0] = 1.0;
        let mut adam = Adam::new(&params, 0.1);
        adam.step(&mut params, &grads);
        assert!(params.value(0).data()[0] < 0.0);
    }

    #[test]
    fn clip_respects_threshold() {
        let mut params = ParamSet::new();
        params.add("w", ParamKind::Matrix, Tensor::vector(vec![0.0, 0.0]));
        let mut grads = GradBuf::zeros_like(&params);
        grads.slot_mut(0)[0] = 30.0;
        grads.slot_mut(0)[1] = 40.0;
        clip_gradients(&mut grads, 5.0);
        assert!((grads.global_norm() - 5.0).abs() < 1e-12);
        // Direction preserved.
        assert!((grads.slot(0)[0] / grads.slot(0)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
