//! Masked Gaussian negative log-likelihood, Adam, and the two-stage
//! training loop.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{
    compute_input_norm, compute_norm_stats, make_batch, Batch, FoldAssignment, InputNorm,
    LabelMatrix, NormStats,
};
use crate::error::{MimirError, Result};
use crate::linalg::Real;
use crate::model::{backward, forward, init_params, NetworkConfig, ParameterSet};
use crate::projection::ProjectionTile;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub total_iterations: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    /// Iterations run at `lr_stage1` before switching to `lr_stage2`.
    pub stage1_iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Random translation of training tiles.
    pub augment: bool,
    /// Largest shift in pixels per axis when augmenting.
    pub max_shift: usize,
}

impl Default for TrainingConfig {
    /// Desk-scale schedule: 1,600 iterations at 5e-5 then 400 at 5e-6.
    fn default() -> Self {
        TrainingConfig {
            batch_size: 32,
            total_iterations: 2000,
            lr_stage1: 5e-5,
            lr_stage2: 5e-6,
            stage1_iterations: 1600,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            augment: true,
            max_shift: 3,
        }
    }
}

impl TrainingConfig {
    /// Full-scale schedule: 8,000 iterations at 5e-5 then 2,000 at 5e-6.
    pub fn full_scale() -> Self {
        TrainingConfig {
            total_iterations: 10_000,
            stage1_iterations: 8_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(MimirError::validation("batch_size", "must be >= 1"));
        }
        if !(self.lr_stage2 > 0.0 && self.lr_stage2 <= self.lr_stage1 && self.lr_stage1.is_finite()) {
            return Err(MimirError::validation(
                "lr_stage2",
                format!(
                    "need 0 < lr_stage2 <= lr_stage1, got {} and {}",
                    self.lr_stage2, self.lr_stage1
                ),
            ));
        }
        if self.total_iterations > 0
            && (self.stage1_iterations == 0 || self.stage1_iterations > self.total_iterations)
        {
            return Err(MimirError::validation(
                "stage1_iterations",
                format!(
                    "need 0 < stage1_iterations <= total_iterations ({}), got {}",
                    self.total_iterations, self.stage1_iterations
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(MimirError::validation("adam betas", "must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(MimirError::validation("epsilon", "must be > 0"));
        }
        Ok(())
    }

    pub fn learning_rate(&self, iteration: usize) -> f64 {
        if iteration < self.stage1_iterations {
            self.lr_stage1
        } else {
            self.lr_stage2
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NllOutput {
    pub loss: f64,
    pub grad_mu: Vec<f64>,
    pub grad_s: Vec<f64>,
    /// No entry of the batch carried a label.
    pub fully_masked: bool,
}

/// Mean Gaussian NLL over unmasked entries, without the `½ ln 2π` constant:
/// `ℓ = ½·exp(−ŝ)·(y − μ̂)² + ½·ŝ`, averaged over `Σ mask`.
///
/// Masked entries contribute exactly zero to the loss and gradients.
pub fn nll_loss(mu: &[f64], log_var: &[f64], y: &[f64], masks: &[u8]) -> Result<NllOutput> {
    let n = mu.len();
    if log_var.len() != n || y.len() != n || masks.len() != n {
        return Err(MimirError::shape(
            format!("{n} entries"),
            format!("{} / {} / {}", log_var.len(), y.len(), masks.len()),
        ));
    }
    let known = masks.iter().filter(|&&m| m == 1).count();
    let mut grad_mu = vec![0.0; n];
    let mut grad_s = vec![0.0; n];
    if known == 0 {
        return Ok(NllOutput {
            loss: 0.0,
            grad_mu,
            grad_s,
            fully_masked: true,
        });
    }
    let denom = known as f64;
    let mut total = 0.0;
    for i in 0..n {
        if masks[i] != 1 {
            continue;
        }
        let r = y[i] - mu[i];
        let precision = (-log_var[i]).exp();
        total += 0.5 * precision * r * r + 0.5 * log_var[i];
        grad_mu[i] = -precision * r / denom;
        grad_s[i] = 0.5 * (1.0 - precision * r * r) / denom;
    }
    Ok(NllOutput {
        loss: total / denom,
        grad_mu,
        grad_s,
        fully_masked: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: ParameterSet<F>,
    pub v: ParameterSet<F>,
}

impl<F: Real> AdamState<F> {
    pub fn new(config: &NetworkConfig) -> Self {
        AdamState {
            step: 0,
            m: ParameterSet::zeros(config),
            v: ParameterSet::zeros(config),
        }
    }

    pub fn for_params(params: &ParameterSet<F>) -> Self {
        let zero = |p: &ParameterSet<F>| {
            let mut z = p.clone();
            z.tensors
                .iter_mut()
                .for_each(|t| t.data.iter_mut().for_each(|v| *v = F::zero()));
            z
        };
        AdamState {
            step: 0,
            m: zero(params),
            v: zero(params),
        }
    }
}

/// One bias-corrected Adam update:
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
/// `p ← p − lr·m̂/(√v̂ + ε)` with `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`.
pub fn adam_step<F: Real>(
    params: &mut ParameterSet<F>,
    grads: &ParameterSet<F>,
    state: &mut AdamState<F>,
    lr: f64,
    config: &AdamConfig,
) -> Result<()> {
    let same_shape = |a: &ParameterSet<F>| {
        a.tensors.len() == params.tensors.len()
            && a
                .tensors
                .iter()
                .zip(&params.tensors)
                .all(|(x, y)| x.shape == y.shape && x.data.len() == y.data.len())
    };
    if !same_shape(grads) || !same_shape(&state.m) || !same_shape(&state.v) {
        return Err(MimirError::shape("gradients and moments shaped like parameters", "mismatch"));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = F::from_f64_lossy(config.beta1);
    let b2 = F::from_f64_lossy(config.beta2);
    let one = F::one();
    let bc1 = F::from_f64_lossy(1.0 - config.beta1.powi(t));
    let bc2 = F::from_f64_lossy(1.0 - config.beta2.powi(t));
    let lr = F::from_f64_lossy(lr);
    let eps = F::from_f64_lossy(config.epsilon);
    for (((p, g), m), v) in params
        .tensors
        .iter_mut()
        .zip(&grads.tensors)
        .zip(state.m.tensors.iter_mut())
        .zip(state.v.tensors.iter_mut())
    {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (one - b1) * gi;
            v.data[i] = b2 * v.data[i] + (one - b2) * gi * gi;
            let m_hat = m.data[i] / bc1;
            let v_hat = v.data[i] / bc2;
            p.data[i] = p.data[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
}

impl TrainingLog {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["iteration", "lr", "loss"])?;
        for e in &self.entries {
            w.write_record([e.iteration.to_string(), e.lr.to_string(), e.loss.to_string()])?;
        }
        w.flush().map_err(|e| MimirError::io(path.as_ref(), e))
    }
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    /// The batch had no labels; parameters and optimizer state were left as-is.
    pub skipped: bool,
}

/// Parameters plus optimizer state for single-threaded stepping.
pub struct Trainer {
    pub network: NetworkConfig,
    pub params: ParameterSet<f32>,
    pub adam: AdamState<f32>,
    adam_config: AdamConfig,
}

impl Trainer {
    pub fn new(network: NetworkConfig, params: ParameterSet<f32>, adam_config: AdamConfig) -> Self {
        let adam = AdamState::for_params(&params);
        Trainer {
            network,
            params,
            adam,
            adam_config,
        }
    }

    pub fn step(&mut self, batch: &Batch, lr: f64) -> Result<StepReport> {
        let out = forward(&self.params, &self.network, &batch.inputs, batch.n)?;
        let mu: Vec<f64> = out.mu.iter().map(|&v| v as f64).collect();
        let s: Vec<f64> = out.log_var.iter().map(|&v| v as f64).collect();
        let nll = nll_loss(&mu, &s, &batch.y_norm, &batch.masks)?;
        if nll.fully_masked {
            return Ok(StepReport {
                loss: nll.loss,
                skipped: true,
            });
        }
        let gm: Vec<f32> = nll.grad_mu.iter().map(|&v| v as f32).collect();
        let gs: Vec<f32> = nll.grad_s.iter().map(|&v| v as f32).collect();
        let grads = backward(&self.params, &self.network, &out.cache, &gm, &gs)?;
        adam_step(&mut self.params, &grads, &mut self.adam, lr, &self.adam_config)?;
        if !self.params.is_finite() {
            return Err(MimirError::validation(
                "parameters",
                "non-finite value after optimizer step",
            ));
        }
        Ok(StepReport {
            loss: nll.loss,
            skipped: false,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ParameterSet<f32>,
    pub norm_stats: NormStats,
    pub input_norm: InputNorm,
    pub log: TrainingLog,
    /// Label rows the optimizer could draw from.
    pub training_rows: Vec<usize>,
}

/// Trains on every subject outside `holdout` (fold assignment and the
/// validation fold id); `None` trains on all labelled subjects.
///
/// Batches are drawn uniformly with replacement from training rows that
/// carry at least one label. Label and input normalization statistics come
/// from training rows only.
pub fn train(
    tiles: &[ProjectionTile],
    labels: &LabelMatrix,
    holdout: Option<(&FoldAssignment, usize)>,
    network: &NetworkConfig,
    config: &TrainingConfig,
) -> Result<TrainedModel> {
    network.validate()?;
    config.validate()?;
    if network.n_targets != labels.n_targets() {
        return Err(MimirError::shape(
            format!("{} targets", network.n_targets),
            format!("{} label columns", labels.n_targets()),
        ));
    }
    if tiles.len() != labels.n_subjects() {
        return Err(MimirError::shape(labels.n_subjects(), tiles.len()));
    }
    let want = (network.input_channels, network.input_height, network.input_width);
    if let Some(t) = tiles.iter().find(|t| t.dims() != want) {
        return Err(MimirError::shape(format!("{want:?} tiles"), format!("{:?}", t.dims())));
    }
    let train_mask = match holdout {
        Some((folds, fold)) => {
            if fold >= folds.k || folds.folds.len() != labels.n_subjects() {
                return Err(MimirError::validation(
                    "fold_id",
                    format!("{fold} is not a fold of a {}-fold assignment", folds.k),
                ));
            }
            folds.training_mask(fold)
        }
        None => vec![true; labels.n_subjects()],
    };
    let fold_id = holdout.map(|(_, f)| f);
    let training_rows: Vec<usize> = (0..labels.n_subjects())
        .filter(|&r| train_mask[r] && labels.row_has_label(r))
        .collect();
    if training_rows.is_empty() {
        return Err(MimirError::NoTrainingRows { fold: fold_id });
    }
    let norm_stats = compute_norm_stats(labels, &train_mask)?;
    let input_norm = compute_input_norm(tiles, &train_mask)?;
    let plane = network.input_height * network.input_width;
    let params = init_params(network, network.init_seed)?;
    let mut trainer = Trainer::new(network.clone(), params, config.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainingLog::default();
    for iteration in 0..config.total_iterations {
        let indices: Vec<usize> = (0..config.batch_size)
            .map(|_| training_rows[rng.gen_range(0..training_rows.len())])
            .collect();
        let batch_seed = rng.gen::<u64>();
        let mut batch = make_batch(
            tiles,
            labels,
            &norm_stats,
            &indices,
            config.augment,
            config.max_shift,
            batch_seed,
        )?;
        input_norm.apply(&mut batch.inputs, plane)?;
        let lr = config.learning_rate(iteration);
        let report = trainer.step(&batch, lr)?;
        log.entries.push(LogEntry {
            iteration,
            lr,
            loss: report.loss,
        });
    }
    Ok(TrainedModel {
        params: trainer.params,
        norm_stats,
        input_norm,
        log,
        training_rows,
    })
}
