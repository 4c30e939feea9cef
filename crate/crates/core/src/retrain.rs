//! Mask-preserving training: momentum SGD with masked gradients and masked
//! velocity, early stopping with best-epoch snapshots, and the plain / KD
//! retraining entry points for pruned students.

use std::time::Instant;

use crate::data::{batch_plan, eval_batches, Dataset};
use crate::distill::{build_total_loss, DistillConfig};
use crate::error::{Error, Result};
use crate::metrics::{MetricsRow, MetricsSink};
use crate::models::{InitSnapshot, Model};
use crate::pruning::{measure_sparsity, PruneMask};
use crate::scalar::Scalar;
use crate::tape::kernels;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct OptimConfig {
    pub lr: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            lr_final: 0.001,
            momentum: 0.9,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub optim: OptimConfig,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping. `usize::MAX`
    /// effectively disables early stopping.
    pub patience: usize,
    /// Shuffle seed; the batch order of epoch e is a pure function of
    /// (seed, e).
    pub seed: u64,
}

impl TrainOptions {
    pub fn new(optim: OptimConfig, max_epochs: usize, patience: usize, seed: u64) -> Self {
        Self {
            optim,
            max_epochs,
            patience,
            seed,
        }
    }
}

/// Cosine decay from `lr` to `lr_final` across the epoch budget.
fn lr_at(optim: &OptimConfig, epoch: usize, max_epochs: usize) -> f64 {
    if max_epochs <= 1 {
        return optim.lr;
    }
    let t = epoch as f64 / (max_epochs - 1) as f64;
    optim.lr_final + 0.5 * (optim.lr - optim.lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Momentum SGD with per-parameter velocity. When a mask is attached, both
/// the gradient and the velocity of pruned positions are forced to exactly
/// zero on every step, so pruned weights can never reactivate.
pub struct SgdMomentum<T: Scalar> {
    velocity: Vec<Vec<T>>,
    masks: Vec<Option<Vec<bool>>>,
    momentum: f64,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(model: &Model<T>, mask: Option<&PruneMask>, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!(
                "momentum must be in [0,1), got {momentum}"
            )));
        }
        let mut masks = Vec::with_capacity(model.params().len());
        for p in model.params() {
            if p.prunable {
                if let Some(m) = mask {
                    let keep = m.keep_flags(&p.name).ok_or_else(|| {
                        Error::contract(format!("mask missing entry for {}", p.name))
                    })?;
                    if keep.len() != p.tensor.numel() {
                        return Err(Error::contract(format!(
                            "mask length {} != parameter size {} for {}",
                            keep.len(),
                            p.tensor.numel(),
                            p.name
                        )));
                    }
                    masks.push(Some(keep.to_vec()));
                    continue;
                }
            }
            masks.push(None);
        }
        Ok(Self {
            velocity: model
                .params()
                .iter()
                .map(|p| vec![T::zero(); p.tensor.numel()])
                .collect(),
            masks,
            momentum,
        })
    }

    /// One update: g_m = g (.) M; v <- mu * (v (.) M) + g_m; W <- W - lr * v.
    /// Parameters without a mask entry behave as if M were all ones.
    pub fn masked_step(&mut self, model: &mut Model<T>, lr: f64) -> Result<()> {
        let mu = T::from_f64(self.momentum);
        let eta = T::from_f64(lr);
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            let Some(grad) = p.tensor.grad() else {
                return Err(Error::contract(format!(
                    "gradient missing for parameter {}",
                    p.name
                )));
            };
            let grad = grad.to_vec();
            let v = &mut self.velocity[i];
            let data = p.tensor.data_mut();
            match &self.masks[i] {
                Some(keep) => {
                    for j in 0..data.len() {
                        if keep[j] {
                            v[j] = mu * v[j] + grad[j];
                            data[j] = data[j] - eta * v[j];
                        } else {
                            v[j] = T::zero();
                            data[j] = T::zero();
                        }
                    }
                }
                None => {
                    for j in 0..data.len() {
                        v[j] = mu * v[j] + grad[j];
                        data[j] = data[j] - eta * v[j];
                    }
                }
            }
        }
        Ok(())
    }

    /// Velocity buffer of parameter `idx`, in model parameter order.
    pub fn velocity(&self, idx: usize) -> &[T] {
        &self.velocity[idx]
    }
}

/// Tracks the best validation epoch and restores its snapshot. Improvement is
/// higher accuracy, with ties broken by lower validation loss.
pub struct EarlyStop<T: Scalar> {
    patience: usize,
    best_acc: f64,
    best_loss: f64,
    best_epoch: usize,
    since_improvement: usize,
    best_snapshot: InitSnapshot<T>,
}

impl<T: Scalar> EarlyStop<T> {
    pub fn new(patience: usize, model: &Model<T>) -> Self {
        Self {
            patience,
            best_acc: f64::NEG_INFINITY,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            since_improvement: 0,
            best_snapshot: InitSnapshot::of(model),
        }
    }

    /// Record one epoch; returns true when training should halt.
    pub fn observe(&mut self, epoch: usize, val_acc: f64, val_loss: f64, model: &Model<T>) -> bool {
        let improved =
            val_acc > self.best_acc || (val_acc == self.best_acc && val_loss < self.best_loss);
        if improved {
            self.best_acc = val_acc;
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.since_improvement = 0;
            self.best_snapshot = InitSnapshot::of(model);
        } else {
            self.since_improvement += 1;
        }
        self.since_improvement >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_acc(&self) -> f64 {
        self.best_acc
    }

    pub fn restore(&self, model: &mut Model<T>) -> Result<()> {
        model.restore(&self.best_snapshot)
    }
}

/// Which loss drives the gradient.
pub enum LossSpec<'a, T: Scalar> {
    CrossEntropy,
    Distill {
        teacher: &'a Model<T>,
        cfg: DistillConfig,
    },
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub rows: Vec<MetricsRow>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

/// Top-1 accuracy over a labeled dataset.
pub fn evaluate<T: Scalar>(model: &Model<T>, ds: &Dataset<T>) -> Result<f64> {
    Ok(eval_metrics(model, ds)?.0)
}

/// (accuracy, mean cross-entropy) in one pass. Validation loss is always the
/// label cross-entropy so plain and KD runs stay comparable.
pub fn eval_metrics<T: Scalar>(model: &Model<T>, ds: &Dataset<T>) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::contract("evaluate on empty dataset"));
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    for (x, y) in eval_batches(ds, 256) {
        let logits = model.infer_logits(&x)?;
        let c = logits.shape()[1];
        for (i, &label) in y.iter().enumerate() {
            let row = &logits.data()[i * c..(i + 1) * c];
            let mut best = 0usize;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        let b = y.len();
        let ce = kernels::cross_entropy_rows(logits.data(), b, c, &y).as_f64();
        loss_sum += ce * b as f64;
    }
    Ok((
        correct as f64 / ds.len() as f64,
        loss_sum / ds.len() as f64,
    ))
}

/// Teacher logits for every sample of a dataset, computed once per training
/// run — the teacher is frozen, so its outputs never change across epochs.
/// Every op is per-sample independent, so chunked inference produces the same
/// bits as per-batch inference would.
pub(crate) fn infer_all_logits<T: Scalar>(model: &Model<T>, ds: &Dataset<T>) -> Result<Tensor<T>> {
    let mut rows: Vec<T> = Vec::new();
    let mut classes = 0;
    for (x, _) in eval_batches(ds, 256) {
        let logits = model.infer_logits(&x)?;
        classes = logits.shape()[1];
        rows.extend_from_slice(logits.data());
    }
    Ok(Tensor::from_vec_unchecked(vec![ds.len(), classes], rows))
}

pub(crate) fn select_logit_rows<T: Scalar>(all: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let c = all.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(&all.data()[i * c..(i + 1) * c]);
    }
    Tensor::from_vec_unchecked(vec![idx.len(), c], data)
}

/// Shared training loop. With a mask attached every step keeps pruned weights
/// and their velocity at exactly zero; early stopping restores the best
/// validation snapshot.
#[allow(clippy::too_many_arguments)]
pub fn train_loop<T: Scalar>(
    model: &mut Model<T>,
    loss: LossSpec<'_, T>,
    train: &Dataset<T>,
    val: &Dataset<T>,
    mask: Option<&PruneMask>,
    opts: &TrainOptions,
    run_id: &str,
    phase: &str,
    mut sink: Option<&mut MetricsSink>,
) -> Result<TrainReport> {
    let mut opt = SgdMomentum::new(model, mask, opts.optim.momentum)?;
    let mut stopper = EarlyStop::new(opts.patience, model);
    let mut rows = Vec::new();
    let mut epochs_run = 0;

    let teacher_logits = match &loss {
        LossSpec::Distill { teacher, .. } => Some(infer_all_logits(teacher, train)?),
        LossSpec::CrossEntropy => None,
    };

    for epoch in 0..opts.max_epochs {
        let start = Instant::now();
        let lr = lr_at(&opts.optim, epoch, opts.max_epochs);
        let mut loss_sum = 0.0f64;
        let mut batch_count = 0usize;
        for (bi, idx) in batch_plan(train.len(), opts.optim.batch_size, opts.seed, epoch as u64)
            .iter()
            .enumerate()
        {
            let (bx, by) = train.select(idx);
            let (mut tape, logits, param_ids) = model.forward_batch(&bx, true)?;
            let loss_id = match &loss {
                LossSpec::CrossEntropy => tape.cross_entropy(logits, &by)?,
                LossSpec::Distill { cfg, .. } => {
                    let z_t = select_logit_rows(teacher_logits.as_ref().unwrap(), idx);
                    build_total_loss(&mut tape, logits, &z_t, &by, cfg)?.total
                }
            };
            let loss_val = tape.scalar_value(loss_id)?.as_f64();
            if !loss_val.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss {loss_val} at epoch {epoch}, batch {bi} ({phase})"
                )));
            }
            tape.backward(loss_id)?;
            model.accumulate_grads_from_tape(&tape, &param_ids);
            opt.masked_step(model, lr)?;
            model.zero_grads();
            loss_sum += loss_val;
            batch_count += 1;
        }
        epochs_run = epoch + 1;

        let (val_acc, val_loss) = eval_metrics(model, val)?;
        let row = MetricsRow {
            run_id: run_id.to_string(),
            phase: phase.to_string(),
            epoch,
            train_loss: loss_sum / batch_count.max(1) as f64,
            val_loss,
            val_acc,
            sparsity: measure_sparsity(model),
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        if let Some(s) = sink.as_deref_mut() {
            s.append(&row)?;
        }
        rows.push(row);

        if stopper.observe(epoch, val_acc, val_loss, model) {
            break;
        }
    }

    if epochs_run > 0 {
        stopper.restore(model)?;
    }
    Ok(TrainReport {
        rows,
        epochs_run,
        best_epoch: stopper.best_epoch(),
        best_val_acc: if epochs_run > 0 { stopper.best_acc() } else { f64::NAN },
    })
}

/// Standard fine-tuning of a pruned model on cross-entropy only. The final
/// sparsity is byte-for-byte the input sparsity.
pub fn retrain_plain<T: Scalar>(
    model: &mut Model<T>,
    mask: &PruneMask,
    train: &Dataset<T>,
    val: &Dataset<T>,
    opts: &TrainOptions,
    run_id: &str,
    sink: Option<&mut MetricsSink>,
) -> Result<TrainReport> {
    let before = measure_sparsity(model);
    let report = train_loop(
        model,
        LossSpec::CrossEntropy,
        train,
        val,
        Some(mask),
        opts,
        run_id,
        "retrain-plain",
        sink,
    )?;
    check_sparsity_preserved(model, before)?;
    Ok(report)
}

/// KD-aware retraining under a frozen mask: same loop, combined loss.
#[allow(clippy::too_many_arguments)]
pub fn retrain_kd<T: Scalar>(
    model: &mut Model<T>,
    teacher: &Model<T>,
    mask: &PruneMask,
    train: &Dataset<T>,
    val: &Dataset<T>,
    cfg: &DistillConfig,
    opts: &TrainOptions,
    run_id: &str,
    sink: Option<&mut MetricsSink>,
) -> Result<TrainReport> {
    let before = measure_sparsity(model);
    let report = train_loop(
        model,
        LossSpec::Distill {
            teacher,
            cfg: *cfg,
        },
        train,
        val,
        Some(mask),
        opts,
        run_id,
        "retrain-kd",
        sink,
    )?;
    check_sparsity_preserved(model, before)?;
    Ok(report)
}

fn check_sparsity_preserved<T: Scalar>(model: &Model<T>, before: f64) -> Result<()> {
    let after = measure_sparsity(model);
    if after != before {
        return Err(Error::contract(format!(
            "sparsity drifted during retraining: {before} -> {after}"
        )));
    }
    Ok(())
}
