//! Teacher-guided importance scores: |W (.) grad W| per batch, smoothed with
//! an exponential moving average and bias-corrected at finalization. Scoring
//! never updates any model weight.

use std::path::Path;

use crate::data::{batch_plan, Dataset};
use crate::distill::{build_total_loss, DistillConfig};
use crate::error::{Error, Result};
use crate::fileio::{put_f64, put_tensor_record, put_u32, put_u64, read_tensor_record, Reader};
use crate::models::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered, name-keyed score tensors. Order follows the model's prunable
/// parameter declaration order and defines the global flat index used for
/// thresholding and tie-breaking.
#[derive(Debug, Clone)]
pub struct ScoreMap<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ScoreMap<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Self {
        Self { entries }
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Tensor<T>)> {
        self.entries.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count D across all tensors.
    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// EMA accumulator over per-batch raw scores.
///
/// `scores()` exposes the smoothed running value I_t with I_0 = 0. A parallel
/// un-discounted accumulator backs `finalize` so the bias correction at t = 1
/// returns the raw batch score exactly instead of through a divide that can
/// lose the last bit.
#[derive(Debug, Clone)]
pub struct ImportanceState<T: Scalar> {
    gamma: f64,
    ema: Vec<(String, Tensor<T>)>,
    shadow: Vec<Vec<T>>,
    batch_count: u64,
    finalized: bool,
    missing_grad_events: u64,
}

impl<T: Scalar> ImportanceState<T> {
    pub fn new(student: &Model<T>, gamma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::config(format!(
                "gamma must be in [0,1), got {gamma}"
            )));
        }
        let ema: Vec<(String, Tensor<T>)> = student
            .params()
            .iter()
            .filter(|p| p.prunable)
            .map(|p| (p.name.clone(), Tensor::zeros(p.tensor.shape().to_vec())))
            .collect();
        if ema.is_empty() {
            return Err(Error::contract("model has no prunable parameters"));
        }
        let shadow = ema.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Ok(Self {
            gamma,
            ema,
            shadow,
            batch_count: 0,
            finalized: false,
            missing_grad_events: 0,
        })
    }

    /// Smoothed scores I_t (finalized values after [`ImportanceState::finalize`]).
    pub fn scores(&self) -> &[(String, Tensor<T>)] {
        &self.ema
    }

    pub fn batch_count(&self) -> u64 {
        self.batch_count
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    /// Number of accumulate calls that found a prunable parameter without a
    /// gradient. Should stay zero; a nonzero count means the model wiring
    /// dropped a parameter from the loss.
    pub fn missing_grad_events(&self) -> u64 {
        self.missing_grad_events
    }

    /// Fold one batch of gradients in: I_raw = |W (.) grad|, then
    /// I_t = gamma * I_{t-1} + (1 - gamma) * I_raw.
    pub fn accumulate_batch(&mut self, student: &Model<T>) -> Result<()> {
        if self.finalized {
            return Err(Error::contract(
                "accumulate_batch after finalize is not allowed",
            ));
        }
        let g = T::from_f64(self.gamma);
        let om = T::from_f64(1.0 - self.gamma);
        let mut idx = 0;
        for p in student.params().iter().filter(|p| p.prunable) {
            let (name, ema) = &mut self.ema[idx];
            if *name != p.name {
                return Err(Error::contract(format!(
                    "parameter order changed: expected {name}, got {}",
                    p.name
                )));
            }
            match p.tensor.grad() {
                Some(grad) => {
                    let shadow = &mut self.shadow[idx];
                    let w = p.tensor.data();
                    let e = ema.data_mut();
                    for j in 0..w.len() {
                        let raw = (w[j] * grad[j]).abs();
                        e[j] = g * e[j] + om * raw;
                        shadow[j] = g * shadow[j] + raw;
                    }
                }
                None => {
                    self.missing_grad_events += 1;
                    log::warn!(
                        "prunable parameter {} has no gradient; skipping its accumulation",
                        p.name
                    );
                }
            }
            idx += 1;
        }
        self.batch_count += 1;
        Ok(())
    }

    /// Apply the bias correction 1 / (1 - gamma^t) and freeze the state.
    pub fn finalize(&mut self) -> Result<ScoreMap<T>> {
        if self.finalized {
            return Err(Error::contract("finalize may be applied exactly once"));
        }
        if self.batch_count == 0 {
            return Err(Error::contract("no batches accumulated"));
        }
        // Computed from the un-discounted accumulator: I_t / (1 - gamma^t)
        // equals U_t * (1 - gamma) / (1 - gamma^t), and at t = 1 the factor
        // is exactly 1.0.
        let denom = 1.0 - self.gamma.powi(self.batch_count as i32);
        let factor = T::from_f64((1.0 - self.gamma) / denom);
        for (i, (_, ema)) in self.ema.iter_mut().enumerate() {
            let shadow = &self.shadow[i];
            let e = ema.data_mut();
            for j in 0..e.len() {
                e[j] = shadow[j] * factor;
            }
        }
        self.finalized = true;
        Ok(ScoreMap::new(self.ema.clone()))
    }
}

/// Run E epochs of forward/backward over the dataset, accumulating
/// teacher-guided scores, without ever taking an optimizer step. Student and
/// teacher parameters are byte-identical before and after.
#[allow(clippy::too_many_arguments)]
pub fn compute_importance<T: Scalar>(
    teacher: &Model<T>,
    student: &mut Model<T>,
    train: &Dataset<T>,
    cfg: &DistillConfig,
    gamma: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<ScoreMap<T>> {
    if epochs == 0 {
        return Err(Error::config("scoring needs at least one epoch"));
    }
    let bytes_before = student.param_bytes();
    let mut state = ImportanceState::new(student, gamma)?;
    let teacher_logits = crate::retrain::infer_all_logits(teacher, train)?;
    for epoch in 0..epochs {
        for (bi, idx) in batch_plan(train.len(), batch_size, seed, epoch as u64)
            .iter()
            .enumerate()
        {
            let (bx, by) = train.select(idx);
            let z_t = crate::retrain::select_logit_rows(&teacher_logits, idx);
            let (mut tape, logits, param_ids) = student.forward_batch(&bx, true)?;
            let nodes = build_total_loss(&mut tape, logits, &z_t, &by, cfg)?;
            let loss = tape.scalar_value(nodes.total)?.as_f64();
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss {loss} while scoring at epoch {epoch}, batch {bi}"
                )));
            }
            tape.backward(nodes.total)?;
            student.accumulate_grads_from_tape(&tape, &param_ids);
            state.accumulate_batch(student)?;
            student.zero_grads();
        }
    }
    let scores = state.finalize()?;
    if student.param_bytes() != bytes_before {
        return Err(Error::contract(
            "importance scoring mutated student parameters",
        ));
    }
    Ok(scores)
}

// ── Score file format ───────────────────────────────────────────────────
//
// Magic `SDIS`, u32 version = 1, then provenance (f64 gamma, u64 batch
// count, u32 scoring epochs, f64 temperature, f64 alpha, f64 beta,
// f64 epsilon), u32 record count, and name-keyed tensor records in the same
// layout as checkpoints.

const MAGIC: &[u8; 4] = b"SDIS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMeta {
    pub gamma: f64,
    pub batch_count: u64,
    pub epochs: u32,
    pub distill: DistillConfig,
}

pub fn save_scores<T: Scalar>(scores: &ScoreMap<T>, meta: &ScoreMeta, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_f64(&mut out, meta.gamma);
    put_u64(&mut out, meta.batch_count);
    put_u32(&mut out, meta.epochs);
    put_f64(&mut out, meta.distill.temperature);
    put_f64(&mut out, meta.distill.alpha);
    put_f64(&mut out, meta.distill.beta);
    put_f64(&mut out, meta.distill.epsilon);
    put_u32(&mut out, scores.len() as u32);
    for (name, tensor) in scores.iter() {
        put_tensor_record(&mut out, name, tensor);
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_scores<T: Scalar>(path: &Path) -> Result<(ScoreMap<T>, ScoreMeta)> {
    let mut r = Reader::open(path)?;
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;
    let gamma = r.read_f64()?;
    let batch_count = r.read_u64()?;
    let epochs = r.read_u32()?;
    let temperature = r.read_f64()?;
    let alpha = r.read_f64()?;
    let beta = r.read_f64()?;
    let epsilon = r.read_f64()?;
    let count = r.read_u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        entries.push(read_tensor_record::<T>(&mut r)?);
    }
    r.done()?;
    let distill = DistillConfig::new(temperature, alpha, beta)
        .and_then(|d| d.with_epsilon(epsilon))
        .map_err(|e| r.err(format!("bad distill provenance: {e}")))?;
    Ok((
        ScoreMap::new(entries),
        ScoreMeta {
            gamma,
            batch_count,
            epochs,
            distill,
        },
    ))
}
