//! Distillation objective: per-sample logit normalization, temperature
//! scaling, the bidirectional KL loss, and the combined training loss used
//! for fine-tuning, importance scoring, and KD-aware retraining.

use crate::error::{Error, Result};
use crate::models::Model;
use crate::retrain::{train_loop, LossSpec, TrainOptions, TrainReport};
use crate::scalar::Scalar;
use crate::tape::{kernels, NodeId, Tape};
use crate::tensor::Tensor;
use crate::data::Dataset;
use crate::metrics::MetricsSink;

/// Hyperparameters of the distillation loss.
///
/// `alpha` balances distillation against cross-entropy, `beta` mixes the
/// reverse and forward KL terms, `epsilon` guards the normalization
/// denominator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub temperature: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl DistillConfig {
    pub fn new(temperature: f64, alpha: f64, beta: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::config(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        if temperature <= 1.0 {
            log::warn!("temperature {temperature} <= 1 sharpens rather than softens the targets");
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config(format!("alpha must be in [0,1], got {alpha}")));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::config(format!("beta must be in [0,1], got {beta}")));
        }
        Ok(Self {
            temperature,
            alpha,
            beta,
            epsilon: 1e-6,
        })
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::config(format!(
                "epsilon must be > 0, got {epsilon}"
            )));
        }
        self.epsilon = epsilon;
        Ok(self)
    }
}

impl Default for DistillConfig {
    /// The scoring/retraining family: T = 5, alpha = 0.7, beta = 0.5.
    fn default() -> Self {
        DistillConfig::new(5.0, 0.7, 0.5).unwrap()
    }
}

fn check_logits_shape(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::dimension(format!(
            "expected logits [B,C] with C >= 2, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1]))
}

/// Per-sample standardization: `(z - mean) / (population_std + epsilon)` over
/// the class axis. Constant rows come out all-zero thanks to the epsilon
/// guard.
pub fn normalize_logits<T: Scalar>(z: &Tensor<T>, epsilon: f64) -> Result<Tensor<T>> {
    let (b, c) = check_logits_shape(z.shape())?;
    Ok(Tensor::from_vec_unchecked(
        z.shape().to_vec(),
        kernels::standardize_rows(z.data(), b, c, T::from_f64(epsilon)),
    ))
}

/// Elementwise division by the temperature (applied as multiplication by
/// `1/T`, matching the tape path bit for bit).
pub fn temperature_scale<T: Scalar>(z: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    if !(temperature > 0.0) {
        return Err(Error::config(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let inv = T::one() / T::from_f64(temperature);
    Ok(z.map(|v| v * inv))
}

/// Row-wise softmax, computed as `exp(log_softmax)` for stability.
pub fn softmax<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c) = check_logits_shape(z.shape())?;
    let ls = kernels::log_softmax_rows(z.data(), b, c);
    Ok(Tensor::from_vec_unchecked(
        z.shape().to_vec(),
        ls.iter().map(|v| v.exp()).collect(),
    ))
}

/// Normalize -> scale -> log-softmax -> exp, the shared pipeline both sides
/// of the divergence go through. Returns (log probabilities, probabilities).
fn soft_log_probs<T: Scalar>(z: &Tensor<T>, cfg: &DistillConfig) -> Result<(Vec<T>, Vec<T>)> {
    let (b, c) = check_logits_shape(z.shape())?;
    let norm = kernels::standardize_rows(z.data(), b, c, T::from_f64(cfg.epsilon));
    let inv_t = T::one() / T::from_f64(cfg.temperature);
    let scaled: Vec<T> = norm.iter().map(|&v| v * inv_t).collect();
    let lp = kernels::log_softmax_rows(&scaled, b, c);
    let p: Vec<T> = lp.iter().map(|v| v.exp()).collect();
    Ok((lp, p))
}

/// Record the distillation loss on a tape. The teacher logits enter as
/// constants — no gradient ever flows to the teacher — while the student path
/// stays differentiable. The scalar output is
/// `mean_over_batch(beta * KL(P_S || P_T) + (1 - beta) * KL(P_T || P_S)) * T^2`.
pub fn build_ca_kld<T: Scalar>(
    tape: &mut Tape<T>,
    z_s: NodeId,
    z_t: &Tensor<T>,
    cfg: &DistillConfig,
) -> Result<NodeId> {
    let s_shape = tape.shape(z_s).to_vec();
    check_logits_shape(&s_shape)?;
    if s_shape != z_t.shape() {
        return Err(Error::dimension(format!(
            "student logits {:?} vs teacher logits {:?}",
            s_shape,
            z_t.shape()
        )));
    }

    let (teacher_lp, teacher_p) = soft_log_probs(z_t, cfg)?;
    let lp_t = tape.leaf_from(s_shape.clone(), teacher_lp, false);
    let p_t = tape.leaf_from(s_shape.clone(), teacher_p, false);

    let inv_t = T::one() / T::from_f64(cfg.temperature);
    let norm = tape.row_standardize(z_s, T::from_f64(cfg.epsilon))?;
    let scaled = tape.scale_const(norm, inv_t);
    let lp_s = tape.log_softmax(scaled)?;
    let p_s = tape.exp(lp_s);

    // Reverse: sum_c P_S (log P_S - log P_T); forward: sum_c P_T (log P_T - log P_S).
    let rev_diff = tape.sub(lp_s, lp_t)?;
    let rev_terms = tape.mul(p_s, rev_diff)?;
    let rev = tape.row_sum(rev_terms)?;
    let fwd_diff = tape.sub(lp_t, lp_s)?;
    let fwd_terms = tape.mul(p_t, fwd_diff)?;
    let fwd = tape.row_sum(fwd_terms)?;

    let rev_scaled = tape.scale_const(rev, T::from_f64(cfg.beta));
    let fwd_scaled = tape.scale_const(fwd, T::from_f64(1.0 - cfg.beta));
    let per_row = tape.add(rev_scaled, fwd_scaled)?;
    let mean = tape.mean_all(per_row);
    Ok(tape.scale_const(mean, T::from_f64(cfg.temperature * cfg.temperature)))
}

/// Forward-only evaluation of the distillation loss.
pub fn ca_kld<T: Scalar>(z_s: &Tensor<T>, z_t: &Tensor<T>, cfg: &DistillConfig) -> Result<T> {
    let mut tape = Tape::new();
    let s = tape.constant(z_s);
    let id = build_ca_kld(&mut tape, s, z_t, cfg)?;
    tape.scalar_value(id)
}

pub struct LossNodes {
    pub total: NodeId,
    pub kd: NodeId,
    pub ce: NodeId,
}

/// `alpha * ca_kld + (1 - alpha) * cross_entropy` on the tape. Cross-entropy
/// consumes the raw student logits; normalization and temperature apply only
/// to the distillation path.
pub fn build_total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    z_s: NodeId,
    z_t: &Tensor<T>,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<LossNodes> {
    let kd = build_ca_kld(tape, z_s, z_t, cfg)?;
    let ce = tape.cross_entropy(z_s, labels)?;
    let kd_part = tape.scale_const(kd, T::from_f64(cfg.alpha));
    let ce_part = tape.scale_const(ce, T::from_f64(1.0 - cfg.alpha));
    let total = tape.add(kd_part, ce_part)?;
    Ok(LossNodes { total, kd, ce })
}

/// Forward-only evaluation of the combined loss.
pub fn total_loss<T: Scalar>(
    z_s: &Tensor<T>,
    z_t: &Tensor<T>,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<T> {
    let mut tape = Tape::new();
    let s = tape.constant(z_s);
    let nodes = build_total_loss(&mut tape, s, z_t, labels, cfg)?;
    tape.scalar_value(nodes.total)
}

/// Fine-tune the student against a frozen teacher with the combined loss.
#[allow(clippy::too_many_arguments)]
pub fn kd_finetune<T: Scalar>(
    student: &mut Model<T>,
    teacher: &Model<T>,
    train: &Dataset<T>,
    val: &Dataset<T>,
    cfg: &DistillConfig,
    opts: &TrainOptions,
    run_id: &str,
    sink: Option<&mut MetricsSink>,
) -> Result<TrainReport> {
    train_loop(
        student,
        LossSpec::Distill { teacher, cfg: *cfg },
        train,
        val,
        None,
        opts,
        run_id,
        "distill",
        sink,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits<T: Scalar>(rows: usize, cols: usize, v: &[f64]) -> Tensor<T> {
        Tensor::from_vec_unchecked(
            vec![rows, cols],
            v.iter().map(|&x| T::from_f64(x)).collect(),
        )
    }

    #[test]
    fn normalize_constant_row_is_zero() {
        let z = logits::<f64>(1, 3, &[1.0, 1.0, 1.0]);
        let n = normalize_logits(&z, 1e-6).unwrap();
        assert_eq!(n.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_is_shift_invariant() {
        let z = logits::<f64>(2, 4, &[0.3, -1.2, 2.0, 0.7, 5.0, 4.0, 3.0, -2.0]);
        let shifted = z.map(|v| v + 17.25);
        let a = normalize_logits(&z, 1e-6).unwrap();
        let b = normalize_logits(&shifted, 1e-6).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn normalize_matches_independent_mean_std() {
        // sigma = sqrt(8/3) for [2, 0, -2]; epsilon perturbs the denominator.
        let z = logits::<f64>(1, 3, &[2.0, 0.0, -2.0]);
        let n = normalize_logits(&z, 1e-6).unwrap();
        let sigma = (8.0f64 / 3.0).sqrt();
        let expect = [2.0 / (sigma + 1e-6), 0.0, -2.0 / (sigma + 1e-6)];
        for (a, e) in n.data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
        assert!((n.data()[0] - 1.224745).abs() < 1e-5);
    }

    #[test]
    fn temperature_scale_identity_and_halving() {
        let z = logits::<f64>(1, 2, &[2.0, -2.0]);
        let t1 = temperature_scale(&z, 1.0).unwrap();
        assert_eq!(t1.data(), z.data());
        let t2 = temperature_scale(&z, 2.0).unwrap();
        assert_eq!(t2.data(), &[1.0, -1.0]);
        assert!(matches!(
            temperature_scale(&z, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn higher_temperature_raises_softmax_entropy() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let entropy = |p: &[f64]| -> f64 { p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum() };
        for _ in 0..50 {
            let vals: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect();
            let z = logits::<f64>(1, 6, &vals);
            let p1 = softmax(&z).unwrap();
            let zt = temperature_scale(&z, 4.0).unwrap();
            let p4 = softmax(&zt).unwrap();
            assert!(
                entropy(p4.data()) > entropy(p1.data()),
                "T>1 must soften non-constant rows"
            );
        }
    }

    #[test]
    fn ca_kld_is_exactly_zero_for_identical_logits() {
        let cfg = DistillConfig::new(3.0, 0.7, 0.5).unwrap();
        let z = logits::<f64>(3, 5, &[
            0.1, -2.0, 0.4, 1.0, 3.0, //
            -1.0, -1.5, 2.2, 0.0, 0.3, //
            4.0, 4.0, 4.0, 4.0, 4.1,
        ]);
        let v = ca_kld(&z, &z, &cfg).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn ca_kld_symmetry_at_beta_half() {
        let cfg = DistillConfig::new(3.0, 0.7, 0.5).unwrap();
        let a = logits::<f64>(2, 4, &[0.5, -0.2, 1.7, 0.0, 2.0, 0.1, -1.0, 0.4]);
        let b = logits::<f64>(2, 4, &[1.5, 0.3, -0.7, 1.0, 0.0, 0.2, 0.3, -2.4]);
        let ab = ca_kld(&a, &b, &cfg).unwrap();
        let ba = ca_kld(&b, &a, &cfg).unwrap();
        assert!((ab - ba).abs() < 1e-12, "{ab} vs {ba}");
    }

    #[test]
    fn ca_kld_matches_direct_summation_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let cfg = DistillConfig::new(3.0, 0.7, 0.5).unwrap();
        for _ in 0..20 {
            let (b, c) = (4, 7);
            let zs: Vec<f64> = (0..b * c).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
            let zt: Vec<f64> = (0..b * c).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
            let s = logits::<f64>(b, c, &zs);
            let t = logits::<f64>(b, c, &zt);
            let got = ca_kld(&s, &t, &cfg).unwrap();

            // Independent oracle: naive per-class summation with plain
            // softmax, no shared kernels.
            let soft = |row: &[f64]| -> Vec<f64> {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let std = var.sqrt() + cfg.epsilon;
                let scaled: Vec<f64> =
                    row.iter().map(|v| (v - mean) / std / cfg.temperature).collect();
                let total: f64 = scaled.iter().map(|v| v.exp()).sum();
                scaled.iter().map(|v| v.exp() / total).collect()
            };
            let mut acc = 0.0;
            for r in 0..b {
                let ps = soft(&zs[r * c..(r + 1) * c]);
                let pt = soft(&zt[r * c..(r + 1) * c]);
                let rev: f64 = (0..c).map(|j| ps[j] * (ps[j] / pt[j]).ln()).sum();
                let fwd: f64 = (0..c).map(|j| pt[j] * (pt[j] / ps[j]).ln()).sum();
                acc += cfg.beta * rev + (1.0 - cfg.beta) * fwd;
            }
            let expect = acc / b as f64 * cfg.temperature * cfg.temperature;
            assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
        }
    }

    #[test]
    fn total_loss_hits_both_endpoints() {
        let zs = logits::<f64>(2, 3, &[0.2, 1.0, -0.5, 2.0, 0.0, 0.1]);
        let zt = logits::<f64>(2, 3, &[1.2, -1.0, 0.5, 0.3, 0.8, -0.1]);
        let labels = [1usize, 0];

        let ce_only = DistillConfig::new(3.0, 0.0, 0.5).unwrap();
        let got = total_loss(&zs, &zt, &labels, &ce_only).unwrap();
        let ce = crate::tape::cross_entropy_value(&zs, &labels).unwrap();
        assert_eq!(got, ce);

        let kd_only = DistillConfig::new(3.0, 1.0, 0.5).unwrap();
        let got = total_loss(&zs, &zt, &labels, &kd_only).unwrap();
        let kd = ca_kld(&zs, &zt, &kd_only).unwrap();
        assert_eq!(got, kd);
    }

    #[test]
    fn total_loss_recomposes_from_parts() {
        let cfg = DistillConfig::new(5.0, 0.7, 0.5).unwrap();
        let zs = logits::<f64>(3, 4, &[
            0.2, 1.0, -0.5, 0.7, //
            2.0, 0.0, 0.1, -1.1, //
            0.9, 0.9, -0.9, 0.4,
        ]);
        let zt = logits::<f64>(3, 4, &[
            1.2, -1.0, 0.5, 0.0, //
            0.3, 0.8, -0.1, 2.2, //
            -0.4, 1.9, 0.6, 0.6,
        ]);
        let labels = [1usize, 3, 0];
        let got = total_loss(&zs, &zt, &labels, &cfg).unwrap();
        let kd = ca_kld(&zs, &zt, &cfg).unwrap();
        let ce = crate::tape::cross_entropy_value(&zs, &labels).unwrap();
        let recomposed = 0.7 * kd + 0.3 * ce;
        assert!((got - recomposed).abs() < 1e-12, "{got} vs {recomposed}");
    }
}
