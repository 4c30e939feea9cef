//! End-to-end experiment orchestration: train teacher, distill student,
//! score, prune, retrain, and the baseline protocols (one-shot lottery
//! ticket, plain magnitude, iterative magnitude) used for comparisons.

use std::time::Instant;

use crate::data::DatasetBundle;
use crate::distill::{kd_finetune, DistillConfig};
use crate::error::{Error, Result};
use crate::importance::{compute_importance, ScoreMap};
use crate::metrics::MetricsSink;
use crate::models::{
    build_model, lth_reset, magnitude_scores, InitSnapshot, Model, ModelConfig,
};
use crate::pruning::{apply_mask, build_mask, global_threshold, measure_sparsity, PruneMask};
use crate::retrain::{
    evaluate, retrain_kd, retrain_plain, train_loop, LossSpec, OptimConfig, TrainOptions,
};
use crate::scalar::Scalar;

/// Everything a full comparison run needs. Mirrors the experiment config
/// file one-to-one.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub finetune: DistillConfig,
    pub score: DistillConfig,
    pub retrain: DistillConfig,
    pub gamma: f64,
    pub score_epochs: usize,
    pub optim: OptimConfig,
    pub teacher_epochs: usize,
    pub finetune_epochs: usize,
    pub retrain_epochs: usize,
    pub warmup_epochs: usize,
    pub patience: usize,
    pub sparsities: Vec<f64>,
    pub seeds: Vec<u64>,
    pub teacher_seed: u64,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        for &p in &self.sparsities {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("sparsity {p} outside [0,1)")));
            }
        }
        for (i, &a) in self.seeds.iter().enumerate() {
            if self.seeds[i + 1..].contains(&a) {
                return Err(Error::config(format!("duplicate seed {a}")));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MethodTag {
    OursKd { temperature: f64 },
    OursNoKd,
    LthOneshot,
    MagnitudeOneshot,
}

fn fmt_temp(t: f64) -> String {
    if t.fract() == 0.0 {
        format!("{}", t as i64)
    } else {
        format!("{t}")
    }
}

impl std::fmt::Display for MethodTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MethodTag::OursKd { temperature } => write!(f, "ours-kd-T{}", fmt_temp(*temperature)),
            MethodTag::OursNoKd => write!(f, "ours-no-kd"),
            MethodTag::LthOneshot => write!(f, "lth-oneshot"),
            MethodTag::MagnitudeOneshot => write!(f, "magnitude-oneshot"),
        }
    }
}

/// One completed (seed, sparsity, method) cell. `total_secs` is the sum of
/// the phase timings, shared phases included, i.e. the standalone cost of
/// running this method end to end.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub run_id: String,
    pub method: MethodTag,
    pub seed: u64,
    pub target_sparsity: f64,
    pub achieved_sparsity: f64,
    pub retained: usize,
    pub total_prunable: usize,
    pub accuracy: f64,
    pub retrain_epochs: usize,
    pub phases: Vec<(String, f64)>,
}

impl RunRecord {
    pub fn total_secs(&self) -> f64 {
        self.phases.iter().map(|(_, s)| s).sum()
    }

    pub fn phase(&self, name: &str) -> f64 {
        self.phases
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| *s)
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct EfficiencyReport {
    pub sparsity: f64,
    pub ours_phases: Vec<(String, f64)>,
    pub ours_total: f64,
    pub iterative_cycles: Vec<(f64, f64)>,
    pub iterative_total: f64,
    /// ours_total / iterative_total.
    pub ratio: f64,
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub records: Vec<RunRecord>,
    /// Unique phase executions (shared phases appear once), scope -> seconds.
    pub phase_ledger: Vec<(String, f64)>,
    /// Measured wall clock of the whole comparison.
    pub total_secs: f64,
    pub efficiency: Option<EfficiencyReport>,
}

/// Train a fresh teacher on cross-entropy with early stopping.
pub fn train_teacher<T: Scalar>(
    plan: &ExperimentPlan,
    bundle: &DatasetBundle<T>,
    sink: Option<&mut MetricsSink>,
) -> Result<Model<T>> {
    let (mut teacher, _) = build_model::<T>(&plan.teacher, plan.teacher_seed)?;
    let opts = TrainOptions::new(
        plan.optim,
        plan.teacher_epochs,
        plan.patience,
        plan.teacher_seed,
    );
    train_loop(
        &mut teacher,
        LossSpec::CrossEntropy,
        &bundle.train,
        &bundle.val,
        None,
        &opts,
        "teacher",
        "train-teacher",
        sink,
    )?;
    Ok(teacher)
}

/// Build a student at `seed` and fine-tune it under the teacher with the
/// combined loss. Returns the dense student and its init snapshot.
pub fn distill_student<T: Scalar>(
    plan: &ExperimentPlan,
    bundle: &DatasetBundle<T>,
    teacher: &Model<T>,
    seed: u64,
    sink: Option<&mut MetricsSink>,
) -> Result<(Model<T>, InitSnapshot<T>)> {
    let (mut student, snapshot) = build_model::<T>(&plan.student, seed)?;
    let opts = TrainOptions::new(plan.optim, plan.finetune_epochs, plan.patience, seed);
    kd_finetune(
        &mut student,
        teacher,
        &bundle.train,
        &bundle.val,
        &plan.finetune,
        &opts,
        &format!("distill-s{seed}"),
        sink,
    )?;
    Ok((student, snapshot))
}

/// Teacher-guided scores for a dense student.
pub fn score_student<T: Scalar>(
    plan: &ExperimentPlan,
    bundle: &DatasetBundle<T>,
    teacher: &Model<T>,
    student: &mut Model<T>,
    seed: u64,
) -> Result<ScoreMap<T>> {
    compute_importance(
        teacher,
        student,
        &bundle.train,
        &plan.score,
        plan.gamma,
        plan.score_epochs,
        plan.optim.batch_size,
        seed,
    )
}

/// Threshold + mask + apply, returning the pruned model and its mask.
pub fn prune_model<T: Scalar>(
    student: &Model<T>,
    scores: &ScoreMap<T>,
    sparsity: f64,
) -> Result<(Model<T>, PruneMask)> {
    let (tau, k) = global_threshold(scores, sparsity)?;
    let mask = build_mask(scores, tau, k)?;
    let mut pruned = student.clone();
    apply_mask(&mut pruned, &mask)?;
    Ok((pruned, mask))
}

struct Timer {
    start: Instant,
}

impl Timer {
    fn begin() -> Self {
        Self {
            start: Instant::now(),
        }
    }

    fn lap(&mut self) -> f64 {
        let t = self.start.elapsed().as_secs_f64();
        self.start = Instant::now();
        t
    }
}

/// Run the full method grid: for every (seed, sparsity) cell, our method with
/// and without KD retraining plus the one-shot LTH and plain magnitude
/// baselines — four records per cell. Set `with_efficiency` to also time the
/// one-shot-vs-iterative contrast at the largest sparsity target.
pub fn compare<T: Scalar>(
    plan: &ExperimentPlan,
    bundle: &DatasetBundle<T>,
    with_efficiency: bool,
    mut sink: Option<&mut MetricsSink>,
) -> Result<CompareReport> {
    plan.validate()?;
    let overall = Instant::now();
    let mut ledger: Vec<(String, f64)> = Vec::new();
    let mut records = Vec::new();

    let mut t = Timer::begin();
    let teacher = train_teacher(plan, bundle, sink.as_deref_mut())?;
    let teacher_secs = t.lap();
    ledger.push(("train-teacher".into(), teacher_secs));

    for &seed in &plan.seeds {
        let mut t = Timer::begin();
        let (mut dense, _snapshot) = distill_student(plan, bundle, &teacher, seed, sink.as_deref_mut())?;
        let distill_secs = t.lap();
        ledger.push((format!("s{seed}/distill"), distill_secs));

        let scores = score_student(plan, bundle, &teacher, &mut dense, seed)?;
        let score_secs = t.lap();
        ledger.push((format!("s{seed}/score"), score_secs));

        // Shared warm-up for the LTH and magnitude baselines: fresh init at
        // the same seed, briefly trained on cross-entropy.
        let (mut warmed, warm_snapshot) = build_model::<T>(&plan.student, seed)?;
        let warm_opts = TrainOptions::new(plan.optim, plan.warmup_epochs, usize::MAX, seed);
        train_loop(
            &mut warmed,
            LossSpec::CrossEntropy,
            &bundle.train,
            &bundle.val,
            None,
            &warm_opts,
            &format!("warmup-s{seed}"),
            "warmup",
            sink.as_deref_mut(),
        )?;
        let warmup_secs = t.lap();
        ledger.push((format!("s{seed}/warmup"), warmup_secs));

        for &p in &plan.sparsities {
            let retrain_opts = TrainOptions::new(plan.optim, plan.retrain_epochs, plan.patience, seed);

            // Our method: prune by teacher-guided scores.
            let mut t = Timer::begin();
            let (pruned, mask) = prune_model(&dense, &scores, p)?;
            let prune_secs = t.lap();
            ledger.push((format!("s{seed}/p{p}/prune"), prune_secs));

            for kd in [true, false] {
                let method = if kd {
                    MethodTag::OursKd {
                        temperature: plan.retrain.temperature,
                    }
                } else {
                    MethodTag::OursNoKd
                };
                let run_id = format!("{method}-s{seed}-p{p}");
                let mut model = pruned.clone();
                let mut t = Timer::begin();
                let report = if kd {
                    retrain_kd(
                        &mut model,
                        &teacher,
                        &mask,
                        &bundle.train,
                        &bundle.val,
                        &plan.retrain,
                        &retrain_opts,
                        &run_id,
                        sink.as_deref_mut(),
                    )?
                } else {
                    retrain_plain(
                        &mut model,
                        &mask,
                        &bundle.train,
                        &bundle.val,
                        &retrain_opts,
                        &run_id,
                        sink.as_deref_mut(),
                    )?
                };
                let retrain_secs = t.lap();
                let accuracy = evaluate(&model, &bundle.test)?;
                let eval_secs = t.lap();
                ledger.push((format!("s{seed}/p{p}/{method}/retrain"), retrain_secs));
                ledger.push((format!("s{seed}/p{p}/{method}/eval"), eval_secs));

                records.push(RunRecord {
                    run_id,
                    method,
                    seed,
                    target_sparsity: p,
                    achieved_sparsity: measure_sparsity(&model),
                    retained: mask.retained,
                    total_prunable: mask.total,
                    accuracy,
                    retrain_epochs: report.epochs_run,
                    phases: vec![
                        ("distill".into(), distill_secs),
                        ("score".into(), score_secs),
                        ("prune".into(), prune_secs),
                        ("retrain".into(), retrain_secs),
                        ("eval".into(), eval_secs),
                    ],
                });
            }

            // Baselines: magnitude prune the warmed model; LTH additionally
            // resets survivors to their init values.
            let mut t = Timer::begin();
            let mag_scores = magnitude_scores(&warmed);
            let (tau, k) = global_threshold(&mag_scores, p)?;
            let mag_mask = build_mask(&mag_scores, tau, k)?;
            let mag_prune_secs = t.lap();
            ledger.push((format!("s{seed}/p{p}/mag-prune"), mag_prune_secs));

            for reset in [true, false] {
                let method = if reset {
                    MethodTag::LthOneshot
                } else {
                    MethodTag::MagnitudeOneshot
                };
                let run_id = format!("{method}-s{seed}-p{p}");
                let mut model = warmed.clone();
                let mut t = Timer::begin();
                if reset {
                    lth_reset(&mut model, &warm_snapshot, &mag_mask)?;
                } else {
                    apply_mask(&mut model, &mag_mask)?;
                }
                let report = retrain_plain(
                    &mut model,
                    &mag_mask,
                    &bundle.train,
                    &bundle.val,
                    &retrain_opts,
                    &run_id,
                    sink.as_deref_mut(),
                )?;
                let retrain_secs = t.lap();
                let accuracy = evaluate(&model, &bundle.test)?;
                let eval_secs = t.lap();
                ledger.push((format!("s{seed}/p{p}/{method}/retrain"), retrain_secs));
                ledger.push((format!("s{seed}/p{p}/{method}/eval"), eval_secs));

                records.push(RunRecord {
                    run_id,
                    method,
                    seed,
                    target_sparsity: p,
                    achieved_sparsity: measure_sparsity(&model),
                    retained: mag_mask.retained,
                    total_prunable: mag_mask.total,
                    accuracy,
                    retrain_epochs: report.epochs_run,
                    phases: vec![
                        ("warmup".into(), warmup_secs),
                        ("prune".into(), mag_prune_secs),
                        ("retrain".into(), retrain_secs),
                        ("eval".into(), eval_secs),
                    ],
                });
            }
        }
    }

    let efficiency = if with_efficiency {
        let p = plan
            .sparsities
            .iter()
            .cloned()
            .fold(f64::NAN, f64::max);
        let p = if p.is_nan() { 0.9 } else { p };
        let mut t = Timer::begin();
        let report = measure_efficiency(plan, bundle, &teacher, p)?;
        ledger.push(("efficiency".into(), t.lap()));
        Some(report)
    } else {
        None
    };

    Ok(CompareReport {
        records,
        phase_ledger: ledger,
        total_secs: overall.elapsed().as_secs_f64(),
        efficiency,
    })
}

/// Wall-clock contrast of one-shot (score + prune + KD retrain) against a
/// five-cycle iterative magnitude prune/retrain schedule that reaches the
/// same final sparsity with the same per-cycle retrain budget. Both sides run
/// a fixed epoch count so the budgets match exactly.
pub fn measure_efficiency<T: Scalar>(
    plan: &ExperimentPlan,
    bundle: &DatasetBundle<T>,
    teacher: &Model<T>,
    sparsity: f64,
) -> Result<EfficiencyReport> {
    let seed = plan.seeds[0];
    let (mut dense, _) = distill_student(plan, bundle, teacher, seed, None)?;
    let fixed_opts = TrainOptions::new(plan.optim, plan.retrain_epochs, usize::MAX, seed);

    // One-shot: score, prune, KD retrain.
    let mut ours_phases = Vec::new();
    let mut t = Timer::begin();
    let scores = score_student(plan, bundle, teacher, &mut dense, seed)?;
    ours_phases.push(("score".to_string(), t.lap()));
    let (mut pruned, mask) = prune_model(&dense, &scores, sparsity)?;
    ours_phases.push(("prune".to_string(), t.lap()));
    retrain_kd(
        &mut pruned,
        teacher,
        &mask,
        &bundle.train,
        &bundle.val,
        &plan.retrain,
        &fixed_opts,
        "efficiency-ours",
        None,
    )?;
    ours_phases.push(("retrain".to_string(), t.lap()));
    let ours_total: f64 = ours_phases.iter().map(|(_, s)| s).sum();

    // Iterative magnitude: five prune/retrain cycles ramping to the target.
    let cycles = 5;
    let mut model = dense.clone();
    let mut iterative_cycles = Vec::new();
    for i in 1..=cycles {
        let p_i = 1.0 - (1.0 - sparsity).powf(i as f64 / cycles as f64);
        let mut t = Timer::begin();
        let mag = magnitude_scores(&model);
        let (tau, k) = global_threshold(&mag, p_i)?;
        let mask = build_mask(&mag, tau, k)?;
        apply_mask(&mut model, &mask)?;
        retrain_plain(
            &mut model,
            &mask,
            &bundle.train,
            &bundle.val,
            &fixed_opts,
            &format!("efficiency-iter-c{i}"),
            None,
        )?;
        iterative_cycles.push((p_i, t.lap()));
    }
    let iterative_total: f64 = iterative_cycles.iter().map(|(_, s)| s).sum();

    Ok(EfficiencyReport {
        sparsity,
        ours_phases,
        ours_total,
        iterative_cycles,
        iterative_total,
        ratio: ours_total / iterative_total,
    })
}

// ── Report rendering ────────────────────────────────────────────────────

pub const COMPARE_CSV_HEADER: &str = "run_id,method,seed,target_sparsity,achieved_sparsity,\
retained,total_prunable,accuracy,retrain_epochs,distill_s,score_s,warmup_s,prune_s,retrain_s,\
eval_s,total_s";

impl CompareReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(COMPARE_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.run_id,
                r.method,
                r.seed,
                r.target_sparsity,
                r.achieved_sparsity,
                r.retained,
                r.total_prunable,
                r.accuracy,
                r.retrain_epochs,
                r.phase("distill"),
                r.phase("score"),
                r.phase("warmup"),
                r.phase("prune"),
                r.phase("retrain"),
                r.phase("eval"),
                r.total_secs(),
            ));
        }
        out
    }

    /// Accuracy columns only — the deterministic part of the report, used to
    /// check run-to-run reproducibility.
    pub fn accuracy_table(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.run_id, r.seed, r.target_sparsity, r.achieved_sparsity, r.accuracy
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut sparsities: Vec<f64> = self.records.iter().map(|r| r.target_sparsity).collect();
        sparsities.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sparsities.dedup();
        let mut methods: Vec<MethodTag> = Vec::new();
        for r in &self.records {
            if !methods.contains(&r.method) {
                methods.push(r.method);
            }
        }

        out.push_str(&format!(
            "{:<12} {:<20} {:>16} {:>14} {:>12}\n",
            "sparsity", "method", "acc mean+-range", "epochs(mean)", "total_s"
        ));
        out.push_str(&format!("{}\n", "-".repeat(78)));
        for &p in &sparsities {
            for &m in &methods {
                let cell: Vec<&RunRecord> = self
                    .records
                    .iter()
                    .filter(|r| r.target_sparsity == p && r.method == m)
                    .collect();
                if cell.is_empty() {
                    continue;
                }
                let accs: Vec<f64> = cell.iter().map(|r| r.accuracy).collect();
                let mean = accs.iter().sum::<f64>() / accs.len() as f64;
                let max = accs.iter().cloned().fold(f64::MIN, f64::max);
                let min = accs.iter().cloned().fold(f64::MAX, f64::min);
                let epochs =
                    cell.iter().map(|r| r.retrain_epochs).sum::<usize>() as f64 / cell.len() as f64;
                let total: f64 = cell.iter().map(|r| r.total_secs()).sum();
                out.push_str(&format!(
                    "{:<12.4} {:<20} {:>8.4}+-{:<6.4} {:>14.1} {:>12.2}\n",
                    p,
                    m.to_string(),
                    mean,
                    (max - min) / 2.0,
                    epochs,
                    total
                ));
            }
        }

        out.push_str(&format!(
            "\nwall clock: {:.2}s total, {:.2}s across {} ledger phases\n",
            self.total_secs,
            self.phase_ledger.iter().map(|(_, s)| s).sum::<f64>(),
            self.phase_ledger.len()
        ));

        if let Some(eff) = &self.efficiency {
            out.push_str(&format!(
                "\none-shot vs iterative @ sparsity {:.4}\n",
                eff.sparsity
            ));
            for (name, s) in &eff.ours_phases {
                out.push_str(&format!("  ours/{name}: {s:.2}s\n"));
            }
            out.push_str(&format!("  ours total: {:.2}s\n", eff.ours_total));
            for (p, s) in &eff.iterative_cycles {
                out.push_str(&format!("  iterative cycle to {p:.4}: {s:.2}s\n"));
            }
            out.push_str(&format!(
                "  iterative total: {:.2}s\n  ratio (ours/iterative): {:.3}\n",
                eff.iterative_total, eff.ratio
            ));
        }
        out
    }
}
