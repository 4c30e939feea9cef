//! Scratch harness for calibrating the synthetic benchmark.

use std::time::Instant;

use sparsedistill::data::make_synthetic;
use sparsedistill::distill::DistillConfig;
use sparsedistill::models::{Architecture, ModelConfig};
use sparsedistill::pipeline::*;
use sparsedistill::pruning::measure_sparsity;
use sparsedistill::retrain::{evaluate, retrain_kd, retrain_plain, OptimConfig, TrainOptions};

fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}
fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn debug_rows(plan: &ExperimentPlan) {
    use sparsedistill::data::make_synthetic;
    let bundle = make_synthetic::<f32>(10, env_usize("N", 300), &[1, 28, 28], 2.0, 0).unwrap();
    let teacher = train_teacher(plan, &bundle, None).unwrap();
    println!("teacher {:.4}", evaluate(&teacher, &bundle.test).unwrap());
    let seed = env_usize("SEED", 0) as u64;
    let (mut dense, _) = distill_student(plan, &bundle, &teacher, seed, None).unwrap();
    let scores = score_student(plan, &bundle, &teacher, &mut dense, seed).unwrap();
    let (pruned, mask) = prune_model(&dense, &scores, 0.95).unwrap();
    let opts = TrainOptions::new(plan.optim, plan.retrain_epochs, plan.patience, seed);
    let mut plain = pruned.clone();
    let rp = retrain_plain(&mut plain, &mask, &bundle.train, &bundle.val, &opts, "p", None).unwrap();
    let mut kd = pruned.clone();
    let cfg = DistillConfig::new(env_f64("KDT", 3.0), env_f64("KDA", 0.7), 0.5).unwrap();
    let rk = retrain_kd(&mut kd, &teacher, &mask, &bundle.train, &bundle.val, &cfg, &opts, "k", None).unwrap();
    println!("epoch | plain: train_loss val_loss val_acc | kd: train_loss val_loss val_acc");
    for i in 0..rp.rows.len().max(rk.rows.len()) {
        let p = rp.rows.get(i);
        let k = rk.rows.get(i);
        println!(
            "{:>3}   | {} | {}",
            i,
            p.map(|r| format!("{:.4} {:.4} {:.4}", r.train_loss, r.val_loss, r.val_acc)).unwrap_or_default(),
            k.map(|r| format!("{:.4} {:.4} {:.4}", r.train_loss, r.val_loss, r.val_acc)).unwrap_or_default()
        );
    }
    println!(
        "plain test {:.4} (best ep {}), kd test {:.4} (best ep {})",
        evaluate(&plain, &bundle.test).unwrap(), rp.best_epoch,
        evaluate(&kd, &bundle.test).unwrap(), rk.best_epoch
    );
}

fn main() {
    let per_class = env_usize("N", 200);
    let delta = env_f64("DELTA", 2.0);
    let hw = env_usize("HW", 28);
    let seeds: Vec<u64> = (0..env_usize("SEEDS", 5) as u64).collect();
    let retrain_epochs = env_usize("RETRAIN", 30);
    let lr = env_f64("LR", 0.01);

    let plan = ExperimentPlan {
        teacher: ModelConfig {
            arch: Architecture::CnnTeacher,
            input_shape: vec![1, hw, hw],
            classes: 10,
        },
        student: ModelConfig {
            arch: Architecture::CnnSmall,
            input_shape: vec![1, hw, hw],
            classes: 10,
        },
        finetune: DistillConfig::new(3.0, 0.7, 0.5).unwrap(),
        score: DistillConfig::new(5.0, 0.7, 0.5).unwrap(),
        retrain: DistillConfig::new(3.0, 0.7, 0.5).unwrap(),
        gamma: 0.9,
        score_epochs: 3,
        optim: OptimConfig {
            lr,
            lr_final: lr / 10.0,
            momentum: 0.9,
            batch_size: 32,
        },
        teacher_epochs: 20,
        finetune_epochs: 20,
        retrain_epochs,
        warmup_epochs: 1,
        patience: 5,
        sparsities: vec![0.9, 0.95],
        seeds: seeds.clone(),
        teacher_seed: 0,
    };

    if std::env::var("DEBUG_ROWS").is_ok() {
        debug_rows(&plan);
        return;
    }
    let t0 = Instant::now();
    let bundle = make_synthetic::<f32>(10, per_class, &[1, hw, hw], delta, 0).unwrap();
    println!(
        "dataset: train {} val {} test {} ({:.1}s)",
        bundle.train.len(),
        bundle.val.len(),
        bundle.test.len(),
        t0.elapsed().as_secs_f64()
    );

    let t0 = Instant::now();
    let teacher = train_teacher(&plan, &bundle, None).unwrap();
    let teacher_acc = evaluate(&teacher, &bundle.test).unwrap();
    println!("teacher: test acc {teacher_acc:.4} ({:.1}s)", t0.elapsed().as_secs_f64());

    for &seed in &seeds {
        let t0 = Instant::now();
        let (mut dense, _snap) = distill_student(&plan, &bundle, &teacher, seed, None).unwrap();
        let dense_acc = evaluate(&dense, &bundle.test).unwrap();
        let distill_s = t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let scores = score_student(&plan, &bundle, &teacher, &mut dense, seed).unwrap();
        let score_s = t0.elapsed().as_secs_f64();

        for &p in &plan.sparsities {
            let (pruned, mask) = prune_model(&dense, &scores, p).unwrap();
            let opts = TrainOptions::new(plan.optim, plan.retrain_epochs, plan.patience, seed);

            let mut plain = pruned.clone();
            let t0 = Instant::now();
            let rp = retrain_plain(&mut plain, &mask, &bundle.train, &bundle.val, &opts, "p", None).unwrap();
            let acc_plain = evaluate(&plain, &bundle.test).unwrap();
            let plain_s = t0.elapsed().as_secs_f64();

            let mut kd3 = pruned.clone();
            let t0 = Instant::now();
            let cfg3 = DistillConfig::new(3.0, 0.7, 0.5).unwrap();
            let r3 = retrain_kd(&mut kd3, &teacher, &mask, &bundle.train, &bundle.val, &cfg3, &opts, "k3", None).unwrap();
            let acc_kd3 = evaluate(&kd3, &bundle.test).unwrap();
            let kd3_s = t0.elapsed().as_secs_f64();

            let mut kd5 = pruned.clone();
            let cfg5 = DistillConfig::new(5.0, 0.7, 0.5).unwrap();
            let r5 = retrain_kd(&mut kd5, &teacher, &mask, &bundle.train, &bundle.val, &cfg5, &opts, "k5", None).unwrap();
            let acc_kd5 = evaluate(&kd5, &bundle.test).unwrap();

            println!(
                "seed {seed} p {p:.2}: dense {dense_acc:.4} | plain {acc_plain:.4} ({}) | kdT3 {acc_kd3:.4} ({}) | kdT5 {acc_kd5:.4} ({}) | sp {:.4} | distill {distill_s:.0}s score {score_s:.0}s plain {plain_s:.0}s kd {kd3_s:.0}s",
                rp.epochs_run, r3.epochs_run, r5.epochs_run,
                measure_sparsity(&plain),
            );
        }
    }
}
// Appended diagnostic: set DEBUG_ROWS=1 to dump per-epoch validation curves
// for one (seed 0, p=0.95) cell instead of the grid.
